#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "tgk/optim.hpp"
#include "tgk/tasks.hpp"

using namespace tgk;

namespace {

Tensor dense_affine(const Tensor& x, const Linear& l) {
  Tensor y = Tensor::zeros(x.rows(), l.out_dim());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < l.out_dim(); ++c) {
      double s = l.bias.value[c];
      for (std::size_t k = 0; k < x.cols(); ++k) s += x(r, k) * l.weight.value(k, c);
      y(r, c) = s;
    }
  return y;
}

Tensor relu_of(Tensor t) {
  for (auto& v : t.values()) v = std::max(0.0, v);
  return t;
}

TemporalGraph line(std::vector<double> pos, std::size_t dim, Rng& rng) {
  const std::size_t n = pos.size();
  return build_graph(Tensor::uniform(n, dim, -1, 1, rng), std::move(pos), EdgeRule{2.0});
}

}  // namespace

TEST(Neck, IdentityInitIsIdentityOnNonNegativeRows) {
  Rng rng(1);
  TaskNeck neck("n", 4, rng);
  neck.mlp.first.set_identity();
  neck.mlp.second.set_identity();
  auto g = build_graph(Tensor::uniform(5, 4, 0, 1, rng), {0, 1, 2, 3, 4}, EdgeRule{2.0});
  EXPECT_EQ(neck_apply(neck, g), g.features);
}

TEST(Neck, ZeroWeightsGiveMappedBias) {
  Rng rng(2);
  TaskNeck neck("n", 3, rng);
  neck.mlp.first.weight.value.fill(0.0);
  auto g = line({0, 1, 2}, 3, rng);
  const Tensor expect = dense_affine(relu_of(neck.mlp.first.bias.value), neck.mlp.second);
  const Tensor out = neck_apply(neck, g);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out(r, c), expect[c], 1e-15);
}

TEST(Neck, MatchesDenseOracleAndChecksDims) {
  Rng rng(3);
  TaskNeck neck("n", 4, rng);
  auto g = line({0, 1, 2, 3, 4, 5}, 4, rng);
  const Tensor expect = dense_affine(relu_of(dense_affine(g.features, neck.mlp.first)), neck.mlp.second);
  EXPECT_LT(max_abs_diff(neck_apply(neck, g), expect), 1e-14);
  EXPECT_THROW(neck_apply(neck, line({0, 1}, 5, rng)), ShapeError);
}

TEST(Align, MeanOfInteriorRows) {
  Tensor f = Tensor::from_rows({{1, 2}, {3, 4}, {5, 8}});
  bool fb = true;
  EXPECT_EQ(align(f, {0.5, 1.5, 2.5}, {1.0, 3.0}, &fb), Tensor::from_rows({{4, 6}}));
  EXPECT_FALSE(fb);
  EXPECT_EQ(align(f, {0.5, 1.5, 2.5}, {1.0, 2.0}, &fb), Tensor::from_rows({{3, 4}}));
  EXPECT_FALSE(fb);
}

TEST(Align, FallsBackToNearestNode) {
  Tensor f = Tensor::from_rows({{1, 2}, {3, 4}, {5, 8}});
  bool fb = false;
  // midpoint 1.75: distance to 1.5 is 0.25, to 2.5 is 0.75
  EXPECT_EQ(align(f, {0.5, 1.5, 2.5}, {1.6, 1.9}, &fb), Tensor::from_rows({{3, 4}}));
  EXPECT_TRUE(fb);
}

TEST(Align, BoundaryNodesAreExcluded) {
  Tensor f = Tensor::from_rows({{1}, {3}, {5}});
  EXPECT_EQ(align(f, {1.0, 2.0, 3.0}, {1.0, 3.0}), Tensor::from_rows({{3}}));
}

TEST(Align, NodesOutsideSegmentNeverMatter) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> pos{2.2, 2.9, 3.4};
    Tensor base = Tensor::uniform(3, 3, -1, 1, rng);
    const Tensor ref = align(base, pos, {2.0, 3.5});
    std::vector<double> pos2{0.3, 1.1, 2.2, 2.9, 3.4, 3.6, 7.0};
    Tensor f = Tensor::uniform(7, 3, -5, 5, rng);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) f(r + 2, c) = base(r, c);
    EXPECT_LT(max_abs_diff(align(f, pos2, {2.0, 3.5}), ref), 1e-15);
  }
}

TEST(Align, BatchRespectsVideoRanges) {
  Tensor f = Tensor::from_rows({{1}, {2}, {3}, {10}, {20}, {30}});
  auto g = build_graph(f, {0.5, 1.5, 2.5, 0.5, 1.5, 2.5}, EdgeRule{2.0}, {0, 3, 6});
  Tape t;
  std::vector<bool> fb;
  Var a = align_batch(t.constant(f), g.structure, {{{1.0, 3.0}, 0}, {{1.0, 3.0}, 1}, {{1.6, 1.9}, 1}}, &fb);
  EXPECT_EQ(a.value(), Tensor::column(std::vector<double>{2.5, 25, 20}));
  EXPECT_EQ(fb, (std::vector<bool>{false, false, true}));
}

TEST(Lta, SingleStepUsesRootPaths) {
  Rng rng(5);
  LtaHead head("lta", 4, 3, 2, rng);
  Tensor ctx = Tensor::uniform(1, 4, -1, 1, rng);
  Tape t;
  auto out = lta_head_forward(t, t.constant(ctx), head, 1);
  const Tensor h = dense_affine(dense_affine(ctx, head.g1.root), head.g2.root);
  EXPECT_LT(max_abs_diff(out.verb.value(), dense_affine(h, head.verb)), 1e-14);
  EXPECT_LT(max_abs_diff(out.noun.value(), dense_affine(h, head.noun)), 1e-14);
}

TEST(Lta, FutureStepsDifferThroughTemporalTerms) {
  Rng rng(6);
  LtaHead head("lta", 4, 3, 2, rng);
  head.g1.root.set_identity();
  head.g2.root.set_identity();
  Tensor ctx = Tensor::uniform(1, 4, 0.1, 1, rng);
  Tape t;
  auto out = lta_head_forward(t, t.constant(ctx), head, 5);
  ASSERT_EQ(out.verb.rows(), 5u);
  double d = 0;
  for (std::size_t c = 0; c < 3; ++c) d = std::max(d, std::abs(out.verb.value()(0, c) - out.verb.value()(4, c)));
  EXPECT_GT(d, 1e-6);
  // with the neighbour paths zeroed every step collapses to the same output
  head.g1.neighbor.set_zero();
  head.g2.neighbor.set_zero();
  Tape t2;
  auto flat = lta_head_forward(t2, t2.constant(ctx), head, 5);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(flat.verb.value()(0, c), flat.verb.value()(4, c), 1e-15);
  EXPECT_THROW(future_graph(1, 0), std::invalid_argument);
}

TEST(Lta, BatchedContextsAreIndependent) {
  Rng rng(7);
  LtaHead head("lta", 4, 3, 2, rng);
  Tensor a = Tensor::uniform(1, 4, -1, 1, rng), b = Tensor::uniform(1, 4, -1, 1, rng);
  Tensor ab = Tensor::zeros(2, 4);
  for (std::size_t c = 0; c < 4; ++c) {
    ab(0, c) = a[c];
    ab(1, c) = b[c];
  }
  Tape t;
  auto both = lta_head_forward(t, t.constant(ab), head, 4);
  auto only_b = lta_head_forward(t, t.constant(b), head, 4);
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(both.verb.value()(4 + z, c), only_b.verb.value()(z, c), 1e-14);
}

TEST(MqDecode, OffsetsAroundNode) {
  MqStageOutput st{Tensor::from_rows({{0.7}}), Tensor::from_rows({{1, 2}}),
                   make_structure({5.0}, {0, 1}, EdgeRule{2.0}, 0)};
  auto out = mq_decode({st}, {{0.0, 10.0}});
  ASSERT_EQ(out[0].size(), 1u);
  EXPECT_DOUBLE_EQ(out[0][0].start, 4.0);
  EXPECT_DOUBLE_EQ(out[0][0].end, 7.0);
  EXPECT_DOUBLE_EQ(out[0][0].score, 0.7);
}

TEST(MqDecode, ZeroOffsetsDroppedAndExtentClamp) {
  MqStageOutput st{Tensor::from_rows({{0.7}, {0.6}}), Tensor::from_rows({{0, 0}, {3, 9}}),
                   make_structure({5.0, 8.0}, {0, 2}, EdgeRule{2.0}, 0)};
  auto out = mq_decode({st}, {{0.0, 10.0}});
  ASSERT_EQ(out[0].size(), 1u);
  EXPECT_DOUBLE_EQ(out[0][0].start, 5.0);
  EXPECT_DOUBLE_EQ(out[0][0].end, 10.0);
}

TEST(MqDecode, PyramidCandidateCount) {
  Rng rng(8);
  const std::size_t C = 3, D = 4;
  MqHead head("mq", D, C, rng);
  auto g = line({0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5}, D, rng);
  std::vector<MqStageOutput> stages;
  std::size_t expected = 0;
  TemporalGraph cur = g;
  for (int l = 1; l <= 3; ++l) {
    if (l > 1) cur = subsample(cur, Pooling::Mean, EdgeRule{2.0});
    Tape t;
    auto raw = mq_head_forward(t, t.constant(cur.features), head, l);
    stages.push_back({ops::sigmoid(raw.logits).value(), raw.offsets.value(), cur.structure});
    expected += cur.num_nodes() * C;
    for (double v : raw.offsets.value().values()) EXPECT_GE(v, 0.0);
  }
  auto out = mq_decode(stages, {{0.0, 8.0}});
  EXPECT_EQ(out[0].size(), expected);
  // each candidate contains its generating node
  std::size_t k = 0;
  for (const auto& st : stages)
    for (std::size_t n = 0; n < st.structure.num_nodes(); ++n)
      for (std::size_t c = 0; c < C; ++c, ++k) {
        EXPECT_LE(out[0][k].start, st.structure.positions[n]);
        EXPECT_GE(out[0][k].end, st.structure.positions[n]);
      }
}

TEST(MqTargets, DecodingTargetsReconstructsGroundTruth) {
  Rng rng(9);
  std::uniform_real_distribution<double> u(0.0, 30.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> pos;
    for (int i = 0; i < 32; ++i) pos.push_back(0.5 + i);
    auto g = build_graph(Tensor::zeros(32, 1), pos, EdgeRule{2.0});
    std::vector<AnnotatedSegment> gts;
    for (int k = 0; k < 3; ++k) {
      const double a = u(rng);
      gts.push_back({a, a + 1.5 + u(rng) / 6.0, k % 2});
    }
    std::sort(gts.begin(), gts.end(), [](auto& x, auto& y) { return x.end - x.start < y.end - y.start; });
    auto tg = mq_targets(g.structure, {gts}, 2);
    Tensor offs = Tensor::zeros(32, 2);
    for (std::size_t p = 0; p < tg.positive_rows.size(); ++p) {
      offs(tg.positive_rows[p], 0) = tg.offsets(p, 0);
      offs(tg.positive_rows[p], 1) = tg.offsets(p, 1);
    }
    auto out = mq_decode({{tg.cls, offs, g.structure}}, {{0.0, 40.0}}, 0.5);
    ASSERT_EQ(out[0].size(), tg.positive_rows.size());
    for (const auto& p : out[0]) {
      bool hit = false;
      for (const auto& gt : gts)
        hit |= std::abs(p.start - gt.start) < 1e-12 && std::abs(p.end - gt.end) < 1e-12 && p.label == gt.label;
      EXPECT_TRUE(hit);
    }
    // the shortest segment always owns its interior nodes
    for (std::size_t n = 0; n < 32; ++n)
      if (gts[0].start < pos[n] && pos[n] < gts[0].end) {
        EXPECT_EQ(tg.cls(n, gts[0].label), 1.0);
      }
  }
}

TEST(Losses, CrossEntropyReferenceValues) {
  Tape t;
  EXPECT_NEAR(cross_entropy_loss(t.constant(Tensor::zeros(3, 5)), {0, 2, 4}).value().item(), std::log(5.0), 1e-15);
  EXPECT_LT(cross_entropy_loss(t.constant(Tensor::from_rows({{60, 0, 0}})), {0}).value().item(), 1e-20);
  EXPECT_THROW(cross_entropy_loss(t.constant(Tensor::zeros(1, 3)), {3}), std::out_of_range);
  EXPECT_THROW(cross_entropy_loss(t.constant(Tensor::zeros(1, 3)), {-1}), std::out_of_range);
}

TEST(Losses, CrossEntropyMatchesDirectLogSoftmax) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor z = Tensor::uniform(6, 4, -3, 3, rng);
    std::vector<int> y(6);
    for (auto& v : y) v = static_cast<int>(rng() % 4);
    double ref = 0;
    for (std::size_t r = 0; r < 6; ++r) {
      double m = z(r, 0), s = 0;
      for (std::size_t c = 1; c < 4; ++c) m = std::max(m, z(r, c));
      for (std::size_t c = 0; c < 4; ++c) s += std::exp(z(r, c) - m);
      ref -= z(r, static_cast<std::size_t>(y[r])) - m - std::log(s);
    }
    Tape t;
    EXPECT_NEAR(cross_entropy_loss(t.constant(z), y).value().item(), ref / 6.0, 1e-13);
  }
}

TEST(Losses, BinaryCrossEntropy) {
  Tape t;
  EXPECT_NEAR(bce_loss(t.constant(Tensor::zeros(2, 1)), {0, 1}).value().item(), std::log(2.0), 1e-15);
  const double z = 1.3;
  EXPECT_NEAR(bce_loss(t.constant(Tensor::scalar(z)), {1}).value().item(), -std::log(1.0 / (1.0 + std::exp(-z))),
              1e-14);
  EXPECT_NEAR(bce_loss(t.constant(Tensor::scalar(800.0)), {1}).value().item(), 0.0, 1e-300);
  EXPECT_THROW(bce_loss(t.constant(Tensor::scalar(0.0)), {0.5}), std::out_of_range);
}

TEST(Losses, FocalReferenceValues) {
  for (double p : {0.1, 0.5, 0.83}) {
    EXPECT_NEAR(focal_loss(p, 1, 0.0, 0.5), -0.5 * std::log(p), 1e-15);
    EXPECT_NEAR(focal_loss(p, 0, 0.0, 0.5), -0.5 * std::log(1 - p), 1e-15);
  }
  EXPECT_LT(focal_loss(0.99, 1, 2.0, 0.25), 1e-3);
  EXPECT_NEAR(focal_loss(0.5, 1, 2.0, 0.25), 0.25 * 0.25 * std::numbers::ln2, 1e-15);
  EXPECT_TRUE(std::isfinite(focal_loss(0.0, 1)));
  EXPECT_TRUE(std::isfinite(focal_loss(1.0, 0)));
  EXPECT_NEAR(focal_loss(0.0, 1), -0.25 * std::pow(1 - 1e-7, 2) * std::log(1e-7), 1e-12);
}

TEST(Losses, FocalTapeMatchesScalar) {
  Rng rng(11);
  Tensor p = Tensor::uniform(5, 3, 0.01, 0.99, rng);
  Tensor y = Tensor::zeros(5, 3);
  for (std::size_t i = 0; i < y.numel(); i += 2) y[i] = 1.0;
  double ref = 0;
  for (std::size_t i = 0; i < p.numel(); ++i) ref += focal_loss(p[i], static_cast<int>(y[i]));
  Tape t;
  EXPECT_NEAR(focal_loss_sum(t.constant(p), y).value().item(), ref, 1e-13);
}

TEST(Losses, DiouReferenceValues) {
  EXPECT_DOUBLE_EQ(diou_loss_1d({1, 3}, {1, 3}), 0.0);
  EXPECT_DOUBLE_EQ(diou_loss_1d({0, 1}, {1, 2}), 1.25);
  EXPECT_LT(diou_loss_1d({1, 2}, {0, 4}), 1.0);
  EXPECT_NEAR(diou_loss_1d({1, 2}, {0, 4}), 1.0 - 0.25 + 0.25 / 16.0, 1e-15);
  EXPECT_THROW(diou_loss_1d({1, 1}, {0, 4}), std::invalid_argument);
}

TEST(Losses, DiouOffsetsMatchIntervalForm) {
  Rng rng(12);
  std::uniform_real_distribution<double> u(0.05, 3.0);
  Tensor pred = Tensor::zeros(10, 2), gt = Tensor::zeros(10, 2);
  double ref = 0;
  for (std::size_t r = 0; r < 10; ++r) {
    pred(r, 0) = u(rng), pred(r, 1) = u(rng), gt(r, 0) = u(rng), gt(r, 1) = u(rng);
    const double pe = 7.0;
    ref += diou_loss_1d({pe - pred(r, 0), pe + pred(r, 1)}, {pe - gt(r, 0), pe + gt(r, 1)});
  }
  Tape t;
  EXPECT_NEAR(diou_loss_offsets(t.constant(pred), gt).value().item(), ref, 1e-12);
}

TEST(Losses, NonNegativeOnRandomInputs) {
  Rng rng(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    EXPECT_GE(focal_loss(u(rng), i % 2), 0.0);
    const double a = u(rng) * 5, b = u(rng) * 5;
    EXPECT_GE(diou_loss_1d({a, a + 0.1 + u(rng)}, {b, b + 0.1 + u(rng)}), 0.0);
  }
}

TEST(TaskGradients, NeckAndClassifier) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    TaskNeck neck("n", 4, rng);
    Linear cls("c", 4, 3, rng);
    Tensor x = Tensor::uniform(5, 4, -1, 1, rng);
    std::vector<int> y{0, 1, 2, 1, 0};
    auto loss = [&](Tape& t) { return cross_entropy_loss(cls(t, neck(t, t.constant(x))), y); };
    ParamList ps;
    neck.collect(ps);
    cls.collect(ps);
    for (auto* p : ps) EXPECT_LT(finite_diff_check_param(loss, *p), 1e-4) << p->name;
    auto bce = [&](Tape& t) { return bce_loss(ops::slice_cols(cls(t, t.constant(x)), 0, 1), {1, 0, 0, 1, 1}); };
    EXPECT_LT(finite_diff_check_param(bce, cls.weight), 1e-4);
  }
}

TEST(TaskGradients, LtaHead) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    LtaHead head("lta", 4, 3, 2, rng);
    Tensor ctx = Tensor::uniform(2, 4, -1, 1, rng);
    std::vector<int> yv{0, 1, 2, 0, 1, 2}, yn{0, 1, 1, 0, 1, 0};
    auto loss = [&](Tape& t) {
      auto o = lta_head_forward(t, t.constant(ctx), head, 3);
      return ops::add(cross_entropy_loss(o.verb, yv), cross_entropy_loss(o.noun, yn));
    };
    ParamList ps;
    head.collect(ps);
    for (auto* p : ps) EXPECT_LT(finite_diff_check_param(loss, *p), 1e-4) << p->name;
  }
}

TEST(TaskGradients, MqHeadFocalAndDiou) {
  Rng rng(16);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    MqHead head("mq", 4, 3, rng);
    Tensor x = Tensor::uniform(6, 4, -1, 1, rng);
    Tensor y = Tensor::zeros(6, 3);
    y(1, 2) = y(4, 0) = 1.0;
    Tensor target = Tensor::zeros(6, 2);
    for (auto& v : target.values()) v = u(rng);
    auto loss = [&](Tape& t) {
      auto raw = mq_head_forward(t, t.constant(x), head, 2);
      return ops::add(focal_loss_sum(ops::sigmoid(raw.logits), y), diou_loss_offsets(raw.offsets, target));
    };
    ParamList ps;
    head.collect(ps);
    for (auto* p : ps) EXPECT_LT(finite_diff_check_param(loss, *p), 1e-4) << p->name;
  }
}
