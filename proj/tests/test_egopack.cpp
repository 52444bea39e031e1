#include <gtest/gtest.h>

#include <filesystem>

#include "tgk/egopack.hpp"
#include "tgk/optim.hpp"

using namespace tgk;

namespace {

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
  Tensor y = Tensor::zeros(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.cols(); ++k) y(i, j) += a(i, k) * b(k, j);
  return y;
}

}  // namespace

TEST(BuildPrototypes, OneRowPerDistinctPair) {
  Tensor f = Tensor::from_rows({{1, 0}, {0, 1}, {2, 2}, {4, 6}});
  std::vector<LabelPair> labels{{0, 1}, {2, 0}, {0, 1}, {1, 1}};
  auto bank = build_prototypes({{"AR", f}, {"OSCC", f}}, labels);
  EXPECT_TRUE(bank.frozen());
  EXPECT_EQ(bank.rows(), 3u);
  EXPECT_EQ(bank.labels(), (std::vector<LabelPair>{{0, 1}, {1, 1}, {2, 0}}));
  EXPECT_EQ(bank.matrix("AR"), Tensor::from_rows({{1.5, 1}, {4, 6}, {0, 1}}));
  EXPECT_EQ(bank.matrix("OSCC"), bank.matrix("AR"));
  EXPECT_THROW(bank.add_task("PNR", Tensor::zeros(3, 2)), FrozenBankError);
  EXPECT_THROW(bank.matrix("LTA"), std::out_of_range);
}

TEST(BuildPrototypes, MeanOracleOnRandomGroups) {
  Rng rng(1);
  Tensor f = Tensor::uniform(40, 3, -1, 1, rng);
  std::vector<LabelPair> labels;
  for (int i = 0; i < 40; ++i) labels.push_back({i % 4, (i / 4) % 3});
  auto bank = build_prototypes({{"AR", f}}, labels);
  for (std::size_t r = 0; r < bank.rows(); ++r) {
    std::vector<double> m(3, 0.0);
    int cnt = 0;
    for (int i = 0; i < 40; ++i)
      if (labels[i] == bank.labels()[r]) {
        ++cnt;
        for (std::size_t c = 0; c < 3; ++c) m[c] += f(i, c);
      }
    ASSERT_GT(cnt, 0);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(bank.matrix("AR")(r, c), m[c] / cnt, 1e-15);
  }
}

TEST(KnnMatch, Examples) {
  Tensor bank = Tensor::from_rows({{5, 5}});
  EXPECT_EQ(knn_match(std::vector<double>{0, 0}, bank, 1), (std::vector<std::size_t>{0}));
  Tensor b2 = Tensor::from_rows({{0, 0}, {1, 1}, {3, 3}, {1, 1}});
  EXPECT_EQ(knn_match(std::vector<double>{3, 3}, b2, 1), (std::vector<std::size_t>{2}));
  // tie between rows 1 and 3 goes to the lower index
  EXPECT_EQ(knn_match(std::vector<double>{1, 1}, b2, 2), (std::vector<std::size_t>{1, 3}));
  EXPECT_THROW(knn_match(std::vector<double>{1, 1}, b2, 5), std::invalid_argument);
}

TEST(KnnMatch, MatchesFullSortAndIsPermutationCovariant) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor bank = Tensor::uniform(12, 4, -1, 1, rng);
    Tensor q = Tensor::uniform(1, 4, -1, 1, rng);
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t r = 0; r < 12; ++r) {
      double d = 0;
      for (std::size_t c = 0; c < 4; ++c) d += (q[c] - bank(r, c)) * (q[c] - bank(r, c));
      all.push_back({std::sqrt(d), r});
    }
    std::sort(all.begin(), all.end());
    auto got = knn_match(q.values(), bank, 4);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(got[i], all[i].second);
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor pb = Tensor::zeros(12, 4);
    for (std::size_t r = 0; r < 12; ++r)
      for (std::size_t c = 0; c < 4; ++c) pb(r, c) = bank(perm[r], c);
    auto pg = knn_match(q.values(), pb, 4);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(perm[pg[i]], got[i]);
  }
}

TEST(Interact, ZeroPrototypeWeightLeavesRootPath) {
  Rng rng(3);
  InteractionParams p("i", 3, {2, 2, true}, rng);
  for (auto& l : p.neighbor) l.set_zero();
  Tensor x = Tensor::uniform(4, 3, -1, 1, rng);
  Tensor bank = Tensor::uniform(5, 3, -1, 1, rng);
  Tape t;
  const Tensor out = interact(t, t.constant(x), bank, p).value();
  const Tensor ref = matmul_plain(matmul_plain(x, p.root[0].weight.value), p.root[1].weight.value);
  EXPECT_LT(max_abs_diff(out, ref), 1e-15);
}

TEST(Interact, IdentityWeightsAddThePrototype) {
  Rng rng(4);
  InteractionParams p("i", 3, {1, 1, true}, rng);
  p.root[0].set_identity();
  p.neighbor[0].set_identity();
  Tensor x = Tensor::from_rows({{1, 2, 3}, {-1, 0, 4}});
  Tensor bank = Tensor::from_rows({{0.5, 0.25, -2}});
  Tape t;
  EXPECT_EQ(interact(t, t.constant(x), bank, p).value(), Tensor::from_rows({{1.5, 2.25, 1}, {-0.5, 0.25, 2}}));
}

TEST(Interact, MatchesUnrolledSimulation) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    for (bool rematch : {true, false}) {
      InteractionParams p("i", 3, {2, 2, rematch}, rng);
      Tensor x = Tensor::uniform(4, 3, -1, 1, rng);
      Tensor bank = Tensor::uniform(6, 3, -1, 1, rng);
      Tensor cur = x;
      std::vector<std::vector<std::size_t>> nn;
      for (int m = 0; m < 2; ++m) {
        if (m == 0 || rematch) {
          nn.clear();
          for (std::size_t r = 0; r < 4; ++r) {
            std::vector<std::pair<double, std::size_t>> d;
            for (std::size_t b = 0; b < 6; ++b) {
              double s = 0;
              for (std::size_t c = 0; c < 3; ++c) s += std::pow(cur(r, c) - bank(b, c), 2);
              d.push_back({s, b});
            }
            std::sort(d.begin(), d.end());
            nn.push_back({d[0].second, d[1].second});
          }
        }
        Tensor agg = Tensor::zeros(4, 3);
        for (std::size_t r = 0; r < 4; ++r)
          for (std::size_t c = 0; c < 3; ++c) agg(r, c) = 0.5 * (bank(nn[r][0], c) + bank(nn[r][1], c));
        Tensor a = matmul_plain(cur, p.root[m].weight.value), b = matmul_plain(agg, p.neighbor[m].weight.value);
        for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
        cur = a;
      }
      Tape t;
      EXPECT_LT(max_abs_diff(interact(t, t.constant(x), bank, p).value(), cur), 1e-14);
    }
  }
}

TEST(Interact, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    InteractionParams p("i", 4, {2, 3, true}, rng);
    Tensor x = Tensor::uniform(5, 4, -1, 1, rng);
    Tensor bank = Tensor::uniform(8, 4, -1, 1, rng);
    Tensor w = Tensor::uniform(5, 4, -1, 1, rng);
    auto loss = [&](Tape& t) { return ops::sum(ops::mul(interact(t, t.constant(x), bank, p), t.constant(w))); };
    ParamList ps;
    p.collect(ps);
    for (auto* prm : ps) EXPECT_LT(finite_diff_check_param(loss, *prm), 1e-4) << prm->name;
  }
}

TEST(Interact, BankIsUntouched) {
  Rng rng(7);
  auto bank = build_prototypes({{"AR", Tensor::uniform(10, 3, -1, 1, rng)}},
                               {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}, {0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}});
  const auto before = bank.bytes();
  InteractionParams p("i", 3, {2, 2, true}, rng);
  Adam opt([&] {
    ParamList ps;
    p.collect(ps);
    return ps;
  }());
  for (int step = 0; step < 5; ++step) {
    Tape t;
    Var y = interact(t, t.constant(Tensor::uniform(4, 3, -1, 1, rng)), bank.matrix("AR"), p);
    opt.zero_grad();
    t.backward(ops::sum(ops::square(y)));
    opt.step(1e-2);
  }
  EXPECT_EQ(bank.bytes(), before);
}

TEST(Fuse, DegenerateAndIdentityCases) {
  Rng rng(8);
  Linear head("h", 3, 2, rng), zero("z", 3, 2, rng);
  zero.set_zero();
  Tensor x = Tensor::uniform(4, 3, -1, 1, rng), r = Tensor::uniform(4, 3, -1, 1, rng);
  Tape t;
  HeadFn novel = [&](const Var& v) { return std::vector<Var>{head(t, v)}; };
  HeadFn support = [&](const Var& v) { return std::vector<Var>{zero(t, v)}; };
  Var vx = t.constant(x);
  const Tensor alone = novel(vx)[0].value();
  EXPECT_EQ(fuse(vx, {}, FusionMode::Logits, novel)[0].value(), alone);
  EXPECT_EQ(fuse(vx, {t.constant(r)}, FusionMode::Logits, novel, {support})[0].value(), alone);
  EXPECT_LT(max_abs_diff(fuse(vx, {vx}, FusionMode::Features, novel)[0].value(), alone), 1e-15);
  // features mode: head of the mean
  Tensor mean = x;
  for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] = 0.5 * (x[i] + r[i]);
  EXPECT_LT(max_abs_diff(fuse(vx, {t.constant(r)}, FusionMode::Features, novel)[0].value(),
                         novel(t.constant(mean))[0].value()),
            1e-15);
  EXPECT_THROW(fuse(vx, {t.constant(r)}, FusionMode::Logits, novel, {}), std::invalid_argument);
}

TEST(Analytics, Histogram) {
  std::vector<LabelPair> labels{{0, 0}, {1, 0}, {2, 1}, {3, 1}, {0, 2}};
  EXPECT_EQ(activation_histogram({2}, labels), (std::map<int, double>{{2, 1.0}}));
  auto u = activation_histogram({0, 1, 2, 3}, labels);
  for (int v = 0; v < 4; ++v) EXPECT_DOUBLE_EQ(u[v], 0.25);
  auto merged = activation_histogram({0, 4, 1}, labels);  // rows 0 and 4 share verb 0
  EXPECT_NEAR(merged[0], 2.0 / 3.0, 1e-15);
  Rng rng(9);
  std::vector<std::size_t> stream;
  for (int i = 0; i < 777; ++i) stream.push_back(rng() % labels.size());
  double s = 0;
  for (auto& [v, f] : activation_histogram(stream, labels)) s += f;
  EXPECT_NEAR(s, 1.0, 1e-9);
}

TEST(Analytics, Consensus) {
  using S = std::set<int>;
  EXPECT_DOUBLE_EQ(activation_consensus<int>({S{1, 2}}, {S{1, 2}}), 100.0);
  EXPECT_DOUBLE_EQ(activation_consensus<int>({S{1, 2}}, {S{3, 4}}), 0.0);
  EXPECT_NEAR(activation_consensus<int>({S{1, 2}}, {S{2, 3}}), 100.0 / 3.0, 1e-12);
  EXPECT_NEAR(activation_consensus<int>({S{1, 2}, S{1}}, {S{2, 3}, S{1}}), (100.0 / 3.0 + 100.0) / 2.0, 1e-12);
}

TEST(Persistence, RoundTripThroughFloat32) {
  Rng rng(10);
  Tensor f = Tensor::uniform(6, 3, -1, 1, rng);
  auto bank = build_prototypes({{"AR", f}, {"PNR", f}}, {{0, 0}, {0, 1}, {1, 1}, {0, 0}, {2, 1}, {1, 1}});
  auto dir = std::filesystem::temp_directory_path() / "tgk_bank_test";
  std::filesystem::remove_all(dir);
  save_bank(bank, dir);
  EXPECT_EQ(std::filesystem::file_size(dir / "AR.bin"), bank.rows() * bank.dim() * 4);
  auto back = load_bank(dir);
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.tasks(), bank.tasks());
  EXPECT_EQ(back.labels(), bank.labels());
  for (const auto& t : bank.tasks())
    for (std::size_t i = 0; i < bank.matrix(t).numel(); ++i)
      EXPECT_EQ(back.matrix(t)[i], static_cast<double>(static_cast<float>(bank.matrix(t)[i])));
  std::filesystem::remove_all(dir);
}
