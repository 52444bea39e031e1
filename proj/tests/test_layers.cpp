#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "tgk/layers.hpp"
#include "tgk/optim.hpp"

using namespace tgk;

namespace {

constexpr std::size_t kDim = 4;

TemporalGraph random_graph(std::size_t n, Rng& rng, double tau = 2.5) {
  std::uniform_real_distribution<double> gap(0.3, 1.7);
  std::vector<double> pos(n);
  double p = gap(rng);
  for (auto& x : pos) {
    x = p;
    p += gap(rng);
  }
  return build_graph(Tensor::uniform(n, kDim, -1, 1, rng), pos, EdgeRule{tau});
}

// Mirror every timestamp around `center`; node order reverses so the
// positions stay increasing. Node i of g corresponds to node n-1-i.
TemporalGraph reflect(const TemporalGraph& g, double center, const EdgeRule& rule) {
  const std::size_t n = g.num_nodes();
  Tensor f = Tensor::zeros(n, g.features.cols());
  std::vector<double> pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    pos[n - 1 - i] = 2.0 * center - g.positions()[i];
    for (std::size_t c = 0; c < f.cols(); ++c) f(n - 1 - i, c) = g.features(i, c);
  }
  return build_graph(f, pos, rule);
}

TemporalGraph shift(const TemporalGraph& g, double delta, const EdgeRule& rule) {
  auto pos = g.positions();
  for (auto& p : pos) p += delta;
  return build_graph(g.features, pos, rule);
}

std::vector<double> row(const Tensor& t, std::size_t r) { return {t.row_span(r).begin(), t.row_span(r).end()}; }

// Dense re-evaluation of the TDGC update written with plain loops.
Tensor tdgc_dense_oracle(const TemporalGraph& g, const TdgcParams& p, double tau) {
  const std::size_t n = g.num_nodes(), d = p.dim();
  const Tensor& X = g.features;
  const Tensor& Wn = p.neighbor.weight.value;
  const Tensor& bn = p.neighbor.bias.value;
  const Tensor& Wr = p.root.weight.value;
  const Tensor& br = p.root.bias.value;
  const Tensor& Wg = p.gate[0].weight.value;
  const Tensor& bg = p.gate[0].bias.value;
  Tensor out = Tensor::zeros(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> acc(d, 0.0);
    int count = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double delta = g.positions()[i] - g.positions()[j];
      if (!(std::abs(delta) < tau)) continue;
      ++count;
      const double s = p.options.use_sign ? (delta > 0 ? 1.0 : (delta < 0 ? -1.0 : 0.0)) : 1.0;
      for (std::size_t c = 0; c < d; ++c) {
        double h = bn[c];
        for (std::size_t k = 0; k < d; ++k) h += X(j, k) * Wn(k, c);
        h = std::max(0.0, h);
        const double w = p.options.use_gate ? std::max(0.0, Wg[c] * std::abs(delta) + bg[c]) : 1.0;
        acc[c] += s * w * h;
      }
    }
    for (std::size_t c = 0; c < d; ++c) {
      double r = br[c];
      for (std::size_t k = 0; k < d; ++k) r += X(i, k) * Wr(k, c);
      out(i, c) = r + (count ? acc[c] / count : 0.0);
    }
  }
  return out;
}

Tensor root_term(const TemporalGraph& g, TdgcParams& p) {
  Tape t;
  return p.root(t, t.constant(g.features)).value();
}

}  // namespace

TEST(TemporalSign, Examples) {
  EXPECT_EQ(temporal_sign(2.0, 1.0), 1);
  EXPECT_EQ(temporal_sign(1.0, 1.0), 0);
  EXPECT_EQ(temporal_sign(0.5, 3.0), -1);
}

TEST(DistanceGate, ConstantGate) {
  Rng rng(1);
  TdgcParams p("t", kDim, rng);
  p.gate[0].weight.value.fill(0.0);
  p.gate[0].bias.value.fill(1.0);
  for (double d : {0.0, 0.7, 5.0}) EXPECT_EQ(distance_gate(p, d), Tensor::full(1, kDim, 1.0));
}

TEST(DistanceGate, ZeroDistanceAndAffineEvaluation) {
  Rng rng(2);
  TdgcParams p("t", kDim, rng);
  const Tensor at0 = distance_gate(p, 0.0);
  for (std::size_t c = 0; c < kDim; ++c) EXPECT_DOUBLE_EQ(at0[c], std::max(0.0, p.gate[0].bias.value[c]));
  for (double d : {0.5, 1.0, 2.0}) {
    const Tensor g = distance_gate(p, d);
    for (std::size_t c = 0; c < kDim; ++c)
      EXPECT_NEAR(g[c], std::max(0.0, p.gate[0].weight.value[c] * d + p.gate[0].bias.value[c]), 1e-15);
  }
  EXPECT_THROW(distance_gate(p, -0.1), std::invalid_argument);
}

TEST(Tdgc, IsolatedNodeIsRootTerm) {
  Rng rng(3);
  TdgcParams p("t", kDim, rng);
  auto g = build_graph(Tensor::uniform(1, kDim, -1, 1, rng), {4.0}, EdgeRule{2.0});
  EXPECT_EQ(tdgc_forward(g, p), root_term(g, p));
}

TEST(Tdgc, SymmetricNeighborsCancel) {
  Rng rng(4);
  TdgcParams p("t", kDim, rng);
  Tensor f = Tensor::uniform(3, kDim, -1, 1, rng);
  for (std::size_t c = 0; c < kDim; ++c) f(2, c) = f(0, c);
  auto g = build_graph(f, {0.0, 1.0, 2.0}, EdgeRule{1.5});
  const Tensor out = tdgc_forward(g, p);
  const Tensor root = root_term(g, p);
  for (std::size_t c = 0; c < kDim; ++c) EXPECT_NEAR(out(1, c), root(1, c), 1e-12);
}

TEST(Tdgc, MatchesDenseOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto g = random_graph(6, rng);
    for (auto opts : {TdgcOptions{true, true}, TdgcOptions{false, true}, TdgcOptions{true, false}}) {
      TdgcParams p("t", kDim, rng, 0, opts);
      EXPECT_LT(max_abs_diff(tdgc_forward(g, p), tdgc_dense_oracle(g, p, 2.5)), 1e-12);
    }
  }
}

TEST(Tdgc, TimeShiftInvariance) {
  Rng rng(6);
  EdgeRule rule{2.5};
  for (int trial = 0; trial < 10; ++trial) {
    auto g = random_graph(8, rng);
    TdgcParams p("t", kDim, rng);
    EXPECT_LT(max_abs_diff(tdgc_forward(g, p), tdgc_forward(shift(g, 37.25, rule), p)), 1e-12);
  }
}

TEST(Tdgc, ReflectionNegatesNeighborTerm) {
  Rng rng(7);
  EdgeRule rule{2.5};
  for (int trial = 0; trial < 10; ++trial) {
    auto g = random_graph(7, rng);
    TdgcParams p("t", kDim, rng);
    auto r = reflect(g, g.positions()[3], rule);
    const Tensor out = tdgc_forward(g, p), out_r = tdgc_forward(r, p);
    const Tensor root = root_term(g, p);
    const std::size_t n = g.num_nodes();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < kDim; ++c) {
        const double nb = out(i, c) - root(i, c);
        const double nb_r = out_r(n - 1 - i, c) - root(i, c);
        EXPECT_NEAR(nb, -nb_r, 1e-12);
      }
  }
}

TEST(Tdgc, WithoutSignIsReflectionInvariant) {
  Rng rng(8);
  EdgeRule rule{2.5};
  auto g = random_graph(7, rng);
  TdgcParams p("t", kDim, rng, 0, {false, true});
  const Tensor out = tdgc_forward(g, p), out_r = tdgc_forward(reflect(g, 0.0, rule), p);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(row(out, i), row(out_r, 6 - i));
}

TEST(Tdgc, WithoutGateUsesAllOnes) {
  Rng rng(9);
  auto g = random_graph(6, rng);
  TdgcParams a("t", kDim, rng, 0, {true, false});
  TdgcParams b = a;
  b.options.use_gate = true;
  b.gate[0].weight.value.fill(0.0);
  b.gate[0].bias.value.fill(1.0);
  EXPECT_LT(max_abs_diff(tdgc_forward(g, a), tdgc_forward(g, b)), 1e-15);
}

TEST(Tdgc, DimensionMismatchThrows) {
  Rng rng(10);
  TdgcParams p("t", kDim, rng);
  auto g = build_graph(Tensor::zeros(2, kDim + 1), {0.0, 1.0}, EdgeRule{2.0});
  EXPECT_THROW(tdgc_forward(g, p), ShapeError);
}

TEST(Tdgc, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto g = random_graph(6, rng);
    TdgcParams p("t", kDim, rng, trial % 3 == 0 ? 1 : 0);
    Tensor readout = Tensor::uniform(6, kDim, -1, 1, rng);
    auto loss = [&](Tape& t) {
      Var y = tdgc_forward(t, t.constant(g.features), g.structure, p);
      return ops::sum(ops::mul(y, t.constant(readout)));
    };
    ParamList params;
    p.collect(params);
    for (auto* prm : params) EXPECT_LT(finite_diff_check_param(loss, *prm), 1e-4) << prm->name;
    auto loss_x = [&](Tape& t, Var x) {
      return ops::sum(ops::mul(tdgc_forward(t, x, g.structure, p), t.constant(readout)));
    };
    EXPECT_LT(finite_diff_check(loss_x, g.features), 1e-4);
  }
}

TEST(Baselines, SageIsolatedNodeIsRootProjection) {
  Rng rng(12);
  BaselineLayerParams p("s", LayerKind::SAGE, kDim, rng);
  auto g = build_graph(Tensor::uniform(1, kDim, -1, 1, rng), {1.0}, EdgeRule{2.0});
  Tape t;
  const Tensor expect = p.root(t, t.constant(g.features)).value();
  EXPECT_EQ(baseline_forward(g, p), expect);
}

TEST(Baselines, GcnIdentityOnEqualPair) {
  Rng rng(13);
  BaselineLayerParams p("g", LayerKind::GCN, kDim, rng);
  p.neighbor.set_identity();
  p.bias.value.fill(0.0);
  Tensor f = Tensor::from_rows({{0.2, 0.4, 0.1, 0.9}, {0.2, 0.4, 0.1, 0.9}});
  auto g = build_graph(f, {0.5, 1.5}, EdgeRule{2.0});
  EXPECT_LT(max_abs_diff(baseline_forward(g, p), f), 1e-15);
}

TEST(Baselines, SgcnSeesNeighborOrderSageDoesNot) {
  Rng rng(14);
  Tensor a = Tensor::uniform(1, kDim, -1, 1, rng), b = Tensor::uniform(1, kDim, -1, 1, rng),
         root = Tensor::uniform(1, kDim, -1, 1, rng);
  auto make = [&](const Tensor& first, const Tensor& last) {
    Tensor f = Tensor::zeros(3, kDim);
    for (std::size_t c = 0; c < kDim; ++c) {
      f(0, c) = first[c];
      f(1, c) = root[c];
      f(2, c) = last[c];
    }
    return build_graph(f, {0.0, 1.0, 2.0}, EdgeRule{1.5});
  };
  auto g1 = make(a, b), g2 = make(b, a);
  BaselineLayerParams sgcn("g", LayerKind::SGCN, kDim, rng);
  BaselineLayerParams sage("s", LayerKind::SAGE, kDim, rng);
  EXPECT_GT(max_abs_diff(baseline_forward(g1, sgcn), baseline_forward(g2, sgcn)) , 1e-6);
  EXPECT_EQ(row(baseline_forward(g1, sage), 1), row(baseline_forward(g2, sage), 1));
  TdgcParams tdgc("t", kDim, rng);
  EXPECT_GT(std::abs(tdgc_forward(g1, tdgc)(1, 0) - tdgc_forward(g2, tdgc)(1, 0)) +
                std::abs(tdgc_forward(g1, tdgc)(1, 1) - tdgc_forward(g2, tdgc)(1, 1)),
            1e-9);
}

TEST(Baselines, PermutationInvariantLayersIgnoreReflection) {
  Rng rng(15);
  EdgeRule rule{2.5};
  for (auto kind : {LayerKind::GCN, LayerKind::GAT, LayerKind::SAGE}) {
    for (int trial = 0; trial < 5; ++trial) {
      auto g = random_graph(7, rng);
      BaselineLayerParams p("b", kind, kDim, rng);
      const Tensor out = baseline_forward(g, p), out_r = baseline_forward(reflect(g, 5.0, rule), p);
      for (std::size_t i = 0; i < 7; ++i) {
        auto x = row(out, i), y = row(out_r, 6 - i);
        for (std::size_t c = 0; c < kDim; ++c) EXPECT_NEAR(x[c], y[c], 1e-14) << layer_kind_name(kind);
      }
    }
  }
}

TEST(Baselines, TemporalLayersBreakReflectionSymmetry) {
  Rng rng(16);
  EdgeRule rule{2.5};
  auto g = random_graph(7, rng);
  BaselineLayerParams sgcn("b", LayerKind::SGCN, kDim, rng);
  BaselineLayerParams pe("p", LayerKind::SAGE_PE, kDim, rng);
  TdgcParams tdgc("t", kDim, rng);
  auto r = reflect(g, 5.0, rule);
  auto differs = [&](const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t c = 0; c < kDim; ++c) m = std::max(m, std::abs(a(i, c) - b(6 - i, c)));
    return m;
  };
  EXPECT_GT(differs(baseline_forward(g, sgcn), baseline_forward(r, sgcn)), 1e-6);
  EXPECT_GT(differs(baseline_forward(g, pe), baseline_forward(r, pe)), 1e-6);
  EXPECT_GT(differs(tdgc_forward(g, tdgc), tdgc_forward(r, tdgc)), 1e-6);
}

TEST(Baselines, GradientsMatchFiniteDifferences) {
  Rng rng(17);
  for (auto kind : {LayerKind::GCN, LayerKind::GAT, LayerKind::SAGE, LayerKind::SAGE_PE, LayerKind::SGCN}) {
    for (int trial = 0; trial < 20; ++trial) {
      auto g = random_graph(5, rng);
      BaselineLayerParams p("b", kind, kDim, rng);
      Tensor readout = Tensor::uniform(5, kDim, -1, 1, rng);
      auto loss = [&](Tape& t) {
        return ops::sum(ops::mul(baseline_forward(t, t.constant(g.features), g.structure, p, true),
                                 t.constant(readout)));
      };
      ParamList params;
      p.collect(params);
      for (auto* prm : params)
        EXPECT_LT(finite_diff_check_param(loss, *prm), 1e-4) << layer_kind_name(kind) << " " << prm->name;
    }
  }
}

TEST(SinusoidalPe, PositionZeroAlternates) {
  const Tensor pe = sinusoidal_pe({0.0}, 8);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_DOUBLE_EQ(pe[c], c % 2 == 0 ? 0.0 : 1.0);
}

TEST(SinusoidalPe, ChannelPairsOnUnitCircle) {
  std::vector<double> pos;
  for (int i = 0; i < 50; ++i) pos.push_back(0.37 * i - 3.0);
  const Tensor pe = sinusoidal_pe(pos, 16);
  for (std::size_t n = 0; n < pos.size(); ++n)
    for (std::size_t k = 0; k < 8; ++k)
      EXPECT_NEAR(pe(n, 2 * k) * pe(n, 2 * k) + pe(n, 2 * k + 1) * pe(n, 2 * k + 1), 1.0, 1e-14);
}

TEST(SinusoidalPe, DistinctPositionsGiveDistinctCodes) {
  std::vector<double> pos;
  for (int i = 0; i < 60; ++i) pos.push_back(0.1 * i);  // within the fastest channel's period
  const Tensor pe = sinusoidal_pe(pos, 4);
  for (std::size_t a = 0; a < pos.size(); ++a)
    for (std::size_t b = a + 1; b < pos.size(); ++b) {
      double d = 0;
      for (std::size_t c = 0; c < 4; ++c) d = std::max(d, std::abs(pe(a, c) - pe(b, c)));
      EXPECT_GT(d, 1e-6);
    }
  EXPECT_THROW(sinusoidal_pe(pos, 5), std::invalid_argument);
}
