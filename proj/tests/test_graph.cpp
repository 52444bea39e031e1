#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "tgk/graph.hpp"

using namespace tgk;

namespace {

std::vector<double> random_sorted(std::size_t n, double span, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, span);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  std::sort(v.begin(), v.end());
  for (std::size_t i = 1; i < n; ++i)
    if (v[i] <= v[i - 1]) v[i] = v[i - 1] + 1e-3;
  return v;
}

// O(N^2) reference: all ordered pairs within a video closer than threshold.
std::set<Edge> brute_force_edges(const std::vector<double>& pos, const std::vector<std::size_t>& offsets,
                                 double threshold) {
  std::set<Edge> out;
  for (std::size_t v = 0; v + 1 < offsets.size(); ++v)
    for (std::size_t i = offsets[v]; i < offsets[v + 1]; ++i)
      for (std::size_t j = offsets[v]; j < offsets[v + 1]; ++j)
        if (i != j && std::abs(pos[i] - pos[j]) < threshold) out.insert({i, j});
  return out;
}

std::set<Edge> as_set(const std::vector<Edge>& e) { return {e.begin(), e.end()}; }

void expect_invariants(const TemporalGraph& g) {
  auto edges = as_set(g.edges());
  auto video = g.structure.video_of_nodes();
  for (const auto& e : edges) {
    EXPECT_NE(e.i, e.j);
    EXPECT_TRUE(edges.count({e.j, e.i}));
    EXPECT_EQ(video[e.i], video[e.j]);
  }
}

}  // namespace

TEST(BuildGraph, StrictThresholdBoundary) {
  auto g = build_graph(Tensor::zeros(3, 2), {0.5, 1.5, 2.5}, EdgeRule{2.0});
  EXPECT_EQ(as_set(g.edges()), (std::set<Edge>{{0, 1}, {1, 0}, {1, 2}, {2, 1}}));
  EXPECT_EQ(g.stage(), 0);
}

TEST(BuildGraph, SingleNodeHasNoEdges) {
  auto g = build_graph(Tensor::zeros(1, 4), {3.0}, EdgeRule{2.0});
  EXPECT_TRUE(g.edges().empty());
}

TEST(BuildGraph, MatchesBruteForce) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto pos = random_sorted(20, 30.0, rng);
    auto g = build_graph(Tensor::zeros(20, 2), pos, EdgeRule{3.0});
    EXPECT_EQ(as_set(g.edges()), brute_force_edges(pos, {0, 20}, 3.0));
    expect_invariants(g);
  }
}

TEST(BuildGraph, EdgesNeverCrossVideos) {
  auto g = build_graph(Tensor::zeros(4, 2), {0.5, 1.5, 0.5, 1.5}, EdgeRule{2.0}, {0, 2, 4});
  EXPECT_EQ(as_set(g.edges()), (std::set<Edge>{{0, 1}, {1, 0}, {2, 3}, {3, 2}}));
}

TEST(BuildGraph, Errors) {
  EXPECT_THROW(build_graph(Tensor::zeros(3, 2), {0.5, 2.5, 1.5}, EdgeRule{2.0}), GraphError);
  Tensor bad = Tensor::zeros(2, 2);
  bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(build_graph(bad, {0.5, 1.5}, EdgeRule{2.0}), GraphError);
  EXPECT_THROW(build_graph(Tensor::zeros(0, 2), {}, EdgeRule{2.0}), GraphError);
  EXPECT_THROW(build_graph(Tensor::zeros(1, 2), {0.0}, EdgeRule{0.0}), GraphError);
}

TEST(RebuildEdges, ThresholdDoublesPerLevel) {
  auto g = build_graph(Tensor::zeros(2, 1), {0.5, 3.5}, EdgeRule{2.0});
  EXPECT_TRUE(rebuild_edges(g, 0, EdgeRule{2.0}).edges().empty());
  auto g1 = rebuild_edges(g, 1, EdgeRule{2.0});
  EXPECT_EQ(g1.edges().size(), 2u);
  EXPECT_EQ(g1.positions(), g.positions());
}

TEST(RebuildEdges, LevelZeroIsIdentity) {
  Rng rng(5);
  auto pos = random_sorted(15, 20.0, rng);
  auto g = build_graph(Tensor::zeros(15, 1), pos, EdgeRule{2.5});
  EXPECT_EQ(rebuild_edges(g, 0, EdgeRule{2.5}).edges(), g.edges());
}

TEST(RebuildEdges, LevelTwoMatchesBruteForce) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    auto pos = random_sorted(25, 40.0, rng);
    auto g = rebuild_edges(build_graph(Tensor::zeros(25, 1), pos, EdgeRule{1.5}), 2, EdgeRule{1.5});
    EXPECT_EQ(as_set(g.edges()), brute_force_edges(pos, {0, 25}, 6.0));
  }
}

TEST(Subsample, HalvesNodesForEveryPooling) {
  for (auto p : {Pooling::Mean, Pooling::Max, Pooling::BatchSS, Pooling::VideoSS}) {
    auto g = build_graph(Tensor::zeros(4, 2), {0.5, 1.5, 2.5, 3.5}, EdgeRule{2.0});
    auto s = subsample(g, p, EdgeRule{2.0});
    EXPECT_EQ(s.num_nodes(), 2u) << pooling_name(p);
    EXPECT_EQ(s.stage(), 1);
    EXPECT_EQ(s.positions(), (std::vector<double>{0.5, 2.5}));
  }
}

TEST(Subsample, IsolatedNodesKeepOwnFeatures) {
  Tensor f = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
  auto g = build_graph(f, {0.0, 10.0, 20.0}, EdgeRule{0.01});
  auto s = subsample(g, Pooling::Mean, EdgeRule{0.01});
  EXPECT_EQ(s.features, Tensor::from_rows({{1, 2}, {5, 6}}));
}

TEST(Subsample, MeanPoolingOnChainMatchesHandComputation) {
  const std::size_t n = 9;
  Tensor f = Tensor::zeros(n, 2);
  std::vector<double> pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    f(i, 0) = static_cast<double>(i * i);
    f(i, 1) = std::sin(static_cast<double>(i));
    pos[i] = static_cast<double>(i) + 0.5;
  }
  auto g = build_graph(f, pos, EdgeRule{1.5});  // each node sees i-1 and i+1
  auto s = subsample(g, Pooling::Mean, EdgeRule{1.5});
  ASSERT_EQ(s.num_nodes(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    const std::size_t i = 2 * k;
    double sum0 = 0, sum1 = 0, cnt = 0;
    for (std::size_t j = (i == 0 ? 0 : i - 1); j <= std::min(n - 1, i + 1); ++j) {
      sum0 += f(j, 0);
      sum1 += f(j, 1);
      cnt += 1;
    }
    EXPECT_NEAR(s.features(k, 0), sum0 / cnt, 1e-12);
    EXPECT_NEAR(s.features(k, 1), sum1 / cnt, 1e-12);
  }
  // Edges rebuilt at level 1: threshold 3, survivors 2 s apart are connected.
  EXPECT_EQ(as_set(s.edges()), brute_force_edges(s.positions(), s.structure.video_offsets, 3.0));
}

TEST(Subsample, MaxPoolingTakesNeighborhoodMaximum) {
  Tensor f = Tensor::from_rows({{1, 9}, {7, 0}, {2, 3}, {0, 8}});
  auto g = build_graph(f, {0.5, 1.5, 2.5, 3.5}, EdgeRule{1.5});
  auto s = subsample(g, Pooling::Max, EdgeRule{1.5});
  EXPECT_EQ(s.features, Tensor::from_rows({{7, 9}, {7, 8}}));
}

TEST(Subsample, BatchVersusVideoSelection) {
  // Videos of 3 and 3 nodes: video-ss restarts per video, batch-ss alternates
  // over the whole batch.
  Tensor f = Tensor::zeros(6, 1);
  for (std::size_t i = 0; i < 6; ++i) f(i, 0) = static_cast<double>(i);
  auto g = build_graph(f, {0.5, 1.5, 2.5, 0.5, 1.5, 2.5}, EdgeRule{2.0}, {0, 3, 6});
  auto video = subsample(g, Pooling::VideoSS, EdgeRule{2.0});
  EXPECT_EQ(video.features, Tensor::column(std::vector<double>{0, 2, 3, 5}));
  EXPECT_EQ(video.structure.video_offsets, (std::vector<std::size_t>{0, 2, 4}));
  auto batch = subsample(g, Pooling::BatchSS, EdgeRule{2.0});
  EXPECT_EQ(batch.features, Tensor::column(std::vector<double>{0, 2, 4}));
  EXPECT_EQ(batch.structure.video_offsets, (std::vector<std::size_t>{0, 2, 3}));
  expect_invariants(video);
  expect_invariants(batch);
}

TEST(Subsample, CeilHalvingLawAndInvariants) {
  Rng rng(9);
  for (std::size_t n : {1u, 2u, 7u, 13u, 64u}) {
    auto pos = random_sorted(n, 3.0 * static_cast<double>(n), rng);
    TemporalGraph g = build_graph(Tensor::uniform(n, 3, -1, 1, rng), pos, EdgeRule{2.0});
    std::size_t expected = n;
    for (int s = 0; s < 4; ++s) {
      g = subsample(g, Pooling::Mean, EdgeRule{2.0});
      expected = (expected + 1) / 2;
      EXPECT_EQ(g.num_nodes(), expected);
      expect_invariants(g);
      EXPECT_EQ(as_set(g.edges()),
                brute_force_edges(g.positions(), g.structure.video_offsets, 2.0 * std::ldexp(1.0, s + 1)));
    }
  }
}

TEST(Subsample, TimestampsArePreserved) {
  auto g = build_graph(Tensor::zeros(8, 1), {0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5}, EdgeRule{2.0});
  auto s2 = subsample(subsample(g, Pooling::Mean, EdgeRule{2.0}), Pooling::Mean, EdgeRule{2.0});
  EXPECT_EQ(s2.positions(), (std::vector<double>{0.5, 4.5}));
}

TEST(MergeGraphs, OffsetsAndEdges) {
  auto a = build_graph(Tensor::zeros(2, 1), {0.5, 1.5}, EdgeRule{2.0});
  auto b = build_graph(Tensor::zeros(3, 1), {0.5, 1.5, 2.5}, EdgeRule{2.0});
  auto m = merge_graphs({a, b});
  EXPECT_EQ(m.structure.video_offsets, (std::vector<std::size_t>{0, 2, 5}));
  EXPECT_EQ(m.edges().size(), a.edges().size() + b.edges().size());
  expect_invariants(m);
}
