#pragma once

// Video-as-graph representation: nodes are fixed-length segments with their
// midpoint timestamps, edges connect segments of the same video that are
// closer than a temporal threshold.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgk/autodiff.hpp"
#include "tgk/ops.hpp"
#include "tgk/tensor.hpp"

namespace tgk {

class GraphError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Edge {
  std::size_t i;  // root
  std::size_t j;  // neighbor
  bool operator==(const Edge&) const = default;
  auto operator<=>(const Edge&) const = default;
};

struct EdgeRule {
  double tau = 2.0;  // seconds
  bool stage_scaling = true;

  double threshold(int level) const { return stage_scaling ? tau * std::ldexp(1.0, level) : tau; }
};

enum class Pooling { Mean, Max, BatchSS, VideoSS };

inline const char* pooling_name(Pooling p) {
  switch (p) {
    case Pooling::Mean: return "mean";
    case Pooling::Max: return "max";
    case Pooling::BatchSS: return "batch-ss";
    case Pooling::VideoSS: return "video-ss";
  }
  return "?";
}

inline Pooling pooling_from_name(const std::string& s) {
  if (s == "mean") return Pooling::Mean;
  if (s == "max") return Pooling::Max;
  if (s == "batch-ss") return Pooling::BatchSS;
  if (s == "video-ss") return Pooling::VideoSS;
  throw GraphError("unknown pooling '" + s + "'");
}

// Everything about a graph except its node features. Edges are ordered pairs
// stored in both directions, sorted lexicographically.
struct GraphStructure {
  std::vector<double> positions;           // seconds, never rescaled
  std::vector<std::size_t> video_offsets;  // V+1 offsets into the node list
  std::vector<Edge> edges;
  int stage = 0;  // edge level: threshold = tau * 2^stage

  std::size_t num_nodes() const { return positions.size(); }
  std::size_t num_videos() const { return video_offsets.empty() ? 0 : video_offsets.size() - 1; }
  std::size_t video_size(std::size_t v) const { return video_offsets[v + 1] - video_offsets[v]; }

  std::vector<std::size_t> video_of_nodes() const {
    std::vector<std::size_t> out(num_nodes());
    for (std::size_t v = 0; v < num_videos(); ++v)
      for (std::size_t n = video_offsets[v]; n < video_offsets[v + 1]; ++n) out[n] = v;
    return out;
  }

  std::vector<std::size_t> edge_roots() const {
    std::vector<std::size_t> out(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) out[e] = edges[e].i;
    return out;
  }
  std::vector<std::size_t> edge_neighbors() const {
    std::vector<std::size_t> out(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) out[e] = edges[e].j;
    return out;
  }
  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> d(num_nodes(), 0);
    for (const auto& e : edges) ++d[e.i];
    return d;
  }
};

struct TemporalGraph {
  Tensor features;  // N x D
  GraphStructure structure;

  std::size_t num_nodes() const { return structure.num_nodes(); }
  const std::vector<double>& positions() const { return structure.positions; }
  const std::vector<Edge>& edges() const { return structure.edges; }
  int stage() const { return structure.stage; }
};

// A graph whose node features live on a tape.
struct StageGraph {
  Var features;
  GraphStructure structure;
};

namespace detail {

inline void validate_offsets(const std::vector<std::size_t>& offsets, std::size_t n) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != n)
    throw GraphError("video offsets must start at 0 and end at the node count");
  for (std::size_t v = 0; v + 1 < offsets.size(); ++v)
    if (offsets[v + 1] < offsets[v]) throw GraphError("video offsets must be non-decreasing");
}

inline void validate_positions(const std::vector<double>& pos, const std::vector<std::size_t>& offsets) {
  for (double p : pos)
    if (!std::isfinite(p)) throw GraphError("non-finite timestamp");
  for (std::size_t v = 0; v + 1 < offsets.size(); ++v)
    for (std::size_t n = offsets[v] + 1; n < offsets[v + 1]; ++n)
      if (!(pos[n] > pos[n - 1])) throw GraphError("timestamps must be strictly increasing within a video");
}

}  // namespace detail

// Edge (i,j) iff same video, i != j and |pe_i - pe_j| < threshold.
inline std::vector<Edge> temporal_edges(const std::vector<double>& pos, const std::vector<std::size_t>& offsets,
                                        double threshold) {
  std::vector<Edge> edges;
  for (std::size_t v = 0; v + 1 < offsets.size(); ++v) {
    for (std::size_t i = offsets[v]; i < offsets[v + 1]; ++i) {
      for (std::size_t j = i; j-- > offsets[v];) {
        if (!(pos[i] - pos[j] < threshold)) break;
        edges.push_back({i, j});
      }
      for (std::size_t j = i + 1; j < offsets[v + 1]; ++j) {
        if (!(pos[j] - pos[i] < threshold)) break;
        edges.push_back({i, j});
      }
    }
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

inline GraphStructure make_structure(std::vector<double> positions, std::vector<std::size_t> video_offsets,
                                     const EdgeRule& rule, int stage) {
  if (!(rule.tau > 0.0)) throw GraphError("edge rule: tau must be positive");
  detail::validate_offsets(video_offsets, positions.size());
  detail::validate_positions(positions, video_offsets);
  GraphStructure s;
  s.positions = std::move(positions);
  s.video_offsets = std::move(video_offsets);
  s.stage = stage;
  s.edges = temporal_edges(s.positions, s.video_offsets, rule.threshold(stage));
  return s;
}

inline TemporalGraph build_graph(Tensor features, std::vector<double> timestamps, const EdgeRule& rule,
                                 std::vector<std::size_t> video_offsets = {}) {
  if (timestamps.empty()) throw GraphError("build_graph: graph needs at least one node");
  if (features.rank() != 2 || features.rows() != timestamps.size())
    throw GraphError("build_graph: feature rows must match timestamp count");
  for (double x : features.values())
    if (std::isnan(x)) throw GraphError("build_graph: NaN feature");
  if (video_offsets.empty()) video_offsets = {0, timestamps.size()};
  return {std::move(features), make_structure(std::move(timestamps), std::move(video_offsets), rule, 0)};
}

inline TemporalGraph rebuild_edges(const TemporalGraph& g, int level, const EdgeRule& rule) {
  if (level < 0) throw GraphError("rebuild_edges: negative stage");
  TemporalGraph out = g;
  out.structure.stage = level;
  out.structure.edges = temporal_edges(g.structure.positions, g.structure.video_offsets, rule.threshold(level));
  return out;
}

// Differentiable subsampling. Survivors are even local indices per video
// (global even indices for batch-ss); mean/max pool each survivor over its
// closed neighborhood on the pre-drop graph. Edges are rebuilt one level up.
inline StageGraph subsample(const StageGraph& g, Pooling pooling, const EdgeRule& rule) {
  const GraphStructure& s = g.structure;
  const std::size_t n = s.num_nodes();
  if (n == 0) throw GraphError("subsample: empty graph");

  std::vector<std::size_t> survivors;
  std::vector<std::size_t> offsets{0};
  if (pooling == Pooling::BatchSS) {
    for (std::size_t v = 0; v < s.num_videos(); ++v) {
      for (std::size_t i = s.video_offsets[v]; i < s.video_offsets[v + 1]; ++i)
        if (i % 2 == 0) survivors.push_back(i);
      offsets.push_back(survivors.size());
    }
  } else {
    for (std::size_t v = 0; v < s.num_videos(); ++v) {
      if (s.video_size(v) == 0) throw GraphError("subsample: video without nodes");
      for (std::size_t i = s.video_offsets[v]; i < s.video_offsets[v + 1]; i += 2) survivors.push_back(i);
      offsets.push_back(survivors.size());
    }
  }

  std::vector<double> pos(survivors.size());
  for (std::size_t k = 0; k < survivors.size(); ++k) pos[k] = s.positions[survivors[k]];

  Var x;
  if (pooling == Pooling::Mean || pooling == Pooling::Max) {
    std::vector<std::size_t> rank(n, static_cast<std::size_t>(-1));
    for (std::size_t k = 0; k < survivors.size(); ++k) rank[survivors[k]] = k;
    std::vector<std::size_t> members, groups;
    for (std::size_t k = 0; k < survivors.size(); ++k) {
      members.push_back(survivors[k]);
      groups.push_back(k);
    }
    for (const auto& e : s.edges)
      if (rank[e.i] != static_cast<std::size_t>(-1)) {
        members.push_back(e.j);
        groups.push_back(rank[e.i]);
      }
    Var gathered = ops::gather_rows(g.features, std::move(members));
    x = pooling == Pooling::Mean ? ops::scatter_mean_rows(gathered, groups, survivors.size())
                                 : ops::scatter_max_rows(gathered, std::move(groups), survivors.size());
  } else {
    x = ops::gather_rows(g.features, survivors);
  }

  GraphStructure out;
  out.positions = std::move(pos);
  out.video_offsets = std::move(offsets);
  out.stage = s.stage + 1;
  out.edges = temporal_edges(out.positions, out.video_offsets, rule.threshold(out.stage));
  return {x, std::move(out)};
}

inline TemporalGraph subsample(const TemporalGraph& g, Pooling pooling, const EdgeRule& rule) {
  Tape tape;
  StageGraph sg = subsample(StageGraph{tape.constant(g.features), g.structure}, pooling, rule);
  return {sg.features.value(), std::move(sg.structure)};
}

// Concatenate graphs of separate videos into one batch graph.
inline TemporalGraph merge_graphs(const std::vector<TemporalGraph>& parts) {
  if (parts.empty()) throw GraphError("merge_graphs: nothing to merge");
  const std::size_t d = parts.front().features.cols();
  std::size_t total = 0;
  for (const auto& p : parts) total += p.num_nodes();
  TemporalGraph out;
  out.features = Tensor::zeros(total, d);
  out.structure.video_offsets = {0};
  out.structure.stage = parts.front().stage();
  std::size_t base = 0;
  for (const auto& p : parts) {
    if (p.features.cols() != d) throw GraphError("merge_graphs: feature dims differ");
    std::copy(p.features.values().begin(), p.features.values().end(), out.features.values().begin() + base * d);
    out.structure.positions.insert(out.structure.positions.end(), p.positions().begin(), p.positions().end());
    for (std::size_t v = 1; v < p.structure.video_offsets.size(); ++v)
      out.structure.video_offsets.push_back(base + p.structure.video_offsets[v]);
    for (const auto& e : p.edges()) out.structure.edges.push_back({e.i + base, e.j + base});
    base += p.num_nodes();
  }
  std::sort(out.structure.edges.begin(), out.structure.edges.end());
  return out;
}

}  // namespace tgk
