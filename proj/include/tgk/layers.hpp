#pragma once

// Message-passing layers for the temporal backbone: the temporal distance
// gated convolution (TDGC) and the baseline layers it is compared against.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgk/graph.hpp"
#include "tgk/nn.hpp"
#include "tgk/ops.hpp"

namespace tgk {

enum class LayerKind { GCN, GAT, SAGE, SAGE_PE, SGCN, TDGC, TDGC_NoSign, TDGC_NoGate };

inline const std::vector<LayerKind>& all_layer_kinds() {
  static const std::vector<LayerKind> kinds{LayerKind::GCN,  LayerKind::GAT,         LayerKind::SAGE,
                                            LayerKind::SAGE_PE, LayerKind::SGCN,     LayerKind::TDGC,
                                            LayerKind::TDGC_NoSign, LayerKind::TDGC_NoGate};
  return kinds;
}

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::GCN: return "GCN";
    case LayerKind::GAT: return "GAT";
    case LayerKind::SAGE: return "SAGE";
    case LayerKind::SAGE_PE: return "SAGE+PE";
    case LayerKind::SGCN: return "SGCN";
    case LayerKind::TDGC: return "TDGC";
    case LayerKind::TDGC_NoSign: return "TDGC w/o s_ij";
    case LayerKind::TDGC_NoGate: return "TDGC w/o w_ij";
  }
  return "?";
}

inline LayerKind layer_kind_from_name(const std::string& s) {
  for (auto k : all_layer_kinds())
    if (s == layer_kind_name(k)) return k;
  if (s == "TDGC-nosign") return LayerKind::TDGC_NoSign;
  if (s == "TDGC-nogate") return LayerKind::TDGC_NoGate;
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

inline bool is_tdgc(LayerKind k) {
  return k == LayerKind::TDGC || k == LayerKind::TDGC_NoSign || k == LayerKind::TDGC_NoGate;
}

inline int temporal_sign(double pe_i, double pe_j) { return (pe_i > pe_j) - (pe_i < pe_j); }

// Standard sine/cosine encoding: channel 2k = sin(p w_k), 2k+1 = cos(p w_k),
// w_k = 10000^(-2k/D).
inline Tensor sinusoidal_pe(const std::vector<double>& positions, std::size_t dim) {
  if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_pe: dimension must be even");
  Tensor out = Tensor::zeros(positions.size(), dim);
  for (std::size_t n = 0; n < positions.size(); ++n)
    for (std::size_t k = 0; k < dim / 2; ++k) {
      const double w = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
      out(n, 2 * k) = std::sin(positions[n] * w);
      out(n, 2 * k + 1) = std::cos(positions[n] * w);
    }
  return out;
}

struct TdgcOptions {
  bool use_sign = true;  // false: s_ij replaced by +1
  bool use_gate = true;  // false: w_ij replaced by all-ones
};

// x_i' = W_r^T x_i + b_r + mean_j s_ij (w_ij * relu(W_n^T x_j + b_n)),
// w_ij = relu(gate(|pe_i - pe_j|)).
struct TdgcParams {
  Linear neighbor;           // W_n, b_n
  Linear root;               // W_r, b_r
  std::vector<Linear> gate;  // 1 -> D, then optional D -> D hidden layers
  TdgcOptions options;

  TdgcParams() = default;
  TdgcParams(const std::string& name, std::size_t dim, Rng& rng, int gate_hidden = 0, TdgcOptions opts = {})
      : neighbor(name + ".neighbor", dim, dim, rng), root(name + ".root", dim, dim, rng), options(opts) {
    gate.emplace_back(name + ".gate.0", 1, dim, rng);
    for (int h = 0; h < gate_hidden; ++h) gate.emplace_back(name + ".gate." + std::to_string(h + 1), dim, dim, rng);
  }

  std::size_t dim() const { return root.in_dim(); }

  void collect(ParamList& out) {
    neighbor.collect(out);
    root.collect(out);
    if (options.use_gate)
      for (auto& g : gate) g.collect(out);
  }
};

inline Var distance_gate(Tape& t, TdgcParams& p, const Var& dist_col) {
  Var h = dist_col;
  for (auto& layer : p.gate) h = ops::relu(layer(t, h));
  return h;
}

inline Tensor distance_gate(TdgcParams& p, double dist) {
  if (!(dist >= 0.0)) throw std::invalid_argument("distance_gate: distance must be non-negative");
  Tape t;
  return distance_gate(t, p, t.constant(Tensor::scalar(dist))).value();
}

inline Var tdgc_forward(Tape& t, const Var& x, const GraphStructure& s, TdgcParams& p) {
  if (x.cols() != p.dim()) throw ShapeError("tdgc_forward: feature dim does not match parameters");
  if (x.rows() != s.num_nodes()) throw ShapeError("tdgc_forward: feature rows do not match graph");
  Var out = p.root(t, x);
  if (s.edges.empty()) return out;
  Var h = ops::relu(p.neighbor(t, x));
  Var msg = ops::gather_rows(h, s.edge_neighbors());
  if (p.options.use_gate) {
    std::vector<double> dist(s.edges.size());
    for (std::size_t e = 0; e < s.edges.size(); ++e)
      dist[e] = std::abs(s.positions[s.edges[e].i] - s.positions[s.edges[e].j]);
    msg = ops::mul(msg, distance_gate(t, p, t.constant(Tensor::column(dist))));
  }
  if (p.options.use_sign) {
    std::vector<double> sign(s.edges.size());
    for (std::size_t e = 0; e < s.edges.size(); ++e)
      sign[e] = temporal_sign(s.positions[s.edges[e].i], s.positions[s.edges[e].j]);
    msg = ops::scale_rows(msg, std::move(sign));
  }
  return ops::add(out, ops::scatter_mean_rows(msg, s.edge_roots(), s.num_nodes()));
}

inline Tensor tdgc_forward(const TemporalGraph& g, TdgcParams& p) {
  Tape t;
  return tdgc_forward(t, t.constant(g.features), g.structure, p).value();
}

// Parameters for the comparison layers. Unused members stay empty.
struct BaselineLayerParams {
  LayerKind variant = LayerKind::SAGE;
  Linear root;      // SAGE root
  Linear neighbor;  // SAGE neighbor; GCN/GAT projection; SGCN past projection
  Linear future;    // SGCN future projection
  Parameter bias;   // GCN/GAT/SGCN output bias
  Parameter att_src, att_dst;  // GAT attention vectors (D x 1)
  double leaky_slope = 0.2;

  BaselineLayerParams() = default;
  BaselineLayerParams(const std::string& name, LayerKind kind, std::size_t dim, Rng& rng) : variant(kind) {
    switch (kind) {
      case LayerKind::SAGE:
      case LayerKind::SAGE_PE:
        root = Linear(name + ".root", dim, dim, rng);
        neighbor = Linear(name + ".neighbor", dim, dim, rng);
        break;
      case LayerKind::GCN:
        neighbor = Linear(name + ".weight", dim, dim, rng, false);
        bias = Parameter(name + ".bias", fan_in_uniform(dim, 1, dim, rng));
        break;
      case LayerKind::SGCN:
        neighbor = Linear(name + ".past", dim, dim, rng, false);
        future = Linear(name + ".future", dim, dim, rng, false);
        bias = Parameter(name + ".bias", fan_in_uniform(dim, 1, dim, rng));
        break;
      case LayerKind::GAT:
        neighbor = Linear(name + ".weight", dim, dim, rng, false);
        att_src = Parameter(name + ".att_src", fan_in_uniform(dim, dim, 1, rng));
        att_dst = Parameter(name + ".att_dst", fan_in_uniform(dim, dim, 1, rng));
        bias = Parameter(name + ".bias", fan_in_uniform(dim, 1, dim, rng));
        break;
      default: throw std::invalid_argument("BaselineLayerParams: TDGC variants use TdgcParams");
    }
  }

  std::size_t dim() const { return neighbor.in_dim(); }

  void collect(ParamList& out) {
    switch (variant) {
      case LayerKind::SAGE:
      case LayerKind::SAGE_PE:
        root.collect(out);
        neighbor.collect(out);
        break;
      case LayerKind::GCN:
        neighbor.collect(out);
        out.push_back(&bias);
        break;
      case LayerKind::SGCN:
        neighbor.collect(out);
        future.collect(out);
        out.push_back(&bias);
        break;
      case LayerKind::GAT:
        neighbor.collect(out);
        out.push_back(&att_src);
        out.push_back(&att_dst);
        out.push_back(&bias);
        break;
      default: break;
    }
  }
};

namespace detail {

// Structure with a self-loop per node appended after the temporal edges.
inline std::vector<Edge> with_self_loops(const GraphStructure& s) {
  std::vector<Edge> e = s.edges;
  for (std::size_t n = 0; n < s.num_nodes(); ++n) e.push_back({n, n});
  return e;
}

// Symmetric normalization 1/sqrt(d_i d_j) with self-loops counted in degree.
inline std::vector<double> gcn_coefficients(const std::vector<Edge>& edges, std::size_t n) {
  std::vector<double> deg(n, 0.0);
  for (const auto& e : edges) deg[e.i] += 1.0;
  std::vector<double> c(edges.size());
  for (std::size_t k = 0; k < edges.size(); ++k) c[k] = 1.0 / std::sqrt(deg[edges[k].i] * deg[edges[k].j]);
  return c;
}

inline std::vector<std::size_t> roots_of(const std::vector<Edge>& edges) {
  std::vector<std::size_t> r(edges.size());
  for (std::size_t k = 0; k < edges.size(); ++k) r[k] = edges[k].i;
  return r;
}
inline std::vector<std::size_t> neighbors_of(const std::vector<Edge>& edges) {
  std::vector<std::size_t> r(edges.size());
  for (std::size_t k = 0; k < edges.size(); ++k) r[k] = edges[k].j;
  return r;
}

}  // namespace detail

// GCN:  relu(sum_{j in N(i)+i} c_ij x_j W + b)
// GAT:  relu(sum_{j in N(i)+i} a_ij x_j W + b), single head, LeakyReLU(0.2) scores
// SAGE: x_i W_r + b_r + mean_j relu(x_j W_n + b_n)
// SGCN: GCN with separate projections for past (pe_j <= pe_i) and future neighbors.
// SAGE+PE adds the sinusoidal encoding to the input when `add_position_encoding`.
inline Var baseline_forward(Tape& t, Var x, const GraphStructure& s, BaselineLayerParams& p,
                            bool add_position_encoding) {
  if (x.cols() != p.dim()) throw ShapeError("baseline_forward: feature dim does not match parameters");
  if (x.rows() != s.num_nodes()) throw ShapeError("baseline_forward: feature rows do not match graph");
  const std::size_t n = s.num_nodes();
  switch (p.variant) {
    case LayerKind::SAGE_PE:
      if (add_position_encoding) x = ops::add(x, t.constant(sinusoidal_pe(s.positions, x.cols())));
      [[fallthrough]];
    case LayerKind::SAGE: {
      Var out = p.root(t, x);
      if (s.edges.empty()) return out;
      Var h = ops::relu(p.neighbor(t, x));
      return ops::add(out, ops::scatter_mean_rows(ops::gather_rows(h, s.edge_neighbors()), s.edge_roots(), n));
    }
    case LayerKind::GCN: {
      auto edges = detail::with_self_loops(s);
      Var h = p.neighbor(t, x);
      Var msg = ops::scale_rows(ops::gather_rows(h, detail::neighbors_of(edges)), detail::gcn_coefficients(edges, n));
      return ops::relu(ops::add_row(ops::scatter_sum_rows(msg, detail::roots_of(edges), n), t.param(p.bias)));
    }
    case LayerKind::SGCN: {
      auto edges = detail::with_self_loops(s);
      auto coeff = detail::gcn_coefficients(edges, n);
      std::vector<Edge> past, future;
      std::vector<double> cp, cf;
      for (std::size_t k = 0; k < edges.size(); ++k) {
        if (temporal_sign(s.positions[edges[k].i], s.positions[edges[k].j]) >= 0) {
          past.push_back(edges[k]);
          cp.push_back(coeff[k]);
        } else {
          future.push_back(edges[k]);
          cf.push_back(coeff[k]);
        }
      }
      Var agg = ops::scatter_sum_rows(
          ops::scale_rows(ops::gather_rows(p.neighbor(t, x), detail::neighbors_of(past)), std::move(cp)),
          detail::roots_of(past), n);
      if (!future.empty())
        agg = ops::add(agg, ops::scatter_sum_rows(ops::scale_rows(ops::gather_rows(p.future(t, x),
                                                                                   detail::neighbors_of(future)),
                                                                  std::move(cf)),
                                                  detail::roots_of(future), n));
      return ops::relu(ops::add_row(agg, t.param(p.bias)));
    }
    case LayerKind::GAT: {
      auto edges = detail::with_self_loops(s);
      auto roots = detail::roots_of(edges);
      auto nbrs = detail::neighbors_of(edges);
      Var h = p.neighbor(t, x);
      Var sd = ops::gather_rows(ops::matmul(h, t.param(p.att_dst)), roots);
      Var ss = ops::gather_rows(ops::matmul(h, t.param(p.att_src)), nbrs);
      Var alpha = ops::segment_softmax(ops::leaky_relu(ops::add(sd, ss), p.leaky_slope), roots, n);
      Var msg = ops::mul_col(ops::gather_rows(h, nbrs), alpha);
      return ops::relu(ops::add_row(ops::scatter_sum_rows(msg, roots, n), t.param(p.bias)));
    }
    default: throw std::invalid_argument("baseline_forward: not a baseline variant");
  }
}

inline Tensor baseline_forward(const TemporalGraph& g, BaselineLayerParams& p) {
  Tape t;
  return baseline_forward(t, t.constant(g.features), g.structure, p, true).value();
}

// One backbone layer of any kind.
struct GnnLayer {
  LayerKind kind = LayerKind::TDGC;
  TdgcParams tdgc;
  BaselineLayerParams baseline;

  GnnLayer() = default;
  GnnLayer(const std::string& name, LayerKind k, std::size_t dim, Rng& rng, int gate_hidden = 0) : kind(k) {
    if (is_tdgc(k)) {
      TdgcOptions opts;
      opts.use_sign = k != LayerKind::TDGC_NoSign;
      opts.use_gate = k != LayerKind::TDGC_NoGate;
      tdgc = TdgcParams(name, dim, rng, gate_hidden, opts);
    } else {
      baseline = BaselineLayerParams(name, k, dim, rng);
    }
  }

  Var forward(Tape& t, const Var& x, const GraphStructure& s, bool stage_input) {
    return is_tdgc(kind) ? tdgc_forward(t, x, s, tdgc) : baseline_forward(t, x, s, baseline, stage_input);
  }

  void collect(ParamList& out) {
    if (is_tdgc(kind))
      tdgc.collect(out);
    else
      baseline.collect(out);
  }
};

}  // namespace tgk
