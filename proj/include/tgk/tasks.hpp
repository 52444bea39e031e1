#pragma once

// Task necks, temporal alignment, heads and losses.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tgk/graph.hpp"
#include "tgk/layers.hpp"
#include "tgk/nn.hpp"

namespace tgk {

struct AnnotatedSegment {
  double start = 0.0;
  double end = 0.0;
  int label = 0;    // verb / class id
  int label2 = -1;  // noun id when the task has a label pair

  void validate() const {
    if (!(start < end)) throw std::invalid_argument("segment: start must be before end");
  }
};

struct SegmentPrediction {
  double start = 0.0;
  double end = 0.0;
  int label = 0;
  double score = 0.0;
};

// Two affine layers D -> D with ReLU between; shared by every stage.
struct TaskNeck {
  Mlp2 mlp;

  TaskNeck() = default;
  TaskNeck(const std::string& name, std::size_t dim, Rng& rng) : mlp(name, dim, dim, dim, rng) {}

  std::size_t dim() const { return mlp.first.in_dim(); }
  Var operator()(Tape& t, const Var& x) { return mlp(t, x); }
  void collect(ParamList& out) { mlp.collect(out); }
};

inline Tensor neck_apply(TaskNeck& neck, const TemporalGraph& g) {
  if (g.features.cols() != neck.dim()) throw ShapeError("neck_apply: feature dim does not match neck");
  Tape t;
  return neck(t, t.constant(g.features)).value();
}

// Rows selected to represent a segment within the node range [begin, end).
struct AlignSelection {
  std::vector<std::size_t> rows;
  bool fallback = false;
};

// Nodes strictly inside (start, end); if none, the node nearest the midpoint.
inline AlignSelection align_rows(const std::vector<double>& positions, const AnnotatedSegment& seg,
                                 std::size_t begin = 0, std::size_t end = std::numeric_limits<std::size_t>::max()) {
  end = std::min(end, positions.size());
  if (begin >= end) throw std::invalid_argument("align: empty node range");
  AlignSelection sel;
  for (std::size_t n = begin; n < end; ++n)
    if (seg.start < positions[n] && positions[n] < seg.end) sel.rows.push_back(n);
  if (sel.rows.empty()) {
    const double mid = 0.5 * (seg.start + seg.end);
    std::size_t best = begin;
    for (std::size_t n = begin + 1; n < end; ++n)
      if (std::abs(positions[n] - mid) < std::abs(positions[best] - mid)) best = n;
    sel.rows = {best};
    sel.fallback = true;
  }
  return sel;
}

struct AlignItem {
  AnnotatedSegment segment;
  std::size_t video = 0;
};

// One aligned feature row per item; `fallbacks` (optional) receives the flags.
inline Var align_batch(const Var& features, const GraphStructure& s, const std::vector<AlignItem>& items,
                       std::vector<bool>* fallbacks = nullptr) {
  if (features.rows() != s.num_nodes()) throw ShapeError("align: feature rows do not match graph");
  if (items.empty()) throw std::invalid_argument("align: no segments");
  std::vector<std::size_t> rows, bucket;
  if (fallbacks) fallbacks->assign(items.size(), false);
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& it = items[k];
    if (it.video >= s.num_videos()) throw std::out_of_range("align: video index out of range");
    auto sel = align_rows(s.positions, it.segment, s.video_offsets[it.video], s.video_offsets[it.video + 1]);
    if (fallbacks) (*fallbacks)[k] = sel.fallback;
    for (auto r : sel.rows) {
      rows.push_back(r);
      bucket.push_back(k);
    }
  }
  return ops::scatter_mean_rows(ops::gather_rows(features, std::move(rows)), bucket, items.size());
}

inline Tensor align(const Tensor& features, const std::vector<double>& positions, const AnnotatedSegment& seg,
                    bool* fallback = nullptr) {
  if (features.rows() != positions.size()) throw ShapeError("align: feature rows do not match positions");
  auto sel = align_rows(positions, seg);
  if (fallback) *fallback = sel.fallback;
  Tensor out = Tensor::zeros(1, features.cols());
  for (auto r : sel.rows)
    for (std::size_t c = 0; c < features.cols(); ++c) out[c] += features(r, c);
  for (auto& v : out.values()) v /= static_cast<double>(sel.rows.size());
  return out;
}

// ---- heads ---------------------------------------------------------------

// Future graph of Z nodes per context (positions 1..Z, fully connected),
// two TDGC layers, then verb and noun classifiers per node.
struct LtaHead {
  TdgcParams g1, g2;
  Linear verb, noun;

  LtaHead() = default;
  LtaHead(const std::string& name, std::size_t dim, std::size_t verbs, std::size_t nouns, Rng& rng)
      : g1(name + ".tdgc0", dim, rng),
        g2(name + ".tdgc1", dim, rng),
        verb(name + ".verb", dim, verbs, rng),
        noun(name + ".noun", dim, nouns, rng) {}

  void collect(ParamList& out) {
    g1.collect(out);
    g2.collect(out);
    verb.collect(out);
    noun.collect(out);
  }
};

inline GraphStructure future_graph(std::size_t contexts, int Z) {
  if (Z < 1) throw std::invalid_argument("lta: Z must be at least 1");
  std::vector<double> pos;
  std::vector<std::size_t> offsets{0};
  for (std::size_t b = 0; b < contexts; ++b) {
    for (int z = 1; z <= Z; ++z) pos.push_back(z);
    offsets.push_back(pos.size());
  }
  return make_structure(std::move(pos), std::move(offsets), EdgeRule{static_cast<double>(Z) + 1.0}, 0);
}

struct LtaLogits {
  Var verb;  // (B*Z) x V, rows grouped per context
  Var noun;
};

inline LtaLogits lta_head_forward(Tape& t, const Var& contexts, LtaHead& head, int Z) {
  auto s = future_graph(contexts.rows(), Z);
  std::vector<std::size_t> rep;
  for (std::size_t b = 0; b < contexts.rows(); ++b)
    for (int z = 0; z < Z; ++z) rep.push_back(b);
  Var x = ops::gather_rows(contexts, std::move(rep));
  x = tdgc_forward(t, x, s, head.g1);
  x = tdgc_forward(t, x, s, head.g2);
  return {head.verb(t, x), head.noun(t, x)};
}

// Per-node class logits and two non-negative boundary offsets scaled by 2^(l-1).
struct MqHead {
  Linear cls, reg;

  MqHead() = default;
  MqHead(const std::string& name, std::size_t dim, std::size_t classes, Rng& rng)
      : cls(name + ".cls", dim, classes, rng), reg(name + ".reg", dim, 2, rng) {}

  void collect(ParamList& out) {
    cls.collect(out);
    reg.collect(out);
  }
};

inline double stage_scale(int stage_index) { return std::ldexp(1.0, stage_index - 1); }

struct MqRaw {
  Var logits;   // N x C
  Var offsets;  // N x 2, seconds (d_s, d_e)
};

inline MqRaw mq_head_forward(Tape& t, const Var& x, MqHead& head, int stage_index) {
  return {head.cls(t, x), ops::scale(ops::softplus(head.reg(t, x)), stage_scale(stage_index))};
}

struct MqStageOutput {
  Tensor scores;   // N x C in [0,1]
  Tensor offsets;  // N x 2, non-negative seconds
  GraphStructure structure;
};

// Every (node, class) pair becomes a candidate [pe - d_s, pe + d_e] clamped to
// its video's extent; degenerate segments are dropped. Result is per video.
inline std::vector<std::vector<SegmentPrediction>> mq_decode(const std::vector<MqStageOutput>& stages,
                                                             const std::vector<std::pair<double, double>>& extents,
                                                             double min_score = 0.0) {
  std::vector<std::vector<SegmentPrediction>> out(extents.size());
  for (const auto& st : stages) {
    const auto& s = st.structure;
    if (s.num_videos() != extents.size()) throw std::invalid_argument("mq_decode: extent count mismatch");
    if (st.scores.rows() != s.num_nodes() || st.offsets.rows() != s.num_nodes() || st.offsets.cols() != 2)
      throw ShapeError("mq_decode: stage output shape mismatch");
    for (std::size_t v = 0; v < s.num_videos(); ++v)
      for (std::size_t n = s.video_offsets[v]; n < s.video_offsets[v + 1]; ++n) {
        const double pe = s.positions[n];
        const double a = std::max(extents[v].first, pe - st.offsets(n, 0));
        const double b = std::min(extents[v].second, pe + st.offsets(n, 1));
        if (!(a < b)) continue;
        for (std::size_t c = 0; c < st.scores.cols(); ++c) {
          const double sc = st.scores(n, c);
          if (sc < min_score) continue;
          out[v].push_back({a, b, static_cast<int>(c), sc});
        }
      }
  }
  return out;
}

// Supervision for one stage: a node strictly inside a ground-truth segment is
// positive for that segment's class with the true offsets as regression
// target. A node inside several segments takes the shortest.
struct MqTargets {
  Tensor cls;                              // N x C, 0/1
  std::vector<std::size_t> positive_rows;  // rows with a regression target
  Tensor offsets;                          // P x 2 seconds, aligned with positive_rows
};

inline MqTargets mq_targets(const GraphStructure& s, const std::vector<std::vector<AnnotatedSegment>>& gts,
                            std::size_t classes) {
  if (gts.size() != s.num_videos()) throw std::invalid_argument("mq_targets: one segment list per video required");
  MqTargets t;
  t.cls = Tensor::zeros(s.num_nodes(), classes);
  std::vector<double> offs;
  for (std::size_t v = 0; v < s.num_videos(); ++v)
    for (std::size_t n = s.video_offsets[v]; n < s.video_offsets[v + 1]; ++n) {
      const double pe = s.positions[n];
      const AnnotatedSegment* best = nullptr;
      for (const auto& g : gts[v]) {
        if (g.label < 0 || static_cast<std::size_t>(g.label) >= classes)
          throw std::out_of_range("mq_targets: label out of range");
        if (g.start < pe && pe < g.end && (!best || g.end - g.start < best->end - best->start)) best = &g;
      }
      if (!best) continue;
      t.cls(n, static_cast<std::size_t>(best->label)) = 1.0;
      t.positive_rows.push_back(n);
      offs.push_back(pe - best->start);
      offs.push_back(best->end - pe);
    }
  t.offsets = Tensor({t.positive_rows.size(), 2}, std::move(offs));
  return t;
}

// ---- losses --------------------------------------------------------------

// Mean negative log-likelihood over rows.
inline Var cross_entropy_loss(const Var& logits, const std::vector<int>& labels) {
  if (labels.size() != logits.rows()) throw ShapeError("cross_entropy: label count does not match rows");
  Tensor onehot = Tensor::zeros(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= logits.cols())
      throw std::out_of_range("cross_entropy: label out of range");
    onehot(r, static_cast<std::size_t>(labels[r])) = 1.0;
  }
  Tape& t = *logits.tape();
  return ops::scale(ops::sum(ops::mul(ops::log_softmax(logits), t.constant(onehot))),
                    -1.0 / static_cast<double>(labels.size()));
}

// Mean binary cross-entropy on logits: softplus(z) - y z.
inline Var bce_loss(const Var& logits, const std::vector<double>& bits) {
  if (bits.size() != logits.value().numel()) throw ShapeError("bce: target count does not match logits");
  for (double b : bits)
    if (b != 0.0 && b != 1.0) throw std::out_of_range("bce: targets must be 0 or 1");
  Tape& t = *logits.tape();
  Tensor y({logits.rows(), logits.cols()}, bits);
  return ops::scale(ops::sum(ops::sub(ops::softplus(logits), ops::mul(logits, t.constant(y)))),
                    1.0 / static_cast<double>(bits.size()));
}

inline constexpr double kFocalEps = 1e-7;

inline double focal_loss(double prob, int target, double gamma = 2.0, double alpha = 0.25) {
  const double p = std::clamp(prob, kFocalEps, 1.0 - kFocalEps);
  return target ? -alpha * std::pow(1.0 - p, gamma) * std::log(p)
                : -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

// Summed focal loss over all entries of `prob` against 0/1 `targets`.
inline Var focal_loss_sum(const Var& prob, const Tensor& targets, double gamma = 2.0, double alpha = 0.25) {
  if (!prob.value().same_shape(targets)) throw ShapeError("focal: target shape mismatch");
  Tape& t = *prob.tape();
  Var p = ops::clamp(prob, kFocalEps, 1.0 - kFocalEps);
  Var q = ops::add_scalar(ops::scale(p, -1.0), 1.0);
  Tensor neg = targets;
  for (auto& v : neg.values()) v = 1.0 - v;
  Var pos_term = ops::mul(ops::mul(ops::pow_scalar(q, gamma), ops::log(p)), t.constant(targets));
  Var neg_term = ops::mul(ops::mul(ops::pow_scalar(p, gamma), ops::log(q)), t.constant(neg));
  return ops::add(ops::scale(ops::sum(pos_term), -alpha), ops::scale(ops::sum(neg_term), -(1.0 - alpha)));
}

// 1 - IoU + (center distance / enclosing span)^2.
inline double diou_loss_1d(std::pair<double, double> pred, std::pair<double, double> gt) {
  if (!(pred.first < pred.second) || !(gt.first < gt.second))
    throw std::invalid_argument("diou: degenerate interval");
  const double inter = std::max(0.0, std::min(pred.second, gt.second) - std::max(pred.first, gt.first));
  const double uni = (pred.second - pred.first) + (gt.second - gt.first) - inter;
  const double enc = std::max(pred.second, gt.second) - std::min(pred.first, gt.first);
  const double dc = 0.5 * (pred.first + pred.second) - 0.5 * (gt.first + gt.second);
  return 1.0 - inter / uni + (dc * dc) / (enc * enc);
}

// Summed DIoU over rows of offset pairs sharing an anchor: pred and target are
// M x 2 (d_s, d_e) around the same node position.
inline Var diou_loss_offsets(const Var& pred, const Tensor& target) {
  if (pred.cols() != 2 || !pred.value().same_shape(target)) throw ShapeError("diou: offsets must be M x 2");
  for (std::size_t r = 0; r < target.rows(); ++r)
    if (!(target(r, 0) + target(r, 1) > 0.0)) throw std::invalid_argument("diou: degenerate target");
  Tape& t = *pred.tape();
  Var g = t.constant(target);
  Var ds = ops::slice_cols(pred, 0, 1), de = ops::slice_cols(pred, 1, 2);
  Var gs = ops::slice_cols(g, 0, 1), ge = ops::slice_cols(g, 1, 2);
  Var inter = ops::add(ops::minimum(ds, gs), ops::minimum(de, ge));
  Var uni = ops::sub(ops::add(ops::add(ds, de), ops::add(gs, ge)), inter);
  Var enc = ops::add(ops::maximum(ds, gs), ops::maximum(de, ge));
  Var dc = ops::scale(ops::sub(ops::sub(de, ds), ops::sub(ge, gs)), 0.5);
  Var per_row = ops::add(ops::sub(t.constant(Tensor::full(target.rows(), 1, 1.0)), ops::div(inter, uni)),
                         ops::div(ops::square(dc), ops::square(enc)));
  return ops::sum(per_row);
}

}  // namespace tgk
