#pragma once

// Task branches, batched forward passes, losses and predictions shared by
// every training mode.

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgk/egopack.hpp"
#include "tgk/eval.hpp"
#include "tgk/harness/dataset.hpp"
#include "tgk/hierarchy.hpp"
#include "tgk/tasks.hpp"

namespace tgk {

class PhaseSeparationError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Records which task annotations were read and rejects the rest.
class AnnotationGuard {
 public:
  AnnotationGuard() = default;
  explicit AnnotationGuard(std::vector<Task> allowed) : allowed_(allowed.begin(), allowed.end()), restricted_(true) {}

  void check(Task t) {
    if (restricted_ && !allowed_.count(t))
      throw PhaseSeparationError(std::string("annotation access to ") + task_name(t) + " is not allowed here");
    read_.insert(t);
  }
  const std::set<Task>& read() const { return read_; }

 private:
  std::set<Task> allowed_;
  std::set<Task> read_;
  bool restricted_ = false;
};

// One graph input with its annotations in the unit's own time frame.
struct Unit {
  const Tensor* source = nullptr;
  std::size_t rows = 0;  // leading rows of `source` that are visible
  double origin = 0.0;   // node i sits at origin + i + 0.5
  double duration = 0.0;
  std::vector<AnnotatedSegment> ar;    // label verb, label2 noun
  std::vector<AnnotatedSegment> oscc;  // label = changed
  std::vector<std::pair<AnnotatedSegment, double>> pnr;
  std::vector<AnnotatedSegment> mq;
  bool has_lta = false;
  AnnotatedSegment lta_context;
  std::vector<int> lta_verbs, lta_nouns;
  int order_label = -1;
};

// full[v] carries AR/OSCC/PNR/MQ of video v; prefix[v] (if any) the LTA
// sample of video v cut at its observation point; windows are ORDER inputs.
struct UnitSet {
  std::vector<Unit> full;
  std::vector<int> prefix_of;  // index into prefix or -1
  std::vector<Unit> prefix;
  std::vector<Unit> windows;
};

inline bool needs_full_graph(Task t) { return t == Task::AR || t == Task::OSCC || t == Task::PNR || t == Task::MQ; }

inline UnitSet build_units(const Split& s, const std::vector<Task>& tasks, AnnotationGuard& guard) {
  UnitSet u;
  for (const auto& v : s.videos) {
    Unit x;
    x.source = &v.features;
    x.rows = v.features.rows();
    x.duration = v.duration;
    u.full.push_back(std::move(x));
  }
  u.prefix_of.assign(s.videos.size(), -1);
  for (Task t : tasks) {
    guard.check(t);
    switch (t) {
      case Task::AR:
        for (const auto& a : s.ar) u.full[a.video].ar.push_back(a.segment);
        break;
      case Task::OSCC:
        for (const auto& a : s.oscc) {
          auto seg = a.segment;
          seg.label = a.changed;
          u.full[a.video].oscc.push_back(seg);
        }
        break;
      case Task::PNR:
        for (const auto& a : s.pnr) u.full[a.video].pnr.push_back({a.segment, a.pnr_time});
        break;
      case Task::MQ:
        for (std::size_t v = 0; v < s.mq.size(); ++v) u.full[v].mq = s.mq[v];
        break;
      case Task::LTA:
        for (const auto& a : s.lta) {
          Unit p;
          p.source = &s.videos[a.video].features;
          p.rows = static_cast<std::size_t>(a.cut_time);
          p.duration = a.cut_time;
          p.has_lta = true;
          p.lta_context = a.context;
          p.lta_verbs = a.future_verbs;
          p.lta_nouns = a.future_nouns;
          u.prefix_of[a.video] = static_cast<int>(u.prefix.size());
          u.prefix.push_back(std::move(p));
        }
        break;
      case Task::ORDER:
        for (const auto& w : s.order) {
          Unit x;
          x.source = &w.video.features;
          x.rows = w.video.features.rows();
          x.duration = w.video.duration;
          x.origin = w.origin;
          x.order_label = w.label;
          u.windows.push_back(std::move(x));
        }
        break;
    }
  }
  return u;
}

struct ModelDims {
  std::size_t dim = 32;
  int verbs = 8;
  int nouns = 6;
  int lta_z = 4;
};

// Neck plus the output head(s) of one task.
struct TaskBranch {
  Task task = Task::AR;
  TaskNeck neck;
  Linear verb, noun;  // AR
  Linear binary;      // OSCC, ORDER
  Linear score;       // PNR
  LtaHead lta;
  MqHead mq;

  TaskBranch() = default;
  TaskBranch(const std::string& name, Task t, const ModelDims& d, Rng& rng) : task(t), neck(name + ".neck", d.dim, rng) {
    init_head(name, d, rng);
  }

  void init_head(const std::string& name, const ModelDims& d, Rng& rng) {
    const auto V = static_cast<std::size_t>(d.verbs), N = static_cast<std::size_t>(d.nouns);
    switch (task) {
      case Task::AR:
        verb = Linear(name + ".verb", d.dim, V, rng);
        noun = Linear(name + ".noun", d.dim, N, rng);
        break;
      case Task::OSCC:
      case Task::ORDER: binary = Linear(name + ".cls", d.dim, 2, rng); break;
      case Task::PNR: score = Linear(name + ".score", d.dim, 1, rng); break;
      case Task::LTA: lta = LtaHead(name + ".lta", d.dim, V, N, rng); break;
      case Task::MQ: mq = MqHead(name + ".mq", d.dim, V, rng); break;
    }
  }

  void collect_head(ParamList& out) {
    switch (task) {
      case Task::AR:
        verb.collect(out);
        noun.collect(out);
        break;
      case Task::OSCC:
      case Task::ORDER: binary.collect(out); break;
      case Task::PNR: score.collect(out); break;
      case Task::LTA: lta.collect(out); break;
      case Task::MQ: mq.collect(out); break;
    }
  }
  void collect(ParamList& out) {
    neck.collect(out);
    collect_head(out);
  }
};

// Output blocks of a head for readout block `block` (MQ: block b is stage b+1).
inline std::vector<Var> apply_head(Tape& t, TaskBranch& br, const Var& x, std::size_t block, int lta_z) {
  switch (br.task) {
    case Task::AR: return {br.verb(t, x), br.noun(t, x)};
    case Task::OSCC:
    case Task::ORDER: return {br.binary(t, x)};
    case Task::PNR: return {br.score(t, x)};
    case Task::LTA: {
      auto l = lta_head_forward(t, x, br.lta, lta_z);
      return {l.verb, l.noun};
    }
    case Task::MQ: {
      auto r = mq_head_forward(t, x, br.mq, static_cast<int>(block) + 1);
      return {r.logits, r.offsets};
    }
  }
  return {};
}

inline HeadFn head_fn(Tape& t, TaskBranch& br, std::size_t block, int lta_z) {
  return [&t, &br, block, lta_z](const Var& x) { return apply_head(t, br, x, block, lta_z); };
}

// ---- batched forward ---------------------------------------------------------

struct GroupForward {
  std::vector<const Unit*> units;
  std::vector<StageOutput> stages;
};

inline StageGraph group_input(Tape& t, const std::vector<const Unit*>& units, const EdgeRule& rule) {
  if (units.empty()) throw std::invalid_argument("group_input: empty batch");
  const std::size_t d = units.front()->source->cols();
  std::size_t total = 0;
  for (auto* u : units) total += u->rows;
  Tensor x = Tensor::zeros(total, d);
  std::vector<double> pos;
  std::vector<std::size_t> offsets{0};
  std::size_t r = 0;
  for (auto* u : units) {
    for (std::size_t i = 0; i < u->rows; ++i, ++r) {
      for (std::size_t c = 0; c < d; ++c) x(r, c) = (*u->source)(i, c);
      pos.push_back(u->origin + static_cast<double>(i) + 0.5);
    }
    offsets.push_back(r);
  }
  return {t.constant(std::move(x)), make_structure(std::move(pos), std::move(offsets), rule, 0)};
}

inline GroupForward forward_group(Tape& t, const std::vector<const Unit*>& units, const BackboneConfig& cfg,
                                  BackboneParams& backbone, bool frozen = false) {
  GroupForward g;
  g.units = units;
  ScopeGuard scope(t, "backbone");
  g.stages = backbone_forward(t, group_input(t, units, cfg.edge_rule), cfg, backbone);
  if (frozen)
    for (auto& s : g.stages) s.graph.features = ops::detach(s.graph.features);
  return g;
}

// Samples and targets of one task inside a forward group.
struct ReadoutPlan {
  Task task = Task::AR;
  std::vector<AlignItem> items;     // AR, OSCC, LTA, ORDER
  std::vector<int> labels, labels2;  // verb/noun, or class bit
  std::vector<std::vector<int>> future_verbs, future_nouns;
  std::vector<std::size_t> pnr_rows;    // stage-1 rows, grouped per sample
  std::vector<std::size_t> pnr_bounds;  // sample k owns [bounds[k], bounds[k+1])
  std::vector<double> pnr_bits, pnr_gt;
  std::vector<std::vector<AnnotatedSegment>> mq_gts;  // per unit
  std::vector<std::pair<double, double>> extents;     // per unit

  std::size_t samples() const {
    switch (task) {
      case Task::PNR: return pnr_gt.size();
      case Task::MQ: {
        std::size_t n = 0;
        for (const auto& g : mq_gts) n += g.size();
        return n;
      }
      default: return items.size();
    }
  }
};

inline ReadoutPlan plan_readout(const GroupForward& g, Task task) {
  ReadoutPlan p;
  p.task = task;
  const auto& s1 = g.stages.front().graph.structure;
  for (std::size_t b = 0; b < g.units.size(); ++b) {
    const Unit& u = *g.units[b];
    switch (task) {
      case Task::AR:
        for (const auto& a : u.ar) {
          p.items.push_back({a, b});
          p.labels.push_back(a.label);
          p.labels2.push_back(a.label2);
        }
        break;
      case Task::OSCC:
        for (const auto& a : u.oscc) {
          p.items.push_back({a, b});
          p.labels.push_back(a.label);
        }
        break;
      case Task::PNR:
        for (const auto& [seg, when] : u.pnr) {
          auto sel = align_rows(s1.positions, seg, s1.video_offsets[b], s1.video_offsets[b + 1]);
          p.pnr_bounds.push_back(p.pnr_rows.size());
          for (auto r : sel.rows) {
            p.pnr_rows.push_back(r);
            p.pnr_bits.push_back(std::abs(s1.positions[r] - when) < 1e-9 ? 1.0 : 0.0);
          }
          p.pnr_gt.push_back(when);
        }
        break;
      case Task::MQ:
        p.mq_gts.push_back(u.mq);
        p.extents.push_back({0.0, u.duration});
        break;
      case Task::LTA:
        if (u.has_lta) {
          p.items.push_back({u.lta_context, b});
          p.future_verbs.push_back(u.lta_verbs);
          p.future_nouns.push_back(u.lta_nouns);
        }
        break;
      case Task::ORDER:
        if (u.order_label >= 0) {
          p.items.push_back({AnnotatedSegment{u.origin, u.origin + u.duration, 0}, b});
          p.labels.push_back(u.order_label);
        }
        break;
    }
  }
  p.pnr_bounds.push_back(p.pnr_rows.size());
  return p;
}

// Task feature blocks: one row per sample for segment tasks and LTA, one
// block per stage of node rows for MQ, stage-1 rows inside events for PNR.
inline std::vector<Var> task_readout(Tape& t, TaskNeck& neck, const GroupForward& g, const ReadoutPlan& plan,
                                     bool detach_input) {
  auto stage_feat = [&](std::size_t l) {
    Var x = g.stages[l].graph.features;
    return neck(t, detach_input ? ops::detach(x) : x);
  };
  if (plan.task == Task::MQ) {
    std::vector<Var> out;
    for (std::size_t l = 0; l < g.stages.size(); ++l) out.push_back(stage_feat(l));
    return out;
  }
  if (plan.task == Task::PNR) return {ops::gather_rows(stage_feat(0), plan.pnr_rows)};
  Var acc;
  for (std::size_t l = 0; l < g.stages.size(); ++l) {
    Var a = align_batch(stage_feat(l), g.stages[l].graph.structure, plan.items);
    acc = l == 0 ? a : ops::add(acc, a);
  }
  return {ops::scale(acc, 1.0 / static_cast<double>(g.stages.size()))};
}

struct LossOptions {
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
};

// `outputs[b]` are the head output blocks for readout block b.
inline Var task_loss(const GroupForward& g, const ReadoutPlan& plan, const std::vector<std::vector<Var>>& outputs,
                     const LossOptions& opt = {}) {
  switch (plan.task) {
    case Task::AR:
      return ops::add(cross_entropy_loss(outputs[0][0], plan.labels), cross_entropy_loss(outputs[0][1], plan.labels2));
    case Task::OSCC:
    case Task::ORDER: return cross_entropy_loss(outputs[0][0], plan.labels);
    case Task::PNR: return bce_loss(outputs[0][0], plan.pnr_bits);
    case Task::LTA: {
      std::vector<int> v, n;
      for (std::size_t k = 0; k < plan.future_verbs.size(); ++k) {
        v.insert(v.end(), plan.future_verbs[k].begin(), plan.future_verbs[k].end());
        n.insert(n.end(), plan.future_nouns[k].begin(), plan.future_nouns[k].end());
      }
      return ops::add(cross_entropy_loss(outputs[0][0], v), cross_entropy_loss(outputs[0][1], n));
    }
    case Task::MQ: {
      Tape& t = *outputs[0][0].tape();
      std::vector<MqTargets> targets;
      std::size_t positives = 0;
      for (std::size_t l = 0; l < outputs.size(); ++l) {
        targets.push_back(mq_targets(g.stages[l].graph.structure, plan.mq_gts, outputs[l][0].cols()));
        positives += targets.back().positive_rows.size();
      }
      const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, positives));
      Var total = t.constant(Tensor::scalar(0.0));
      for (std::size_t l = 0; l < outputs.size(); ++l) {
        total = ops::add(total, focal_loss_sum(ops::sigmoid(outputs[l][0]), targets[l].cls, opt.focal_gamma,
                                               opt.focal_alpha));
        if (!targets[l].positive_rows.empty())
          total = ops::add(total,
                           diou_loss_offsets(ops::gather_rows(outputs[l][1], targets[l].positive_rows), targets[l].offsets));
      }
      return ops::scale(total, norm);
    }
  }
  throw std::logic_error("task_loss: unknown task");
}

// ---- predictions -------------------------------------------------------------

struct EvalOptions {
  int lta_candidates = 5;  // K
  double nms_sigma = 2.0;
  double score_floor = 0.001;
  std::size_t pre_nms_topk = 500;
  std::size_t max_detections = 100;
};

// Accumulated predictions and ground truth of one task over a split.
struct TaskAccumulator {
  Task task = Task::AR;
  std::vector<int> pred_a, gt_a, pred_b, gt_b;  // AR verb/noun; OSCC/ORDER in a
  std::vector<double> pnr_pred, pnr_gt;
  std::vector<std::vector<std::vector<int>>> lta_verb_cands, lta_noun_cands;
  std::vector<std::vector<int>> lta_verb_gt, lta_noun_gt;
  std::vector<std::vector<SegmentPrediction>> mq_preds;
  std::vector<std::vector<AnnotatedSegment>> mq_gts;
};

inline std::size_t argmax_row(const Tensor& m, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return best;
}

inline std::vector<std::vector<int>> lta_candidates(const Tensor& logits, std::size_t sample, int Z, int K, Rng& rng) {
  std::vector<std::vector<int>> cands;
  for (int k = 0; k < K; ++k) {
    std::vector<int> seq;
    for (int z = 0; z < Z; ++z) {
      const std::size_t r = sample * static_cast<std::size_t>(Z) + static_cast<std::size_t>(z);
      if (k == 0) {
        seq.push_back(static_cast<int>(argmax_row(logits, r)));
        continue;
      }
      double mx = logits(r, 0);
      for (std::size_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits(r, c));
      std::vector<double> w(logits.cols());
      for (std::size_t c = 0; c < w.size(); ++c) w[c] = std::exp(logits(r, c) - mx);
      seq.push_back(static_cast<int>(std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng)));
    }
    cands.push_back(std::move(seq));
  }
  return cands;
}

inline void accumulate(TaskAccumulator& acc, const GroupForward& g, const ReadoutPlan& plan,
                       const std::vector<std::vector<Var>>& outputs, const EvalOptions& opt, int lta_z, Rng& sample_rng) {
  switch (plan.task) {
    case Task::AR: {
      const Tensor& v = outputs[0][0].value();
      const Tensor& n = outputs[0][1].value();
      for (std::size_t r = 0; r < plan.items.size(); ++r) {
        acc.pred_a.push_back(static_cast<int>(argmax_row(v, r)));
        acc.pred_b.push_back(static_cast<int>(argmax_row(n, r)));
        acc.gt_a.push_back(plan.labels[r]);
        acc.gt_b.push_back(plan.labels2[r]);
      }
      break;
    }
    case Task::OSCC:
    case Task::ORDER: {
      const Tensor& v = outputs[0][0].value();
      for (std::size_t r = 0; r < plan.items.size(); ++r) {
        acc.pred_a.push_back(static_cast<int>(argmax_row(v, r)));
        acc.gt_a.push_back(plan.labels[r]);
      }
      break;
    }
    case Task::PNR: {
      const Tensor& s = outputs[0][0].value();
      const auto& pos = g.stages.front().graph.structure.positions;
      for (std::size_t k = 0; k + 1 < plan.pnr_bounds.size(); ++k) {
        std::size_t best = plan.pnr_bounds[k];
        for (std::size_t r = best + 1; r < plan.pnr_bounds[k + 1]; ++r)
          if (s(r, 0) > s(best, 0)) best = r;
        acc.pnr_pred.push_back(pos[plan.pnr_rows[best]]);
        acc.pnr_gt.push_back(plan.pnr_gt[k]);
      }
      break;
    }
    case Task::LTA: {
      for (std::size_t k = 0; k < plan.items.size(); ++k) {
        acc.lta_verb_cands.push_back(lta_candidates(outputs[0][0].value(), k, lta_z, opt.lta_candidates, sample_rng));
        acc.lta_noun_cands.push_back(lta_candidates(outputs[0][1].value(), k, lta_z, opt.lta_candidates, sample_rng));
        acc.lta_verb_gt.push_back(plan.future_verbs[k]);
        acc.lta_noun_gt.push_back(plan.future_nouns[k]);
      }
      break;
    }
    case Task::MQ: {
      std::vector<MqStageOutput> st;
      for (std::size_t l = 0; l < outputs.size(); ++l) {
        Tensor sc = outputs[l][0].value();
        for (auto& x : sc.values()) x = 1.0 / (1.0 + std::exp(-x));
        st.push_back({std::move(sc), outputs[l][1].value(), g.stages[l].graph.structure});
      }
      auto per_video = mq_decode(st, plan.extents, opt.score_floor);
      for (std::size_t v = 0; v < per_video.size(); ++v) {
        auto& p = per_video[v];
        std::stable_sort(p.begin(), p.end(), prediction_before);
        if (p.size() > opt.pre_nms_topk) p.resize(opt.pre_nms_topk);
        auto kept = soft_nms(std::move(p), opt.nms_sigma, opt.score_floor);
        if (kept.size() > opt.max_detections) kept.resize(opt.max_detections);
        acc.mq_preds.push_back(std::move(kept));
        acc.mq_gts.push_back(plan.mq_gts[v]);
      }
      break;
    }
  }
}

// Metric names per task; the first entry is the headline metric.
inline std::vector<std::string> metric_names(Task t) {
  switch (t) {
    case Task::AR: return {"verb_top1", "noun_top1"};
    case Task::OSCC:
    case Task::ORDER: return {"accuracy"};
    case Task::PNR: return {"loc_error"};
    case Task::LTA: return {"ed", "ed_verb", "ed_noun"};
    case Task::MQ: return {"avg_map", "map@0.1", "map@0.2", "map@0.3", "map@0.4", "map@0.5", "r1@0.5", "r5@0.5"};
  }
  return {};
}

inline std::string headline_metric(Task t) { return metric_names(t).front(); }
inline bool lower_is_better(const std::string& metric) {
  return metric == "loc_error" || metric.rfind("ed", 0) == 0;
}

inline std::map<std::string, double> finalize(const TaskAccumulator& acc) {
  std::map<std::string, double> m;
  switch (acc.task) {
    case Task::AR:
      m["verb_top1"] = top1_accuracy(acc.pred_a, acc.gt_a);
      m["noun_top1"] = top1_accuracy(acc.pred_b, acc.gt_b);
      break;
    case Task::OSCC:
    case Task::ORDER: m["accuracy"] = top1_accuracy(acc.pred_a, acc.gt_a); break;
    case Task::PNR: m["loc_error"] = localization_error(acc.pnr_pred, acc.pnr_gt); break;
    case Task::LTA: {
      double v = 0.0, n = 0.0;
      for (std::size_t k = 0; k < acc.lta_verb_gt.size(); ++k) {
        v += edit_distance(acc.lta_verb_cands[k], acc.lta_verb_gt[k]);
        n += edit_distance(acc.lta_noun_cands[k], acc.lta_noun_gt[k]);
      }
      const double cnt = static_cast<double>(std::max<std::size_t>(1, acc.lta_verb_gt.size()));
      m["ed_verb"] = v / cnt;
      m["ed_noun"] = n / cnt;
      m["ed"] = 0.5 * (m["ed_verb"] + m["ed_noun"]);
      break;
    }
    case Task::MQ: {
      auto d = map_at_iou(acc.mq_preds, acc.mq_gts);
      m["avg_map"] = 100.0 * d.average_map;
      const char* keys[] = {"map@0.1", "map@0.2", "map@0.3", "map@0.4", "map@0.5"};
      for (std::size_t k = 0; k < d.ap.size() && k < 5; ++k) m[keys[k]] = 100.0 * d.ap[k];
      m["r1@0.5"] = 100.0 * d.recall_at_1;
      m["r5@0.5"] = 100.0 * d.recall_at_5;
      break;
    }
  }
  return m;
}

}  // namespace tgk
