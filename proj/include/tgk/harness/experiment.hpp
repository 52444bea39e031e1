#pragma once

// Training loops, the two-phase pipeline, baselines, ablation grids and
// metric reports.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "tgk/egopack.hpp"
#include "tgk/harness/config.hpp"
#include "tgk/harness/dataset.hpp"
#include "tgk/harness/model.hpp"
#include "tgk/harness/parallel.hpp"
#include "tgk/hierarchy.hpp"
#include "tgk/optim.hpp"
#include "tgk/translation.hpp"

namespace tgk {

class TrainingDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- batching ----------------------------------------------------------------

struct Batch {
  std::vector<const Unit*> full, prefix, windows;
};

inline std::vector<Task> full_tasks(const std::vector<Task>& tasks) {
  std::vector<Task> out;
  for (Task t : tasks)
    if (needs_full_graph(t)) out.push_back(t);
  return out;
}

inline std::size_t unit_count(const UnitSet& u, const std::vector<Task>& tasks) {
  return has_task(tasks, Task::ORDER) ? u.windows.size() : u.full.size();
}

inline Batch make_batch(const UnitSet& u, const std::vector<Task>& tasks, const std::vector<std::size_t>& idx) {
  Batch b;
  const bool order = has_task(tasks, Task::ORDER);
  const bool full = !full_tasks(tasks).empty();
  const bool lta = has_task(tasks, Task::LTA);
  for (auto i : idx) {
    if (order) {
      b.windows.push_back(&u.windows[i]);
      continue;
    }
    if (full) b.full.push_back(&u.full[i]);
    if (lta && u.prefix_of[i] >= 0) b.prefix.push_back(&u.prefix[static_cast<std::size_t>(u.prefix_of[i])]);
  }
  return b;
}

// Outputs of one model on one group of units.
struct TaskOutputs {
  ReadoutPlan plan;
  std::vector<std::vector<Var>> outputs;  // per readout block
};
struct GroupResult {
  GroupForward forward;
  std::vector<TaskOutputs> tasks;
};

using GroupFn = std::function<GroupResult(Tape&, const std::vector<const Unit*>&, const std::vector<Task>&)>;

inline std::vector<GroupResult> run_batch(Tape& t, const Batch& b, const std::vector<Task>& tasks, const GroupFn& fn) {
  std::vector<GroupResult> out;
  const auto ft = full_tasks(tasks);
  if (!b.full.empty() && !ft.empty()) out.push_back(fn(t, b.full, ft));
  if (!b.prefix.empty()) out.push_back(fn(t, b.prefix, {Task::LTA}));
  if (!b.windows.empty()) out.push_back(fn(t, b.windows, {Task::ORDER}));
  return out;
}

struct ParamGroup {
  ParamList params;
  double lr = 1e-4;
};

struct TrainSchedule {
  int epochs = 15;
  double warmup = 5.0;
  int batch = 8;
};

// Returns the mean training loss of every epoch.
inline std::vector<double> train_loop(const TrainSchedule& sched, const UnitSet& units, const std::vector<Task>& tasks,
                                      std::vector<ParamGroup>& groups, const GroupFn& fn, Rng rng,
                                      const LossOptions& lopt = {}) {
  std::vector<Adam> opts;
  for (auto& g : groups) opts.emplace_back(g.params);
  const std::size_t n = unit_count(units, tasks);
  if (n == 0) throw std::invalid_argument("train: no training units");
  const std::size_t bs = static_cast<std::size_t>(sched.batch);
  const std::size_t steps = (n + bs - 1) / bs;
  std::vector<std::size_t> order(n);
  std::vector<double> history;
  for (int e = 0; e < sched.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s * bs),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(n, (s + 1) * bs)));
      Batch b = make_batch(units, tasks, idx);
      Tape t;
      auto res = run_batch(t, b, tasks, fn);
      Var loss;
      std::ostringstream parts;
      for (auto& gr : res)
        for (auto& to : gr.tasks) {
          Var l = task_loss(gr.forward, to.plan, to.outputs, lopt);
          parts << " " << task_name(to.plan.task) << "=" << l.value()[0];
          loss = loss.valid() ? ops::add(loss, l) : l;
        }
      if (!loss.valid()) continue;
      const double v = loss.value()[0];
      if (!std::isfinite(v))
        throw TrainingDivergence("non-finite loss at epoch " + std::to_string(e + 1) + " step " +
                                 std::to_string(s + 1) + ":" + parts.str());
      for (auto& o : opts) o.zero_grad();
      t.backward(loss);
      const double ep = e + static_cast<double>(s) / static_cast<double>(steps);
      for (std::size_t g = 0; g < opts.size(); ++g)
        opts[g].step(lr_at(ep, groups[g].lr, sched.warmup, sched.epochs));
      sum += v;
      ++counted;
    }
    history.push_back(counted ? sum / static_cast<double>(counted) : 0.0);
  }
  return history;
}

using MetricMap = std::map<std::string, double>;

inline std::map<Task, MetricMap> evaluate(const UnitSet& units, const std::vector<Task>& tasks, const GroupFn& fn,
                                          const EvalOptions& opt, int lta_z, std::size_t batch, std::uint64_t seed) {
  std::map<Task, TaskAccumulator> acc;
  for (Task t : tasks) acc[t].task = t;
  Rng sample_rng = component_rng(seed, "eval.lta");
  const std::size_t n = unit_count(units, tasks);
  for (std::size_t s = 0; s < n; s += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(n, s + batch); ++i) idx.push_back(i);
    Tape t;
    auto res = run_batch(t, make_batch(units, tasks, idx), tasks, fn);
    for (auto& gr : res)
      for (auto& to : gr.tasks) accumulate(acc[to.plan.task], gr.forward, to.plan, to.outputs, opt, lta_z, sample_rng);
  }
  std::map<Task, MetricMap> out;
  for (auto& [t, a] : acc) out[t] = finalize(a);
  return out;
}

// ---- single-task and multi-task models ----------------------------------------

struct TaskModel {
  BackboneConfig cfg;
  ModelDims dims;
  std::vector<Task> tasks;
  BackboneParams backbone;
  std::map<Task, TaskBranch> branches;

  void collect(ParamList& out) {
    backbone.collect(out);
    for (Task t : tasks) branches.at(t).collect(out);
  }
};

inline TaskModel make_task_model(const ExperimentConfig& c, const std::vector<Task>& tasks, std::uint64_t seed) {
  TaskModel m;
  m.cfg = c.backbone;
  m.dims = c.dims();
  m.tasks = tasks;
  Rng br = component_rng(seed, "backbone");
  m.backbone = BackboneParams(c.backbone, m.dims.dim, br);
  for (Task t : tasks) {
    Rng r = component_rng(seed, std::string("branch.") + task_name(t));
    m.branches.emplace(t, TaskBranch(task_name(t), t, m.dims, r));
  }
  return m;
}

inline GroupFn task_model_fn(TaskModel& m) {
  return [&m](Tape& t, const std::vector<const Unit*>& units, const std::vector<Task>& tasks) {
    GroupResult r;
    r.forward = forward_group(t, units, m.cfg, m.backbone);
    for (Task task : tasks) {
      if (!m.branches.count(task)) continue;
      auto plan = plan_readout(r.forward, task);
      if (plan.samples() == 0) continue;
      auto& br = m.branches.at(task);
      ScopeGuard scope(t, std::string("task.") + task_name(task));
      auto blocks = task_readout(t, br.neck, r.forward, plan, false);
      TaskOutputs o{std::move(plan), {}};
      for (std::size_t b = 0; b < blocks.size(); ++b) o.outputs.push_back(apply_head(t, br, blocks[b], b, m.dims.lta_z));
      r.tasks.push_back(std::move(o));
    }
    return r;
  };
}

struct TrainedTaskModel {
  TaskModel model;
  std::vector<double> history;
};

// Joint training with the unweighted sum of task losses. With one task this
// is single-task training and the backbone follows that task's rate.
inline TrainedTaskModel run_mtl(const ExperimentConfig& c, const Dataset& d, const std::vector<Task>& tasks,
                                std::uint64_t seed) {
  c.validate_tasks(tasks);
  TrainedTaskModel out{make_task_model(c, tasks, seed), {}};
  AnnotationGuard guard(tasks);
  auto units = build_units(d.train, tasks, guard);
  std::vector<ParamGroup> groups;
  groups.push_back({{}, tasks.size() == 1 ? c.task_lr(tasks.front()) : c.backbone_lr});
  out.model.backbone.collect(groups.back().params);
  for (Task t : tasks) {
    groups.push_back({{}, c.task_lr(t)});
    out.model.branches.at(t).collect(groups.back().params);
  }
  out.history = train_loop({c.epochs, c.warmup, c.batch_videos}, units, tasks, groups, task_model_fn(out.model),
                           component_rng(seed, "train.order"), c.loss);
  return out;
}

inline std::map<Task, MetricMap> evaluate_task_model(const ExperimentConfig& c, const Dataset& d, TaskModel& m,
                                                     const std::vector<Task>& tasks, std::uint64_t seed) {
  AnnotationGuard guard(tasks);
  auto units = build_units(d.test, tasks, guard);
  return evaluate(units, tasks, task_model_fn(m), c.eval, m.dims.lta_z, static_cast<std::size_t>(c.batch_videos), seed);
}

// ---- prototypes ---------------------------------------------------------------

// Train samples are aligned on their AR segments, projected by each support
// neck and mean-pooled per (verb, noun).
inline PrototypeBank build_bank(TaskModel& mtl, const Dataset& d, const std::vector<Task>& support,
                                std::size_t batch = 8) {
  AnnotationGuard guard({Task::AR});
  auto units = build_units(d.train, {Task::AR}, guard);
  std::map<std::string, std::vector<double>> rows;
  std::vector<LabelPair> labels;
  const std::size_t dim = mtl.dims.dim;
  for (std::size_t s = 0; s < units.full.size(); s += batch) {
    std::vector<const Unit*> group;
    for (std::size_t i = s; i < std::min(units.full.size(), s + batch); ++i) group.push_back(&units.full[i]);
    Tape t;
    auto g = forward_group(t, group, mtl.cfg, mtl.backbone);
    auto plan = plan_readout(g, Task::AR);
    if (plan.items.empty()) continue;
    for (std::size_t k = 0; k < plan.items.size(); ++k) labels.push_back({plan.labels[k], plan.labels2[k]});
    for (Task task : support) {
      auto block = task_readout(t, mtl.branches.at(task).neck, g, plan, false).front().value();
      auto& dst = rows[task_name(task)];
      dst.insert(dst.end(), block.values().begin(), block.values().end());
    }
  }
  std::map<std::string, Tensor> projected;
  for (auto& [k, v] : rows) projected.emplace(k, Tensor({labels.size(), dim}, std::move(v)));
  return build_prototypes(projected, labels);
}

// ---- phase two ----------------------------------------------------------------

struct NovelModel {
  BackboneConfig cfg;
  ModelDims dims;
  Task novel = Task::MQ;
  std::vector<Task> support;
  BackboneParams backbone;
  TaskBranch branch;
  std::vector<TaskNeck> support_necks;
  std::vector<InteractionParams> interaction;
  std::vector<TaskBranch> extra_heads;  // logits fusion only; necks unused
  bool interact_enabled = true;
  bool freeze_backbone = false;
  FusionMode fusion = FusionMode::Features;
  PrototypeBank bank;

  ParamList trainable() {
    ParamList p;
    if (!freeze_backbone) backbone.collect(p);
    branch.collect(p);
    if (interact_enabled) {
      for (auto& n : support_necks) n.collect(p);
      for (auto& i : interaction) i.collect(p);
      for (auto& h : extra_heads) h.collect_head(p);
    }
    return p;
  }
  void collect(ParamList& out) {
    backbone.collect(out);
    branch.collect(out);
    for (auto& n : support_necks) n.collect(out);
    for (auto& i : interaction) i.collect(out);
    for (auto& h : extra_heads) h.collect_head(out);
  }
};

// The novel branch draws from its own stream, so toggling interaction leaves
// its initialization untouched.
inline NovelModel make_novel_model(const ExperimentConfig& c, const TaskModel& mtl, const PrototypeBank& bank,
                                   std::uint64_t seed, bool interact, bool freeze_backbone) {
  if (has_task(c.support, c.novel) || bank.has_task(task_name(c.novel)))
    throw ConfigError(std::string("novel task ") + task_name(c.novel) + " is in the support set");
  if (!bank.frozen()) throw FrozenBankError("phase two requires a frozen prototype bank");
  NovelModel m;
  m.cfg = mtl.cfg;
  m.dims = mtl.dims;
  m.novel = c.novel;
  m.support = c.support;
  m.backbone = mtl.backbone;
  Rng br = component_rng(seed, "novel.branch");
  m.branch = TaskBranch(std::string("novel.") + task_name(c.novel), c.novel, m.dims, br);
  m.interact_enabled = interact;
  m.freeze_backbone = freeze_backbone;
  m.fusion = c.fusion;
  m.bank = bank;
  if (interact) {
    for (Task k : c.support) {
      if (!bank.has_task(task_name(k))) throw ConfigError(std::string("bank lacks support task ") + task_name(k));
      m.support_necks.push_back(mtl.branches.at(k).neck);
      Rng ir = component_rng(seed, std::string("novel.interact.") + task_name(k));
      m.interaction.emplace_back(std::string("interact.") + task_name(k), m.dims.dim, c.interaction, ir);
      if (c.fusion == FusionMode::Logits) {
        Rng hr = component_rng(seed, std::string("novel.extra.") + task_name(k));
        TaskBranch h;
        h.task = c.novel;
        h.init_head(std::string("novel.via.") + task_name(k), m.dims, hr);
        m.extra_heads.push_back(std::move(h));
      }
    }
  }
  return m;
}

// Refined support features for each readout block, built from detached
// backbone output so no gradient reaches the backbone along this path.
inline std::vector<std::vector<Var>> support_paths(Tape& t, NovelModel& m, const GroupForward& g,
                                                   const ReadoutPlan& plan) {
  std::vector<std::vector<Var>> refined;  // [task][block]
  for (std::size_t k = 0; k < m.support.size(); ++k) {
    ScopeGuard scope(t, std::string("support.") + task_name(m.support[k]));
    auto blocks = task_readout(t, m.support_necks[k], g, plan, true);
    const Tensor& protos = m.bank.matrix(task_name(m.support[k]));
    for (auto& b : blocks) b = interact(t, b, protos, m.interaction[k]);
    refined.push_back(std::move(blocks));
  }
  return refined;
}

// First-layer prototype activations of every support task on the test split.
struct ActivationAnalytics {
  std::map<std::string, std::map<int, double>> histogram;  // task -> verb -> frequency
  std::vector<std::tuple<std::string, std::string, double>> consensus;
};

inline ActivationAnalytics analyze_activations(NovelModel& m, const Dataset& d, std::size_t batch = 8) {
  AnnotationGuard guard({m.novel});
  auto units = build_units(d.test, {m.novel}, guard);
  const std::size_t K = m.support.size();
  std::vector<std::vector<std::size_t>> activated(K);
  std::vector<std::vector<std::set<int>>> verbs(K);
  const std::size_t n = unit_count(units, {m.novel});
  for (std::size_t lo = 0; lo < n; lo += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = lo; i < std::min(n, lo + batch); ++i) idx.push_back(i);
    Batch b = make_batch(units, {m.novel}, idx);
    const auto& group = m.novel == Task::LTA ? b.prefix : b.full;
    if (group.empty()) continue;
    Tape t;
    auto g = forward_group(t, group, m.cfg, m.backbone, true);
    auto plan = plan_readout(g, m.novel);
    if (plan.samples() == 0) continue;
    for (std::size_t k = 0; k < K; ++k) {
      const Tensor& protos = m.bank.matrix(task_name(m.support[k]));
      const std::size_t nn = std::min(m.interaction[k].config.k, protos.rows());
      for (auto& blk : task_readout(t, m.support_necks[k], g, plan, true))
        for (std::size_t r = 0; r < blk.rows(); ++r) {
          std::set<int> s;
          for (auto j : knn_match(blk.value().row_span(r), protos, nn)) {
            activated[k].push_back(j);
            s.insert(m.bank.labels()[j].first);
          }
          verbs[k].push_back(std::move(s));
        }
    }
  }
  ActivationAnalytics a;
  for (std::size_t k = 0; k < K; ++k)
    a.histogram[task_name(m.support[k])] = activation_histogram(activated[k], m.bank.labels());
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j)
      a.consensus.emplace_back(task_name(m.support[i]), task_name(m.support[j]),
                               activation_consensus(verbs[i], verbs[j]));
  return a;
}

inline GroupFn novel_model_fn(NovelModel& m) {
  return [&m](Tape& t, const std::vector<const Unit*>& units, const std::vector<Task>& tasks) {
    GroupResult r;
    r.forward = forward_group(t, units, m.cfg, m.backbone, m.freeze_backbone);
    if (!has_task(tasks, m.novel)) return r;
    auto plan = plan_readout(r.forward, m.novel);
    if (plan.samples() == 0) return r;
    std::vector<Var> blocks;
    {
      ScopeGuard scope(t, "novel");
      blocks = task_readout(t, m.branch.neck, r.forward, plan, false);
    }
    std::vector<std::vector<Var>> refined;
    if (m.interact_enabled) refined = support_paths(t, m, r.forward, plan);
    TaskOutputs o{std::move(plan), {}};
    ScopeGuard scope(t, "fusion");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      std::vector<Var> rb;
      std::vector<HeadFn> heads;
      for (std::size_t k = 0; k < refined.size(); ++k) {
        rb.push_back(refined[k][b]);
        if (m.fusion == FusionMode::Logits) heads.push_back(head_fn(t, m.extra_heads[k], b, m.dims.lta_z));
      }
      o.outputs.push_back(fuse(blocks[b], rb, m.fusion, head_fn(t, m.branch, b, m.dims.lta_z), heads));
    }
    r.tasks.push_back(std::move(o));
    return r;
  };
}

struct TrainedNovelModel {
  NovelModel model;
  std::vector<double> history;
  std::set<Task> labels_read;  // annotation access during phase two
};

inline TrainedNovelModel run_novel(const ExperimentConfig& c, const Dataset& d, const TaskModel& mtl,
                                   const PrototypeBank& bank, std::uint64_t seed, bool interact = true,
                                   bool freeze_backbone = false) {
  c.validate_split();
  TrainedNovelModel out{make_novel_model(c, mtl, bank, seed, interact, freeze_backbone), {}, {}};
  AnnotationGuard guard({c.novel});
  auto units = build_units(d.train, {c.novel}, guard);
  std::vector<ParamGroup> groups{{out.model.trainable(), c.task_lr(c.novel)}};
  out.history = train_loop({c.epochs, c.warmup, c.batch_videos}, units, {c.novel}, groups, novel_model_fn(out.model),
                           component_rng(seed, "novel.order"), c.loss);
  out.labels_read = guard.read();
  return out;
}

inline MetricMap evaluate_novel_model(const ExperimentConfig& c, const Dataset& d, NovelModel& m, std::uint64_t seed) {
  AnnotationGuard guard({m.novel});
  auto units = build_units(d.test, {m.novel}, guard);
  return evaluate(units, {m.novel}, novel_model_fn(m), c.eval, m.dims.lta_z, static_cast<std::size_t>(c.batch_videos),
                  seed)
      .at(m.novel);
}

struct BlockingAudit {
  bool backbone_grad_zero = true;  // support-only loss leaves backbone gradients at zero
  bool support_grad_nonzero = false;
  bool no_scope_crossing = true;   // no support node reads a backbone node
};

// Backpropagates a loss built only from the support paths of one batch.
inline BlockingAudit audit_gradient_blocking(NovelModel& m, const Dataset& d, std::size_t videos = 4) {
  if (!m.interact_enabled) throw std::invalid_argument("audit: interaction is disabled");
  AnnotationGuard guard({m.novel});
  auto units = build_units(d.train, {m.novel}, guard);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(videos, unit_count(units, {m.novel})); ++i) idx.push_back(i);
  Batch b = make_batch(units, {m.novel}, idx);
  const auto& group = m.novel == Task::LTA ? b.prefix : b.full;
  Tape t;
  auto g = forward_group(t, group, m.cfg, m.backbone);
  auto plan = plan_readout(g, m.novel);
  auto refined = support_paths(t, m, g, plan);
  Var loss;
  for (auto& per : refined)
    for (auto& v : per) {
      Var s = ops::sum(ops::square(v));
      loss = loss.valid() ? ops::add(loss, s) : s;
    }
  ParamList all;
  m.collect(all);
  for (auto* p : all) p->zero_grad();
  t.backward(loss);
  BlockingAudit a;
  ParamList bb;
  m.backbone.collect(bb);
  for (auto* p : bb)
    for (double v : p->grad.values()) a.backbone_grad_zero &= v == 0.0;
  ParamList sp;
  for (auto& n : m.support_necks) n.collect(sp);
  for (auto* p : sp)
    for (double v : p->grad.values()) a.support_grad_nonzero |= v != 0.0;
  for (std::size_t id = 0; id < t.size(); ++id) {
    if (t.scope_of(id).rfind("support.", 0) != 0) continue;
    for (auto in : t.inputs(id)) a.no_scope_crossing &= t.scope_of(in) != "backbone";
  }
  for (auto* p : all) p->zero_grad();
  return a;
}

// ---- task translation baseline --------------------------------------------------

// Frozen single-task experts feed per-task tokens to a masked encoder; the
// novel task's token slice, reshaped back into stage graphs, feeds a new branch.
struct TranslationModel {
  BackboneConfig cfg;
  ModelDims dims;
  Task novel = Task::MQ;
  std::vector<Task> tasks;  // expert order, novel last
  std::vector<TaskModel> experts;
  EncoderParams encoder;
  TaskBranch branch;

  void collect_trainable(ParamList& out) {
    encoder.collect(out);
    branch.collect(out);
  }
};

inline GroupFn translation_fn(TranslationModel& m) {
  return [&m](Tape& t, const std::vector<const Unit*>& units, const std::vector<Task>& tasks) {
    GroupResult r;
    std::vector<GroupForward> ex;
    std::vector<std::vector<Tensor>> feats;  // [expert][stage]
    for (std::size_t k = 0; k < m.experts.size(); ++k) {
      auto& e = m.experts[k];
      ex.push_back(forward_group(t, units, e.cfg, e.backbone, true));
      std::vector<Tensor> per;
      for (auto& s : ex.back().stages) per.push_back(e.branches.at(m.tasks[k]).neck(t, s.graph.features).value());
      feats.push_back(std::move(per));
    }
    GroupForward g = ex.back();
    const std::size_t K = m.experts.size(), L = g.stages.size(), D = m.dims.dim;
    std::vector<std::vector<Var>> slices(L);  // per stage, per video
    for (std::size_t v = 0; v < units.size(); ++v) {
      std::vector<double> vals, pos;
      std::vector<int> st;
      std::vector<std::size_t> novel_start(L);
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t l = 0; l < L; ++l) {
          const auto& s = g.stages[l].graph.structure;
          if (k + 1 == K) novel_start[l] = pos.size();
          for (std::size_t n = s.video_offsets[v]; n < s.video_offsets[v + 1]; ++n) {
            auto row = feats[k][l].row_span(n);
            vals.insert(vals.end(), row.begin(), row.end());
            pos.push_back(s.positions[n]);
            st.push_back(g.stages[l].index);
          }
        }
      const std::size_t n_tok = pos.size();
      Var y = masked_encoder_forward(t, t.constant(Tensor({n_tok, D}, std::move(vals))), m.encoder, build_mask(pos, st));
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t len = g.stages[l].graph.structure.video_size(v);
        slices[l].push_back(ops::slice_rows(y, novel_start[l], novel_start[l] + len));
      }
    }
    for (std::size_t l = 0; l < L; ++l) g.stages[l].graph.features = ops::concat_rows(slices[l]);
    r.forward = g;
    if (!has_task(tasks, m.novel)) return r;
    auto plan = plan_readout(g, m.novel);
    if (plan.samples() == 0) return r;
    auto blocks = task_readout(t, m.branch.neck, g, plan, false);
    TaskOutputs o{std::move(plan), {}};
    for (std::size_t b = 0; b < blocks.size(); ++b) o.outputs.push_back(apply_head(t, m.branch, blocks[b], b, m.dims.lta_z));
    r.tasks.push_back(std::move(o));
    return r;
  };
}

// `experts` holds one trained single-task model per support task, then the
// novel task's own.
inline TranslationModel run_translation(const ExperimentConfig& c, const Dataset& d, std::vector<TaskModel> experts,
                                        std::uint64_t seed) {
  TranslationModel m;
  m.cfg = c.backbone;
  m.dims = c.dims();
  m.novel = c.novel;
  m.tasks = c.support;
  m.tasks.push_back(c.novel);
  if (experts.size() != m.tasks.size()) throw std::invalid_argument("translation: one expert per task required");
  m.experts = std::move(experts);
  Rng er = component_rng(seed, "translation.encoder");
  m.encoder = EncoderParams("translation", m.dims.dim, c.translation_layers,
                            static_cast<std::size_t>(c.translation_heads), er);
  Rng br = component_rng(seed, "translation.branch");
  m.branch = TaskBranch(std::string("translated.") + task_name(c.novel), c.novel, m.dims, br);
  AnnotationGuard guard({c.novel});
  auto units = build_units(d.train, {c.novel}, guard);
  std::vector<ParamGroup> groups{{{}, c.task_lr(c.novel)}};
  m.collect_trainable(groups[0].params);
  train_loop({c.epochs, c.warmup, c.batch_videos}, units, {c.novel}, groups, translation_fn(m),
             component_rng(seed, "translation.order"), c.loss);
  return m;
}

// ---- reports --------------------------------------------------------------------

// rows[row][task][seed] = metrics; a skipped cell carries a reason instead.
struct MetricsReport {
  std::string kind;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::map<std::string, std::map<std::uint64_t, MetricMap>>> rows;
  std::map<std::string, std::string> skipped;  // "row/task" -> reason

  void put(const std::string& row, Task task, std::uint64_t seed, MetricMap m) {
    rows[row][task_name(task)][seed] = std::move(m);
  }

  MetricMap mean(const std::string& row, const std::string& task) const {
    MetricMap out;
    const auto& per = rows.at(row).at(task);
    for (const auto& [seed, m] : per)
      for (const auto& [k, v] : m) out[k] += v / static_cast<double>(per.size());
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = kind;
    j["config_hash"] = config_hash;
    j["seeds"] = seeds;
    j["rows"] = nlohmann::json::object();
    for (const auto& [row, tasks] : rows)
      for (const auto& [task, per] : tasks) {
        nlohmann::json ps = nlohmann::json::object();
        for (const auto& [seed, m] : per) ps[std::to_string(seed)] = m;
        j["rows"][row][task] = {{"per_seed", ps}, {"mean", mean(row, task)}};
      }
    j["skipped"] = skipped;
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.kind = j.at("kind").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& [row, tasks] : j.at("rows").items())
      for (const auto& [task, cell] : tasks.items())
        for (const auto& [seed, m] : cell.at("per_seed").items())
          r.rows[row][task][std::stoull(seed)] = m.get<MetricMap>();
    r.skipped = j.at("skipped").get<std::map<std::string, std::string>>();
    return r;
  }

  // One line per (row, task): row,task,<metric>_mean...,<metric>_seed<k>...
  std::string csv(const std::string& first_column = "row") const {
    std::ostringstream os;
    os.precision(10);
    for (const auto& [row, tasks] : rows)
      for (const auto& [task, per] : tasks) {
        const auto names = metric_names(task_from_name(task));
        if (os.tellp() == 0) {
          os << first_column << ",task";
          for (const auto& n : names) os << "," << n;
          for (auto s : seeds)
            for (const auto& n : names) os << "," << n << "_seed" << s;
          os << "\n";
        }
        const auto m = mean(row, task);
        os << row << "," << task;
        for (const auto& n : names) os << "," << m.at(n);
        for (auto s : seeds)
          for (const auto& n : names) {
            auto it = per.find(s);
            os << ",";
            if (it != per.end()) os << it->second.at(n);
          }
        os << "\n";
      }
    for (const auto& [cell, why] : skipped) os << cell << ",skipped," << why << "\n";
    return os.str();
  }
};

// ---- pipelines ------------------------------------------------------------------

struct SeedArtifacts {
  std::optional<TaskModel> mtl;
  std::optional<PrototypeBank> bank;
  std::optional<NovelModel> egopack;
};

struct NovelSeedResult {
  std::map<std::string, MetricMap> rows;  // method -> novel-task metrics
  std::map<std::string, std::string> skipped;
  MetricMap support;                      // flattened "<task>.<metric>" of the MTL model
  bool bank_unchanged = true;
  BlockingAudit audit;
  std::set<Task> labels_read;
  NovelModel egopack;
  TaskModel mtl;
  PrototypeBank bank;
};

// Phase one (unless `mtl` is given), prototypes, phase two and the requested
// baselines, all for one seed.
inline NovelSeedResult run_novel_seed(const ExperimentConfig& c, const Dataset& d, std::uint64_t seed,
                                      const TaskModel* given_mtl = nullptr, const PrototypeBank* given_bank = nullptr) {
  c.validate_split();
  NovelSeedResult out;
  out.mtl = given_mtl ? *given_mtl : run_mtl(c, d, c.support, seed).model;
  for (auto& [t, m] : evaluate_task_model(c, d, out.mtl, c.support, seed))
    for (auto& [k, v] : m) out.support[std::string(task_name(t)) + "." + k] = v;
  out.bank = given_bank ? *given_bank : build_bank(out.mtl, d, c.support, static_cast<std::size_t>(c.batch_videos));
  const auto before = out.bank.bytes();

  auto trained = run_novel(c, d, out.mtl, out.bank, seed, c.interaction_enabled, false);
  out.labels_read = trained.labels_read;
  out.rows["egopack"] = evaluate_novel_model(c, d, trained.model, seed);
  if (trained.model.interact_enabled) out.audit = audit_gradient_blocking(trained.model, d);
  out.bank_unchanged = trained.model.bank.bytes() == before && out.bank.bytes() == before;
  out.egopack = std::move(trained.model);

  std::optional<TaskModel> single;
  for (const auto& b : c.baselines) {
    if (b == "single") {
      single = run_mtl(c, d, {c.novel}, seed).model;
      out.rows[b] = evaluate_task_model(c, d, *single, {c.novel}, seed).at(c.novel);
    } else if (b == "mtl") {
      auto all = c.support;
      all.push_back(c.novel);
      auto m = run_mtl(c, d, all, seed).model;
      out.rows[b] = evaluate_task_model(c, d, m, {c.novel}, seed).at(c.novel);
    } else if (b == "mtl_ft" || b == "mtl_ht") {
      auto m = run_novel(c, d, out.mtl, out.bank, seed, false, b == "mtl_ht").model;
      out.rows[b] = evaluate_novel_model(c, d, m, seed);
    } else if (b == "translation") {
      std::vector<TaskModel> experts;
      for (Task k : c.support) experts.push_back(run_mtl(c, d, {k}, seed).model);
      experts.push_back(single ? *single : run_mtl(c, d, {c.novel}, seed).model);
      auto m = run_translation(c, d, std::move(experts), seed);
      AnnotationGuard guard({c.novel});
      auto units = build_units(d.test, {c.novel}, guard);
      out.rows[b] = evaluate(units, {c.novel}, translation_fn(m), c.eval, m.dims.lta_z,
                             static_cast<std::size_t>(c.batch_videos), seed)
                        .at(c.novel);
    }
  }
  return out;
}

struct NovelSuite {
  MetricsReport report;
  std::vector<NovelSeedResult> seeds;
};

inline NovelSuite run_novel_suite(const ExperimentConfig& c, const Dataset& d) {
  c.validate_split();
  NovelSuite s;
  s.seeds = parallel_map<NovelSeedResult>(c.seeds.size(), [&](std::size_t i) { return run_novel_seed(c, d, c.seeds[i]); });
  s.report.kind = "novel";
  s.report.config_hash = config_hash(c);
  s.report.seeds = c.seeds;
  for (std::size_t i = 0; i < c.seeds.size(); ++i) {
    for (const auto& [row, m] : s.seeds[i].rows) s.report.put(row, c.novel, c.seeds[i], m);
  }
  return s;
}

// ---- ablation grids ---------------------------------------------------------------

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> a{"layer_kind", "layers_per_stage", "pooling", "tau"};
  return a;
}

inline std::vector<std::string> default_axis_values(const std::string& axis) {
  if (axis == "layer_kind") {
    std::vector<std::string> v;
    for (auto k : all_layer_kinds()) v.push_back(layer_kind_name(k));
    return v;
  }
  if (axis == "layers_per_stage") return {"1", "2", "3"};
  if (axis == "pooling") return {"mean", "max", "video-ss", "batch-ss"};
  if (axis == "tau") return {"1", "2", "4", "8"};
  throw ConfigError("unknown ablation axis '" + axis + "'");
}

inline ExperimentConfig with_axis_value(ExperimentConfig c, const std::string& axis, const std::string& value) {
  if (axis == "layer_kind") {
    c.backbone.layer_kind = layer_kind_from_name(value);
  } else if (axis == "layers_per_stage") {
    c.backbone.layers_per_stage = std::stoi(value);
  } else if (axis == "pooling") {
    c.backbone.pooling = pooling_from_name(value);
  } else if (axis == "tau") {
    c.backbone.edge_rule.tau = std::stod(value);
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  c.backbone.validate();
  return c;
}

// One train+eval of c.tasks per (value, seed).
inline MetricsReport run_ablation_grid(const ExperimentConfig& base, const Dataset& d, const std::string& axis,
                                       std::vector<std::string> values = {}) {
  if (values.empty()) values = default_axis_values(axis);
  base.validate_tasks(base.tasks);
  std::vector<ExperimentConfig> cells;
  for (const auto& v : values) cells.push_back(with_axis_value(base, axis, v));
  const std::size_t S = base.seeds.size();
  auto results = parallel_map<std::map<Task, MetricMap>>(cells.size() * S, [&](std::size_t i) {
    const auto& c = cells[i / S];
    const auto seed = base.seeds[i % S];
    auto m = run_mtl(c, d, c.tasks, seed).model;
    return evaluate_task_model(c, d, m, c.tasks, seed);
  });
  MetricsReport r;
  r.kind = "ablation:" + axis;
  r.config_hash = config_hash(base);
  r.seeds = base.seeds;
  for (std::size_t i = 0; i < results.size(); ++i)
    for (auto& [t, m] : results[i]) r.put(values[i / S], t, base.seeds[i % S], m);
  return r;
}

// ---- checkpoints --------------------------------------------------------------------

// <name>.bin holds float64 LE values in parameter order, <name>.json the index.
inline void save_params(const std::filesystem::path& dir, const std::string& name, const ParamList& params) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / (name + ".bin"), std::ios::binary);
  nlohmann::json idx = nlohmann::json::array();
  for (auto* p : params) {
    bin.write(reinterpret_cast<const char*>(p->value.values().data()),
              static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
    idx.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  }
  std::ofstream(dir / (name + ".json")) << idx.dump(1) << "\n";
}

inline void load_params(const std::filesystem::path& dir, const std::string& name, const ParamList& params) {
  std::ifstream js(dir / (name + ".json"));
  std::ifstream bin(dir / (name + ".bin"), std::ios::binary);
  if (!js || !bin) throw std::runtime_error("missing checkpoint " + (dir / name).string());
  const auto idx = nlohmann::json::parse(js);
  if (idx.size() != params.size()) throw std::runtime_error("checkpoint " + name + ": parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    if (idx[k].at("name").get<std::string>() != p->name || idx[k].at("rows").get<std::size_t>() != p->value.rows() ||
        idx[k].at("cols").get<std::size_t>() != p->value.cols())
      throw std::runtime_error("checkpoint " + name + ": layout mismatch at " + p->name);
    bin.read(reinterpret_cast<char*>(p->value.values().data()),
             static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
  }
  if (!bin) throw std::runtime_error("checkpoint " + name + ": truncated data");
}

}  // namespace tgk
