#pragma once

// Experiment configuration and its JSON form.

#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tgk/egopack.hpp"
#include "tgk/harness/dataset.hpp"
#include "tgk/harness/model.hpp"
#include "tgk/hierarchy.hpp"

namespace tgk {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline const std::vector<std::string>& baseline_names() {
  static const std::vector<std::string> n{"single", "mtl", "mtl_ft", "mtl_ht", "translation"};
  return n;
}

struct ExperimentConfig {
  SyntheticTaskSpec data;
  std::uint64_t data_seed = 0;

  BackboneConfig backbone{3, 2, Pooling::Mean, EdgeRule{2.0}, LayerKind::TDGC, 0};

  std::vector<Task> tasks{Task::AR, Task::OSCC, Task::PNR};  // train-single / ablate
  std::vector<Task> support{Task::AR, Task::OSCC, Task::PNR};
  Task novel = Task::MQ;

  bool interaction_enabled = true;
  InteractionConfig interaction{};
  FusionMode fusion = FusionMode::Features;

  double backbone_lr = 1e-4;
  std::map<Task, double> lr{{Task::AR, 1e-4}, {Task::OSCC, 1e-5}, {Task::PNR, 1e-5},
                            {Task::LTA, 1e-4}, {Task::MQ, 1e-4},  {Task::ORDER, 1e-4}};
  int epochs = 15;
  double warmup = 5.0;
  int batch_videos = 8;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> baselines{"single", "mtl_ft"};

  LossOptions loss{};
  EvalOptions eval{};
  int translation_layers = 2;
  int translation_heads = 4;

  double task_lr(Task t) const {
    auto it = lr.find(t);
    if (it == lr.end()) throw ConfigError(std::string("no learning rate for task ") + task_name(t));
    return it->second;
  }

  ModelDims dims() const {
    return {static_cast<std::size_t>(data.dim), data.verbs, data.nouns, data.lta_z};
  }

  void validate() const {
    data.validate();
    backbone.validate();
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (warmup < 0 || warmup > epochs) throw ConfigError("warmup must lie in [0, epochs]");
    if (batch_videos < 1) throw ConfigError("batch_videos must be positive");
    if (seeds.empty()) throw ConfigError("at least one seed required");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw ConfigError("seeds must be distinct");
    for (auto& [t, v] : lr)
      if (!(v > 0)) throw ConfigError(std::string("learning rate for ") + task_name(t) + " must be positive");
    if (!(backbone_lr > 0)) throw ConfigError("backbone learning rate must be positive");
    if (interaction.layers < 1 || interaction.k < 1) throw ConfigError("interaction needs layers >= 1 and k >= 1");
    for (const auto& b : baselines)
      if (std::find(baseline_names().begin(), baseline_names().end(), b) == baseline_names().end())
        throw ConfigError("unknown baseline '" + b + "'");
    if (eval.lta_candidates < 1) throw ConfigError("eval.lta_candidates must be positive");
    if (data.dim % translation_heads) throw ConfigError("translation heads must divide the feature dim");
  }

  // Phase-two split: the novel task comes after the support tasks.
  void validate_split() const {
    validate();
    if (support.empty()) throw ConfigError("at least one support task required");
    if (has_task(support, novel)) throw ConfigError(std::string("novel task ") + task_name(novel) + " is a support task");
    for (Task t : support)
      if (t == Task::ORDER || t == Task::LTA) throw ConfigError("support tasks must be among AR, OSCC, PNR, MQ");
    if (!has_task(support, Task::AR)) throw ConfigError("prototypes are keyed by AR labels; AR must be a support task");
    if (novel == Task::ORDER) throw ConfigError("ORDER is a probe task, not a novel task");
    for (Task t : support)
      if (!has_task(data.tasks, t)) throw ConfigError(std::string("dataset lacks support task ") + task_name(t));
    if (!has_task(data.tasks, novel)) throw ConfigError("dataset lacks the novel task");
  }

  void validate_tasks(const std::vector<Task>& ts) const {
    if (ts.empty()) throw ConfigError("task list is empty");
    if (has_task(ts, Task::ORDER) && ts.size() > 1) throw ConfigError("ORDER trains on its own");
    for (Task t : ts)
      if (!has_task(data.tasks, t)) throw ConfigError(std::string("dataset lacks task ") + task_name(t));
  }
};

namespace detail {

inline std::vector<std::string> task_names(const std::vector<Task>& ts) {
  std::vector<std::string> out;
  for (Task t : ts) out.push_back(task_name(t));
  return out;
}

inline std::vector<Task> tasks_from(const nlohmann::json& j) {
  std::vector<Task> out;
  for (const auto& s : j) out.push_back(task_from_name(s.get<std::string>()));
  return out;
}

// Copies the value under `key` into `dst` when present and drops the key.
template <class T>
void take(nlohmann::json& j, const char* key, T& dst) {
  if (auto it = j.find(key); it != j.end()) {
    dst = it->get<T>();
    j.erase(it);
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::string& where) {
  if (!j.empty()) throw ConfigError("unknown key '" + j.begin().key() + "' in " + where);
}

}  // namespace detail

inline nlohmann::json to_json(const SyntheticTaskSpec& s) {
  return {{"train_videos", s.train_videos},
          {"test_videos", s.test_videos},
          {"segments", s.segments},
          {"dim", s.dim},
          {"verbs", s.verbs},
          {"nouns", s.nouns},
          {"noise", s.noise},
          {"tasks", detail::task_names(s.tasks)},
          {"min_event", s.min_event},
          {"max_event", s.max_event},
          {"max_gap", s.max_gap},
          {"follow_prob", s.follow_prob},
          {"state_changing_verbs", s.state_changing_verbs},
          {"lta_z", s.lta_z},
          {"order_windows", s.order_windows},
          {"order_segments", s.order_segments},
          {"order_test_fraction", s.order_test_fraction},
          {"order_max_origin", s.order_max_origin}};
}

inline SyntheticTaskSpec spec_from_json(nlohmann::json j) {
  SyntheticTaskSpec s;
  detail::take(j, "train_videos", s.train_videos);
  detail::take(j, "test_videos", s.test_videos);
  detail::take(j, "segments", s.segments);
  detail::take(j, "dim", s.dim);
  detail::take(j, "verbs", s.verbs);
  detail::take(j, "nouns", s.nouns);
  detail::take(j, "noise", s.noise);
  if (j.contains("tasks")) {
    s.tasks = detail::tasks_from(j["tasks"]);
    j.erase("tasks");
  }
  detail::take(j, "min_event", s.min_event);
  detail::take(j, "max_event", s.max_event);
  detail::take(j, "max_gap", s.max_gap);
  detail::take(j, "follow_prob", s.follow_prob);
  detail::take(j, "state_changing_verbs", s.state_changing_verbs);
  detail::take(j, "lta_z", s.lta_z);
  detail::take(j, "order_windows", s.order_windows);
  detail::take(j, "order_segments", s.order_segments);
  detail::take(j, "order_test_fraction", s.order_test_fraction);
  detail::take(j, "order_max_origin", s.order_max_origin);
  detail::reject_unknown(j, "data");
  return s;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json lr = {{"backbone", c.backbone_lr}};
  for (auto& [t, v] : c.lr) lr[task_name(t)] = v;
  nlohmann::json seeds = c.seeds;
  return {
      {"data", to_json(c.data)},
      {"data_seed", c.data_seed},
      {"backbone",
       {{"stages", c.backbone.stages},
        {"layers_per_stage", c.backbone.layers_per_stage},
        {"pooling", pooling_name(c.backbone.pooling)},
        {"tau", c.backbone.edge_rule.tau},
        {"layer_kind", layer_kind_name(c.backbone.layer_kind)},
        {"gate_hidden", c.backbone.gate_hidden}}},
      {"tasks", detail::task_names(c.tasks)},
      {"support", detail::task_names(c.support)},
      {"novel", task_name(c.novel)},
      {"interaction",
       {{"enabled", c.interaction_enabled},
        {"layers", c.interaction.layers},
        {"k", c.interaction.k},
        {"rematch_each_layer", c.interaction.rematch_each_layer}}},
      {"fusion", fusion_name(c.fusion)},
      {"lr", lr},
      {"epochs", c.epochs},
      {"warmup", c.warmup},
      {"batch_videos", c.batch_videos},
      {"seeds", seeds},
      {"baselines", c.baselines},
      {"loss", {{"focal_gamma", c.loss.focal_gamma}, {"focal_alpha", c.loss.focal_alpha}}},
      {"eval",
       {{"lta_candidates", c.eval.lta_candidates},
        {"nms_sigma", c.eval.nms_sigma},
        {"score_floor", c.eval.score_floor},
        {"pre_nms_topk", c.eval.pre_nms_topk},
        {"max_detections", c.eval.max_detections}}},
      {"translation", {{"layers", c.translation_layers}, {"heads", c.translation_heads}}},
  };
}

// Missing keys keep their defaults; unknown keys are an error.
inline ExperimentConfig config_from_json(nlohmann::json j) {
  ExperimentConfig c;
  if (j.contains("data")) {
    c.data = spec_from_json(j["data"]);
    j.erase("data");
  }
  detail::take(j, "data_seed", c.data_seed);
  if (j.contains("backbone")) {
    auto b = j["backbone"];
    detail::take(b, "stages", c.backbone.stages);
    detail::take(b, "layers_per_stage", c.backbone.layers_per_stage);
    std::string s;
    if (b.contains("pooling")) {
      c.backbone.pooling = pooling_from_name(b["pooling"].get<std::string>());
      b.erase("pooling");
    }
    detail::take(b, "tau", c.backbone.edge_rule.tau);
    if (b.contains("layer_kind")) {
      c.backbone.layer_kind = layer_kind_from_name(b["layer_kind"].get<std::string>());
      b.erase("layer_kind");
    }
    detail::take(b, "gate_hidden", c.backbone.gate_hidden);
    detail::reject_unknown(b, "backbone");
    j.erase("backbone");
  }
  for (auto [key, dst] : {std::pair<const char*, std::vector<Task>*>{"tasks", &c.tasks}, {"support", &c.support}})
    if (j.contains(key)) {
      *dst = detail::tasks_from(j[key]);
      j.erase(key);
    }
  if (j.contains("novel")) {
    c.novel = task_from_name(j["novel"].get<std::string>());
    j.erase("novel");
  }
  if (j.contains("interaction")) {
    auto i = j["interaction"];
    detail::take(i, "enabled", c.interaction_enabled);
    detail::take(i, "layers", c.interaction.layers);
    detail::take(i, "k", c.interaction.k);
    detail::take(i, "rematch_each_layer", c.interaction.rematch_each_layer);
    detail::reject_unknown(i, "interaction");
    j.erase("interaction");
  }
  if (j.contains("fusion")) {
    c.fusion = fusion_from_name(j["fusion"].get<std::string>());
    j.erase("fusion");
  }
  if (j.contains("lr")) {
    for (auto& [k, v] : j["lr"].items()) {
      if (k == "backbone")
        c.backbone_lr = v.get<double>();
      else
        c.lr[task_from_name(k)] = v.get<double>();
    }
    j.erase("lr");
  }
  detail::take(j, "epochs", c.epochs);
  detail::take(j, "warmup", c.warmup);
  detail::take(j, "batch_videos", c.batch_videos);
  detail::take(j, "seeds", c.seeds);
  detail::take(j, "baselines", c.baselines);
  if (j.contains("loss")) {
    auto l = j["loss"];
    detail::take(l, "focal_gamma", c.loss.focal_gamma);
    detail::take(l, "focal_alpha", c.loss.focal_alpha);
    detail::reject_unknown(l, "loss");
    j.erase("loss");
  }
  if (j.contains("eval")) {
    auto e = j["eval"];
    detail::take(e, "lta_candidates", c.eval.lta_candidates);
    detail::take(e, "nms_sigma", c.eval.nms_sigma);
    detail::take(e, "score_floor", c.eval.score_floor);
    detail::take(e, "pre_nms_topk", c.eval.pre_nms_topk);
    detail::take(e, "max_detections", c.eval.max_detections);
    detail::reject_unknown(e, "eval");
    j.erase("eval");
  }
  if (j.contains("translation")) {
    auto t = j["translation"];
    detail::take(t, "layers", c.translation_layers);
    detail::take(t, "heads", c.translation_heads);
    detail::reject_unknown(t, "translation");
    j.erase("translation");
  }
  detail::reject_unknown(j, "config");
  c.validate();
  return c;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(c).dump())));
  return buf;
}

}  // namespace tgk
