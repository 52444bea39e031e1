// tgk: experiment driver. Every subcommand reads an optional JSON config and
// writes a run directory with config.json, metrics.json and tables/.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "tgk/harness.hpp"

using namespace tgk;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::string data;  // optional gen-data run to read features from
  std::vector<std::uint64_t> seeds;
};

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return json::parse(is);
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

void log(const std::string& s) { std::cerr << "[tgk] " << s << std::endl; }

ExperimentConfig load_config(const Common& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : config_from_json(read_json(o.config));
  if (!o.data.empty()) c.data = spec_from_json(read_json(fs::path(o.data) / "config.json").at("data"));
  if (!o.seeds.empty()) c.seeds = o.seeds;
  c.validate();
  return c;
}

Dataset load_data(const Common& o, const ExperimentConfig& c) {
  if (o.data.empty()) return generate_dataset(c.data, c.data_seed);
  Dataset d;
  d.spec = c.data;
  d.seed = read_json(fs::path(o.data) / "config.json").at("data_seed").get<std::uint64_t>();
  const auto dim = static_cast<std::size_t>(c.data.dim);
  d.train = load_split(fs::path(o.data) / "data", "train", dim);
  d.test = load_split(fs::path(o.data) / "data", "test", dim);
  return d;
}

fs::path start_run(const Common& o, const ExperimentConfig& c) {
  fs::path dir(o.out);
  fs::create_directories(dir / "tables");
  write_json(dir / "config.json", to_json(c));
  return dir;
}

void finish_run(const fs::path& dir, const MetricsReport& r, const json& extra, const std::string& table,
                const std::string& first_column) {
  json j = r.to_json();
  for (auto& [k, v] : extra.items()) j[k] = v;
  write_json(dir / "metrics.json", j);
  if (!r.rows.empty()) write_text(dir / "tables" / (table + ".csv"), r.csv(first_column));
  log("wrote " + (dir / "metrics.json").string());
}

std::string seed_tag(std::uint64_t s) { return "seed" + std::to_string(s); }

ParamList params_of(TaskModel& m) {
  ParamList p;
  m.collect(p);
  return p;
}

TaskModel load_task_model(const ExperimentConfig& c, const std::vector<Task>& tasks, const fs::path& dir,
                          const std::string& name, std::uint64_t seed) {
  auto m = make_task_model(c, tasks, seed);
  load_params(dir, name, params_of(m));
  return m;
}

void put_support(MetricsReport& r, const std::string& row, std::uint64_t seed,
                 const std::map<Task, MetricMap>& metrics) {
  for (const auto& [t, m] : metrics) r.put(row, t, seed, m);
}

// ---- subcommands ------------------------------------------------------------------

void cmd_gen_data(const Common& o) {
  auto c = load_config(o);
  auto d = generate_dataset(c.data, c.data_seed);
  auto dir = start_run(o, c);
  save_dataset(d, dir / "data");
  MetricsReport r;
  r.kind = "gen-data";
  r.config_hash = config_hash(c);
  r.seeds = {c.data_seed};
  json counts;
  for (auto [name, s] : {std::pair<const char*, const Split*>{"train", &d.train}, {"test", &d.test}})
    counts[name] = {{"videos", s->videos.size()}, {"AR", s->ar.size()},   {"OSCC", s->oscc.size()},
                    {"PNR", s->pnr.size()},       {"LTA", s->lta.size()}, {"MQ", s->mq.size()},
                    {"ORDER", s->order.size()}};
  finish_run(dir, r, {{"counts", counts}}, "", "");
}

void cmd_train_single(const Common& o) {
  auto c = load_config(o);
  auto d = load_data(o, c);
  auto dir = start_run(o, c);
  const auto S = c.seeds.size();
  for (Task t : c.tasks) c.validate_tasks({t});
  auto results = parallel_map<std::map<Task, MetricMap>>(c.tasks.size() * S, [&](std::size_t i) {
    const Task t = c.tasks[i / S];
    const auto seed = c.seeds[i % S];
    auto m = run_mtl(c, d, {t}, seed).model;
    save_params(dir / "checkpoints", std::string("single_") + task_name(t) + "_" + seed_tag(seed), params_of(m));
    return evaluate_task_model(c, d, m, {t}, seed);
  });
  MetricsReport r;
  r.kind = "single";
  r.config_hash = config_hash(c);
  r.seeds = c.seeds;
  for (std::size_t i = 0; i < results.size(); ++i) put_support(r, "single", c.seeds[i % S], results[i]);
  finish_run(dir, r, json::object(), "single", "method");
}

void cmd_train_mtl(const Common& o) {
  auto c = load_config(o);
  auto d = load_data(o, c);
  c.validate_tasks(c.support);
  auto dir = start_run(o, c);
  auto results = parallel_map<std::map<Task, MetricMap>>(c.seeds.size(), [&](std::size_t i) {
    auto m = run_mtl(c, d, c.support, c.seeds[i]).model;
    save_params(dir / "checkpoints", "mtl_" + seed_tag(c.seeds[i]), params_of(m));
    return evaluate_task_model(c, d, m, c.support, c.seeds[i]);
  });
  MetricsReport r;
  r.kind = "mtl";
  r.config_hash = config_hash(c);
  r.seeds = c.seeds;
  for (std::size_t i = 0; i < results.size(); ++i) put_support(r, "mtl", c.seeds[i], results[i]);
  finish_run(dir, r, json::object(), "mtl", "method");
}

// MTL checkpoints come from --from (a train-mtl run) or are trained here.
void cmd_build_prototypes(const Common& o, const std::string& from) {
  auto c = load_config(o);
  auto d = load_data(o, c);
  c.validate_tasks(c.support);
  auto dir = start_run(o, c);
  json info = json::object();
  auto results = parallel_map<std::pair<std::map<Task, MetricMap>, json>>(c.seeds.size(), [&](std::size_t i) {
    const auto seed = c.seeds[i];
    const auto name = "mtl_" + seed_tag(seed);
    auto m = from.empty() ? run_mtl(c, d, c.support, seed).model
                          : load_task_model(c, c.support, fs::path(from) / "checkpoints", name, seed);
    save_params(dir / "checkpoints", name, params_of(m));
    auto bank = build_bank(m, d, c.support, static_cast<std::size_t>(c.batch_videos));
    save_bank(bank, dir / "prototypes" / seed_tag(seed));
    const auto bytes = bank.bytes();
    json j{{"rows", bank.rows()}, {"dim", bank.dim()}, {"tasks", bank.tasks()},
           {"fnv1a", fnv1a(std::string(bytes.begin(), bytes.end()))}};
    return std::make_pair(evaluate_task_model(c, d, m, c.support, seed), j);
  });
  MetricsReport r;
  r.kind = "prototypes";
  r.config_hash = config_hash(c);
  r.seeds = c.seeds;
  for (std::size_t i = 0; i < results.size(); ++i) {
    put_support(r, "mtl", c.seeds[i], results[i].first);
    info[std::to_string(c.seeds[i])] = results[i].second;
  }
  finish_run(dir, r, {{"prototypes", info}}, "mtl", "method");
}

// Phase two plus baselines. With --from (a build-prototypes run) the MTL model
// and bank of each seed are read back instead of retrained.
void cmd_train_novel(const Common& o, const std::string& from) {
  auto c = load_config(o);
  auto d = load_data(o, c);
  c.validate_split();
  auto dir = start_run(o, c);
  auto results = parallel_map<NovelSeedResult>(c.seeds.size(), [&](std::size_t i) {
    const auto seed = c.seeds[i];
    if (from.empty()) return run_novel_seed(c, d, seed);
    auto m = load_task_model(c, c.support, fs::path(from) / "checkpoints", "mtl_" + seed_tag(seed), seed);
    auto bank = load_bank(fs::path(from) / "prototypes" / seed_tag(seed));
    return run_novel_seed(c, d, seed, &m, &bank);
  });
  MetricsReport r;
  r.kind = "novel";
  r.config_hash = config_hash(c);
  r.seeds = c.seeds;
  json checks = json::object();
  std::ostringstream act, cons;
  act.precision(10);
  cons.precision(10);
  act << "seed,task,verb,frequency\n";
  cons << "seed,task_a,task_b,consensus\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto seed = c.seeds[i];
    auto& res = results[i];
    for (const auto& [row, m] : res.rows) r.put(row, c.novel, seed, m);
    for (const auto& [cell, why] : res.skipped) r.skipped[cell] = why;
    std::vector<std::string> read;
    for (Task t : res.labels_read) read.push_back(task_name(t));
    checks[std::to_string(seed)] = {{"bank_unchanged", res.bank_unchanged},
                                    {"backbone_grad_zero", res.audit.backbone_grad_zero},
                                    {"support_grad_nonzero", res.audit.support_grad_nonzero},
                                    {"no_scope_crossing", res.audit.no_scope_crossing},
                                    {"labels_read", read},
                                    {"support_metrics", res.support}};
    auto an = analyze_activations(res.egopack, d, static_cast<std::size_t>(c.batch_videos));
    for (const auto& [task, h] : an.histogram)
      for (const auto& [verb, f] : h) act << seed << "," << task << "," << verb << "," << f << "\n";
    for (const auto& [a, b, v] : an.consensus) {
      cons << seed << "," << a << "," << b << "," << v << "\n";
      checks[std::to_string(seed)]["consensus"][a + "/" + b] = v;
    }
    save_bank(res.bank, dir / "prototypes" / seed_tag(seed));
    ParamList p;
    res.egopack.collect(p);
    save_params(dir / "checkpoints", "egopack_" + seed_tag(seed), p);
  }
  write_text(dir / "tables" / "activations.csv", act.str());
  write_text(dir / "tables" / "consensus.csv", cons.str());
  finish_run(dir, r, {{"checks", checks}}, std::string("novel_") + task_name(c.novel), "method");
}

void cmd_ablate(const Common& o, const std::string& axis, const std::vector<std::string>& values) {
  auto c = load_config(o);
  auto d = load_data(o, c);
  auto dir = start_run(o, c);
  auto r = run_ablation_grid(c, d, axis, values);
  finish_run(dir, r, {{"axis", axis}}, "ablation_" + axis, axis);
}

// Re-evaluates the checkpoints of a train-single / train-mtl / build-prototypes run.
void cmd_eval(const Common& o, const std::string& from) {
  if (from.empty()) throw std::invalid_argument("eval needs --from <run dir>");
  Common src = o;
  src.config = (fs::path(from) / "config.json").string();
  auto c = load_config(src);
  auto d = load_data(o, c);
  const auto kind = read_json(fs::path(from) / "metrics.json").at("kind").get<std::string>();
  auto dir = start_run(o, c);
  MetricsReport r;
  r.kind = "eval:" + kind;
  r.config_hash = config_hash(c);
  r.seeds = c.seeds;
  for (auto seed : c.seeds) {
    if (kind == "single") {
      for (Task t : c.tasks) {
        auto m = load_task_model(c, {t}, fs::path(from) / "checkpoints",
                                 std::string("single_") + task_name(t) + "_" + seed_tag(seed), seed);
        put_support(r, "single", seed, evaluate_task_model(c, d, m, {t}, seed));
      }
    } else if (kind == "mtl" || kind == "prototypes") {
      auto m = load_task_model(c, c.support, fs::path(from) / "checkpoints", "mtl_" + seed_tag(seed), seed);
      put_support(r, "mtl", seed, evaluate_task_model(c, d, m, c.support, seed));
    } else {
      throw std::invalid_argument("eval: run kind '" + kind + "' has no task-model checkpoints");
    }
  }
  finish_run(dir, r, {{"source", fs::path(from).filename().string()}}, "eval", "method");
}

// Collects the headline means of several runs into one table.
void cmd_report(const Common& o, const std::vector<std::string>& runs) {
  if (runs.empty()) throw std::invalid_argument("report needs at least one --run");
  fs::path dir(o.out);
  fs::create_directories(dir / "tables");
  json summary = json::array();
  std::ostringstream csv;
  csv.precision(10);
  csv << "run,kind,row,task,metric,mean\n";
  for (const auto& run : runs) {
    auto j = read_json(fs::path(run) / "metrics.json");
    auto r = MetricsReport::from_json(j);
    const auto name = fs::path(run).filename().string();
    json entry{{"run", name}, {"kind", r.kind}, {"config_hash", r.config_hash}, {"rows", json::object()}};
    for (const auto& [row, tasks] : r.rows)
      for (const auto& [task, per] : tasks) {
        const auto metric = headline_metric(task_from_name(task));
        const double mean = r.mean(row, task).at(metric);
        entry["rows"][row][task] = {{metric, mean}};
        csv << name << "," << r.kind << "," << row << "," << task << "," << metric << "," << mean << "\n";
      }
    summary.push_back(entry);
    if (!r.rows.empty()) write_text(dir / "tables" / (name + ".csv"), r.csv());
  }
  write_json(dir / "config.json", {{"runs", runs}});
  write_json(dir / "metrics.json", {{"kind", "report"}, {"runs", summary}});
  write_text(dir / "tables" / "summary.csv", csv.str());
  log("wrote " + (dir / "metrics.json").string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tgk: hierarchical temporal graph experiments"};
  app.require_subcommand(1);
  Common o;
  std::string from, axis;
  std::vector<std::string> values, runs;

  auto common = [&](CLI::App* s) {
    s->add_option("-c,--config", o.config, "JSON config; omitted keys keep their defaults")->check(CLI::ExistingFile);
    s->add_option("-o,--out", o.out, "run directory to write")->required();
    s->add_option("--data", o.data, "gen-data run whose dataset replaces the generated one")
        ->check(CLI::ExistingDirectory);
    s->add_option("--seeds", o.seeds, "override the config's seed list");
  };
  auto* gen = app.add_subcommand("gen-data", "generate and store the synthetic dataset");
  common(gen);
  auto* single = app.add_subcommand("train-single", "one model per task in `tasks`");
  common(single);
  auto* mtl = app.add_subcommand("train-mtl", "joint model over the support tasks");
  common(mtl);
  auto* protos = app.add_subcommand("build-prototypes", "phase one and the frozen prototype bank");
  common(protos);
  protos->add_option("--from", from, "train-mtl run to take checkpoints from")->check(CLI::ExistingDirectory);
  auto* novel = app.add_subcommand("train-novel", "phase two on the novel task plus baselines");
  common(novel);
  novel->add_option("--from", from, "build-prototypes run to take models and banks from")
      ->check(CLI::ExistingDirectory);
  auto* ablate = app.add_subcommand("ablate", "grid over one backbone axis");
  common(ablate);
  ablate->add_option("--axis", axis, "layer_kind | layers_per_stage | pooling | tau")->required();
  ablate->add_option("--values", values, "axis values (default: the full axis)")->delimiter(',');
  auto* eval = app.add_subcommand("eval", "re-evaluate stored checkpoints on the test split");
  common(eval);
  eval->add_option("--from", from, "run directory holding checkpoints")->required()->check(CLI::ExistingDirectory);
  auto* report = app.add_subcommand("report", "summarize several runs");
  report->add_option("-o,--out", o.out, "report directory")->required();
  report->add_option("--run", runs, "run directory (repeatable)")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) cmd_gen_data(o);
    if (*single) cmd_train_single(o);
    if (*mtl) cmd_train_mtl(o);
    if (*protos) cmd_build_prototypes(o, from);
    if (*novel) cmd_train_novel(o, from);
    if (*ablate) cmd_ablate(o, axis, values);
    if (*eval) cmd_eval(o, from);
    if (*report) cmd_report(o, runs);
  } catch (const std::exception& e) {
    std::cerr << "tgk: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
