#pragma once

// Prototype bank, k-NN prototype interaction and support/novel fusion.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tgk/nn.hpp"

namespace tgk {

using LabelPair = std::pair<int, int>;  // (verb, noun)

class FrozenBankError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Per support task a P x D matrix; row r of every task belongs to labels()[r].
class PrototypeBank {
 public:
  PrototypeBank() = default;
  explicit PrototypeBank(std::vector<LabelPair> labels) : labels_(std::move(labels)) {}

  void add_task(const std::string& task, Tensor rows) {
    if (frozen_) throw FrozenBankError("prototype bank is frozen");
    if (rows.rows() != labels_.size()) throw ShapeError("prototype bank: row count must match label index");
    if (!tasks_.empty() && rows.cols() != dim()) throw ShapeError("prototype bank: dimension mismatch across tasks");
    if (!matrices_.emplace(task, std::move(rows)).second)
      throw std::invalid_argument("prototype bank: duplicate task " + task);
    tasks_.push_back(task);
  }
  void freeze() { frozen_ = true; }

  bool frozen() const { return frozen_; }
  std::size_t rows() const { return labels_.size(); }
  std::size_t dim() const { return tasks_.empty() ? 0 : matrices_.at(tasks_.front()).cols(); }
  const std::vector<std::string>& tasks() const { return tasks_; }
  const std::vector<LabelPair>& labels() const { return labels_; }
  bool has_task(const std::string& t) const { return matrices_.count(t) > 0; }
  const Tensor& matrix(const std::string& task) const {
    auto it = matrices_.find(task);
    if (it == matrices_.end()) throw std::out_of_range("prototype bank: no task " + task);
    return it->second;
  }

  // Raw bytes of every matrix in task order, for identity checks.
  std::vector<unsigned char> bytes() const {
    std::vector<unsigned char> out;
    for (const auto& t : tasks_) {
      const auto v = matrices_.at(t).values();
      const auto* p = reinterpret_cast<const unsigned char*>(v.data());
      out.insert(out.end(), p, p + v.size() * sizeof(double));
    }
    return out;
  }

 private:
  std::vector<LabelPair> labels_;
  std::vector<std::string> tasks_;
  std::map<std::string, Tensor> matrices_;
  bool frozen_ = false;
};

// Mean-pools projected sample features per (verb, noun) key. Keys are sorted;
// keys without samples never appear.
inline PrototypeBank build_prototypes(const std::map<std::string, Tensor>& projected,
                                      const std::vector<LabelPair>& sample_labels) {
  if (projected.empty()) throw std::invalid_argument("build_prototypes: no support tasks");
  std::map<LabelPair, std::vector<std::size_t>> groups;
  for (std::size_t s = 0; s < sample_labels.size(); ++s) groups[sample_labels[s]].push_back(s);
  std::vector<LabelPair> keys;
  for (const auto& [k, v] : groups) keys.push_back(k);
  PrototypeBank bank(keys);
  for (const auto& [task, feats] : projected) {
    if (feats.rows() != sample_labels.size()) throw ShapeError("build_prototypes: one row per sample required");
    Tensor rows = Tensor::zeros(keys.size(), feats.cols());
    std::size_t r = 0;
    for (const auto& [k, members] : groups) {
      for (auto s : members)
        for (std::size_t c = 0; c < feats.cols(); ++c) rows(r, c) += feats(s, c);
      for (std::size_t c = 0; c < feats.cols(); ++c) rows(r, c) /= static_cast<double>(members.size());
      ++r;
    }
    bank.add_task(task, std::move(rows));
  }
  bank.freeze();
  return bank;
}

// k smallest Euclidean distances, ties to the lower row index.
inline std::vector<std::size_t> knn_match(std::span<const double> query, const Tensor& bank, std::size_t k) {
  if (k == 0 || k > bank.rows()) throw std::invalid_argument("knn_match: k must be in [1, P]");
  if (query.size() != bank.cols()) throw ShapeError("knn_match: query dimension mismatch");
  std::vector<double> d(bank.rows(), 0.0);
  for (std::size_t r = 0; r < bank.rows(); ++r)
    for (std::size_t c = 0; c < bank.cols(); ++c) {
      const double x = query[c] - bank(r, c);
      d[r] += x * x;
    }
  std::vector<std::size_t> idx(bank.rows());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return d[a] != d[b] ? d[a] < d[b] : a < b; });
  idx.resize(k);
  return idx;
}

struct InteractionConfig {
  int layers = 2;  // M
  std::size_t k = 8;
  bool rematch_each_layer = true;
};

struct InteractionParams {
  InteractionConfig config;
  std::vector<Linear> root, neighbor;  // W_r^(m), W^(m), no bias

  InteractionParams() = default;
  InteractionParams(const std::string& name, std::size_t dim, const InteractionConfig& cfg, Rng& rng) : config(cfg) {
    if (cfg.layers < 1) throw std::invalid_argument("interaction: at least one layer required");
    if (cfg.k < 1) throw std::invalid_argument("interaction: k must be positive");
    for (int m = 0; m < cfg.layers; ++m) {
      root.emplace_back(name + ".root" + std::to_string(m), dim, dim, rng, false);
      neighbor.emplace_back(name + ".proto" + std::to_string(m), dim, dim, rng, false);
    }
  }

  void collect(ParamList& out) {
    for (std::size_t m = 0; m < root.size(); ++m) {
      root[m].collect(out);
      neighbor[m].collect(out);
    }
  }
};

// X <- X W_r + mean(activated prototypes) W, M times. Prototypes enter as
// constants. `matches`, when given, receives per layer the indices per row.
inline Var interact(Tape& t, Var x, const Tensor& prototypes, InteractionParams& p,
                    std::vector<std::vector<std::vector<std::size_t>>>* matches = nullptr) {
  if (x.cols() != prototypes.cols()) throw ShapeError("interact: feature dim does not match bank");
  if (p.root.empty()) throw std::invalid_argument("interact: no layers");
  const std::size_t k = std::min(p.config.k, prototypes.rows());
  std::vector<std::vector<std::size_t>> current;
  for (std::size_t m = 0; m < p.root.size(); ++m) {
    if (m == 0 || p.config.rematch_each_layer) {
      current.clear();
      for (std::size_t r = 0; r < x.rows(); ++r) current.push_back(knn_match(x.value().row_span(r), prototypes, k));
    }
    if (matches) matches->push_back(current);
    Tensor agg = Tensor::zeros(x.rows(), prototypes.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (auto j : current[r])
        for (std::size_t c = 0; c < prototypes.cols(); ++c) agg(r, c) += prototypes(j, c);
      for (std::size_t c = 0; c < prototypes.cols(); ++c) agg(r, c) /= static_cast<double>(current[r].size());
    }
    x = ops::add(p.root[m](t, x), p.neighbor[m](t, t.constant(agg)));
  }
  return x;
}

enum class FusionMode { Features, Logits };

inline const char* fusion_name(FusionMode m) { return m == FusionMode::Features ? "features" : "logits"; }
inline FusionMode fusion_from_name(const std::string& s) {
  if (s == "features") return FusionMode::Features;
  if (s == "logits") return FusionMode::Logits;
  throw std::invalid_argument("unknown fusion mode '" + s + "'");
}

// A head maps features to one or more output blocks (e.g. logits, offsets).
using HeadFn = std::function<std::vector<Var>(const Var&)>;

// features: novel head on the mean of novel and refined features.
// logits: novel head on the novel features plus each support head on its
// refined features, block-wise summed.
inline std::vector<Var> fuse(const Var& novel, const std::vector<Var>& refined, FusionMode mode,
                             const HeadFn& novel_head, const std::vector<HeadFn>& support_heads = {}) {
  if (refined.empty()) return novel_head(novel);
  for (const auto& r : refined)
    if (r.rows() != novel.rows() || r.cols() != novel.cols()) throw ShapeError("fuse: refined feature shape mismatch");
  if (mode == FusionMode::Features) {
    Var acc = novel;
    for (const auto& r : refined) acc = ops::add(acc, r);
    return novel_head(ops::scale(acc, 1.0 / static_cast<double>(refined.size() + 1)));
  }
  if (support_heads.size() != refined.size()) throw std::invalid_argument("fuse: one support head per task required");
  auto out = novel_head(novel);
  for (std::size_t k = 0; k < refined.size(); ++k) {
    auto add = support_heads[k](refined[k]);
    if (add.size() != out.size()) throw std::invalid_argument("fuse: head output block count mismatch");
    for (std::size_t b = 0; b < out.size(); ++b) out[b] = ops::add(out[b], add[b]);
  }
  return out;
}

// Frequency of activations per verb label.
inline std::map<int, double> activation_histogram(const std::vector<std::size_t>& activated,
                                                  const std::vector<LabelPair>& labels) {
  std::map<int, double> h;
  if (activated.empty()) return h;
  for (auto i : activated) h[labels.at(i).first] += 1.0;
  for (auto& [v, c] : h) c /= static_cast<double>(activated.size());
  return h;
}

// Mean Jaccard overlap (percent) of per-sample label sets of two tasks. Two
// empty sets count as full agreement.
template <class Label>
double activation_consensus(const std::vector<std::set<Label>>& a, const std::vector<std::set<Label>>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("consensus: both tasks must cover the same samples");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::size_t both = 0;
    for (const auto& l : a[i]) both += b[i].count(l);
    const std::size_t either = a[i].size() + b[i].size() - both;
    s += either ? static_cast<double>(both) / static_cast<double>(either) : 1.0;
  }
  return 100.0 * s / static_cast<double>(a.size());
}

// ---- persistence -----------------------------------------------------------
// <dir>/<task>.bin: float32 little-endian row-major P x D
// <dir>/bank.json:  {"tasks": [...], "rows": P, "dim": D, "labels": [[verb, noun], ...]}

inline void write_f32(const std::filesystem::path& file, const Tensor& m) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  for (double v : m.values()) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    os.write(reinterpret_cast<const char*>(&bits), 4);
  }
}

inline Tensor read_f32(const std::filesystem::path& file, std::size_t rows, std::size_t cols) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  Tensor m = Tensor::zeros(rows, cols);
  for (auto& v : m.values()) {
    std::uint32_t bits = 0;
    if (!is.read(reinterpret_cast<char*>(&bits), 4)) throw std::runtime_error(file.string() + ": truncated");
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    v = std::bit_cast<float>(bits);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error(file.string() + ": trailing bytes");
  return m;
}

inline void save_bank(const PrototypeBank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["tasks"] = bank.tasks();
  j["rows"] = bank.rows();
  j["dim"] = bank.dim();
  j["labels"] = nlohmann::json::array();
  for (const auto& [v, n] : bank.labels()) j["labels"].push_back({v, n});
  for (const auto& t : bank.tasks()) write_f32(dir / (t + ".bin"), bank.matrix(t));
  std::ofstream(dir / "bank.json") << j.dump(2) << "\n";
}

inline PrototypeBank load_bank(const std::filesystem::path& dir) {
  std::ifstream is(dir / "bank.json");
  if (!is) throw std::runtime_error("cannot read " + (dir / "bank.json").string());
  nlohmann::json j = nlohmann::json::parse(is);
  std::vector<LabelPair> labels;
  for (const auto& l : j.at("labels")) labels.emplace_back(l.at(0).get<int>(), l.at(1).get<int>());
  const auto rows = j.at("rows").get<std::size_t>(), dim = j.at("dim").get<std::size_t>();
  if (labels.size() != rows) throw std::runtime_error("bank.json: label count does not match rows");
  PrototypeBank bank(labels);
  for (const auto& t : j.at("tasks")) {
    const auto name = t.get<std::string>();
    bank.add_task(name, read_f32(dir / (name + ".bin"), rows, dim));
  }
  bank.freeze();
  return bank;
}

}  // namespace tgk
