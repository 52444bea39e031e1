#pragma once

// Synthetic desk-scale videos and task annotations.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tgk/egopack.hpp"
#include "tgk/nn.hpp"
#include "tgk/tasks.hpp"

namespace tgk {

enum class Task { AR, OSCC, PNR, LTA, MQ, ORDER };

inline const std::vector<Task>& all_tasks() {
  static const std::vector<Task> t{Task::AR, Task::OSCC, Task::PNR, Task::LTA, Task::MQ, Task::ORDER};
  return t;
}

inline const char* task_name(Task t) {
  switch (t) {
    case Task::AR: return "AR";
    case Task::OSCC: return "OSCC";
    case Task::PNR: return "PNR";
    case Task::LTA: return "LTA";
    case Task::MQ: return "MQ";
    case Task::ORDER: return "ORDER";
  }
  return "?";
}

inline Task task_from_name(const std::string& s) {
  for (auto t : all_tasks())
    if (s == task_name(t)) return t;
  throw std::invalid_argument("unknown task '" + s + "'");
}

struct SyntheticTaskSpec {
  int train_videos = 200;
  int test_videos = 50;
  int segments = 64;  // N, one node per second
  int dim = 32;
  int verbs = 8;
  int nouns = 6;
  double noise = 0.5;
  std::vector<Task> tasks{Task::AR, Task::OSCC, Task::PNR, Task::LTA, Task::MQ};

  int min_event = 2;
  int max_event = 10;
  int max_gap = 3;
  double follow_prob = 0.8;  // chance the next event follows the transition rule
  int state_changing_verbs = 4;  // verbs [0, k) change object state
  int lta_z = 4;

  int order_windows = 2000;
  int order_segments = 16;
  double order_test_fraction = 0.2;
  int order_max_origin = 0;  // windows start at a uniform integer second in [0, this]

  void validate() const {
    if (verbs < 2 || nouns < 2) throw std::invalid_argument("spec: vocabulary sizes must be at least 2");
    if (noise < 0) throw std::invalid_argument("spec: noise must be non-negative");
    if (train_videos < 1 || test_videos < 1) throw std::invalid_argument("spec: need train and test videos");
    if (dim < 2 || dim % 2) throw std::invalid_argument("spec: dim must be even and at least 2");
    if (min_event < 1 || max_event < min_event || max_gap < 0) throw std::invalid_argument("spec: bad event lengths");
    if (state_changing_verbs < 1 || state_changing_verbs >= verbs)
      throw std::invalid_argument("spec: state-changing subset must be a proper non-empty subset");
    if (lta_z < 1) throw std::invalid_argument("spec: lta_z must be positive");
    if (segments < min_event) throw std::invalid_argument("spec: more events requested than segments");
    const bool lta = std::find(tasks.begin(), tasks.end(), Task::LTA) != tasks.end();
    if (lta && segments < (lta_z + 1) * min_event)
      throw std::invalid_argument("spec: videos too short for the requested number of future events");
    const bool order = std::find(tasks.begin(), tasks.end(), Task::ORDER) != tasks.end();
    if (order) {
      if (order_segments < 3 * min_event) throw std::invalid_argument("spec: ORDER window cannot hold three events");
      if (verbs < 3) throw std::invalid_argument("spec: ORDER needs a distractor verb");
      if (order_windows < 2) throw std::invalid_argument("spec: ORDER needs at least two windows");
      if (order_max_origin < 0) throw std::invalid_argument("spec: ORDER origin range must be non-negative");
    }
  }
};

struct Event {
  int start = 0;  // first segment
  int end = 0;    // one past the last segment
  int verb = 0;
  int noun = 0;
};

struct Video {
  Tensor features;  // N x D
  std::vector<double> timestamps;
  std::vector<Event> events;
  double duration = 0.0;
};

struct ArSample {
  std::size_t video;
  AnnotatedSegment segment;  // label = verb, label2 = noun
};
struct OsccSample {
  std::size_t video;
  AnnotatedSegment segment;
  int changed;
};
struct PnrSample {
  std::size_t video;
  AnnotatedSegment segment;
  double pnr_time;
};
struct LtaSample {
  std::size_t video;
  double cut_time;           // observed part is [0, cut_time)
  AnnotatedSegment context;  // last observed event
  std::vector<int> future_verbs, future_nouns;
};
struct OrderWindow {
  Video video;  // three events; node i sits at origin + i + 0.5, events are in node indices
  int label;    // 1 iff the verb-0 event precedes the verb-1 event
  double origin = 0.0;
};

struct Split {
  std::vector<Video> videos;
  std::vector<ArSample> ar;
  std::vector<OsccSample> oscc;
  std::vector<PnrSample> pnr;
  std::vector<LtaSample> lta;
  std::vector<std::vector<AnnotatedSegment>> mq;  // per video, label = verb
  std::vector<OrderWindow> order;
};

struct Dataset {
  SyntheticTaskSpec spec;
  std::uint64_t seed = 0;
  Split train, test;
};

namespace detail {

struct Vocabulary {
  Tensor verb, noun, background, changed;  // rows are class patterns
};

inline Vocabulary make_vocabulary(const SyntheticTaskSpec& s, Rng& rng) {
  const double scale = 2.0 / std::sqrt(static_cast<double>(s.dim));
  Vocabulary v;
  v.verb = Tensor::normal(s.verbs, s.dim, scale, rng);
  v.noun = Tensor::normal(s.nouns, s.dim, scale, rng);
  v.background = Tensor::normal(1, s.dim, scale, rng);
  v.changed = Tensor::normal(1, s.dim, scale, rng);
  return v;
}

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// `state_changes` off keeps every event constant in time, so an ORDER window
// carries no direction cue inside an event.
inline void fill_features(Video& v, const SyntheticTaskSpec& s, const Vocabulary& voc, Rng& rng,
                          bool state_changes = true) {
  const std::size_t n = v.timestamps.size();
  v.features = Tensor::zeros(n, static_cast<std::size_t>(s.dim));
  std::vector<int> owner(n, -1);
  for (std::size_t e = 0; e < v.events.size(); ++e)
    for (int i = v.events[e].start; i < v.events[e].end; ++i) owner[static_cast<std::size_t>(i)] = static_cast<int>(e);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < v.features.cols(); ++c) {
      double x = 0.0;
      if (owner[i] < 0) {
        x = voc.background[c];
      } else {
        const Event& ev = v.events[static_cast<std::size_t>(owner[i])];
        x = voc.verb(static_cast<std::size_t>(ev.verb), c) + voc.noun(static_cast<std::size_t>(ev.noun), c);
        const int pnr = ev.start + (ev.end - ev.start) / 2;
        if (state_changes && ev.verb < s.state_changing_verbs && static_cast<int>(i) >= pnr) x += voc.changed[c];
      }
      v.features(i, c) = x + s.noise * g(rng);
    }
  }
}

inline Video make_video(const SyntheticTaskSpec& s, const Vocabulary& voc, Rng& rng) {
  Video v;
  v.duration = s.segments;
  for (int i = 0; i < s.segments; ++i) v.timestamps.push_back(i + 0.5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int cursor = uniform_int(rng, 0, s.max_gap);
  int verb = uniform_int(rng, 0, s.verbs - 1), noun = uniform_int(rng, 0, s.nouns - 1);
  while (cursor + s.min_event <= s.segments) {
    const int len = std::min(uniform_int(rng, s.min_event, s.max_event), s.segments - cursor);
    v.events.push_back({cursor, cursor + len, verb, noun});
    cursor += len + uniform_int(rng, 0, s.max_gap);
    if (u(rng) < s.follow_prob) {
      noun = (noun + verb + 1) % s.nouns;
      verb = (verb + 1) % s.verbs;
    } else {
      verb = uniform_int(rng, 0, s.verbs - 1);
      noun = uniform_int(rng, 0, s.nouns - 1);
    }
  }
  if (v.events.empty()) throw std::invalid_argument("spec: video has room for no event");
  fill_features(v, s, voc, rng);
  return v;
}

inline OrderWindow make_window(const SyntheticTaskSpec& s, const Vocabulary& voc, Rng& rng) {
  const int W = s.order_segments;
  int lens[3];
  int total = 0;
  const int cap = std::min(s.max_event, W / 3);
  for (int& l : lens) total += (l = uniform_int(rng, s.min_event, std::max(s.min_event, cap)));
  int verbs[3] = {0, 1, uniform_int(rng, 2, s.verbs - 1)};
  int order[3] = {0, 1, 2};
  std::shuffle(order, order + 3, rng);
  // split the free segments into four gaps
  int free = W - total;
  int gaps[4] = {0, 0, 0, 0};
  for (int k = 0; k < free; ++k) ++gaps[uniform_int(rng, 0, 3)];
  OrderWindow w;
  w.origin = uniform_int(rng, 0, s.order_max_origin);
  w.video.duration = W;
  for (int i = 0; i < W; ++i) w.video.timestamps.push_back(w.origin + i + 0.5);
  int cursor = gaps[0];
  for (int k = 0; k < 3; ++k) {
    const int e = order[k];
    w.video.events.push_back({cursor, cursor + lens[e], verbs[e], uniform_int(rng, 0, s.nouns - 1)});
    cursor += lens[e] + gaps[k + 1];
  }
  auto pos_of = [&](int verb) {
    for (std::size_t k = 0; k < 3; ++k)
      if (w.video.events[k].verb == verb) return k;
    return std::size_t{0};
  };
  w.label = pos_of(0) < pos_of(1) ? 1 : 0;
  fill_features(w.video, s, voc, rng, false);
  return w;
}

inline AnnotatedSegment event_segment(const Event& e, int label, int label2 = -1) {
  return {static_cast<double>(e.start), static_cast<double>(e.end), label, label2};
}

inline void annotate(Split& sp, const SyntheticTaskSpec& s, Rng& rng) {
  for (std::size_t v = 0; v < sp.videos.size(); ++v) {
    const auto& ev = sp.videos[v].events;
    std::vector<AnnotatedSegment> mq;
    for (const auto& e : ev) {
      sp.ar.push_back({v, event_segment(e, e.verb, e.noun)});
      const int changed = e.verb < s.state_changing_verbs ? 1 : 0;
      sp.oscc.push_back({v, event_segment(e, changed), changed});
      if (changed && e.end - e.start >= 2)
        sp.pnr.push_back({v, event_segment(e, 1), sp.videos[v].timestamps[static_cast<std::size_t>(e.start + (e.end - e.start) / 2)]});
      mq.push_back(event_segment(e, e.verb));
    }
    sp.mq.push_back(std::move(mq));
    if (static_cast<int>(ev.size()) > s.lta_z) {
      const int last = uniform_int(rng, 0, static_cast<int>(ev.size()) - 1 - s.lta_z);
      LtaSample l{v, static_cast<double>(ev[static_cast<std::size_t>(last)].end),
                  event_segment(ev[static_cast<std::size_t>(last)], ev[static_cast<std::size_t>(last)].verb),
                  {},
                  {}};
      for (int z = 1; z <= s.lta_z; ++z) {
        l.future_verbs.push_back(ev[static_cast<std::size_t>(last + z)].verb);
        l.future_nouns.push_back(ev[static_cast<std::size_t>(last + z)].noun);
      }
      sp.lta.push_back(std::move(l));
    }
  }
}

}  // namespace detail

inline bool has_task(const std::vector<Task>& tasks, Task t) {
  return std::find(tasks.begin(), tasks.end(), t) != tasks.end();
}

// Everything derives from `seed` through named streams, so the same inputs
// always give the same dataset.
inline Dataset generate_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.seed = seed;
  Rng vrng = component_rng(seed, "data.vocabulary");
  const auto voc = detail::make_vocabulary(spec, vrng);
  Rng rng = component_rng(seed, "data.videos");
  for (int i = 0; i < spec.train_videos; ++i) d.train.videos.push_back(detail::make_video(spec, voc, rng));
  for (int i = 0; i < spec.test_videos; ++i) d.test.videos.push_back(detail::make_video(spec, voc, rng));
  Rng arng = component_rng(seed, "data.annotations");
  detail::annotate(d.train, spec, arng);
  detail::annotate(d.test, spec, arng);
  if (has_task(spec.tasks, Task::ORDER)) {
    Rng orng = component_rng(seed, "data.order");
    const int test = std::max(1, static_cast<int>(spec.order_windows * spec.order_test_fraction));
    for (int i = 0; i < spec.order_windows; ++i)
      (i < spec.order_windows - test ? d.train : d.test).order.push_back(detail::make_window(spec, voc, orng));
  }
  return d;
}

// Mirror a window in time: node i takes the features of node W-1-i and every
// event is reflected. The ORDER label flips.
inline OrderWindow reverse_window(const OrderWindow& w) {
  OrderWindow r = w;
  const std::size_t n = w.video.timestamps.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < w.video.features.cols(); ++c) r.video.features(i, c) = w.video.features(n - 1 - i, c);
  r.video.events.clear();
  for (auto it = w.video.events.rbegin(); it != w.video.events.rend(); ++it)
    r.video.events.push_back({static_cast<int>(n) - it->end, static_cast<int>(n) - it->start, it->verb, it->noun});
  std::size_t a = 0, b = 0;
  for (std::size_t k = 0; k < r.video.events.size(); ++k) {
    if (r.video.events[k].verb == 0) a = k;
    if (r.video.events[k].verb == 1) b = k;
  }
  r.label = a < b ? 1 : 0;
  return r;
}

inline std::vector<LabelPair> ar_label_pairs(const Split& s) {
  std::vector<LabelPair> out;
  for (const auto& a : s.ar) out.push_back({a.segment.label, a.segment.label2});
  return out;
}

// ---- files -------------------------------------------------------------------
// <dir>/features/<split>_<k>.bin  float32 LE row-major N x D
// <dir>/annotations/<split>.json  videos + per-task sidecars

inline nlohmann::json segment_json(const AnnotatedSegment& s) {
  nlohmann::json j{{"start_s", s.start}, {"end_s", s.end}, {"labels", {{"label", s.label}}}};
  if (s.label2 >= 0) j["labels"]["noun"] = s.label2;
  return j;
}

inline AnnotatedSegment segment_from_json(const nlohmann::json& j) {
  AnnotatedSegment s{j.at("start_s").get<double>(), j.at("end_s").get<double>(), j.at("labels").at("label").get<int>()};
  if (j.at("labels").contains("noun")) s.label2 = j.at("labels").at("noun").get<int>();
  return s;
}

inline nlohmann::json split_json(const Split& s) {
  nlohmann::json j;
  j["videos"] = nlohmann::json::array();
  for (const auto& v : s.videos) {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : v.events) ev.push_back({e.start, e.end, e.verb, e.noun});
    j["videos"].push_back({{"segments", v.timestamps.size()}, {"duration", v.duration}, {"events", ev}});
  }
  j["AR"] = nlohmann::json::array();
  for (const auto& a : s.ar) j["AR"].push_back({{"video", a.video}, {"segment", segment_json(a.segment)}});
  j["OSCC"] = nlohmann::json::array();
  for (const auto& a : s.oscc)
    j["OSCC"].push_back({{"video", a.video}, {"segment", segment_json(a.segment)}, {"changed", a.changed}});
  j["PNR"] = nlohmann::json::array();
  for (const auto& a : s.pnr)
    j["PNR"].push_back({{"video", a.video}, {"segment", segment_json(a.segment)}, {"pnr_s", a.pnr_time}});
  j["LTA"] = nlohmann::json::array();
  for (const auto& a : s.lta)
    j["LTA"].push_back({{"video", a.video},
                        {"cut_s", a.cut_time},
                        {"context", segment_json(a.context)},
                        {"future_verbs", a.future_verbs},
                        {"future_nouns", a.future_nouns}});
  j["MQ"] = nlohmann::json::array();
  for (const auto& per : s.mq) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& g : per) a.push_back(segment_json(g));
    j["MQ"].push_back(a);
  }
  j["ORDER"] = nlohmann::json::array();
  for (const auto& w : s.order) {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : w.video.events) ev.push_back({e.start, e.end, e.verb, e.noun});
    j["ORDER"].push_back({{"label", w.label}, {"origin", w.origin}, {"events", ev}});
  }
  return j;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "features");
  fs::create_directories(dir / "annotations");
  for (auto [name, split] : {std::pair<const char*, const Split*>{"train", &d.train}, {"test", &d.test}}) {
    for (std::size_t v = 0; v < split->videos.size(); ++v)
      write_f32(dir / "features" / (std::string(name) + "_" + std::to_string(v) + ".bin"), split->videos[v].features);
    for (std::size_t w = 0; w < split->order.size(); ++w)
      write_f32(dir / "features" / (std::string(name) + "_order_" + std::to_string(w) + ".bin"),
                split->order[w].video.features);
    std::ofstream(dir / "annotations" / (std::string(name) + ".json")) << split_json(*split).dump(1) << "\n";
  }
}

inline Split load_split(const std::filesystem::path& dir, const std::string& name, std::size_t dim) {
  std::ifstream is(dir / "annotations" / (name + ".json"));
  if (!is) throw std::runtime_error("cannot read annotations for split " + name);
  const auto j = nlohmann::json::parse(is);
  Split s;
  auto read_events = [](const nlohmann::json& ev) {
    std::vector<Event> out;
    for (const auto& e : ev) out.push_back({e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<int>(), e.at(3).get<int>()});
    return out;
  };
  for (std::size_t v = 0; v < j.at("videos").size(); ++v) {
    const auto& jv = j["videos"][v];
    Video vid;
    const auto n = jv.at("segments").get<std::size_t>();
    for (std::size_t i = 0; i < n; ++i) vid.timestamps.push_back(static_cast<double>(i) + 0.5);
    vid.duration = jv.at("duration").get<double>();
    vid.events = read_events(jv.at("events"));
    vid.features = read_f32(dir / "features" / (name + "_" + std::to_string(v) + ".bin"), n, dim);
    s.videos.push_back(std::move(vid));
  }
  for (const auto& a : j.at("AR")) s.ar.push_back({a.at("video").get<std::size_t>(), segment_from_json(a.at("segment"))});
  for (const auto& a : j.at("OSCC"))
    s.oscc.push_back({a.at("video").get<std::size_t>(), segment_from_json(a.at("segment")), a.at("changed").get<int>()});
  for (const auto& a : j.at("PNR"))
    s.pnr.push_back({a.at("video").get<std::size_t>(), segment_from_json(a.at("segment")), a.at("pnr_s").get<double>()});
  for (const auto& a : j.at("LTA"))
    s.lta.push_back({a.at("video").get<std::size_t>(), a.at("cut_s").get<double>(), segment_from_json(a.at("context")),
                     a.at("future_verbs").get<std::vector<int>>(), a.at("future_nouns").get<std::vector<int>>()});
  for (const auto& per : j.at("MQ")) {
    std::vector<AnnotatedSegment> g;
    for (const auto& x : per) g.push_back(segment_from_json(x));
    s.mq.push_back(std::move(g));
  }
  for (std::size_t w = 0; w < j.at("ORDER").size(); ++w) {
    const auto& jw = j["ORDER"][w];
    OrderWindow ow;
    ow.label = jw.at("label").get<int>();
    ow.origin = jw.at("origin").get<double>();
    ow.video.events = read_events(jw.at("events"));
    // window length follows from the feature file size
    const auto file = dir / "features" / (name + "_order_" + std::to_string(w) + ".bin");
    const auto n = std::filesystem::file_size(file) / (4 * dim);
    for (std::size_t i = 0; i < n; ++i) ow.video.timestamps.push_back(ow.origin + static_cast<double>(i) + 0.5);
    ow.video.duration = static_cast<double>(n);
    ow.video.features = read_f32(file, n, dim);
    s.order.push_back(std::move(ow));
  }
  return s;
}

}  // namespace tgk
