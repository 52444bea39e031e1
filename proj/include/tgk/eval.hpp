#pragma once

// Metrics: top-1 accuracy, edit distance, localization error, soft-NMS and
// detection mAP / recall@k.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "tgk/tasks.hpp"

namespace tgk {

inline double top1_accuracy(const std::vector<int>& preds, const std::vector<int>& gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("top1: length mismatch");
  if (preds.empty()) throw std::invalid_argument("top1: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == gts[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(preds.size());
}

// Unit-cost insert/delete/substitute.
inline std::size_t levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1] ? 1 : 0)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Best of K candidates, normalized by Z.
inline double edit_distance(const std::vector<std::vector<int>>& candidates, const std::vector<int>& gt) {
  if (candidates.empty()) throw std::invalid_argument("edit_distance: no candidates");
  if (gt.empty()) throw std::invalid_argument("edit_distance: empty ground truth");
  std::size_t best = gt.size();
  for (const auto& c : candidates) {
    if (c.size() != gt.size()) throw std::invalid_argument("edit_distance: sequence length mismatch");
    best = std::min(best, levenshtein(c, gt));
  }
  return static_cast<double>(best) / static_cast<double>(gt.size());
}

inline double localization_error(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("localization_error: length mismatch");
  if (pred.empty()) throw std::invalid_argument("localization_error: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!std::isfinite(pred[i]) || !std::isfinite(gt[i])) throw std::invalid_argument("localization_error: non-finite");
    s += std::abs(pred[i] - gt[i]);
  }
  return s / static_cast<double>(pred.size());
}

inline double segment_iou(double a0, double a1, double b0, double b1) {
  const double inter = std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
  const double uni = (a1 - a0) + (b1 - b0) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}
inline double segment_iou(const SegmentPrediction& a, const SegmentPrediction& b) {
  return segment_iou(a.start, a.end, b.start, b.end);
}

struct IouGrid {
  std::vector<double> thresholds{0.1, 0.2, 0.3, 0.4, 0.5};

  void validate() const {
    if (thresholds.empty()) throw std::invalid_argument("iou grid: empty");
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (!(thresholds[i] > 0.0 && thresholds[i] <= 1.0)) throw std::invalid_argument("iou grid: value outside (0,1]");
      if (i && !(thresholds[i] > thresholds[i - 1])) throw std::invalid_argument("iou grid: not strictly increasing");
    }
  }
};

inline bool prediction_before(const SegmentPrediction& a, const SegmentPrediction& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.start != b.start) return a.start < b.start;
  if (a.end != b.end) return a.end < b.end;
  return a.label < b.label;
}

// Gaussian soft-NMS within one video. Same-class survivors decay by
// exp(-IoU^2 / sigma) each time a higher-scored prediction is selected.
inline std::vector<SegmentPrediction> soft_nms(std::vector<SegmentPrediction> preds, double sigma = 2.0,
                                               double score_floor = 0.001) {
  if (!(sigma > 0.0)) throw std::invalid_argument("soft_nms: sigma must be positive");
  std::vector<SegmentPrediction> keep;
  while (!preds.empty()) {
    auto it = std::min_element(preds.begin(), preds.end(), prediction_before);
    SegmentPrediction top = *it;
    preds.erase(it);
    if (top.score < score_floor) break;
    keep.push_back(top);
    for (auto& p : preds)
      if (p.label == top.label) {
        const double iou = segment_iou(p, top);
        p.score *= std::exp(-iou * iou / sigma);
      }
    std::erase_if(preds, [&](const SegmentPrediction& p) { return p.score < score_floor; });
  }
  std::stable_sort(keep.begin(), keep.end(), prediction_before);
  return keep;
}

struct DetectionMetrics {
  std::vector<double> ap;  // per threshold, mean over classes, in [0,1]
  double average_map = 0.0;
  double recall_at_1 = 0.0;
  double recall_at_5 = 0.0;
};

namespace detail {

struct Ranked {
  SegmentPrediction p;
  std::size_t video;
};

// All-point interpolated AP for one class at one threshold.
inline double class_ap(std::vector<Ranked> preds, const std::vector<std::vector<const AnnotatedSegment*>>& gts,
                       double thr) {
  std::size_t total = 0;
  for (const auto& g : gts) total += g.size();
  if (total == 0) return 0.0;
  std::stable_sort(preds.begin(), preds.end(), [](const Ranked& a, const Ranked& b) {
    if (a.p.score != b.p.score) return a.p.score > b.p.score;
    if (a.video != b.video) return a.video < b.video;
    return a.p.start < b.p.start;
  });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t v = 0; v < gts.size(); ++v) used[v].assign(gts[v].size(), false);
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto& r = preds[k];
    double best = -1.0;
    std::size_t bi = 0;
    for (std::size_t g = 0; g < gts[r.video].size(); ++g) {
      if (used[r.video][g]) continue;
      const double iou = segment_iou(r.p.start, r.p.end, gts[r.video][g]->start, gts[r.video][g]->end);
      if (iou >= thr && iou > best) {
        best = iou;
        bi = g;
      }
    }
    if (best >= 0.0) {
      used[r.video][bi] = true;
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(total));
  }
  for (std::size_t k = prec.size(); k-- > 1;) prec[k - 1] = std::max(prec[k - 1], prec[k]);
  double ap = 0.0, last = 0.0;
  for (std::size_t k = 0; k < prec.size(); ++k) {
    ap += (rec[k] - last) * prec[k];
    last = rec[k];
  }
  return ap;
}

}  // namespace detail

// Greedy one-to-one matching per class and threshold; classes without ground
// truth are excluded. recall@k counts a ground truth as found when one of the
// k best predictions of its class in its video reaches IoU 0.5.
inline DetectionMetrics map_at_iou(const std::vector<std::vector<SegmentPrediction>>& preds,
                                   const std::vector<std::vector<AnnotatedSegment>>& gts, const IouGrid& grid = {}) {
  grid.validate();
  if (preds.size() != gts.size()) throw std::invalid_argument("map_at_iou: video count mismatch");
  std::map<int, std::vector<std::vector<const AnnotatedSegment*>>> by_class;
  for (std::size_t v = 0; v < gts.size(); ++v)
    for (const auto& g : gts[v]) {
      auto& slot = by_class[g.label];
      slot.resize(gts.size());
      slot[v].push_back(&g);
    }
  DetectionMetrics m;
  m.ap.assign(grid.thresholds.size(), 0.0);
  if (by_class.empty()) return m;
  for (auto& [label, per_video] : by_class) {
    std::vector<detail::Ranked> mine;
    for (std::size_t v = 0; v < preds.size(); ++v)
      for (const auto& p : preds[v])
        if (p.label == label) mine.push_back({p, v});
    for (std::size_t t = 0; t < grid.thresholds.size(); ++t)
      m.ap[t] += detail::class_ap(mine, per_video, grid.thresholds[t]);
  }
  for (auto& a : m.ap) a /= static_cast<double>(by_class.size());
  for (double a : m.ap) m.average_map += a;
  m.average_map /= static_cast<double>(m.ap.size());

  std::size_t total = 0, hit1 = 0, hit5 = 0;
  for (std::size_t v = 0; v < gts.size(); ++v) {
    std::map<int, std::vector<SegmentPrediction>> ranked;
    for (const auto& p : preds[v]) ranked[p.label].push_back(p);
    for (auto& [l, list] : ranked) std::stable_sort(list.begin(), list.end(), prediction_before);
    for (const auto& g : gts[v]) {
      ++total;
      auto it = ranked.find(g.label);
      if (it == ranked.end()) continue;
      for (std::size_t k = 0; k < std::min<std::size_t>(5, it->second.size()); ++k)
        if (segment_iou(it->second[k].start, it->second[k].end, g.start, g.end) >= 0.5) {
          if (k < 1) ++hit1;
          ++hit5;
          break;
        }
    }
  }
  m.recall_at_1 = static_cast<double>(hit1) / static_cast<double>(total);
  m.recall_at_5 = static_cast<double>(hit5) / static_cast<double>(total);
  return m;
}

}  // namespace tgk
