#pragma once

// Detection scoring against ground truth: greedy matching, all-point
// interpolated average precision and its mean over classes.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "edgeped/detect.hpp"
#include "edgeped/error.hpp"

namespace edgeped {

struct GroundTruth {
  BBox bbox;
  int class_id = 0;
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

// image id -> boxes. std::map keeps ids unique and iteration deterministic.
using GroundTruthSet = std::map<std::string, std::vector<GroundTruth>>;
using DetectionSet = std::map<std::string, std::vector<Detection>>;

struct MatchFlag {
  float confidence = 0;
  bool is_tp = false;
  int class_id = 0;
};

inline constexpr double kMatchIouThreshold = 0.5;

// Visits all detections by descending confidence (ties: image id, then input
// order). Each one takes the best-IoU still-unmatched same-class ground truth
// in its image if that IoU reaches the threshold; otherwise it is a false positive.
inline std::vector<MatchFlag> match_detections(const DetectionSet& dets, const GroundTruthSet& gts,
                                               double iou_threshold = kMatchIouThreshold) {
  struct Ref {
    const std::string* image;
    std::size_t index;
    const Detection* det;
  };
  std::vector<Ref> refs;
  for (const auto& [image, list] : dets) {
    if (!gts.contains(image)) throw ValidationError("detections reference unknown image id '" + image + "'");
    for (std::size_t i = 0; i < list.size(); ++i) refs.push_back({&image, i, &list[i]});
  }
  // refs are already in (image id, input order); a stable sort keeps that as the tie-break.
  std::stable_sort(refs.begin(), refs.end(),
                   [](const Ref& a, const Ref& b) { return a.det->confidence > b.det->confidence; });

  std::map<std::string, std::vector<bool>> used;
  for (const auto& [image, list] : gts) used[image].assign(list.size(), false);

  std::vector<MatchFlag> flags;
  flags.reserve(refs.size());
  for (const auto& r : refs) {
    const auto& truth = gts.at(*r.image);
    auto& taken = used[*r.image];
    double best = -1.0;
    std::size_t best_idx = truth.size();
    for (std::size_t g = 0; g < truth.size(); ++g) {
      if (taken[g] || truth[g].class_id != r.det->class_id) continue;
      const double v = iou(r.det->bbox, truth[g].bbox);
      if (v > best) {
        best = v;
        best_idx = g;
      }
    }
    const bool tp = best_idx < truth.size() && best >= iou_threshold;
    if (tp) taken[best_idx] = true;
    flags.push_back({r.det->confidence, tp, r.det->class_id});
  }
  return flags;
}

// Area under the monotone (non-increasing) precision envelope over recall.
inline double average_precision(std::span<const MatchFlag> flags, std::size_t total_gt) {
  if (total_gt == 0 || flags.empty()) return 0.0;
  std::vector<MatchFlag> sorted(flags.begin(), flags.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const MatchFlag& a, const MatchFlag& b) { return a.confidence > b.confidence; });

  std::vector<double> precision(sorted.size()), recall(sorted.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i].is_tp) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
  }
  for (std::size_t i = sorted.size() - 1; i > 0; --i)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return std::clamp(ap, 0.0, 1.0);
}

inline double mean_average_precision(std::span<const double> per_class_ap) {
  if (per_class_ap.empty()) throw ValidationError("mean_average_precision needs at least one class");
  double sum = 0.0;
  for (double ap : per_class_ap) sum += ap;
  return sum / static_cast<double>(per_class_ap.size());
}

struct EvalReport {
  std::map<int, double> per_class_ap;
  double map = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t total_gt = 0;
};

// Scores every class seen in either the ground truth or the detections.
inline EvalReport evaluate(const DetectionSet& dets, const GroundTruthSet& gts,
                           double iou_threshold = kMatchIouThreshold) {
  const auto flags = match_detections(dets, gts, iou_threshold);
  std::map<int, std::size_t> gt_per_class;
  std::set<int> classes;
  for (const auto& [_, list] : gts)
    for (const auto& g : list) {
      ++gt_per_class[g.class_id];
      classes.insert(g.class_id);
    }
  for (const auto& f : flags) classes.insert(f.class_id);

  EvalReport report;
  for (const auto& [_, n] : gt_per_class) report.total_gt += n;
  for (const auto& f : flags) (f.is_tp ? report.tp : report.fp) += 1;
  if (classes.empty()) return report;

  std::vector<double> aps;
  for (int c : classes) {
    std::vector<MatchFlag> mine;
    std::copy_if(flags.begin(), flags.end(), std::back_inserter(mine),
                 [c](const MatchFlag& f) { return f.class_id == c; });
    const double ap = average_precision(mine, gt_per_class[c]);
    report.per_class_ap[c] = ap;
    aps.push_back(ap);
  }
  report.map = mean_average_precision(aps);
  return report;
}

// ---------------------------------------------------------------------------
// JSON files: {"<image id>": [{"x1":..,"y1":..,"x2":..,"y2":..,"class":N
// [, "confidence":F]}, ...], ...}

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("'" + path + "' is not valid JSON at byte " + std::to_string(e.byte));
  }
}

inline BBox box_from_json(const nlohmann::json& o, const std::string& where) {
  for (const char* k : {"x1", "y1", "x2", "y2"})
    if (!o.contains(k) || !o[k].is_number()) throw ValidationError(where + ": missing numeric field '" + k + "'");
  const float x1 = o["x1"].get<float>(), y1 = o["y1"].get<float>();
  const float x2 = o["x2"].get<float>(), y2 = o["y2"].get<float>();
  if (x2 < x1 || y2 < y1) throw ValidationError(where + ": box has negative extent");
  return BBox::from_corners(x1, y1, x2, y2);
}

}  // namespace detail

inline GroundTruthSet ground_truth_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("ground truth must be a JSON object of image id -> boxes");
  GroundTruthSet out;
  for (const auto& [image, list] : j.items()) {
    if (!list.is_array()) throw ValidationError("ground truth for '" + image + "' must be an array");
    auto& dst = out[image];
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto where = image + "[" + std::to_string(i) + "]";
      GroundTruth g{detail::box_from_json(list[i], where), 0};
      if (!list[i].contains("class") || !list[i]["class"].is_number_integer())
        throw ValidationError(where + ": missing integer field 'class'");
      g.class_id = list[i]["class"].get<int>();
      if (g.bbox.area() <= 0) throw ValidationError(where + ": degenerate ground-truth box");
      dst.push_back(g);
    }
  }
  return out;
}

inline DetectionSet detections_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("detections must be a JSON object of image id -> boxes");
  DetectionSet out;
  for (const auto& [image, list] : j.items()) {
    if (!list.is_array()) throw ValidationError("detections for '" + image + "' must be an array");
    auto& dst = out[image];
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto where = image + "[" + std::to_string(i) + "]";
      Detection d;
      d.bbox = detail::box_from_json(list[i], where);
      if (!list[i].contains("class") || !list[i]["class"].is_number_integer())
        throw ValidationError(where + ": missing integer field 'class'");
      if (!list[i].contains("confidence") || !list[i]["confidence"].is_number())
        throw ValidationError(where + ": missing numeric field 'confidence'");
      d.class_id = list[i]["class"].get<int>();
      d.confidence = list[i]["confidence"].get<float>();
      dst.push_back(d);
    }
  }
  return out;
}

inline nlohmann::json detections_to_json(const DetectionSet& dets) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [image, list] : dets) {
    auto arr = nlohmann::json::array();
    for (const auto& d : list)
      arr.push_back({{"x1", d.bbox.x1()},
                     {"y1", d.bbox.y1()},
                     {"x2", d.bbox.x2()},
                     {"y2", d.bbox.y2()},
                     {"class", d.class_id},
                     {"confidence", d.confidence}});
    j[image] = std::move(arr);
  }
  return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, ap] : r.per_class_ap) per_class[std::to_string(c)] = ap;
  return {{"per_class_ap", per_class}, {"map", r.map}, {"tp", r.tp}, {"fp", r.fp}, {"total_gt", r.total_gt}};
}

}  // namespace edgeped
