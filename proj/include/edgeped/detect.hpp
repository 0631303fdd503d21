#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "edgeped/error.hpp"
#include "edgeped/model.hpp"
#include "edgeped/tensor.hpp"

namespace edgeped {

// Center/size box in input-image pixels.
struct BBox {
  float cx = 0, cy = 0, w = 0, h = 0;

  float x1() const noexcept { return cx - w / 2; }
  float y1() const noexcept { return cy - h / 2; }
  float x2() const noexcept { return cx + w / 2; }
  float y2() const noexcept { return cy + h / 2; }
  double area() const noexcept {
    return w > 0 && h > 0 ? static_cast<double>(w) * static_cast<double>(h) : 0.0;
  }

  static BBox from_corners(float x1, float y1, float x2, float y2) noexcept {
    return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct Detection {
  BBox bbox;
  int class_id = 0;
  float confidence = 0;  // objectness x class probability
  friend bool operator==(const Detection&, const Detection&) = default;
};

inline constexpr float kDefaultConfThreshold = 0.3f;
inline constexpr float kDefaultIouThreshold = 0.5f;
// exp(tw), exp(th) saturate here so random weights cannot overflow box sizes.
inline constexpr float kMaxLogScale = 10.0f;

// Intersection over union. Degenerate (zero-area) boxes score 0 against everything.
inline double iou(const BBox& a, const BBox& b) noexcept {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) return 0.0;
  // Areas from the same corners as the intersection, so iou(a, a) is exactly 1.
  const double ax1 = a.x1(), ay1 = a.y1(), ax2 = a.x2(), ay2 = a.y2();
  const double bx1 = b.x1(), by1 = b.y1(), bx2 = b.x2(), by2 = b.y2();
  const double ix = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double iy = std::min(ay2, by2) - std::max(ay1, by1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

inline float sigmoid(float x) noexcept { return 1.0f / (1.0f + std::exp(-x)); }

// Decodes one YOLO head. Channel layout per anchor a:
// a*(5+classes) + {tx, ty, tw, th, objectness, class scores...}.
// Emits one detection per (cell, anchor) for its best class.
inline std::vector<Detection> decode_head(const Tensor& raw, const HeadSpec& head,
                                          std::size_t input_size, float conf_threshold) {
  const std::size_t anchors = head.anchors.size();
  if (anchors == 0 || raw.c() % anchors != 0 || raw.c() / anchors < 6)
    throw DimensionError("c", "head tensor has " + std::to_string(raw.c()) + " channels, not a multiple of " +
                                  std::to_string(anchors) + " anchors x (5 + classes)");
  if (raw.n() != 1) throw DimensionError("n", "decode_head expects batch 1");
  if (raw.h() * head.stride != input_size || raw.w() * head.stride != input_size)
    throw DimensionError(raw.h() * head.stride != input_size ? "h" : "w",
                         "grid " + std::to_string(raw.h()) + "x" + std::to_string(raw.w()) +
                             " does not match stride " + std::to_string(head.stride));
  const std::size_t per_anchor = raw.c() / anchors;
  const std::size_t classes = per_anchor - 5;
  const auto stride = static_cast<float>(head.stride);

  std::vector<Detection> out;
  for (std::size_t i = 0; i < raw.h(); ++i)
    for (std::size_t j = 0; j < raw.w(); ++j)
      for (std::size_t a = 0; a < anchors; ++a) {
        const std::size_t base = a * per_anchor;
        const float objectness = sigmoid(raw.at(0, base + 4, i, j));
        int best = 0;
        float best_score = -1.0f;
        for (std::size_t c = 0; c < classes; ++c) {
          const float s = sigmoid(raw.at(0, base + 5 + c, i, j));
          if (s > best_score) {
            best_score = s;
            best = static_cast<int>(c);
          }
        }
        const float confidence = objectness * best_score;
        if (!(confidence >= conf_threshold)) continue;
        Detection d;
        d.class_id = best;
        d.confidence = std::clamp(confidence, 0.0f, 1.0f);
        d.bbox.cx = (sigmoid(raw.at(0, base + 0, i, j)) + static_cast<float>(j)) * stride;
        d.bbox.cy = (sigmoid(raw.at(0, base + 1, i, j)) + static_cast<float>(i)) * stride;
        d.bbox.w = head.anchors[a].w * std::exp(std::min(raw.at(0, base + 2, i, j), kMaxLogScale));
        d.bbox.h = head.anchors[a].h * std::exp(std::min(raw.at(0, base + 3, i, j), kMaxLogScale));
        out.push_back(d);
      }
  return out;
}

// Greedy class-wise NMS. Candidates are visited by descending confidence
// (ties: lower class id, then input order); a kept box suppresses every
// later same-class box whose IoU with it is strictly above the threshold.
inline std::vector<Detection> nms(std::span<const Detection> dets,
                                  float iou_threshold = kDefaultIouThreshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].confidence != dets[b].confidence) return dets[a].confidence > dets[b].confidence;
    return dets[a].class_id < dets[b].class_id;
  });
  std::vector<bool> suppressed(dets.size(), false);
  std::vector<Detection> kept;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const auto i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const auto j = order[oj];
      if (!suppressed[j] && dets[j].class_id == dets[i].class_id &&
          iou(dets[i].bbox, dets[j].bbox) > iou_threshold)
        suppressed[j] = true;
    }
  }
  return kept;
}

// Both heads decoded (stride 32 first), then one NMS pass over the union.
inline std::vector<Detection> run_detection(const Model& model, const Tensor& frame,
                                            float conf_threshold = kDefaultConfThreshold,
                                            float iou_threshold = kDefaultIouThreshold,
                                            const ExecOptions& opts = {}) {
  const auto heads = model.forward(frame, opts);
  auto dets = decode_head(heads.raw32, model.head(32), model.input_size(), conf_threshold);
  auto dets16 = decode_head(heads.raw16, model.head(16), model.input_size(), conf_threshold);
  dets.insert(dets.end(), dets16.begin(), dets16.end());
  return nms(dets, iou_threshold);
}

// Maps a box from the square model input back to a native frame and clips it.
inline BBox to_frame(const BBox& b, std::size_t input_size, std::size_t frame_w, std::size_t frame_h) {
  const float sx = static_cast<float>(frame_w) / static_cast<float>(input_size);
  const float sy = static_cast<float>(frame_h) / static_cast<float>(input_size);
  const float x1 = std::clamp(b.x1() * sx, 0.0f, static_cast<float>(frame_w));
  const float y1 = std::clamp(b.y1() * sy, 0.0f, static_cast<float>(frame_h));
  const float x2 = std::clamp(b.x2() * sx, 0.0f, static_cast<float>(frame_w));
  const float y2 = std::clamp(b.y2() * sy, 0.0f, static_cast<float>(frame_h));
  return BBox::from_corners(x1, y1, x2, y2);
}

}  // namespace edgeped
