#pragma once

// Per-frame detection events as compact JSON.
//
// Wire schema (keys always in this order, no whitespace):
//   {"intersection_id":"<id>","camera_id":"<id>","frame_index":<u32>,
//    "timestamp_ms":<u64>,"detections":[{"class_id":<int>,"confidence":<d.ddd>,
//    "x1":<int>,"y1":<int>,"x2":<int>,"y2":<int>},...],"model_id":"<id>"}
//
// Ids are 1..32 characters from [A-Za-z0-9_.-], so no escaping is ever needed
// and every id is also a valid MQTT topic level.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "edgeped/detect.hpp"
#include "edgeped/error.hpp"

namespace edgeped {

inline constexpr std::size_t kPayloadBudget = 1200;
inline constexpr std::size_t kMaxIdLength = 32;
inline constexpr int kMaxClassId = 999;
inline constexpr std::int32_t kMaxCoordinate = 9999;
inline constexpr std::uint64_t kMaxFrameIndex = 4294967295ull;
inline constexpr std::uint64_t kMaxTimestampMs = 9999999999999ull;

struct EventDetection {
  int class_id = 0;
  std::uint16_t confidence_milli = 0;  // confidence * 1000, 0..1000
  std::int32_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float confidence() const noexcept { return static_cast<float>(confidence_milli) / 1000.0f; }
  friend bool operator==(const EventDetection&, const EventDetection&) = default;
};

struct DetectionEvent {
  std::string intersection_id;
  std::string camera_id;
  std::uint64_t frame_index = 0;
  std::uint64_t timestamp_ms = 0;
  std::vector<EventDetection> detections;
  std::string model_id;

  friend bool operator==(const DetectionEvent&, const DetectionEvent&) = default;
};

class EventError : public Error {
 public:
  enum class Kind { malformed, missing_field, wrong_type, unknown_field, invalid_value, oversize, impossible_fit };

  EventError(Kind kind, const std::string& detail, std::string field = {},
             std::optional<std::size_t> byte_offset = {}, std::size_t overflow = 0)
      : Error("event: " + detail),
        kind_(kind),
        field_(std::move(field)),
        offset_(byte_offset),
        overflow_(overflow) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& field() const noexcept { return field_; }
  std::optional<std::size_t> byte_offset() const noexcept { return offset_; }
  std::size_t overflow() const noexcept { return overflow_; }

 private:
  Kind kind_;
  std::string field_;
  std::optional<std::size_t> offset_;
  std::size_t overflow_;
};

// Worst-case sizes under the limits above; an event with at most
// kMaxPerEvent detections always fits kPayloadBudget.
inline constexpr std::size_t kWorstEmptyEventBytes =
    std::string_view(R"({"intersection_id":"","camera_id":"","frame_index":,"timestamp_ms":,"detections":[],"model_id":""})")
        .size() +
    3 * kMaxIdLength + 10 + 13;
inline constexpr std::size_t kWorstDetectionBytes =
    std::string_view(R"({"class_id":999,"confidence":1.000,"x1":9999,"y1":9999,"x2":9999,"y2":9999})").size();
inline constexpr std::size_t kMaxPerEvent =
    (kPayloadBudget - kWorstEmptyEventBytes + 1) / (kWorstDetectionBytes + 1);

namespace detail {

inline bool valid_id(std::string_view id) {
  if (id.empty() || id.size() > kMaxIdLength) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
           c == '.' || c == '-';
  });
}

inline void validate_detection(const EventDetection& d, std::size_t i) {
  const auto where = "detections[" + std::to_string(i) + "]";
  if (d.class_id < 0 || d.class_id > kMaxClassId)
    throw EventError(EventError::Kind::invalid_value, where + ".class_id out of range", "class_id");
  if (d.confidence_milli > 1000)
    throw EventError(EventError::Kind::invalid_value, where + ".confidence above 1", "confidence");
  for (auto v : {d.x1, d.y1, d.x2, d.y2})
    if (v < 0 || v > kMaxCoordinate)
      throw EventError(EventError::Kind::invalid_value, where + " coordinate out of range", "x1");
  if (d.x2 < d.x1 || d.y2 < d.y1)
    throw EventError(EventError::Kind::invalid_value, where + " has negative extent", "x2");
}

inline void validate_header(const DetectionEvent& e) {
  for (auto [name, value] : {std::pair<const char*, const std::string*>{"intersection_id", &e.intersection_id},
                             {"camera_id", &e.camera_id},
                             {"model_id", &e.model_id}})
    if (!valid_id(*value))
      throw EventError(EventError::Kind::invalid_value,
                       std::string(name) + " must be 1-32 characters of [A-Za-z0-9_.-]", name);
  if (e.frame_index > kMaxFrameIndex)
    throw EventError(EventError::Kind::invalid_value, "frame_index out of range", "frame_index");
  if (e.timestamp_ms > kMaxTimestampMs)
    throw EventError(EventError::Kind::invalid_value, "timestamp_ms out of range", "timestamp_ms");
}

inline void append_detection(std::string& out, const EventDetection& d) {
  char conf[8];
  conf[0] = static_cast<char>('0' + d.confidence_milli / 1000);
  conf[1] = '.';
  conf[2] = static_cast<char>('0' + d.confidence_milli / 100 % 10);
  conf[3] = static_cast<char>('0' + d.confidence_milli / 10 % 10);
  conf[4] = static_cast<char>('0' + d.confidence_milli % 10);
  out += R"({"class_id":)";
  out += std::to_string(d.class_id);
  out += R"(,"confidence":)";
  out.append(conf, 5);
  out += R"(,"x1":)" + std::to_string(d.x1);
  out += R"(,"y1":)" + std::to_string(d.y1);
  out += R"(,"x2":)" + std::to_string(d.x2);
  out += R"(,"y2":)" + std::to_string(d.y2);
  out += '}';
}

inline std::size_t detection_bytes(const EventDetection& d) {
  std::string s;
  append_detection(s, d);
  return s.size();
}

inline std::string encode_unchecked(const DetectionEvent& e) {
  std::string out;
  out.reserve(256 + e.detections.size() * 72);
  out += R"({"intersection_id":")" + e.intersection_id;
  out += R"(","camera_id":")" + e.camera_id;
  out += R"(","frame_index":)" + std::to_string(e.frame_index);
  out += R"(,"timestamp_ms":)" + std::to_string(e.timestamp_ms);
  out += R"(,"detections":[)";
  for (std::size_t i = 0; i < e.detections.size(); ++i) {
    if (i) out += ',';
    append_detection(out, e.detections[i]);
  }
  out += R"(],"model_id":")" + e.model_id + "\"}";
  return out;
}

}  // namespace detail

// Deterministic encoding. Events larger than `budget` bytes are rejected with
// the overflow count; use split_for_budget to stay under it.
inline std::string encode_event(const DetectionEvent& e, std::size_t budget = kPayloadBudget) {
  detail::validate_header(e);
  for (std::size_t i = 0; i < e.detections.size(); ++i) detail::validate_detection(e.detections[i], i);
  auto out = detail::encode_unchecked(e);
  if (out.size() > budget)
    throw EventError(EventError::Kind::oversize,
                     "encoded event is " + std::to_string(out.size()) + " bytes, budget " + std::to_string(budget),
                     {}, {}, out.size() - budget);
  return out;
}

inline DetectionEvent decode_event(std::string_view bytes) {
  using K = EventError::Kind;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw EventError(K::malformed, std::string("malformed JSON: ") + e.what(), {}, e.byte);
  }
  if (!j.is_object()) throw EventError(K::wrong_type, "top level must be an object");

  auto check_keys = [](const nlohmann::json& obj, std::initializer_list<const char*> keys,
                       const std::string& prefix) {
    for (const char* k : keys)
      if (!obj.contains(k)) throw EventError(K::missing_field, "missing field '" + prefix + k + "'", k);
    for (const auto& [k, _] : obj.items())
      if (std::none_of(keys.begin(), keys.end(), [&](const char* known) { return k == known; }))
        throw EventError(K::unknown_field, "unknown field '" + prefix + k + "'", k);
  };
  auto get_string = [](const nlohmann::json& obj, const char* key) {
    if (!obj[key].is_string()) throw EventError(K::wrong_type, std::string(key) + " must be a string", key);
    return obj[key].get<std::string>();
  };
  auto get_uint = [](const nlohmann::json& obj, const char* key) {
    if (!obj[key].is_number_unsigned() && !(obj[key].is_number_integer() && obj[key].get<std::int64_t>() >= 0))
      throw EventError(K::wrong_type, std::string(key) + " must be a non-negative integer", key);
    return obj[key].get<std::uint64_t>();
  };

  check_keys(j, {"intersection_id", "camera_id", "frame_index", "timestamp_ms", "detections", "model_id"}, "");
  DetectionEvent e;
  e.intersection_id = get_string(j, "intersection_id");
  e.camera_id = get_string(j, "camera_id");
  e.frame_index = get_uint(j, "frame_index");
  e.timestamp_ms = get_uint(j, "timestamp_ms");
  e.model_id = get_string(j, "model_id");
  if (!j["detections"].is_array()) throw EventError(K::wrong_type, "detections must be an array", "detections");
  for (const auto& d : j["detections"]) {
    if (!d.is_object()) throw EventError(K::wrong_type, "detection must be an object", "detections");
    check_keys(d, {"class_id", "confidence", "x1", "y1", "x2", "y2"}, "detections[].");
    EventDetection out;
    out.class_id = static_cast<int>(std::min<std::uint64_t>(get_uint(d, "class_id"), 1u << 30));
    if (!d["confidence"].is_number()) throw EventError(K::wrong_type, "confidence must be a number", "confidence");
    const double conf = d["confidence"].get<double>();
    if (!(conf >= 0.0 && conf <= 1.0))
      throw EventError(K::invalid_value, "confidence must lie in [0, 1]", "confidence");
    out.confidence_milli = static_cast<std::uint16_t>(std::lround(conf * 1000.0));
    auto coord = [&](const char* key) {
      return static_cast<std::int32_t>(std::min<std::uint64_t>(get_uint(d, key), 1u << 30));
    };
    out.x1 = coord("x1");
    out.y1 = coord("y1");
    out.x2 = coord("x2");
    out.y2 = coord("y2");
    e.detections.push_back(out);
  }
  detail::validate_header(e);
  for (std::size_t i = 0; i < e.detections.size(); ++i) detail::validate_detection(e.detections[i], i);
  return e;
}

// Box in model-input pixels -> integer native-frame pixels.
inline EventDetection to_event_detection(const Detection& d, std::size_t input_size, std::size_t frame_w,
                                         std::size_t frame_h) {
  const BBox b = to_frame(d.bbox, input_size, frame_w, frame_h);
  EventDetection e;
  e.class_id = d.class_id;
  e.confidence_milli = static_cast<std::uint16_t>(std::lround(std::clamp(d.confidence, 0.0f, 1.0f) * 1000.0f));
  e.x1 = static_cast<std::int32_t>(std::lround(b.x1()));
  e.y1 = static_cast<std::int32_t>(std::lround(b.y1()));
  e.x2 = std::max(e.x1, static_cast<std::int32_t>(std::lround(b.x2())));
  e.y2 = std::max(e.y1, static_cast<std::int32_t>(std::lround(b.y2())));
  return e;
}

// Packs detections (highest confidence first) into the fewest consecutive
// events whose encodings each fit `budget`. The header fields of `header` are
// copied into every event; its own detections are ignored.
inline std::vector<DetectionEvent> split_for_budget(const DetectionEvent& header,
                                                    std::span<const EventDetection> dets,
                                                    std::size_t budget = kPayloadBudget) {
  using K = EventError::Kind;
  DetectionEvent empty = header;
  empty.detections.clear();
  detail::validate_header(empty);
  const std::size_t base = detail::encode_unchecked(empty).size();
  if (budget < base)
    throw EventError(K::invalid_value,
                     "budget " + std::to_string(budget) + " is smaller than an empty event (" +
                         std::to_string(base) + " bytes)");

  std::vector<EventDetection> sorted(dets.begin(), dets.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const EventDetection& a, const EventDetection& b) {
    return a.confidence_milli > b.confidence_milli;
  });

  std::vector<DetectionEvent> events{empty};
  std::size_t size = base;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    detail::validate_detection(sorted[i], i);
    const std::size_t cost = detail::detection_bytes(sorted[i]);
    if (base + cost > budget)
      throw EventError(K::impossible_fit,
                       "a single detection needs " + std::to_string(base + cost) + " bytes, budget " +
                           std::to_string(budget),
                       {}, {}, base + cost - budget);
    auto& cur = events.back();
    const std::size_t extra = cost + (cur.detections.empty() ? 0 : 1);
    if (size + extra <= budget) {
      cur.detections.push_back(sorted[i]);
      size += extra;
    } else {
      events.push_back(empty);
      events.back().detections.push_back(sorted[i]);
      size = base + cost;
    }
  }
  return events;
}

}  // namespace edgeped
