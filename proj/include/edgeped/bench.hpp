#pragma once

// End-to-end harness: frame source -> preprocess -> inference -> postprocess
// -> encode -> publish, with monotonic per-stage timing.
//
// Latency of a frame runs from the start of preprocess to the end of publish.
// FPS is frames completed per wall-clock second over the whole run.

#include <sys/resource.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "edgeped/detect.hpp"
#include "edgeped/events.hpp"
#include "edgeped/image.hpp"
#include "edgeped/model.hpp"
#include "edgeped/mqtt/client.hpp"

namespace edgeped {

// ---------------------------------------------------------------------------
// Frame sources

struct Frame {
  std::size_t index = 0;
  std::string id;
  Image image;
};

// Either a sorted directory of .ppm files or a seeded synthetic generator.
class FrameSource {
 public:
  static FrameSource synthetic(std::size_t count, std::uint64_t seed, std::size_t width = 1280,
                               std::size_t height = 720) {
    FrameSource s;
    s.count_ = count;
    s.seed_ = seed;
    s.width_ = width;
    s.height_ = height;
    return s;
  }

  static FrameSource directory(const std::string& path) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(path)) throw InputError(path + ": not a directory");
    FrameSource s;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file() && e.path().extension() == ".ppm") s.files_.push_back(e.path().string());
    std::sort(s.files_.begin(), s.files_.end());
    s.count_ = s.files_.size();
    return s;
  }

  std::size_t size() const noexcept { return count_; }
  bool is_synthetic() const noexcept { return files_.empty() && count_ > 0; }

  Frame get(std::size_t i) const {
    if (i >= count_) throw InputError("frame index " + std::to_string(i) + " out of range");
    if (!files_.empty()) {
      const std::filesystem::path p(files_[i]);
      return {i, p.stem().string(), read_ppm(files_[i])};
    }
    return {i, "frame_" + std::to_string(i), synthesize(i)};
  }

 private:
  // Gradient background with a few flat "pedestrian" rectangles.
  Image synthesize(std::size_t i) const {
    std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ull + i);
    Image img;
    img.width = width_;
    img.height = height_;
    img.rgb.resize(width_ * height_ * 3);
    for (std::size_t y = 0; y < height_; ++y)
      for (std::size_t x = 0; x < width_; ++x) {
        auto* px = &img.rgb[(y * width_ + x) * 3];
        px[0] = static_cast<std::uint8_t>(x * 255 / width_);
        px[1] = static_cast<std::uint8_t>(y * 255 / height_);
        px[2] = static_cast<std::uint8_t>((x + y + i * 7) & 0xFF);
      }
    const std::size_t people = 1 + rng() % 6;
    for (std::size_t k = 0; k < people; ++k) {
      const std::size_t w = 20 + rng() % 80, h = 60 + rng() % 200;
      const std::size_t x0 = rng() % (width_ - std::min(width_ - 1, w));
      const std::size_t y0 = rng() % (height_ - std::min(height_ - 1, h));
      const std::array<std::uint8_t, 3> color{static_cast<std::uint8_t>(rng()), static_cast<std::uint8_t>(rng()),
                                              static_cast<std::uint8_t>(rng())};
      for (std::size_t y = y0; y < std::min(height_, y0 + h); ++y)
        for (std::size_t x = x0; x < std::min(width_, x0 + w); ++x)
          std::copy(color.begin(), color.end(), &img.rgb[(y * width_ + x) * 3]);
    }
    return img;
  }

  std::size_t count_ = 0;
  std::uint64_t seed_ = 0;
  std::size_t width_ = 1280, height_ = 720;
  std::vector<std::string> files_;
};

// ---------------------------------------------------------------------------
// Report

inline constexpr std::array<const char*, 5> kStages{"preprocess", "inference", "postprocess", "encode", "publish"};
inline constexpr double kVideoPayloadReferenceKb = 1500.0;

struct StageStats {
  double mean = 0, median = 0, p95 = 0;
  friend bool operator==(const StageStats&, const StageStats&) = default;
};

inline StageStats summarize(std::vector<double> samples) {
  if (samples.empty()) return {};
  std::sort(samples.begin(), samples.end());
  StageStats s;
  double sum = 0;
  for (double v : samples) sum += v;
  s.mean = sum / static_cast<double>(samples.size());
  const std::size_t n = samples.size();
  s.median = n % 2 ? samples[n / 2] : (samples[n / 2 - 1] + samples[n / 2]) / 2;
  // nearest-rank percentile
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95 = samples[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

struct MetricsReport {
  std::string mode = "serial";
  std::size_t frames_in = 0;
  std::size_t frames = 0;  // completed every stage
  std::size_t errors = 0;
  std::array<StageStats, 5> stages{};  // kStages order
  bool publish_present = false;
  StageStats end_to_end{};
  std::optional<double> fps;
  double wall_ms = 0;
  double payload_bytes_mean = 0;
  std::size_t payload_bytes_total = 0;
  std::size_t events = 0;
  std::size_t detections = 0;
  std::string detection_digest;  // FNV-1a 64 over all payloads, hex
  double peak_rss_mb = 0;        // process peak resident memory (stands in for GPU memory)
  double video_payload_reference_kb = kVideoPayloadReferenceKb;
  std::optional<double> accuracy_map;

  const StageStats& stage(std::string_view name) const {
    for (std::size_t i = 0; i < kStages.size(); ++i)
      if (name == kStages[i]) return stages[i];
    throw MisuseError("unknown stage '" + std::string(name) + "'");
  }
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline nlohmann::json to_json(const StageStats& s) {
  return {{"mean", s.mean}, {"median", s.median}, {"p95", s.p95}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json stages = nlohmann::json::object();
  for (std::size_t i = 0; i < kStages.size(); ++i) stages[kStages[i]] = to_json(r.stages[i]);
  nlohmann::json j = {{"mode", r.mode},
                      {"frames_in", r.frames_in},
                      {"frames", r.frames},
                      {"errors", r.errors},
                      {"stages_ms", stages},
                      {"publish_present", r.publish_present},
                      {"inference_ms", to_json(r.stages[1])},
                      {"end_to_end_latency_ms", to_json(r.end_to_end)},
                      {"wall_ms", r.wall_ms},
                      {"payload_bytes_mean", r.payload_bytes_mean},
                      {"payload_bytes_total", r.payload_bytes_total},
                      {"events", r.events},
                      {"detections", r.detections},
                      {"detection_digest", r.detection_digest},
                      {"peak_rss_mb", r.peak_rss_mb},
                      {"video_payload_reference_kb", r.video_payload_reference_kb}};
  if (r.fps) j["fps"] = *r.fps;
  if (r.accuracy_map) j["accuracy_map"] = *r.accuracy_map;
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  auto stats = [](const nlohmann::json& s) {
    return StageStats{s.at("mean").get<double>(), s.at("median").get<double>(), s.at("p95").get<double>()};
  };
  try {
    MetricsReport r;
    r.mode = j.at("mode").get<std::string>();
    r.frames_in = j.at("frames_in").get<std::size_t>();
    r.frames = j.at("frames").get<std::size_t>();
    r.errors = j.at("errors").get<std::size_t>();
    for (std::size_t i = 0; i < kStages.size(); ++i) r.stages[i] = stats(j.at("stages_ms").at(kStages[i]));
    r.publish_present = j.at("publish_present").get<bool>();
    r.end_to_end = stats(j.at("end_to_end_latency_ms"));
    r.wall_ms = j.at("wall_ms").get<double>();
    r.payload_bytes_mean = j.at("payload_bytes_mean").get<double>();
    r.payload_bytes_total = j.at("payload_bytes_total").get<std::size_t>();
    r.events = j.at("events").get<std::size_t>();
    r.detections = j.at("detections").get<std::size_t>();
    r.detection_digest = j.at("detection_digest").get<std::string>();
    r.peak_rss_mb = j.at("peak_rss_mb").get<double>();
    r.video_payload_reference_kb = j.at("video_payload_reference_kb").get<double>();
    if (j.contains("fps")) r.fps = j["fps"].get<double>();
    if (j.contains("accuracy_map")) r.accuracy_map = j["accuracy_map"].get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report JSON: ") + e.what());
  }
}

enum class ReportFormat { json, table };

inline std::string emit_report(const MetricsReport& r, ReportFormat format) {
  if (format == ReportFormat::json) return to_json(r).dump(2) + "\n";
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "mode " << r.mode << ", frames " << r.frames << "/" << r.frames_in << ", errors " << r.errors << "\n";
  out << std::left << std::setw(14) << "stage" << std::right << std::setw(12) << "mean ms" << std::setw(12)
      << "median ms" << std::setw(12) << "p95 ms" << "\n";
  auto row = [&](const std::string& name, const StageStats& s, bool absent = false) {
    out << std::left << std::setw(14) << name << std::right;
    if (absent) {
      out << std::setw(12) << "-" << std::setw(12) << "-" << std::setw(12) << "-" << "  (no publisher)\n";
      return;
    }
    out << std::setw(12) << s.mean << std::setw(12) << s.median << std::setw(12) << s.p95 << "\n";
  };
  for (std::size_t i = 0; i < kStages.size(); ++i) row(kStages[i], r.stages[i], i == 4 && !r.publish_present);
  row("end-to-end", r.end_to_end);
  out << "fps                " << (r.fps ? std::to_string(*r.fps) : std::string("-")) << "\n";
  out << "payload bytes      mean " << r.payload_bytes_mean << ", total " << r.payload_bytes_total << " in "
      << r.events << " events\n";
  out << "detections         " << r.detections << " (digest " << r.detection_digest << ")\n";
  out << "peak RSS MB        " << r.peak_rss_mb << "\n";
  out << "video payload ref  " << r.video_payload_reference_kb << " KB\n";
  if (r.accuracy_map) out << "accuracy (mAP)     " << *r.accuracy_map << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineConfig {
  float conf_threshold = kDefaultConfThreshold;
  float iou_threshold = kDefaultIouThreshold;
  std::string intersection_id = "0";
  std::string camera_id = "cam0";
  std::string model_id = "mnv2-tiny-yolov3";
  std::size_t budget = kPayloadBudget;
  bool pipelined = false;
  // Event timestamps: wall clock, or epoch_ms + frame_index / source_fps (reproducible).
  bool wall_clock_timestamps = false;
  std::uint64_t epoch_ms = 1700000000000ull;
  double source_fps = 30.0;
  ExecOptions exec{};
  // Keep every frame's event detections in the result (golden comparisons).
  bool record_detections = false;
};

struct PipelineResult {
  MetricsReport report;
  std::vector<std::vector<EventDetection>> frame_detections;  // filled when record_detections
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

inline double peak_rss_mb() {
  rusage usage{};
  ::getrusage(RUSAGE_SELF, &usage);
  return static_cast<double>(usage.ru_maxrss) / 1024.0;  // ru_maxrss is KiB on Linux
}

struct FrameWork {
  Frame frame;
  Tensor input;
  HeadOutputs heads;
  std::vector<EventDetection> dets;
  std::vector<std::string> payloads;
  std::array<double, 5> stage_ms{};
  Clock::time_point start;
  double latency_ms = 0;
  bool failed = false;
};

// Bounded FIFO; push blocks while full, pop returns nullopt once closed and drained.
template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}
  void push(T value) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_; });
    items_.push_back(std::move(value));
    not_empty_.notify_one();
  }
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return v;
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

class Stages {
 public:
  Stages(const Model& model, mqtt::Session* publisher, const PipelineConfig& cfg)
      : model_(model), publisher_(publisher), cfg_(cfg), topic_(mqtt::detection_topic(cfg.intersection_id)) {}

  void preprocess(FrameWork& w) const {
    w.start = Clock::now();
    w.input = edgeped::preprocess(w.frame.image, model_.input_size());
    w.stage_ms[0] = ms_between(w.start, Clock::now());
  }

  void infer(FrameWork& w) const {
    const auto t = Clock::now();
    w.heads = model_.forward(w.input, cfg_.exec);
    w.input = Tensor{};
    w.stage_ms[1] = ms_between(t, Clock::now());
  }

  void postprocess(FrameWork& w) const {
    const auto t = Clock::now();
    auto dets = decode_head(w.heads.raw32, model_.head(32), model_.input_size(), cfg_.conf_threshold);
    auto d16 = decode_head(w.heads.raw16, model_.head(16), model_.input_size(), cfg_.conf_threshold);
    dets.insert(dets.end(), d16.begin(), d16.end());
    for (const auto& d : nms(dets, cfg_.iou_threshold))
      w.dets.push_back(to_event_detection(d, model_.input_size(), w.frame.image.width, w.frame.image.height));
    w.heads = HeadOutputs{};
    w.stage_ms[2] = ms_between(t, Clock::now());
  }

  void encode(FrameWork& w) const {
    const auto t = Clock::now();
    DetectionEvent header;
    header.intersection_id = cfg_.intersection_id;
    header.camera_id = cfg_.camera_id;
    header.model_id = cfg_.model_id;
    header.frame_index = w.frame.index;
    header.timestamp_ms =
        cfg_.wall_clock_timestamps
            ? static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                             std::chrono::system_clock::now().time_since_epoch())
                                             .count())
            : cfg_.epoch_ms + static_cast<std::uint64_t>(static_cast<double>(w.frame.index) * 1000.0 / cfg_.source_fps);
    for (const auto& e : split_for_budget(header, w.dets, cfg_.budget)) w.payloads.push_back(encode_event(e, cfg_.budget));
    w.stage_ms[3] = ms_between(t, Clock::now());
  }

  void publish(FrameWork& w) const {
    const auto t = Clock::now();
    if (publisher_) {
      try {
        for (const auto& p : w.payloads) publisher_->publish_qos0(topic_, p);
      } catch (const Error&) {
        w.failed = true;
      }
    }
    const auto end = Clock::now();
    w.stage_ms[4] = publisher_ ? ms_between(t, end) : 0.0;
    w.latency_ms = ms_between(w.start, end);
  }

 private:
  const Model& model_;
  mqtt::Session* publisher_;
  const PipelineConfig& cfg_;
  std::string topic_;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

}  // namespace detail

// Runs every frame through all stages. A null publisher skips publishing
// (its stage records 0 and the report marks it absent).
inline PipelineResult run_pipeline(const FrameSource& source, const Model& model, mqtt::Session* publisher,
                                   const PipelineConfig& cfg = {}) {
  using detail::Clock;
  using detail::FrameWork;
  detail::Stages stages(model, publisher, cfg);
  std::vector<FrameWork> done;
  done.reserve(source.size());

  const auto wall_start = Clock::now();
  if (!cfg.pipelined) {
    for (std::size_t i = 0; i < source.size(); ++i) {
      FrameWork w;
      w.frame = source.get(i);
      stages.preprocess(w);
      stages.infer(w);
      stages.postprocess(w);
      stages.encode(w);
      stages.publish(w);
      w.frame.image = Image{};
      done.push_back(std::move(w));
    }
  } else {
    detail::BoundedQueue<FrameWork> to_infer(2), to_post(2);
    std::jthread pre([&] {
      for (std::size_t i = 0; i < source.size(); ++i) {
        FrameWork w;
        w.frame = source.get(i);
        stages.preprocess(w);
        to_infer.push(std::move(w));
      }
      to_infer.close();
    });
    std::jthread inf([&] {
      while (auto w = to_infer.pop()) {
        stages.infer(*w);
        to_post.push(std::move(*w));
      }
      to_post.close();
    });
    while (auto w = to_post.pop()) {
      stages.postprocess(*w);
      stages.encode(*w);
      stages.publish(*w);
      w->frame.image = Image{};
      done.push_back(std::move(*w));
    }
  }
  const double wall_ms = detail::ms_between(wall_start, Clock::now());

  PipelineResult result;
  auto& r = result.report;
  r.mode = cfg.pipelined ? "pipelined" : "serial";
  r.frames_in = source.size();
  r.publish_present = publisher != nullptr;
  r.wall_ms = wall_ms;

  std::array<std::vector<double>, 5> samples;
  std::vector<double> latency;
  std::uint64_t digest = 0xcbf29ce484222325ull;
  std::size_t payloads = 0;
  for (auto& w : done) {
    if (w.failed) {
      ++r.errors;
      continue;
    }
    ++r.frames;
    for (std::size_t s = 0; s < 5; ++s) samples[s].push_back(w.stage_ms[s]);
    latency.push_back(w.latency_ms);
    r.detections += w.dets.size();
    for (const auto& p : w.payloads) {
      ++payloads;
      r.payload_bytes_total += p.size();
      for (unsigned char c : p) digest = (digest ^ c) * 0x100000001b3ull;
    }
    if (cfg.record_detections) result.frame_detections.push_back(std::move(w.dets));
  }
  for (std::size_t s = 0; s < 5; ++s) r.stages[s] = summarize(std::move(samples[s]));
  r.end_to_end = summarize(std::move(latency));
  r.events = payloads;
  r.payload_bytes_mean = payloads ? static_cast<double>(r.payload_bytes_total) / static_cast<double>(payloads) : 0.0;
  r.detection_digest = detail::hex64(digest);
  if (r.frames > 0 && wall_ms > 0) r.fps = static_cast<double>(r.frames) / (wall_ms / 1000.0);
  r.peak_rss_mb = detail::peak_rss_mb();
  return result;
}

}  // namespace edgeped
