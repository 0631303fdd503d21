#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "edgeped/bench.hpp"
#include "edgeped/mqtt/broker.hpp"

using namespace edgeped;
using namespace std::chrono_literals;

namespace {

const Model& small_model() {
  static const Model model = [] {
    Model m(reference_config(64));
    randomize_weights(m, 7);
    return m;
  }();
  return model;
}

PipelineConfig low_threshold() {
  PipelineConfig cfg;
  cfg.conf_threshold = 0.2f;  // random weights rarely clear 0.3
  cfg.record_detections = true;
  return cfg;
}

}  // namespace

TEST(Summarize, NearestRankPercentile) {
  std::vector<double> v;
  for (int i = 1; i <= 20; ++i) v.push_back(i);
  const auto s = summarize(v);
  EXPECT_DOUBLE_EQ(s.mean, 10.5);
  EXPECT_DOUBLE_EQ(s.median, 10.5);
  EXPECT_DOUBLE_EQ(s.p95, 19.0);
  EXPECT_DOUBLE_EQ(summarize({4.0}).p95, 4.0);
  EXPECT_DOUBLE_EQ(summarize({}).mean, 0.0);
}

TEST(FrameSource, SyntheticIsSeeded) {
  const auto a = FrameSource::synthetic(3, 7, 64, 48), b = FrameSource::synthetic(3, 7, 64, 48);
  const auto c = FrameSource::synthetic(3, 8, 64, 48);
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(a.get(2).image, b.get(2).image);
  EXPECT_NE(a.get(2).image, c.get(2).image);
  EXPECT_NE(a.get(1).image, a.get(2).image);
  EXPECT_EQ(a.get(0).image.width, 64u);
}

TEST(FrameSource, DirectoryIsSortedPpm) {
  const auto dir = std::filesystem::temp_directory_path() / "edgeped_frames_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto synth = FrameSource::synthetic(2, 1, 8, 8);
  write_ppm((dir / "b.ppm").string(), synth.get(1).image);
  write_ppm((dir / "a.ppm").string(), synth.get(0).image);
  std::ofstream(dir / "notes.txt") << "ignored";
  const auto src = FrameSource::directory(dir.string());
  ASSERT_EQ(src.size(), 2u);
  EXPECT_EQ(src.get(0).id, "a");
  EXPECT_EQ(src.get(1).image, synth.get(1).image);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(FrameSource::directory(dir.string()), InputError);
}

TEST(Pipeline, SerialRunsAreDeterministic) {
  const auto src = FrameSource::synthetic(4, 7, 160, 120);
  const auto a = run_pipeline(src, small_model(), nullptr, low_threshold());
  const auto b = run_pipeline(src, small_model(), nullptr, low_threshold());
  EXPECT_EQ(a.report.frames, 4u);
  EXPECT_EQ(a.report.errors, 0u);
  EXPECT_EQ(a.report.events, b.report.events);
  EXPECT_EQ(a.report.payload_bytes_total, b.report.payload_bytes_total);
  EXPECT_EQ(a.report.detection_digest, b.report.detection_digest);
  EXPECT_EQ(a.frame_detections, b.frame_detections);
  EXPECT_FALSE(a.report.publish_present);
  EXPECT_TRUE(a.report.fps.has_value());
}

TEST(Pipeline, PipelinedMatchesSerialOutput) {
  const auto src = FrameSource::synthetic(6, 3, 160, 120);
  auto cfg = low_threshold();
  const auto serial = run_pipeline(src, small_model(), nullptr, cfg);
  cfg.pipelined = true;
  const auto piped = run_pipeline(src, small_model(), nullptr, cfg);
  EXPECT_EQ(piped.report.mode, "pipelined");
  EXPECT_EQ(piped.report.frames, 6u);
  EXPECT_EQ(piped.report.detection_digest, serial.report.detection_digest);
  EXPECT_EQ(piped.frame_detections, serial.frame_detections);
}

TEST(Pipeline, PublishesOneEventPerFrameOrMore) {
  mqtt::Broker broker;
  auto sub = mqtt::Session::connect(broker.connect_in_process(), {"listener"});
  sub.subscribe("intersection/+/detections");
  auto pub = mqtt::Session::connect(broker.connect_in_process(), {"bench"});
  auto cfg = low_threshold();
  cfg.intersection_id = "12";
  const auto src = FrameSource::synthetic(3, 5, 160, 120);
  const auto r = run_pipeline(src, small_model(), &pub, cfg);
  EXPECT_TRUE(r.report.publish_present);
  ASSERT_GE(r.report.events, 3u);
  std::size_t detections = 0;
  std::set<std::uint64_t> frames;
  for (std::size_t i = 0; i < r.report.events; ++i) {
    auto m = sub.poll_message(2s);
    ASSERT_TRUE(m);
    EXPECT_EQ(m->topic, "intersection/12/detections");
    EXPECT_LE(m->payload.size(), kPayloadBudget);
    const auto ev = decode_event(std::string(m->payload.begin(), m->payload.end()));
    EXPECT_EQ(ev.timestamp_ms, cfg.epoch_ms + static_cast<std::uint64_t>(ev.frame_index * 1000 / 30));
    frames.insert(ev.frame_index);
    detections += ev.detections.size();
  }
  EXPECT_EQ(frames.size(), 3u);
  EXPECT_EQ(detections, r.report.detections);
}

TEST(Report, JsonRoundTripAndSchema) {
  const auto src = FrameSource::synthetic(2, 7, 96, 96);
  auto r = run_pipeline(src, small_model(), nullptr, low_threshold()).report;
  r.accuracy_map = 0.5;
  const auto j = to_json(r);
  for (const char* key : {"stages_ms", "inference_ms", "end_to_end_latency_ms", "fps", "payload_bytes_mean"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(report_from_json(nlohmann::json::parse(j.dump())), r);
  auto broken = j;
  broken.erase("stages_ms");
  EXPECT_THROW(report_from_json(broken), ValidationError);
  const auto table = emit_report(r, ReportFormat::table);
  EXPECT_NE(table.find("inference"), std::string::npos);
  EXPECT_NE(table.find("(no publisher)"), std::string::npos);
}

TEST(Report, FpsTimesLatencyIsNearOneSecondInSerialMode) {
  const auto src = FrameSource::synthetic(5, 9, 96, 96);
  const auto r = run_pipeline(src, small_model(), nullptr, low_threshold()).report;
  ASSERT_TRUE(r.fps);
  EXPECT_NEAR(*r.fps * r.end_to_end.mean, 1000.0, 200.0);
}
