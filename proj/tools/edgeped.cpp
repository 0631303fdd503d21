// edgeped: detection, benchmarking, broker, subscriber, model accounting,
// evaluation and camera-site planning from one binary.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "edgeped/bench.hpp"
#include "edgeped/camera.hpp"
#include "edgeped/detect.hpp"
#include "edgeped/eval.hpp"
#include "edgeped/events.hpp"
#include "edgeped/model.hpp"
#include "edgeped/mqtt/broker.hpp"
#include "edgeped/mqtt/client.hpp"

namespace {

using namespace edgeped;

constexpr double kPaperGflops = 42.24;
constexpr double kPaperParamsMillions = 7.39;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::string_view text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot create '" + path + "'");
  f << text;
  if (!f) throw InputError("write to '" + path + "' failed");
}

struct ModelArgs {
  std::string config;
  std::string weights;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> input_size;

  void add_to(CLI::App* app, bool weights_flags) {
    app->add_option("--model", config, "model config file")->required()->check(CLI::ExistingFile);
    app->add_option("--input-size", input_size, "override the config's input size (multiple of 32)");
    if (!weights_flags) return;
    app->add_option("--weights", weights, "weight file")->check(CLI::ExistingFile);
    app->add_option("--weights-seed", seed, "use seeded random weights instead of a weight file");
  }

  Model build() const {
    auto cfg = load_model_config(config);
    if (input_size) cfg.input_size = *input_size;
    Model model(std::move(cfg));
    if (!weights.empty()) {
      load_weights(model, read_file(weights));
    } else if (seed) {
      randomize_weights(model, *seed);
    }
    return model;
  }
};

sigset_t termination_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  return set;
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pedestrian detection at the edge: model, pipeline and MQTT tooling"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  // detect
  ModelArgs detect_model;
  std::string detect_input, detect_out;
  float detect_conf = kDefaultConfThreshold, detect_iou = kDefaultIouThreshold;
  unsigned threads = 1;
  auto* detect = app.add_subcommand("detect", "run the detector over a directory of PPM images");
  detect_model.add_to(detect, true);
  detect->add_option("--input", detect_input, "directory of .ppm images")->required();
  detect->add_option("--conf", detect_conf, "confidence threshold")->capture_default_str();
  detect->add_option("--iou", detect_iou, "NMS IoU threshold")->capture_default_str();
  detect->add_option("--out", detect_out, "detections JSON output (default stdout)");
  detect->add_option("--threads", threads, "worker threads for convolutions")->capture_default_str();

  // weights
  ModelArgs weights_model;
  std::string weights_out;
  std::uint64_t weights_seed = 1;
  bool weights_zero = false;
  auto* weights = app.add_subcommand("weights", "write a seeded random (or all-zero) weight file");
  weights_model.add_to(weights, false);
  weights->add_option("--seed", weights_seed, "random seed")->capture_default_str();
  weights->add_flag("--zero", weights_zero, "write all-zero weights");
  weights->add_option("--out", weights_out, "output weight file")->required();

  // bench
  ModelArgs bench_model;
  std::string bench_frames = "50", bench_publish, bench_report = "table", bench_out, bench_gt;
  std::uint64_t bench_seed = 7;
  PipelineConfig pipe;
  auto* bench = app.add_subcommand("bench", "time the full pipeline and report per-stage metrics");
  bench_model.add_to(bench, true);
  bench->add_option("--frames", bench_frames, "synthetic frame count or a directory of .ppm frames")
      ->capture_default_str();
  bench->add_option("--frame-seed", bench_seed, "seed for synthetic frames")->capture_default_str();
  bench->add_option("--publish", bench_publish, "broker host:port to publish events to");
  bench->add_flag("--pipelined", pipe.pipelined, "overlap preprocess, inference and postprocess stages");
  bench->add_option("--report", bench_report, "report format")
      ->check(CLI::IsMember({"json", "table"}))
      ->capture_default_str();
  bench->add_option("--out", bench_out, "write the report to a file instead of stdout");
  bench->add_option("--ground-truth", bench_gt, "ground-truth JSON keyed by frame id; adds mAP to the report");
  bench->add_option("--intersection", pipe.intersection_id, "intersection id")->capture_default_str();
  bench->add_option("--camera", pipe.camera_id, "camera id")->capture_default_str();
  bench->add_option("--conf", pipe.conf_threshold, "confidence threshold")->capture_default_str();
  bench->add_option("--iou", pipe.iou_threshold, "NMS IoU threshold")->capture_default_str();
  bench->add_flag("--wall-clock", pipe.wall_clock_timestamps, "stamp events with wall-clock time");
  bench->add_option("--threads", pipe.exec.threads, "worker threads for convolutions")->capture_default_str();

  // broker
  std::string broker_bind = "127.0.0.1:1883";
  auto* broker = app.add_subcommand("broker", "run the MQTT broker until interrupted");
  broker->add_option("--bind", broker_bind, "listen address host:port")->capture_default_str();

  // listen
  std::string listen_broker = "127.0.0.1:1883", listen_topic = "intersection/+/detections", listen_id;
  std::size_t listen_count = 0;
  double listen_timeout = 0;
  auto* listen = app.add_subcommand("listen", "subscribe and print decoded detection events, one per line");
  listen->add_option("--broker", listen_broker, "broker host:port")->capture_default_str();
  listen->add_option("--topic", listen_topic, "topic filter")->capture_default_str();
  listen->add_option("--count", listen_count, "exit after this many messages (0 = unlimited)")
      ->capture_default_str();
  listen->add_option("--timeout", listen_timeout, "exit after this many idle seconds (0 = never)")
      ->capture_default_str();
  listen->add_option("--client-id", listen_id, "MQTT client id (default listener-<pid>)");

  // params / flops
  ModelArgs params_model;
  auto* params = app.add_subcommand("params", "parameter counts (paper formula and exact enumeration)");
  params_model.add_to(params, false);
  ModelArgs flops_model;
  auto* flops = app.add_subcommand("flops", "convolution FLOPs of the model");
  flops_model.add_to(flops, false);

  // eval
  std::string eval_dets, eval_gt, eval_format = "json";
  auto* eval = app.add_subcommand("eval", "AP per class and mAP against ground truth");
  eval->add_option("--detections", eval_dets, "detections JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("--ground-truth", eval_gt, "ground-truth JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("--format", eval_format, "output format")
      ->check(CLI::IsMember({"json", "table"}))
      ->capture_default_str();

  // plan-camera
  CameraSite site;
  std::optional<double> crossing_length;
  auto* plan = app.add_subcommand("plan-camera", "camera-to-crossing distances for a pole-mounted camera");
  plan->add_option("--height", site.pole_height, "pole height AB in metres")->required();
  plan->add_option("--width", site.pole_arm_width, "pole arm width BC in metres")->required();
  plan->add_option("--far-offset", site.far_lane_offset, "ground distance to the opposite lane in metres")
      ->required();
  plan->add_option("--crossing-length", crossing_length, "crossing length AE in metres (default: far offset)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cout << std::flush;
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (detect->parsed()) {
      if (detect_model.weights.empty() && !detect_model.seed)
        throw InputError("detect needs --weights or --weights-seed");
      const Model model = detect_model.build();
      const auto source = FrameSource::directory(detect_input);
      DetectionSet out;
      for (std::size_t i = 0; i < source.size(); ++i) {
        const auto frame = source.get(i);
        auto& list = out[frame.id];
        for (auto d : run_detection(model, preprocess(frame.image, model.input_size()), detect_conf, detect_iou,
                                    ExecOptions{threads})) {
          d.bbox = to_frame(d.bbox, model.input_size(), frame.image.width, frame.image.height);
          list.push_back(d);
        }
      }
      const auto text = detections_to_json(out).dump(2) + "\n";
      if (detect_out.empty())
        std::cout << text;
      else
        write_file(detect_out, text);
    } else if (weights->parsed()) {
      Model model = weights_model.build();
      if (!weights_zero) randomize_weights(model, weights_seed);
      const auto bytes = save_weights(model);
      write_file(weights_out, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
      std::cout << "wrote " << bytes.size() << " bytes (" << count_params(model) << " parameters) to "
                << weights_out << "\n";
    } else if (bench->parsed()) {
      const Model model = bench_model.build();
      const bool numeric = !bench_frames.empty() && bench_frames.find_first_not_of("0123456789") == std::string::npos;
      const auto source = numeric ? FrameSource::synthetic(std::stoull(bench_frames), bench_seed)
                                  : FrameSource::directory(bench_frames);
      std::optional<mqtt::Session> session;
      if (!bench_publish.empty())
        session = mqtt::Session::connect(bench_publish, {"bench-" + std::to_string(::getpid()), 60});
      pipe.record_detections = !bench_gt.empty();
      auto result = run_pipeline(source, model, session ? &*session : nullptr, pipe);
      if (!bench_gt.empty()) {
        DetectionSet dets;
        for (std::size_t i = 0; i < result.frame_detections.size(); ++i) {
          auto& list = dets[source.get(i).id];
          for (const auto& e : result.frame_detections[i])
            list.push_back({BBox::from_corners(static_cast<float>(e.x1), static_cast<float>(e.y1),
                                               static_cast<float>(e.x2), static_cast<float>(e.y2)),
                            static_cast<int>(e.class_id), static_cast<float>(e.confidence_milli) / 1000.0f});
        }
        result.report.accuracy_map =
            evaluate(dets, ground_truth_from_json(detail::read_json_file(bench_gt))).map;
      }
      const auto text = emit_report(result.report, bench_report == "json" ? ReportFormat::json : ReportFormat::table);
      if (bench_out.empty())
        std::cout << text;
      else
        write_file(bench_out, text);
    } else if (broker->parsed()) {
      // Block termination signals before any thread starts so only sigwait sees them.
      const sigset_t signals = termination_signals();
      pthread_sigmask(SIG_BLOCK, &signals, nullptr);
      auto server = mqtt::run_broker(broker_bind);
      std::cout << "listening on port " << server->port() << std::endl;
      int sig = 0;
      sigwait(&signals, &sig);
      server->stop();
      const auto s = server->stats();
      std::cout << "stopped: " << s.connections_accepted << " connections, " << s.publishes_received
                << " publishes, " << s.messages_delivered << " deliveries\n";
    } else if (listen->parsed()) {
      auto session = mqtt::Session::connect(
          listen_broker, {listen_id.empty() ? "listener-" + std::to_string(::getpid()) : listen_id, 30});
      session.subscribe(listen_topic);
      const mqtt::Millis idle{listen_timeout > 0 ? static_cast<long long>(listen_timeout * 1000) : 24LL * 3600 * 1000};
      for (std::size_t n = 0; listen_count == 0 || n < listen_count; ++n) {
        auto msg = session.poll_message(idle);
        if (!msg) break;
        const std::string_view payload(reinterpret_cast<const char*>(msg->payload.data()), msg->payload.size());
        try {
          std::cout << msg->topic << " " << encode_event(decode_event(payload), SIZE_MAX) << std::endl;
        } catch (const EventError& e) {
          std::cerr << "warning: " << msg->topic << ": undecodable payload: " << e.what() << "\n";
        }
      }
    } else if (params->parsed()) {
      const Model model = params_model.build();
      std::cout << std::left << std::setw(8) << "layer" << std::setw(26) << "block" << std::right << std::setw(12)
                << "paper" << std::setw(12) << "exact" << "\n";
      std::size_t paper_total = 0, exact_total = 0;
      for (std::size_t i = 0; i < model.layer_count(); ++i) {
        const auto* ir = std::get_if<InvertedResidualSpec>(&model.layer(i).spec.body);
        if (!ir) continue;
        const auto paper = block_param_count_paper(*ir), exact = block_param_count_exact(*ir);
        paper_total += paper;
        exact_total += exact;
        std::ostringstream name;
        name << "ir " << ir->in_ch << "->" << ir->out_ch << " t=" << ir->expansion << " s=" << ir->stride;
        std::cout << std::left << std::setw(8) << i << std::setw(26) << name.str() << std::right << std::setw(12)
                  << paper << std::setw(12) << exact << "\n";
      }
      std::cout << std::left << std::setw(34) << "blocks total" << std::right << std::setw(12) << paper_total
                << std::setw(12) << exact_total << "\n";
      const auto total = count_params(model);
      std::cout << "model parameters (weights + biases): " << total << " (" << fixed(total / 1e6, 2)
                << " M; paper reports " << kPaperParamsMillions << " M)\n";
    } else if (flops->parsed()) {
      auto cfg = load_model_config(flops_model.config);
      const std::size_t size = flops_model.input_size.value_or(cfg.input_size);
      const auto ops = count_flops(cfg, size);
      std::cout << "input " << size << "x" << size << ": " << ops << " FLOPs = " << fixed(ops / 1e9, 2)
                << " GFLOPs (paper reports " << kPaperGflops << " GFLOPs)\n";
    } else if (eval->parsed()) {
      const auto report = evaluate(detections_from_json(detail::read_json_file(eval_dets)),
                                   ground_truth_from_json(detail::read_json_file(eval_gt)));
      if (eval_format == "json") {
        std::cout << to_json(report).dump(2) << "\n";
      } else {
        for (const auto& [c, ap] : report.per_class_ap) std::cout << "class " << c << "  AP " << fixed(ap, 4) << "\n";
        std::cout << "mAP " << fixed(report.map, 4) << "  (tp " << report.tp << ", fp " << report.fp << ", gt "
                  << report.total_gt << ")\n";
      }
    } else if (plan->parsed()) {
      site.crossing_length = crossing_length.value_or(site.far_lane_offset);
      const auto p = plan_camera(site);
      std::cout << "near " << fixed(p.near_distance, 2) << " m\nfar " << fixed(p.far_distance, 2) << " m\n";
    }
  } catch (const std::exception& e) {
    std::cout << std::flush;
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
