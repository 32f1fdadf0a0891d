// mirage: scene generation, registration, streaming session and metric
// reports from one binary.
//
// Exit codes: 0 success, 1 input error, 2 calibration retry requested.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "mirage.hpp"

namespace fs = std::filesystem;
using mirage::Json;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitRetry = 2;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out_dir = "out";
  std::string log_level = "info";
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

/// Collects everything a run reports about itself; written once per run.
class Manifest {
 public:
  Manifest(std::string command, const Globals& g, int argc, char** argv) : start_(std::chrono::steady_clock::now()) {
    j_["command"] = std::move(command);
    j_["tool_version"] = kVersion;
    j_["started_utc"] = utc_now();
    Json args = Json::array();
    for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
    j_["argv"] = args;
    j_["out_dir"] = g.out_dir;
    j_["config_path"] = g.config_path;
    j_["seeds"] = Json::object();
    j_["inputs"] = Json::object();
    j_["outputs"] = Json::object();
    j_["timings"] = Json::object();
  }

  Json& operator[](const std::string& key) { return j_[key]; }
  void config(const mirage::Config& c) { j_["config"] = c.dump(); }
  void input(const std::string& name, const std::string& path) { j_["inputs"][name] = path; }
  void output(const std::string& name, const fs::path& path) { j_["outputs"][name] = path.string(); }
  void seed(const std::string& name, std::uint64_t v) { j_["seeds"][name] = v; }
  void timing(const std::string& name, double s) { j_["timings"][name] = s; }

  void write(const fs::path& dir, int exit_code) {
    j_["exit_code"] = exit_code;
    j_["timings"]["wall_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    fs::create_directories(dir);
    mirage::write_file_text(dir / "manifest.json", j_.dump(2) + "\n");
  }

 private:
  Json j_;
  std::chrono::steady_clock::time_point start_;
};

mirage::Config load_config(const std::string& path) {
  mirage::Config c = path.empty() ? mirage::Config::parse("", "<defaults>") : mirage::Config::load(path);
  c.check_sections({"scene", "camera", "preprocess", "segmentation", "registration", "calibration", "server", "client"});
  return c;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  mirage::require(!ec && fs::is_directory(dir), mirage::ErrorCode::kIo,
                  "cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
}

mirage::SceneSpec scene_spec(const mirage::Config& c, const Globals& g) {
  mirage::SceneSpec spec;
  read_config(c, spec);
  if (g.seed) spec.scene.seed = *g.seed;
  return spec;
}

mirage::CalibrationConfig calibration_config(const mirage::Config& c, const Globals& g) {
  mirage::CalibrationConfig cal;
  read_config(c, cal);
  if (g.seed) {
    cal.segmentation.seed = *g.seed;
    cal.registration.seed = *g.seed;
  }
  return cal;
}

// ---------------------------------------------------------------------------

int cmd_generate_scene(const Globals& g, Manifest& m) {
  const mirage::Config c = load_config(g.config_path);
  m.config(c);
  const mirage::SceneSpec spec = scene_spec(c, g);
  const mirage::SceneConfig scene = spec.resolved();
  m.seed("scene", scene.seed);
  m.seed("model", spec.model_seed);
  const fs::path dir = g.out_dir;
  ensure_dir(dir);
  const auto t0 = std::chrono::steady_clock::now();
  const mirage::RenderedScene r = mirage::render_depth(scene, spec.intrinsics);
  m.timing("render_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  mirage::write_depth_frame(dir / "frame.mdf", r.frame);
  mirage::write_labels(dir / "labels.mlb", r.truth, r.frame);
  mirage::write_ground_truth(dir / "ground_truth.json", r.truth);
  mirage::write_ply(dir / "scanner_model.ply", spec.scanner_model());
  mirage::write_ply(dir / "patient_model.ply", spec.patient_model());
  for (const char* f : {"frame.mdf", "labels.mlb", "ground_truth.json", "scanner_model.ply", "patient_model.ply"}) {
    m.output(f, dir / f);
  }
  m["valid_pixels"] = r.frame.valid_count();
  spdlog::info("wrote scene to {} ({} valid pixels)", dir.string(), r.frame.valid_count());
  return kExitOk;
}

struct RegisterArgs {
  std::string frame;
  std::string scanner_model;
  std::string patient_model;
  std::string ground_truth;
};

int cmd_register(const Globals& g, const RegisterArgs& a, Manifest& m) {
  const mirage::Config c = load_config(g.config_path);
  m.config(c);
  const mirage::SceneSpec spec = scene_spec(c, g);
  const mirage::CalibrationConfig cal = calibration_config(c, g);
  m.seed("segmentation", cal.segmentation.seed);
  m.seed("registration", cal.registration.seed);
  m.input("frame", a.frame);
  m.input("scanner_model", a.scanner_model);
  const mirage::DepthFrame frame = mirage::read_depth_frame(a.frame);
  const mirage::PointCloud scanner = mirage::read_ply(a.scanner_model);
  mirage::PointCloud patient;
  if (!a.patient_model.empty()) {
    m.input("patient_model", a.patient_model);
    patient = mirage::read_ply(a.patient_model);
  } else {
    patient = spec.patient_model();
  }
  std::optional<mirage::RigidTransform> truth;
  if (!a.ground_truth.empty()) {
    m.input("ground_truth", a.ground_truth);
    truth = mirage::read_ground_truth(a.ground_truth);
  }
  ensure_dir(g.out_dir);

  const std::vector<mirage::DepthFrame> frames{frame};
  const mirage::CalibrationOutcome out = mirage::calibrate(frames, scanner, patient, cal, spec.model_ground());
  Json result = mirage::to_json(out);
  if (truth) {
    result["translation_error_m"] = mirage::translation_distance(out.result.transform, *truth);
    result["rotation_error_deg"] = mirage::rotation_angle_between(out.result.transform, *truth) * 180.0 / M_PI;
  }
  const fs::path path = fs::path(g.out_dir) / "result.json";
  mirage::write_file_text(path, result.dump(2) + "\n");
  m.output("result", path);
  m.timing("elapsed_s", out.result.elapsed_s);
  m["status"] = std::string(mirage::to_string(out.status));
  std::cout << result.dump(2) << "\n";
  if (out.status != mirage::CalibrationStatus::kAccepted) {
    spdlog::warn("calibration retry requested: {}", out.cause);
    return kExitRetry;
  }
  spdlog::info("accepted: mean matched distance {:.4f} m in {:.2f} s", out.result.mean_matched_distance,
               out.result.elapsed_s);
  return kExitOk;
}

mirage::streaming::ServerConfig server_config(const mirage::Config& c) {
  mirage::streaming::ServerConfig s;
  c.check_keys("server", {"listen", "window_s", "source_idle_timeout_s", "startup_timeout_s", "cues"});
  std::string listen, cues;
  c.read("server", "listen", listen);
  if (!listen.empty()) s.listen = mirage::streaming::Endpoint::parse(listen);
  c.read("server", "window_s", s.window_s);
  c.read("server", "source_idle_timeout_s", s.source_idle_timeout_s);
  c.read("server", "startup_timeout_s", s.startup_timeout_s);
  c.read("server", "cues", cues);
  if (!cues.empty()) s.cues = mirage::streaming::parse_cues(cues);
  mirage::require(s.window_s > 0.0 && s.source_idle_timeout_s > 0.0 && s.startup_timeout_s >= 0.0,
                  mirage::ErrorCode::kConfig, "server timings must be positive");
  return s;
}

int cmd_serve(const Globals& g, const std::string& listen, Manifest& m) {
  const mirage::Config c = load_config(g.config_path);
  m.config(c);
  mirage::streaming::ServerConfig sc = server_config(c);
  if (!listen.empty()) sc.listen = mirage::streaming::Endpoint::parse(listen);
  const mirage::SceneSpec spec = scene_spec(c, g);
  const mirage::CalibrationConfig cal = calibration_config(c, g);
  ensure_dir(g.out_dir);
  sc.log_path = (fs::path(g.out_dir) / "session.jsonl").string();
  m.output("session_log", sc.log_path);
  auto calibrator =
      std::make_unique<mirage::Calibrator>(spec.scanner_model(), spec.patient_model(), cal, spec.model_ground());
  mirage::streaming::Server server(sc, std::move(calibrator));
  spdlog::info("listening on {}", server.endpoint().str());
  const auto stats = server.run();
  m["stats"] = to_json(stats);
  spdlog::info("session ended: {} frames, {} calibrations, {} decode errors", stats.frames_completed,
               stats.calibrations, stats.decode_errors);
  return kExitOk;
}

int cmd_client(const Globals& g, const std::string& connect, const std::string& script, double max_run_s,
               Manifest& m) {
  const mirage::Config c = load_config(g.config_path);
  m.config(c);
  mirage::streaming::ClientConfig cc;
  cc.server = mirage::streaming::Endpoint::parse(connect);
  cc.max_run_s = max_run_s;
  if (!script.empty()) {
    m.input("script", script);
    cc.script = mirage::streaming::parse_script(mirage::read_file_text(script));
  }
  c.check_keys("client", {"client_id"});
  c.read("client", "client_id", cc.client_id);
  mirage::require(cc.client_id != mirage::streaming::kSourceRole, mirage::ErrorCode::kConfig,
                  "client_id 0 is reserved for the sensor source");
  ensure_dir(g.out_dir);
  cc.log_path = (fs::path(g.out_dir) / ("client_" + std::to_string(cc.client_id) + ".jsonl")).string();
  m.output("client_log", cc.log_path);
  const mirage::SceneSpec spec = scene_spec(c, g);
  mirage::streaming::ClientSim client(cc, spec.patient_model());
  const auto rep = client.run();
  m["payloads"] = rep.payloads;
  m["malformed"] = rep.malformed;
  m.timing("mean_apply_latency_us", rep.mean_latency_us());
  spdlog::info("client finished: {} payloads, {} cues, {} malformed", rep.payloads, rep.cues, rep.malformed);
  return kExitOk;
}

struct SimulateArgs {
  std::string scene;
  double fps = 45.0;
  double duration_s = 10.0;
  std::size_t clients = 1;
  std::string script;
  std::vector<double> triggers = {0.5};
  std::size_t frame_pool = 3;
};

int cmd_simulate(const Globals& g, const SimulateArgs& a, Manifest& m) {
  const mirage::Config c = load_config(g.config_path);
  const mirage::Config scene_cfg = a.scene.empty() ? c : load_config(a.scene);
  m.config(c);
  if (!a.scene.empty()) {
    m.input("scene", a.scene);
    m["scene_config"] = scene_cfg.dump();
  }
  const mirage::SceneSpec spec = scene_spec(scene_cfg, g);
  const mirage::CalibrationConfig cal = calibration_config(c, g);
  mirage::streaming::SimulationConfig sim;
  sim.server = server_config(c);
  sim.source.fps = a.fps;
  sim.source.duration_s = a.duration_s;
  sim.source.trigger_times_s = a.triggers;
  sim.clients = a.clients;
  if (!a.script.empty()) {
    m.input("script", a.script);
    sim.client_script = mirage::streaming::parse_script(mirage::read_file_text(a.script));
  }
  mirage::require(a.fps > 0.0 && a.fps <= 1000.0 && a.duration_s >= 0.0 && a.frame_pool >= 1,
                  mirage::ErrorCode::kParameter, "fps must be in (0, 1000], duration >= 0, frame pool >= 1");
  ensure_dir(g.out_dir);
  sim.log_dir = g.out_dir;

  mirage::SceneConfig scene = spec.resolved();
  m.seed("scene", scene.seed);
  std::vector<mirage::DepthFrame> frames;
  mirage::RigidTransform truth;
  if (a.duration_s > 0.0) {
    for (std::size_t i = 0; i < a.frame_pool; ++i) {
      mirage::SceneConfig s = scene;
      s.seed = mirage::splitmix64(scene.seed + i);
      const auto r = mirage::render_depth(s, spec.intrinsics);
      truth = r.truth.camera_to_scanner;
      frames.push_back(mirage::streaming::to_sensor_precision(r.frame));
    }
  }
  auto calibrator =
      std::make_unique<mirage::Calibrator>(spec.scanner_model(), spec.patient_model(), cal, spec.model_ground());
  const auto rep = mirage::streaming::run_simulation(sim, std::move(calibrator), std::move(frames), spec.patient_model());

  Json summary;
  summary["frames_sent"] = rep.source.frames_sent;
  summary["frames_received"] = rep.server.frames_completed;
  summary["decode_errors"] = rep.server.decode_errors;
  summary["late_frames"] = rep.server.late_frames;
  summary["calibrations"] = rep.server.calibrations;
  summary["accepted"] = rep.server.accepted;
  summary["retries"] = rep.server.retries;
  summary["max_buffer_span_us"] = rep.server.max_buffer_span_us;
  summary["buffer_window_us"] = static_cast<std::uint64_t>(sim.server.window_s * 1e6);
  summary["mean_payload_latency_us"] = rep.mean_payload_latency_us();
  Json clients = Json::array();
  for (const auto& cr : rep.clients) {
    Json cj{{"payloads", cr.payloads}, {"statuses", cr.statuses}, {"cues", cr.cues}, {"malformed", cr.malformed}};
    if (cr.last_transform && a.duration_s > 0.0) {
      cj["translation_error_m"] = mirage::translation_distance(*cr.last_transform, truth);
    }
    clients.push_back(cj);
  }
  summary["clients"] = clients;
  summary["wall_s"] = rep.wall_s;
  const fs::path path = fs::path(g.out_dir) / "summary.json";
  mirage::write_file_text(path, summary.dump(2) + "\n");
  m.output("summary", path);
  m.output("session_log", fs::path(g.out_dir) / "session.jsonl");
  for (std::size_t i = 0; i < rep.clients.size(); ++i) {
    m.output("client_log_" + std::to_string(i + 1), fs::path(g.out_dir) / ("client_" + std::to_string(i + 1) + ".jsonl"));
  }
  m["summary"] = summary;
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

struct ReportArgs {
  std::string input;
  std::string baseline;
  std::string chart_out;
  std::string mapping;
};

int cmd_report(const Globals& g, const ReportArgs& a, Manifest& m) {
  m.input("sessions", a.input);
  const auto records = mirage::metrics::read_sessions_csv(a.input);
  const auto summary = mirage::metrics::summarize(records);
  Json out = mirage::metrics::to_json(summary);
  ensure_dir(g.out_dir);
  if (!a.baseline.empty()) {
    m.input("baseline", a.baseline);
    const auto base = mirage::metrics::summarize(mirage::metrics::read_sessions_csv(a.baseline));
    out["baseline"] = mirage::metrics::to_json(base);
    const mirage::Config mapping = a.mapping.empty()
                                       ? mirage::Config::parse(mirage::metrics::kDefaultChartMapping, "<default mapping>")
                                       : mirage::Config::load(a.mapping);
    if (!a.mapping.empty()) m.input("mapping", a.mapping);
    m.config(mapping);
    const auto rows = mirage::metrics::normalize_for_chart(summary, base, mirage::metrics::read_chart_mapping(mapping));
    const fs::path chart = a.chart_out.empty() ? fs::path(g.out_dir) / "chart.csv" : fs::path(a.chart_out);
    mirage::write_file_text(chart, mirage::metrics::chart_csv(rows));
    m.output("chart", chart);
  } else {
    mirage::require(a.chart_out.empty(), mirage::ErrorCode::kParameter, "--chart-out needs --baseline");
  }
  const fs::path path = fs::path(g.out_dir) / "summary.json";
  mirage::write_file_text(path, out.dump(2) + "\n");
  m.output("summary", path);
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("mirage"));

  CLI::App app{"MRI scene calibration, streaming and metrics toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Override scene and solver seeds");
  app.add_option("--config", g.config_path, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--out-dir", g.out_dir, "Directory for outputs and the run manifest");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

  auto* gen = app.add_subcommand("generate-scene", "Render a synthetic frame with labels and ground truth");

  RegisterArgs reg;
  auto* regc = app.add_subcommand("register", "Calibrate one depth frame against the scanner model");
  regc->add_option("--frame", reg.frame, "MDF1 depth frame")->required();
  regc->add_option("--scanner-model", reg.scanner_model, "Scanner model PLY")->required();
  regc->add_option("--patient-model", reg.patient_model, "Patient model PLY (default: from the scene config)");
  regc->add_option("--ground-truth", reg.ground_truth, "Ground-truth JSON, reports the pose error");

  std::string listen;
  auto* serve = app.add_subcommand("serve", "Run the registration server");
  serve->add_option("--listen", listen, "host:port (default from [server] listen)");

  std::string connect, script;
  double client_max_s = 0.0;
  auto* client = app.add_subcommand("client", "Run a scripted patient-side client");
  client->add_option("--connect", connect, "Server host:port")->required();
  client->add_option("--script", script, "Command script: '<seconds> <command>' per line");
  client->add_option("--max-run-s", client_max_s, "Stop after this many seconds (0: until the server ends)");

  SimulateArgs sim;
  auto* simc = app.add_subcommand("simulate", "Loopback session: server, sensor source and clients");
  simc->add_option("--scene", sim.scene, "Scene INI (default: --config)");
  simc->add_option("--fps", sim.fps, "Source frame rate");
  simc->add_option("--duration-s", sim.duration_s, "Source stream duration");
  simc->add_option("--clients", sim.clients, "Number of clients");
  simc->add_option("--script", sim.script, "Client command script");
  simc->add_option("--trigger-at", sim.triggers, "Seconds at which the source requests calibration");
  simc->add_option("--frame-pool", sim.frame_pool, "Distinct noisy renders replayed by the source");

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Summarise session metrics and emit chart data");
  report->add_option("--input", rep.input, "Sessions CSV")->required();
  report->add_option("--baseline", rep.baseline, "Baseline sessions CSV");
  report->add_option("--chart-out", rep.chart_out, "Chart CSV path");
  report->add_option("--mapping", rep.mapping, "Chart mapping INI (default: built in)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }
  if (*seed_opt) g.seed = seed;
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  CLI::App* sub = app.get_subcommands().front();
  Manifest manifest(sub->get_name(), g, argc, argv);
  int code = kExitInput;
  try {
    if (sub == gen) code = cmd_generate_scene(g, manifest);
    if (sub == regc) code = cmd_register(g, reg, manifest);
    if (sub == serve) code = cmd_serve(g, listen, manifest);
    if (sub == client) code = cmd_client(g, connect, script, client_max_s, manifest);
    if (sub == simc) code = cmd_simulate(g, sim, manifest);
    if (sub == report) code = cmd_report(g, rep, manifest);
  } catch (const mirage::Error& e) {
    spdlog::error("{}", e.what());
    manifest["error"] = e.what();
    code = kExitInput;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    manifest["error"] = e.what();
    code = kExitInput;
  }
  try {
    manifest.write(g.out_dir, code);
  } catch (const std::exception& e) {
    spdlog::error("manifest not written: {}", e.what());
    if (code == kExitOk) code = kExitInput;
  }
  return code;
}
