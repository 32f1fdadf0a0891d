#pragma once

// Loopback session: server, scripted sensor source and N scripted clients,
// each on its own thread. Returns once every participant has finished.

#include <filesystem>
#include <thread>

#include "mirage/streaming/client.hpp"
#include "mirage/streaming/server.hpp"

namespace mirage::streaming {

struct SimulationConfig {
  ServerConfig server;
  SourceConfig source;  // server endpoint is filled in
  std::size_t clients = 1;
  std::vector<ScriptStep> client_script;
  /// Directory for session.jsonl and client_<id>.jsonl; empty keeps logs in
  /// memory only.
  std::string log_dir;
  double connect_timeout_s = 2.0;
};

struct SimulationReport {
  ServerStats server;
  SourceReport source;
  std::vector<ClientReport> clients;
  std::vector<LogEvent> session_log;
  std::vector<std::vector<LogEvent>> client_logs;
  double wall_s = 0.0;

  double mean_payload_latency_us() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& c : clients) {
      for (double v : c.apply_latency_us) {
        sum += v;
        ++n;
      }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

inline SimulationReport run_simulation(SimulationConfig config, std::unique_ptr<Calibrator> calibrator,
                                       std::vector<DepthFrame> frames, const PointCloud& client_model) {
  const std::uint64_t t0 = steady_now_us();
  namespace fs = std::filesystem;
  if (!config.log_dir.empty()) {
    fs::create_directories(config.log_dir);
    config.server.log_path = (fs::path(config.log_dir) / "session.jsonl").string();
  }
  Server server(config.server, std::move(calibrator));
  const Endpoint ep = server.endpoint();

  std::vector<std::unique_ptr<ClientSim>> clients;
  for (std::size_t i = 0; i < config.clients; ++i) {
    ClientConfig cc;
    cc.server = ep;
    cc.client_id = static_cast<std::uint32_t>(i + 1);
    cc.script = config.client_script;
    // Backstop in case the server's goodbye is lost.
    cc.max_run_s = config.source.duration_s + config.server.source_idle_timeout_s + 60.0;
    if (!config.log_dir.empty()) {
      cc.log_path = (fs::path(config.log_dir) / ("client_" + std::to_string(cc.client_id) + ".jsonl")).string();
    }
    clients.push_back(std::make_unique<ClientSim>(cc, client_model));
  }

  SimulationReport rep;
  rep.clients.resize(clients.size());
  std::thread server_thread([&] { rep.server = server.run(); });
  std::vector<std::thread> client_threads;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    client_threads.emplace_back([&, i] { rep.clients[i] = clients[i]->run(); });
  }
  // Let the clients register before the first frame so they see every
  // broadcast.
  const std::uint64_t wait_until = steady_now_us() + static_cast<std::uint64_t>(config.connect_timeout_s * 1e6);
  while (server.log().count("client_hello") < clients.size() && steady_now_us() < wait_until) {
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }

  config.source.server = ep;
  SensorSource source(config.source, std::move(frames));
  rep.source = source.run();
  server_thread.join();
  for (auto& t : client_threads) t.join();

  rep.session_log = server.log().events();
  for (const auto& c : clients) rep.client_logs.push_back(c->log().events());
  rep.wall_s = static_cast<double>(steady_now_us() - t0) / 1e6;
  return rep;
}

}  // namespace mirage::streaming
