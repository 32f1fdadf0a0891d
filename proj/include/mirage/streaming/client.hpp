#pragma once

// Patient-side client simulator and the scripted sensor source.

#include <sstream>
#include <thread>

#include "mirage/streaming/codec.hpp"
#include "mirage/streaming/session_log.hpp"
#include "mirage/streaming/udp.hpp"

namespace mirage::streaming {

struct ScriptStep {
  double t_s = 0.0;
  Command command = Command::kSkip;
};

/// One step per line: `<seconds> <command>`; '#' starts a comment.
inline std::vector<ScriptStep> parse_script(const std::string& text) {
  std::vector<ScriptStep> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string cmd, extra;
    ScriptStep s;
    if (!(ls >> s.t_s)) {
      require(line.find_first_not_of(" \t\r") == std::string::npos, ErrorCode::kConfig,
              "script line " + std::to_string(lineno) + ": expected '<seconds> <command>'");
      continue;
    }
    require(static_cast<bool>(ls >> cmd) && !(ls >> extra) && s.t_s >= 0.0, ErrorCode::kConfig,
            "script line " + std::to_string(lineno) + ": expected '<seconds> <command>'");
    s.command = parse_command(cmd);
    out.push_back(s);
  }
  std::stable_sort(out.begin(), out.end(), [](const ScriptStep& a, const ScriptStep& b) { return a.t_s < b.t_s; });
  return out;
}

struct ClientConfig {
  Endpoint server;
  std::uint32_t client_id = 1;
  std::vector<ScriptStep> script;
  /// Give up after this long; 0 runs until the server says goodbye.
  double max_run_s = 0.0;
  double hello_retry_s = 0.1;
  std::string log_path;
};

struct ClientReport {
  bool connected = false;
  std::size_t payloads = 0;
  std::size_t statuses = 0;
  std::size_t cues = 0;
  std::size_t malformed = 0;
  std::size_t commands_sent = 0;
  std::vector<double> apply_latency_us;
  std::optional<RigidTransform> last_transform;

  double mean_latency_us() const {
    if (apply_latency_us.empty()) return 0.0;
    double s = 0.0;
    for (double v : apply_latency_us) s += v;
    return s / static_cast<double>(apply_latency_us.size());
  }
};

/// Moves the client's local model into the scanner frame.
inline PointCloud apply_payload(const PointCloud& model, const TransformPayload& p) {
  return apply(p.transform, model);
}

class ClientSim {
 public:
  ClientSim(ClientConfig config, PointCloud model) : config_(std::move(config)), model_(std::move(model)) {
    if (!config_.log_path.empty()) log_.open(config_.log_path);
  }

  Endpoint endpoint() const { return socket_.local(); }
  const SessionLog& log() const { return log_; }
  /// Latest model placement; the input model until a payload arrives.
  const PointCloud& placed_model() const { return placed_; }
  void stop() { stop_ = true; }

  ClientReport run() {
    ClientReport rep;
    placed_ = model_;
    std::size_t next_step = 0;
    std::int64_t last_hello = -1'000'000'000;
    log_.log("client_start", {{"client_id", config_.client_id}, {"server", config_.server.str()}});
    while (!stop_) {
      const std::int64_t now = log_.now_us();
      if (config_.max_run_s > 0.0 && now > static_cast<std::int64_t>(config_.max_run_s * 1e6)) {
        log_.log("client_timeout");
        break;
      }
      if (!rep.connected && now - last_hello > static_cast<std::int64_t>(config_.hello_retry_s * 1e6)) {
        send(PacketType::kAck, encode_payload(Ack{AckKind::kHello, config_.client_id, "client"}));
        last_hello = now;
      }
      while (rep.connected && next_step < config_.script.size() &&
             now >= static_cast<std::int64_t>(config_.script[next_step].t_s * 1e6)) {
        const ControlCommand c{config_.script[next_step].command, config_.client_id, static_cast<std::uint64_t>(now)};
        send(PacketType::kControlCommand, encode_payload(c));
        ++rep.commands_sent;
        log_.log("command_sent", {{"command", to_string(c.command)}, {"client_time_us", c.client_time_us}});
        ++next_step;
      }
      auto d = socket_.receive(5);
      if (!d) continue;
      if (!handle(*d, rep)) break;
    }
    send(PacketType::kAck, encode_payload(Ack{AckKind::kGoodbye, config_.client_id, "client"}));
    log_.log("client_end", {{"payloads", rep.payloads}, {"statuses", rep.statuses}, {"cues", rep.cues},
                            {"malformed", rep.malformed}, {"mean_latency_us", rep.mean_latency_us()}});
    return rep;
  }

 private:
  // Returns false once the server has said goodbye.
  bool handle(const Datagram& d, ClientReport& rep) {
    try {
      const Packet p = decode(d.bytes);
      switch (p.type) {
        case PacketType::kTransformPayload: {
          const TransformPayload tp = decode_transform_payload(p.payload);
          placed_ = apply_payload(model_, tp);
          const double latency = static_cast<double>(steady_now_us()) - static_cast<double>(p.timestamp_us);
          ++rep.payloads;
          rep.apply_latency_us.push_back(latency);
          rep.last_transform = tp.transform;
          log_.log("payload", {{"sequence", p.sequence},
                               {"apply_latency_us", latency},
                               {"mean_matched_distance_m", tp.mean_matched_distance},
                               {"cues", tp.cues.size()}});
          break;
        }
        case PacketType::kCueTrigger: {
          const Cue c = decode_cue(p.payload);
          ++rep.cues;
          log_.log("cue", {{"cue_id", c.cue_id}, {"offset_ms", c.offset_ms}});
          break;
        }
        case PacketType::kAck: {
          const Ack a = decode_ack(p.payload);
          if (a.kind == AckKind::kHello) {
            if (!rep.connected) log_.log("connected");
            rep.connected = true;
          } else if (a.kind == AckKind::kCalibrationStatus) {
            ++rep.statuses;
            log_.log("status", {{"code", a.code}, {"message", a.message}});
          } else if (a.kind == AckKind::kGoodbye) {
            log_.log("server_goodbye");
            return false;
          }
          break;
        }
        default:
          ++rep.malformed;
          log_.log("malformed", {{"reason", "unexpected type"}, {"type", to_string(p.type)}});
          break;
      }
    } catch (const DecodeError& e) {
      ++rep.malformed;
      log_.log("malformed", {{"reason", to_string(e.failure())}});
    }
    return true;
  }

  void send(PacketType type, std::vector<std::uint8_t> payload) {
    socket_.send_to(config_.server, encode(make_packet(type, seq_++, steady_now_us(), std::move(payload))));
  }

  ClientConfig config_;
  PointCloud model_;
  PointCloud placed_;
  UdpSocket socket_;
  SessionLog log_;
  std::atomic<bool> stop_{false};
  std::uint64_t seq_ = 0;
};

struct SourceConfig {
  Endpoint server;
  double fps = 45.0;
  double duration_s = 10.0;
  /// Seconds after the first frame at which to request a calibration.
  std::vector<double> trigger_times_s = {0.5};
  double pose_rate_hz = 5.0;
  std::size_t max_datagram = kMaxDatagramBytes;
};

struct SourceReport {
  std::size_t frames_sent = 0;
  std::size_t packets_sent = 0;
  std::size_t bytes_sent = 0;
  std::size_t send_failures = 0;
  std::size_t triggers_sent = 0;
  double max_lag_ms = 0.0;  // how far behind the frame schedule the sender fell
};

/// Replays a pool of frames at a fixed rate, restamping each with the
/// current time and a running sequence number.
class SensorSource {
 public:
  SensorSource(SourceConfig config, std::vector<DepthFrame> frames)
      : config_(std::move(config)), frames_(std::move(frames)) {
    require(config_.fps > 0.0 && config_.duration_s >= 0.0, ErrorCode::kParameter, "fps must be > 0, duration >= 0");
    require(!frames_.empty() || config_.duration_s == 0.0, ErrorCode::kParameter, "source needs frames");
  }

  SourceReport run() {
    SourceReport rep;
    auto send = [&](const Packet& p) {
      const auto bytes = encode(p);
      if (socket_.send_to(config_.server, bytes)) {
        ++rep.packets_sent;
        rep.bytes_sent += bytes.size();
      } else {
        ++rep.send_failures;
      }
    };
    std::uint64_t seq = 0;
    send(make_packet(PacketType::kAck, seq++, steady_now_us(), encode_payload(Ack{AckKind::kHello, 0, "source"})));

    const auto total = static_cast<std::size_t>(std::llround(config_.fps * config_.duration_s));
    const std::uint64_t t0 = steady_now_us();
    const std::size_t pose_every = config_.pose_rate_hz > 0.0
                                       ? std::max<std::size_t>(1, static_cast<std::size_t>(config_.fps / config_.pose_rate_hz))
                                       : 0;
    std::size_t next_trigger = 0;
    for (std::size_t i = 0; i < total; ++i) {
      const std::uint64_t due = t0 + static_cast<std::uint64_t>(static_cast<double>(i) * 1e6 / config_.fps);
      const std::uint64_t now = steady_now_us();
      if (now < due) {
        std::this_thread::sleep_for(std::chrono::microseconds(due - now));
      } else {
        rep.max_lag_ms = std::max(rep.max_lag_ms, static_cast<double>(now - due) / 1000.0);
      }
      DepthFrame f = frames_[i % frames_.size()];
      f.timestamp_us = steady_now_us();
      f.sequence = i;
      for (const Packet& p : frame_packets(f, config_.max_datagram)) send(p);
      ++rep.frames_sent;
      if (pose_every && i % pose_every == 0) {
        send(make_packet(PacketType::kPose, seq++, steady_now_us(), encode_pose(RigidTransform::identity())));
      }
      const double elapsed_s = static_cast<double>(steady_now_us() - t0) / 1e6;
      while (next_trigger < config_.trigger_times_s.size() && elapsed_s >= config_.trigger_times_s[next_trigger]) {
        send(make_packet(PacketType::kControlCommand, seq++, steady_now_us(),
                         encode_payload(ControlCommand{Command::kRequestRecalibration, 0,
                                                       static_cast<std::uint64_t>(elapsed_s * 1e6)})));
        ++rep.triggers_sent;
        ++next_trigger;
      }
    }
    send(make_packet(PacketType::kAck, seq++, steady_now_us(), encode_payload(Ack{AckKind::kGoodbye, 0, "source"})));
    return rep;
  }

 private:
  SourceConfig config_;
  std::vector<DepthFrame> frames_;
  UdpSocket socket_;
};

/// Rounds every range to single precision, as a sensor delivering f32
/// samples would; such frames take the compact path in the depth codec.
inline DepthFrame to_sensor_precision(DepthFrame f) {
  for (double& d : f.depth) d = static_cast<double>(static_cast<float>(d));
  return f;
}

}  // namespace mirage::streaming
