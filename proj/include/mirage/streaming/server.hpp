#pragma once

// Registration server. The calling thread runs the ingest loop (frames,
// commands, client registration, cue pacing); a worker thread runs one
// calibration at a time. Triggers that arrive while a calibration is running
// are coalesced into one follow-up job.

#include <atomic>
#include <condition_variable>
#include <map>
#include <mutex>
#include <thread>

#include "mirage/registration.hpp"
#include "mirage/streaming/codec.hpp"
#include "mirage/streaming/cue_pacer.hpp"
#include "mirage/streaming/frame_buffer.hpp"
#include "mirage/streaming/session_log.hpp"
#include "mirage/streaming/udp.hpp"

namespace mirage::streaming {

struct ServerConfig {
  Endpoint listen{"127.0.0.1", 0};
  double window_s = 0.5;
  /// Session ends when the source has been silent this long.
  double source_idle_timeout_s = 2.0;
  /// Session ends if no source shows up within this time; 0 waits forever.
  double startup_timeout_s = 0.0;
  std::vector<Cue> cues = {{1, 0}, {2, 2000}, {3, 4000}, {4, 6000}};
  std::string log_path;
};

struct ServerStats {
  std::size_t packets = 0;
  std::size_t fragments = 0;
  std::size_t frames_completed = 0;
  std::size_t late_frames = 0;
  std::size_t evicted = 0;
  std::size_t decode_errors = 0;
  std::size_t triggers = 0;
  std::size_t calibrations = 0;
  std::size_t accepted = 0;
  std::size_t retries = 0;
  std::size_t transform_broadcasts = 0;
  std::size_t status_broadcasts = 0;
  std::size_t cues_fired = 0;
  std::uint64_t max_buffer_span_us = 0;
  std::size_t max_buffer_frames = 0;
};

inline Json to_json(const ServerStats& s) {
  return Json{{"packets", s.packets},
              {"fragments", s.fragments},
              {"frames_completed", s.frames_completed},
              {"late_frames", s.late_frames},
              {"evicted", s.evicted},
              {"decode_errors", s.decode_errors},
              {"triggers", s.triggers},
              {"calibrations", s.calibrations},
              {"accepted", s.accepted},
              {"retries", s.retries},
              {"transform_broadcasts", s.transform_broadcasts},
              {"status_broadcasts", s.status_broadcasts},
              {"cues_fired", s.cues_fired},
              {"max_buffer_span_us", s.max_buffer_span_us},
              {"max_buffer_frames", s.max_buffer_frames}};
}

/// Hello code sent by a sensor source; clients use their own nonzero id.
inline constexpr std::uint32_t kSourceRole = 0;

class Server {
 public:
  Server(ServerConfig config, std::unique_ptr<Calibrator> calibrator)
      : config_(std::move(config)),
        calibrator_(std::move(calibrator)),
        socket_(config_.listen),
        buffer_(static_cast<std::uint64_t>(config_.window_s * 1e6)) {
    require(calibrator_ != nullptr, ErrorCode::kParameter, "server needs a calibrator");
    require(config_.window_s > 0.0, ErrorCode::kParameter, "buffer window must be positive");
    if (!config_.log_path.empty()) log_.open(config_.log_path);
  }

  Endpoint endpoint() const { return socket_.local(); }
  SessionLog& log() { return log_; }
  const SessionLog& log() const { return log_; }

  void stop() { stop_ = true; }

  /// Blocks until the source disconnects or times out, or stop() is called.
  ServerStats run() {
    log_.log("session_start", {{"listen", endpoint().str()}, {"window_us", buffer_.window_us()}});
    std::thread worker([this] { worker_loop(); });
    const std::int64_t started = log_.now_us();
    while (!stop_) {
      auto d = socket_.receive(5);
      fire_cues();
      if (d) handle(*d);
      const std::int64_t now = log_.now_us();
      if (source_ && now - last_source_us_ > static_cast<std::int64_t>(config_.source_idle_timeout_s * 1e6)) {
        log_.log("source_timeout", {{"source", source_->str()}});
        break;
      }
      if (!source_ && config_.startup_timeout_s > 0.0 &&
          now - started > static_cast<std::int64_t>(config_.startup_timeout_s * 1e6)) {
        log_.log("startup_timeout");
        break;
      }
    }
    {
      std::lock_guard lock(job_mu_);
      shutting_down_ = true;
    }
    job_cv_.notify_all();
    worker.join();
    // Cues still pending when the session ends are dropped.
    broadcast(make_packet(PacketType::kAck, next_seq(), steady_now_us(), encode_payload(Ack{AckKind::kGoodbye, 0, "session end"})),
              "goodbye");
    const ServerStats s = stats();
    log_.log("session_end", to_json(s));
    return s;
  }

  ServerStats stats() const {
    std::lock_guard lock(stats_mu_);
    return stats_;
  }

 private:
  std::uint64_t next_seq() { return seq_.fetch_add(1); }

  void handle(const Datagram& d) {
    Packet p;
    try {
      p = decode(d.bytes);
    } catch (const DecodeError& e) {
      bump(&ServerStats::decode_errors);
      log_.log("decode_error", {{"from", d.from.str()}, {"reason", to_string(e.failure())}, {"bytes", d.bytes.size()}});
      return;
    }
    bump(&ServerStats::packets);
    if (source_ && d.from == *source_) last_source_us_ = log_.now_us();
    switch (p.type) {
      case PacketType::kDepthFrame: on_fragment(p, d.from); break;
      case PacketType::kPose:
        try {
          const RigidTransform pose = decode_pose(p.payload);
          log_.log("pose", {{"sequence", p.sequence}, {"translation", {pose.translation.x(), pose.translation.y(), pose.translation.z()}}});
        } catch (const DecodeError& e) {
          bump(&ServerStats::decode_errors);
          log_.log("decode_error", {{"from", d.from.str()}, {"reason", to_string(e.failure())}, {"type", "pose"}});
        }
        break;
      case PacketType::kControlCommand: on_command(p, d.from); break;
      case PacketType::kAck: on_ack(p, d.from); break;
      default:
        log_.log("unexpected_packet", {{"from", d.from.str()}, {"type", to_string(p.type)}});
        break;
    }
  }

  void on_fragment(const Packet& p, const Endpoint& from) {
    if (!source_) adopt_source(from);
    bump(&ServerStats::fragments);
    PushResult r;
    try {
      std::lock_guard lock(buffer_mu_);
      r = buffer_.push_fragment(p);
      update_buffer_stats();
    } catch (const DecodeError& e) {
      bump(&ServerStats::decode_errors);
      log_.log("decode_error", {{"from", from.str()}, {"reason", to_string(e.failure())}, {"sequence", p.sequence}});
      return;
    }
    if (!r.evicted.empty()) {
      std::lock_guard lock(stats_mu_);
      stats_.evicted += r.evicted.size();
    }
    if (r.status == PushStatus::kLate) {
      bump(&ServerStats::late_frames);
      log_.log("late_frame", {{"sequence", p.sequence}, {"timestamp_us", p.timestamp_us}});
    } else if (r.status == PushStatus::kCompleted) {
      bump(&ServerStats::frames_completed);
      log_.log("frame", {{"sequence", p.sequence},
                         {"fragments", p.fragment_count},
                         {"latency_us", static_cast<std::int64_t>(steady_now_us() - p.timestamp_us)},
                         {"buffered", buffer_frames_},
                         {"buffer_span_us", buffer_span_}});
    }
  }

  void update_buffer_stats() {
    buffer_frames_ = buffer_.size();
    buffer_span_ = buffer_.span_us();
    std::lock_guard lock(stats_mu_);
    stats_.max_buffer_span_us = std::max(stats_.max_buffer_span_us, buffer_span_);
    stats_.max_buffer_frames = std::max(stats_.max_buffer_frames, buffer_frames_);
  }

  void adopt_source(const Endpoint& from) {
    source_ = from;
    last_source_us_ = log_.now_us();
    log_.log("source_connected", {{"source", from.str()}});
  }

  void on_command(const Packet& p, const Endpoint& from) {
    ControlCommand c;
    try {
      c = decode_control(p.payload);
    } catch (const DecodeError& e) {
      bump(&ServerStats::decode_errors);
      log_.log("decode_error", {{"from", from.str()}, {"reason", to_string(e.failure())}, {"type", "control"}});
      return;
    }
    log_.log("control", {{"command", to_string(c.command)},
                         {"client_id", c.client_id},
                         {"client_time_us", c.client_time_us},
                         {"from", from.str()}});
    const std::int64_t now = log_.now_us();
    switch (c.command) {
      case Command::kRequestRecalibration: trigger(); break;
      case Command::kSkip:
      case Command::kPause:
      case Command::kResume: {
        std::lock_guard lock(pacer_mu_);
        std::int64_t shift = 0;
        if (c.command == Command::kSkip) shift = pacer_.skip(now);
        if (c.command == Command::kPause) pacer_.pause(now);
        if (c.command == Command::kResume) shift = pacer_.resume(now);
        Json sched = Json::array();
        for (auto t : pacer_.schedule()) sched.push_back(t);
        log_.log("cue_shift", {{"command", to_string(c.command)}, {"shift_us", shift}, {"paused", pacer_.paused()}, {"schedule_us", sched}});
        break;
      }
    }
    socket_.send_to(from, encode(make_packet(PacketType::kAck, next_seq(), steady_now_us(),
                                             encode_payload(Ack{AckKind::kCommandAck, static_cast<std::uint32_t>(c.command), ""}))));
  }

  void on_ack(const Packet& p, const Endpoint& from) {
    Ack a;
    try {
      a = decode_ack(p.payload);
    } catch (const DecodeError& e) {
      bump(&ServerStats::decode_errors);
      log_.log("decode_error", {{"from", from.str()}, {"reason", to_string(e.failure())}, {"type", "ack"}});
      return;
    }
    if (a.kind == AckKind::kHello) {
      if (a.code == kSourceRole) {
        if (!source_) adopt_source(from);
      } else {
        bool added = false;
        {
          std::lock_guard lock(clients_mu_);
          added = clients_.emplace(from, a.code).second;
        }
        if (added) log_.log("client_hello", {{"client_id", a.code}, {"from", from.str()}});
      }
      socket_.send_to(from, encode(make_packet(PacketType::kAck, next_seq(), steady_now_us(),
                                               encode_payload(Ack{AckKind::kHello, a.code, "welcome"}))));
    } else if (a.kind == AckKind::kGoodbye) {
      if (source_ && from == *source_) {
        log_.log("source_goodbye", {{"source", from.str()}});
        stop_ = true;
      } else {
        std::lock_guard lock(clients_mu_);
        if (clients_.erase(from)) log_.log("client_goodbye", {{"client_id", a.code}, {"from", from.str()}});
      }
    } else {
      log_.log("unexpected_ack", {{"from", from.str()}, {"kind", static_cast<int>(a.kind)}});
    }
  }

  void trigger() {
    bump(&ServerStats::triggers);
    bool coalesced = false;
    {
      std::lock_guard lock(job_mu_);
      coalesced = pending_;
      pending_ = true;
    }
    log_.log(coalesced ? "trigger_coalesced" : "calibration_trigger");
    job_cv_.notify_one();
  }

  void worker_loop() {
    for (;;) {
      {
        std::unique_lock lock(job_mu_);
        job_cv_.wait(lock, [this] { return pending_ || shutting_down_; });
        if (!pending_) return;
        pending_ = false;
      }
      run_job();
    }
  }

  void run_job() {
    std::optional<DepthFrame> frame;
    {
      std::lock_guard lock(buffer_mu_);
      frame = buffer_.latest_complete();
    }
    bump(&ServerStats::calibrations);
    if (!frame) {
      bump(&ServerStats::retries);
      log_.log("calibration", {{"status", "retry_requested"}, {"cause", "no complete frame buffered"}});
      send_status(1, "no complete frame buffered");
      return;
    }
    log_.log("calibration_start", {{"sequence", frame->sequence}, {"timestamp_us", frame->timestamp_us}});
    const CalibrationOutcome out = calibrator_->attempt(std::span<const DepthFrame>(&*frame, 1));
    const auto& r = out.result;
    Json detail{{"status", to_string(out.status)},
                {"sequence", frame->sequence},
                {"attempts", out.attempts},
                {"mean_matched_distance_m", r.mean_matched_distance},
                {"matched_fraction", r.matched_fraction},
                {"icp_iterations", r.icp_iterations},
                {"elapsed_s", r.elapsed_s}};
    if (r.mean_nearest_distance) detail["mean_nearest_distance_m"] = *r.mean_nearest_distance;
    if (!out.cause.empty()) detail["cause"] = out.cause;
    if (out.status == CalibrationStatus::kAccepted) {
      bump(&ServerStats::accepted);
      // Attempts count towards the next acceptance only.
      calibrator_->reset();
      detail["transform"] = transform_json(r.transform);
      log_.log("calibration", detail);
      TransformPayload payload{r.transform, r.mean_matched_distance, config_.cues};
      broadcast(make_packet(PacketType::kTransformPayload, next_seq(), steady_now_us(), encode_payload(payload)),
                "transform");
      bump(&ServerStats::transform_broadcasts);
      std::lock_guard lock(pacer_mu_);
      pacer_.start(log_.now_us(), config_.cues);
    } else {
      bump(&ServerStats::retries);
      log_.log("calibration", detail);
      send_status(1, out.cause);
    }
  }

  void send_status(std::uint32_t code, const std::string& message) {
    broadcast(make_packet(PacketType::kAck, next_seq(), steady_now_us(),
                          encode_payload(Ack{AckKind::kCalibrationStatus, code, message.substr(0, 1024)})),
              "status");
    bump(&ServerStats::status_broadcasts);
  }

  void fire_cues() {
    std::vector<FiredCue> fired;
    {
      std::lock_guard lock(pacer_mu_);
      fired = pacer_.poll(log_.now_us());
    }
    for (const FiredCue& f : fired) {
      bump(&ServerStats::cues_fired);
      log_.log("cue", {{"cue_id", f.cue.cue_id}, {"offset_ms", f.cue.offset_ms}, {"due_us", f.due_us}, {"fired_us", f.fired_us}});
      broadcast(make_packet(PacketType::kCueTrigger, next_seq(), steady_now_us(), encode_payload(f.cue)), "cue");
    }
  }

  /// Sends to every registered client; a failing client does not affect
  /// the others.
  void broadcast(const Packet& p, std::string_view kind) {
    const auto bytes = encode(p);
    std::map<Endpoint, std::uint32_t> targets;
    {
      std::lock_guard lock(clients_mu_);
      targets = clients_;
    }
    Json ok = Json::array();
    Json failed = Json::array();
    for (const auto& [ep, id] : targets) {
      (socket_.send_to(ep, bytes) ? ok : failed).push_back(id);
    }
    log_.log("broadcast", {{"kind", kind}, {"sequence", p.sequence}, {"recipients", ok}, {"failed", failed}});
  }

  static Json transform_json(const RigidTransform& t) {
    Json rot = Json::array();
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) rot.push_back(t.rotation(r, c));
    }
    return Json{{"rotation", rot}, {"translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
  }

  void bump(std::size_t ServerStats::*field) {
    std::lock_guard lock(stats_mu_);
    ++(stats_.*field);
  }

  ServerConfig config_;
  std::unique_ptr<Calibrator> calibrator_;
  UdpSocket socket_;
  SessionLog log_;
  std::atomic<bool> stop_{false};
  std::atomic<std::uint64_t> seq_{0};

  std::mutex buffer_mu_;
  FrameBuffer buffer_;
  std::size_t buffer_frames_ = 0;
  std::uint64_t buffer_span_ = 0;

  std::mutex clients_mu_;
  std::map<Endpoint, std::uint32_t> clients_;

  std::mutex pacer_mu_;
  CuePacer pacer_;

  std::mutex job_mu_;
  std::condition_variable job_cv_;
  bool pending_ = false;
  bool shutting_down_ = false;

  mutable std::mutex stats_mu_;
  ServerStats stats_;

  // Ingest thread only.
  std::optional<Endpoint> source_;
  std::int64_t last_source_us_ = 0;
};

}  // namespace mirage::streaming
