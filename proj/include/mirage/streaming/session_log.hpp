#pragma once

// JSON-lines event log. Every line is {"t_us", "event", "detail"}; t_us is
// taken from one monotonic clock under the log's lock, so lines are totally
// ordered by time.

#include <chrono>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mirage/error.hpp"

namespace mirage::streaming {

using Json = nlohmann::ordered_json;

/// Microseconds on the host's steady clock. Packet timestamps use this so
/// processes on the same host can compare them.
inline std::uint64_t steady_now_us() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

struct LogEvent {
  std::int64_t t_us = 0;
  std::string event;
  Json detail;
};

class SessionLog {
 public:
  explicit SessionLog(std::uint64_t start_us = steady_now_us()) : start_us_(start_us) {}

  /// Also appends every event to `path` as it happens.
  void open(const std::string& path) {
    std::lock_guard lock(mu_);
    out_.open(path, std::ios::trunc);
    require(out_.good(), ErrorCode::kIo, "cannot write log " + path);
  }

  std::uint64_t start_us() const { return start_us_; }
  std::int64_t now_us() const { return static_cast<std::int64_t>(steady_now_us() - start_us_); }

  std::int64_t log(std::string event, Json detail = Json::object()) {
    std::lock_guard lock(mu_);
    LogEvent e{now_us(), std::move(event), std::move(detail)};
    if (out_.is_open()) {
      out_ << Json{{"t_us", e.t_us}, {"event", e.event}, {"detail", e.detail}}.dump() << '\n';
      out_.flush();
    }
    const auto t = e.t_us;
    events_.push_back(std::move(e));
    return t;
  }

  std::vector<LogEvent> events() const {
    std::lock_guard lock(mu_);
    return events_;
  }

  std::vector<LogEvent> events(std::string_view name) const {
    std::lock_guard lock(mu_);
    std::vector<LogEvent> out;
    for (const auto& e : events_) {
      if (e.event == name) out.push_back(e);
    }
    return out;
  }

  std::size_t count(std::string_view name) const {
    std::lock_guard lock(mu_);
    return static_cast<std::size_t>(
        std::count_if(events_.begin(), events_.end(), [&](const LogEvent& e) { return e.event == name; }));
  }

 private:
  std::uint64_t start_us_;
  mutable std::mutex mu_;
  std::ofstream out_;
  std::vector<LogEvent> events_;
};

}  // namespace mirage::streaming
