#pragma once

// Schedules audio cue triggers after a transform payload. Cue offsets are
// milliseconds from the start of the schedule. Skip fires the next cue now
// and pulls the rest forward by the same amount; Pause/Resume push the
// remaining cues back by the paused time.

#include <cstdint>
#include <algorithm>
#include <charconv>
#include <deque>
#include <optional>
#include <vector>

#include "mirage/streaming/codec.hpp"

namespace mirage::streaming {

struct FiredCue {
  Cue cue;
  std::int64_t due_us = 0;    // when it was scheduled to fire, after shifts
  std::int64_t fired_us = 0;  // poll time that released it
};

class CuePacer {
 public:
  void start(std::int64_t now_us, const std::vector<Cue>& cues) {
    pending_.clear();
    for (const Cue& c : cues) pending_.push_back({c, now_us + static_cast<std::int64_t>(c.offset_ms) * 1000});
    std::stable_sort(pending_.begin(), pending_.end(), [](const Slot& a, const Slot& b) { return a.due_us < b.due_us; });
    paused_since_.reset();
  }

  /// Returns the cues due at `now_us`, in schedule order.
  std::vector<FiredCue> poll(std::int64_t now_us) {
    std::vector<FiredCue> out;
    if (paused_since_) return out;
    while (!pending_.empty() && pending_.front().due_us <= now_us) {
      out.push_back({pending_.front().cue, pending_.front().due_us, now_us});
      pending_.pop_front();
    }
    return out;
  }

  /// Returns the shift applied to the remaining cues in microseconds
  /// (negative = earlier). Ignored while paused or when nothing is pending.
  std::int64_t skip(std::int64_t now_us) {
    if (paused_since_ || pending_.empty()) return 0;
    const std::int64_t shift = std::min<std::int64_t>(0, now_us - pending_.front().due_us);
    for (Slot& s : pending_) s.due_us += shift;
    return shift;
  }

  void pause(std::int64_t now_us) {
    if (!paused_since_) paused_since_ = now_us;
  }

  /// Returns the delay applied to the remaining cues.
  std::int64_t resume(std::int64_t now_us) {
    if (!paused_since_) return 0;
    const std::int64_t delay = std::max<std::int64_t>(0, now_us - *paused_since_);
    paused_since_.reset();
    for (Slot& s : pending_) s.due_us += delay;
    return delay;
  }

  bool paused() const { return paused_since_.has_value(); }
  std::size_t pending() const { return pending_.size(); }

  /// Scheduled fire times of the remaining cues.
  std::vector<std::int64_t> schedule() const {
    std::vector<std::int64_t> out;
    for (const Slot& s : pending_) out.push_back(s.due_us);
    return out;
  }

 private:
  struct Slot {
    Cue cue;
    std::int64_t due_us;
  };
  std::deque<Slot> pending_;
  std::optional<std::int64_t> paused_since_;
};

inline std::vector<Cue> parse_cues(std::string_view text) {
  // "id:offset_ms,id:offset_ms,..."
  std::vector<Cue> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view item = text.substr(pos, end - pos);
    const std::size_t colon = item.find(':');
    require(colon != std::string_view::npos, ErrorCode::kConfig, "cue entry needs id:offset_ms");
    unsigned id = 0, off = 0;
    const auto a = std::from_chars(item.data(), item.data() + colon, id);
    const auto b = std::from_chars(item.data() + colon + 1, item.data() + item.size(), off);
    require(a.ec == std::errc() && a.ptr == item.data() + colon && b.ec == std::errc() &&
                b.ptr == item.data() + item.size() && id <= 0xFFFF,
            ErrorCode::kConfig, "bad cue entry '" + std::string(item) + "'");
    out.push_back({static_cast<std::uint16_t>(id), off});
    pos = end + 1;
  }
  return out;
}

}  // namespace mirage::streaming
