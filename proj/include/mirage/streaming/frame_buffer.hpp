#pragma once

// Sliding time window of received depth frames. Frames arrive either whole
// or as fragments; a fragmented frame becomes usable once every fragment is
// in.

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "mirage/streaming/codec.hpp"

namespace mirage::streaming {

enum class PushStatus { kAccepted, kCompleted, kLate, kDuplicate, kMismatch };

inline std::string_view to_string(PushStatus s) {
  switch (s) {
    case PushStatus::kAccepted: return "accepted";
    case PushStatus::kCompleted: return "completed";
    case PushStatus::kLate: return "late";
    case PushStatus::kDuplicate: return "duplicate";
    case PushStatus::kMismatch: return "mismatch";
  }
  return "unknown";
}

struct PushResult {
  PushStatus status = PushStatus::kAccepted;
  std::vector<std::uint64_t> evicted;  // timestamps, oldest first

  bool rejected() const {
    return status == PushStatus::kLate || status == PushStatus::kDuplicate || status == PushStatus::kMismatch;
  }
};

class FrameBuffer {
 public:
  explicit FrameBuffer(std::uint64_t window_us = 500000) : window_us_(window_us) {}

  std::uint64_t window_us() const { return window_us_; }

  /// Inserts a whole frame.
  PushResult push(DepthFrame frame) {
    PushResult r;
    if (reject_late(frame.timestamp_us, r)) return r;
    if (entries_.count(frame.timestamp_us)) {
      r.status = PushStatus::kDuplicate;
      return r;
    }
    Entry e;
    e.sequence = frame.sequence;
    e.frame = std::move(frame);
    const auto ts = e.frame->timestamp_us;
    entries_.emplace(ts, std::move(e));
    r.status = PushStatus::kCompleted;
    evict(r);
    return r;
  }

  /// Inserts one fragment of a depth-frame packet. The frame is decoded
  /// when its last missing fragment arrives; a body that fails to decode
  /// throws DecodeError and the entry is dropped.
  PushResult push_fragment(const Packet& p) {
    require(p.type == PacketType::kDepthFrame, ErrorCode::kParameter, "not a depth-frame packet");
    PushResult r;
    if (reject_late(p.timestamp_us, r)) return r;
    auto it = entries_.find(p.timestamp_us);
    if (it == entries_.end()) {
      Entry e;
      e.sequence = p.sequence;
      e.fragments.resize(p.fragment_count);
      it = entries_.emplace(p.timestamp_us, std::move(e)).first;
    }
    Entry& e = it->second;
    if (e.frame || e.sequence != p.sequence || e.fragments.size() != p.fragment_count) {
      r.status = e.frame || e.sequence == p.sequence ? PushStatus::kDuplicate : PushStatus::kMismatch;
      return r;
    }
    auto& slot = e.fragments[p.fragment_index];
    if (slot) {
      r.status = PushStatus::kDuplicate;
      return r;
    }
    slot = p.payload;
    ++e.received;
    r.status = PushStatus::kAccepted;
    if (e.received == e.fragments.size()) {
      std::vector<std::uint8_t> body;
      for (const auto& f : e.fragments) body.insert(body.end(), f->begin(), f->end());
      e.fragments.clear();
      try {
        e.frame = decode_frame_body(body, p.timestamp_us, p.sequence);
      } catch (const DecodeError&) {
        entries_.erase(it);
        throw;
      }
      r.status = PushStatus::kCompleted;
    }
    evict(r);
    return r;
  }

  /// Newest frame whose fragments have all arrived.
  std::optional<DepthFrame> latest_complete() const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->second.frame) return it->second.frame;
    }
    return std::nullopt;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t complete_count() const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [](const auto& kv) { return kv.second.frame.has_value(); }));
  }

  /// newest - oldest over the retained entries.
  std::uint64_t span_us() const {
    return entries_.empty() ? 0 : entries_.rbegin()->first - entries_.begin()->first;
  }

  std::vector<std::uint64_t> timestamps() const {
    std::vector<std::uint64_t> out;
    for (const auto& kv : entries_) out.push_back(kv.first);
    return out;
  }

 private:
  struct Entry {
    std::uint64_t sequence = 0;
    std::vector<std::optional<std::vector<std::uint8_t>>> fragments;
    std::size_t received = 0;
    std::optional<DepthFrame> frame;
  };

  bool reject_late(std::uint64_t ts, PushResult& r) const {
    if (!entries_.empty()) {
      const std::uint64_t newest = entries_.rbegin()->first;
      if (ts + window_us_ < newest) {
        r.status = PushStatus::kLate;
        return true;
      }
    }
    return false;
  }

  void evict(PushResult& r) {
    const std::uint64_t newest = entries_.rbegin()->first;
    while (newest - entries_.begin()->first > window_us_) {
      r.evicted.push_back(entries_.begin()->first);
      entries_.erase(entries_.begin());
    }
  }

  std::uint64_t window_us_;
  std::map<std::uint64_t, Entry> entries_;
};

}  // namespace mirage::streaming
