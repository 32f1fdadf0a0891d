#pragma once

// MRG1 wire format. Every datagram is one packet:
//
//   "MRG1" | type u8 | sequence u64 | timestamp_us u64 | payload_len u32 |
//   [fragment_index u16 | fragment_count u16]   (type 1 only)
//   payload | crc32 u32
//
// Little-endian throughout. The CRC covers every byte before it.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <zlib.h>

#include "mirage/bytes.hpp"
#include "mirage/error.hpp"
#include "mirage/geometry.hpp"

namespace mirage::streaming {

enum class PacketType : std::uint8_t {
  kDepthFrame = 1,
  kPose = 2,
  kTransformPayload = 3,
  kCueTrigger = 4,
  kControlCommand = 5,
  kAck = 6,
};

inline std::string_view to_string(PacketType t) {
  switch (t) {
    case PacketType::kDepthFrame: return "depth_frame";
    case PacketType::kPose: return "pose";
    case PacketType::kTransformPayload: return "transform_payload";
    case PacketType::kCueTrigger: return "cue_trigger";
    case PacketType::kControlCommand: return "control_command";
    case PacketType::kAck: return "ack";
  }
  return "unknown";
}

enum class DecodeFailure { kBadMagic, kChecksumMismatch, kTruncated, kUnknownType, kBadPayload };

inline std::string_view to_string(DecodeFailure f) {
  switch (f) {
    case DecodeFailure::kBadMagic: return "bad-magic";
    case DecodeFailure::kChecksumMismatch: return "checksum-mismatch";
    case DecodeFailure::kTruncated: return "truncated";
    case DecodeFailure::kUnknownType: return "unknown-type";
    case DecodeFailure::kBadPayload: return "bad-payload";
  }
  return "unknown";
}

class DecodeError : public Error {
 public:
  DecodeError(DecodeFailure failure, const std::string& message)
      : Error(ErrorCode::kDecode, std::string(to_string(failure)) + ": " + message), failure_(failure) {}
  DecodeFailure failure() const noexcept { return failure_; }

 private:
  DecodeFailure failure_;
};

inline constexpr std::size_t kHeaderBytes = 4 + 1 + 8 + 8 + 4;
inline constexpr std::size_t kFragmentHeaderBytes = 4;
inline constexpr std::size_t kCrcBytes = 4;
inline constexpr std::size_t kMaxDatagramBytes = 65507;

struct Packet {
  PacketType type = PacketType::kAck;
  std::uint64_t sequence = 0;
  std::uint64_t timestamp_us = 0;
  // Only carried on the wire for depth frames.
  std::uint16_t fragment_index = 0;
  std::uint16_t fragment_count = 1;
  std::vector<std::uint8_t> payload;

  bool operator==(const Packet&) const = default;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; packets are far below that limit.
  c = crc32(c, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

inline bool known_type(std::uint8_t t) { return t >= 1 && t <= 6; }

inline std::vector<std::uint8_t> encode(const Packet& p) {
  require(known_type(static_cast<std::uint8_t>(p.type)), ErrorCode::kParameter, "unknown packet type");
  require(p.payload.size() <= 0xFFFFFFFFu, ErrorCode::kParameter, "payload too large");
  const bool frag = p.type == PacketType::kDepthFrame;
  if (frag) {
    require(p.fragment_count >= 1 && p.fragment_index < p.fragment_count, ErrorCode::kParameter,
            "fragment index out of range");
  }
  ByteWriter w;
  w.text("MRG1");
  w.u8(static_cast<std::uint8_t>(p.type));
  w.u64(p.sequence);
  w.u64(p.timestamp_us);
  w.u32(static_cast<std::uint32_t>(p.payload.size()));
  if (frag) {
    w.u16(p.fragment_index);
    w.u16(p.fragment_count);
  }
  w.bytes(p.payload);
  w.u32(crc32_of(w.buffer()));
  return w.take();
}

inline Packet decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw DecodeError(DecodeFailure::kTruncated, "shorter than the magic");
  if (!std::equal(bytes.begin(), bytes.begin() + 4, "MRG1")) throw DecodeError(DecodeFailure::kBadMagic, "expected MRG1");
  if (bytes.size() < kHeaderBytes + kCrcBytes) throw DecodeError(DecodeFailure::kTruncated, "header incomplete");
  ByteReader r(bytes.subspan(4));
  const std::uint8_t type = r.u8();
  Packet p;
  p.sequence = r.u64();
  p.timestamp_us = r.u64();
  const std::uint32_t len = r.u32();
  const bool frag = type == static_cast<std::uint8_t>(PacketType::kDepthFrame);
  const std::size_t expected = kHeaderBytes + (frag ? kFragmentHeaderBytes : 0) + len + kCrcBytes;
  if (bytes.size() < expected) throw DecodeError(DecodeFailure::kTruncated, "payload shorter than payload_len");
  if (bytes.size() > expected) throw DecodeError(DecodeFailure::kBadPayload, "trailing bytes after checksum");
  const std::size_t body = expected - kCrcBytes;
  ByteReader tail(bytes.subspan(body));
  if (tail.u32() != crc32_of(bytes.first(body))) throw DecodeError(DecodeFailure::kChecksumMismatch, "crc32 mismatch");
  if (!known_type(type)) throw DecodeError(DecodeFailure::kUnknownType, "type " + std::to_string(type));
  p.type = static_cast<PacketType>(type);
  if (frag) {
    p.fragment_index = r.u16();
    p.fragment_count = r.u16();
    if (p.fragment_count == 0 || p.fragment_index >= p.fragment_count) {
      throw DecodeError(DecodeFailure::kBadPayload, "fragment index out of range");
    }
  }
  const auto pl = r.bytes(len);
  p.payload.assign(pl.begin(), pl.end());
  return p;
}

// ---------------------------------------------------------------------------
// Depth compression
//
// Ranges are coded as deltas of their bit patterns (f32 patterns when every
// value survives a float round trip, f64 otherwise), zigzag + varint. A
// zero delta is written as 0 followed by the run length, so constant regions
// and invalid pixels cost a couple of bytes per run.

namespace detail {

inline std::uint64_t zigzag(std::int64_t v) {
  return (static_cast<std::uint64_t>(v) << 1) ^ static_cast<std::uint64_t>(v >> 63);
}
inline std::int64_t unzigzag(std::uint64_t v) {
  return static_cast<std::int64_t>(v >> 1) ^ -static_cast<std::int64_t>(v & 1);
}

}  // namespace detail

inline void compress_depth(const std::vector<double>& depth, ByteWriter& w) {
  const bool narrow = std::all_of(depth.begin(), depth.end(),
                                  [](double d) { return static_cast<double>(static_cast<float>(d)) == d; });
  w.u8(narrow ? 4 : 8);
  auto bits = [narrow](double d) -> std::uint64_t {
    return narrow ? std::bit_cast<std::uint32_t>(static_cast<float>(d)) : std::bit_cast<std::uint64_t>(d);
  };
  std::uint64_t prev = 0;
  std::uint64_t run = 0;
  for (double d : depth) {
    const std::uint64_t b = bits(d);
    const std::int64_t delta = static_cast<std::int64_t>(b - prev);
    prev = b;
    if (delta == 0) {
      ++run;
      continue;
    }
    if (run) {
      w.varint(0);
      w.varint(run);
      run = 0;
    }
    w.varint(detail::zigzag(delta));
  }
  if (run) {
    w.varint(0);
    w.varint(run);
  }
}

inline std::vector<double> decompress_depth(ByteReader& r, std::size_t count) {
  const std::uint8_t width = r.u8();
  if (width != 4 && width != 8) throw DecodeError(DecodeFailure::kBadPayload, "bad depth sample width");
  std::vector<double> out;
  out.reserve(count);
  std::uint64_t prev = 0;
  auto emit = [&](std::uint64_t b) {
    out.push_back(width == 4 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(b)))
                             : std::bit_cast<double>(b));
  };
  while (out.size() < count) {
    const std::uint64_t v = r.varint();
    if (v == 0) {
      const std::uint64_t run = r.varint();
      if (run == 0 || run > count - out.size()) throw DecodeError(DecodeFailure::kBadPayload, "bad zero run");
      for (std::uint64_t i = 0; i < run; ++i) emit(prev);
    } else {
      prev += static_cast<std::uint64_t>(detail::unzigzag(v));
      if (width == 4 && prev > 0xFFFFFFFFu) throw DecodeError(DecodeFailure::kBadPayload, "sample out of range");
      emit(prev);
    }
  }
  return out;
}

/// Frame body before fragmentation: intrinsics then compressed ranges.
/// Timestamp and sequence travel in the packet header.
inline std::vector<std::uint8_t> encode_frame_body(const DepthFrame& f) {
  f.validate();
  ByteWriter w;
  w.u32(f.intrinsics.width);
  w.u32(f.intrinsics.height);
  w.f64(f.intrinsics.fx);
  w.f64(f.intrinsics.fy);
  w.f64(f.intrinsics.cx);
  w.f64(f.intrinsics.cy);
  compress_depth(f.depth, w);
  return w.take();
}

inline DepthFrame decode_frame_body(std::span<const std::uint8_t> body, std::uint64_t timestamp_us,
                                    std::uint64_t sequence) {
  try {
    ByteReader r(body);
    CameraIntrinsics k;
    k.width = r.u32();
    k.height = r.u32();
    k.fx = r.f64();
    k.fy = r.f64();
    k.cx = r.f64();
    k.cy = r.f64();
    k.validate();
    auto depth = decompress_depth(r, k.pixel_count());
    if (!r.done()) throw DecodeError(DecodeFailure::kBadPayload, "trailing bytes after depth");
    DepthFrame f{k, timestamp_us, sequence, std::move(depth)};
    f.validate();
    return f;
  } catch (const DecodeError&) {
    throw;
  } catch (const Error& e) {
    throw DecodeError(DecodeFailure::kBadPayload, e.what());
  }
}

/// Splits a frame into depth-frame packets whose encoded size stays within
/// `max_datagram` bytes.
inline std::vector<Packet> frame_packets(const DepthFrame& f, std::size_t max_datagram = kMaxDatagramBytes) {
  constexpr std::size_t overhead = kHeaderBytes + kFragmentHeaderBytes + kCrcBytes;
  require(max_datagram > overhead && max_datagram <= kMaxDatagramBytes, ErrorCode::kParameter,
          "datagram size out of range");
  const auto body = encode_frame_body(f);
  const std::size_t chunk = max_datagram - overhead;
  const std::size_t count = std::max<std::size_t>(1, (body.size() + chunk - 1) / chunk);
  require(count <= 0xFFFF, ErrorCode::kParameter, "frame needs too many fragments");
  std::vector<Packet> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    Packet& p = out[i];
    p.type = PacketType::kDepthFrame;
    p.sequence = f.sequence;
    p.timestamp_us = f.timestamp_us;
    p.fragment_index = static_cast<std::uint16_t>(i);
    p.fragment_count = static_cast<std::uint16_t>(count);
    const std::size_t begin = i * chunk;
    const std::size_t end = std::min(body.size(), begin + chunk);
    p.payload.assign(body.begin() + static_cast<std::ptrdiff_t>(begin), body.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Typed payloads

namespace detail {

inline void put_transform(ByteWriter& w, const RigidTransform& t) {
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) w.f64(t.rotation(r, c));
  }
  for (int i = 0; i < 3; ++i) w.f64(t.translation[i]);
}

inline RigidTransform get_transform(ByteReader& r) {
  RigidTransform t;
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 3; ++c) t.rotation(i, c) = r.f64();
  }
  for (int i = 0; i < 3; ++i) t.translation[i] = r.f64();
  if (!t.is_valid(1e-6)) throw DecodeError(DecodeFailure::kBadPayload, "transform is not rigid");
  return t;
}

template <typename F>
auto parse_payload(std::span<const std::uint8_t> bytes, F&& body) {
  try {
    ByteReader r(bytes);
    auto v = body(r);
    if (!r.done()) throw DecodeError(DecodeFailure::kBadPayload, "trailing payload bytes");
    return v;
  } catch (const DecodeError&) {
    throw;
  } catch (const Error& e) {
    throw DecodeError(DecodeFailure::kTruncated, e.what());
  }
}

}  // namespace detail

struct Cue {
  std::uint16_t cue_id = 0;
  std::uint32_t offset_ms = 0;
  bool operator==(const Cue&) const = default;
};

struct TransformPayload {
  RigidTransform transform;
  double mean_matched_distance = 0.0;
  std::vector<Cue> cues;
};

inline std::vector<std::uint8_t> encode_payload(const TransformPayload& p) {
  p.transform.validate();
  require(p.cues.size() <= 0xFFFF, ErrorCode::kParameter, "too many cues");
  ByteWriter w;
  detail::put_transform(w, p.transform);
  w.f64(p.mean_matched_distance);
  w.u16(static_cast<std::uint16_t>(p.cues.size()));
  for (const Cue& c : p.cues) {
    w.u16(c.cue_id);
    w.u32(c.offset_ms);
  }
  return w.take();
}

inline TransformPayload decode_transform_payload(std::span<const std::uint8_t> bytes) {
  return detail::parse_payload(bytes, [](ByteReader& r) {
    TransformPayload p;
    p.transform = detail::get_transform(r);
    p.mean_matched_distance = r.f64();
    p.cues.resize(r.u16());
    for (Cue& c : p.cues) {
      c.cue_id = r.u16();
      c.offset_ms = r.u32();
    }
    return p;
  });
}

/// Headset pose in its own tracking frame.
inline std::vector<std::uint8_t> encode_pose(const RigidTransform& t) {
  ByteWriter w;
  detail::put_transform(w, t);
  return w.take();
}

inline RigidTransform decode_pose(std::span<const std::uint8_t> bytes) {
  return detail::parse_payload(bytes, [](ByteReader& r) { return detail::get_transform(r); });
}

inline std::vector<std::uint8_t> encode_payload(const Cue& c) {
  ByteWriter w;
  w.u16(c.cue_id);
  w.u32(c.offset_ms);
  return w.take();
}

inline Cue decode_cue(std::span<const std::uint8_t> bytes) {
  return detail::parse_payload(bytes, [](ByteReader& r) {
    Cue c;
    c.cue_id = r.u16();
    c.offset_ms = r.u32();
    return c;
  });
}

enum class Command : std::uint8_t { kSkip = 1, kPause = 2, kResume = 3, kRequestRecalibration = 4 };

inline std::string_view to_string(Command c) {
  switch (c) {
    case Command::kSkip: return "skip";
    case Command::kPause: return "pause";
    case Command::kResume: return "resume";
    case Command::kRequestRecalibration: return "request_recalibration";
  }
  return "unknown";
}

inline Command parse_command(std::string_view s) {
  for (Command c : {Command::kSkip, Command::kPause, Command::kResume, Command::kRequestRecalibration}) {
    if (to_string(c) == s) return c;
  }
  fail(ErrorCode::kParameter, "unknown command '" + std::string(s) + "'");
}

struct ControlCommand {
  Command command = Command::kSkip;
  std::uint32_t client_id = 0;
  // Sender's own clock, relative to its start.
  std::uint64_t client_time_us = 0;
  bool operator==(const ControlCommand&) const = default;
};

inline std::vector<std::uint8_t> encode_payload(const ControlCommand& c) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(c.command));
  w.u32(c.client_id);
  w.u64(c.client_time_us);
  return w.take();
}

inline ControlCommand decode_control(std::span<const std::uint8_t> bytes) {
  return detail::parse_payload(bytes, [](ByteReader& r) {
    ControlCommand c;
    const std::uint8_t v = r.u8();
    if (v < 1 || v > 4) throw DecodeError(DecodeFailure::kBadPayload, "unknown command " + std::to_string(v));
    c.command = static_cast<Command>(v);
    c.client_id = r.u32();
    c.client_time_us = r.u64();
    return c;
  });
}

enum class AckKind : std::uint8_t { kHello = 1, kGoodbye = 2, kCalibrationStatus = 3, kCommandAck = 4 };

struct Ack {
  AckKind kind = AckKind::kHello;
  // Hello/Goodbye: role or client id; CalibrationStatus: 0 accepted, 1 retry.
  std::uint32_t code = 0;
  std::string message;
  bool operator==(const Ack&) const = default;
};

inline std::vector<std::uint8_t> encode_payload(const Ack& a) {
  require(a.message.size() <= 0xFFFF, ErrorCode::kParameter, "ack message too long");
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(a.kind));
  w.u32(a.code);
  w.u16(static_cast<std::uint16_t>(a.message.size()));
  w.text(a.message);
  return w.take();
}

inline Ack decode_ack(std::span<const std::uint8_t> bytes) {
  return detail::parse_payload(bytes, [](ByteReader& r) {
    Ack a;
    const std::uint8_t k = r.u8();
    if (k < 1 || k > 4) throw DecodeError(DecodeFailure::kBadPayload, "unknown ack kind " + std::to_string(k));
    a.kind = static_cast<AckKind>(k);
    a.code = r.u32();
    a.message = r.text(r.u16());
    return a;
  });
}

inline Packet make_packet(PacketType type, std::uint64_t sequence, std::uint64_t timestamp_us,
                          std::vector<std::uint8_t> payload) {
  Packet p;
  p.type = type;
  p.sequence = sequence;
  p.timestamp_us = timestamp_us;
  p.payload = std::move(payload);
  return p;
}

}  // namespace mirage::streaming
