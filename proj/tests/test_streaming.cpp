#include <gtest/gtest.h>

#include <thread>

#include "oracle.hpp"

using namespace mirage;
using namespace mirage::streaming;

namespace {

template <typename F>
DecodeFailure decode_failure(F&& fn) {
  try {
    fn();
  } catch (const DecodeError& e) {
    return e.failure();
  }
  ADD_FAILURE() << "no decode error";
  return DecodeFailure::kBadPayload;
}

Packet random_packet(Rng& rng) {
  Packet p;
  p.type = static_cast<PacketType>(1 + rng.index(6));
  p.sequence = rng.next();
  p.timestamp_us = rng.next();
  if (p.type == PacketType::kDepthFrame) {
    p.fragment_count = static_cast<std::uint16_t>(1 + rng.index(0xFFFF));
    p.fragment_index = static_cast<std::uint16_t>(rng.index(p.fragment_count));
  }
  p.payload.resize(rng.index(300));
  for (auto& b : p.payload) b = static_cast<std::uint8_t>(rng.index(256));
  return p;
}

DepthFrame noisy_frame(std::uint32_t w, std::uint32_t h, std::uint64_t seed) {
  CameraIntrinsics k;
  k.width = w;
  k.height = h;
  k.fx = k.fy = 50.0;
  k.cx = w / 2.0;
  k.cy = h / 2.0;
  Rng rng(seed);
  std::vector<double> d(k.pixel_count());
  for (auto& v : d) v = rng.uniform() < 0.1 ? 0.0 : rng.uniform(0.3, 4.0);
  return DepthFrame::make(k, d, 1'000'000 + seed, seed);
}

DepthFrame frame_at(std::uint64_t ts_us) {
  CameraIntrinsics k;
  k.width = 8;
  k.height = 8;
  k.fx = k.fy = 8.0;
  k.cx = k.cy = 4.0;
  return DepthFrame::make(k, std::vector<double>(64, 1.0 + ts_us * 1e-9), ts_us, ts_us / 1000);
}

}  // namespace

// ---------------------------------------------------------------------------
// Codec

TEST(Codec, RandomPacketsRoundTrip) {
  Rng rng(2024);
  for (int i = 0; i < 10000; ++i) {
    const Packet p = random_packet(rng);
    ASSERT_EQ(decode(encode(p)), p) << "packet " << i;
  }
}

TEST(Codec, HeaderLayout) {
  const Packet p = make_packet(PacketType::kAck, 0x0102030405060708ULL, 7, {9, 9, 9});
  const auto bytes = encode(p);
  EXPECT_EQ(bytes.size(), kHeaderBytes + 3 + kCrcBytes);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MRG1");
  EXPECT_EQ(bytes[4], 6);
  EXPECT_EQ(bytes[5], 0x08);  // little-endian sequence
  // CRC32 of "123456789" is the standard check value.
  const std::string check = "123456789";
  EXPECT_EQ(crc32_of({reinterpret_cast<const std::uint8_t*>(check.data()), check.size()}), 0xCBF43926u);
}

TEST(Codec, FrameRoundTripsBitForBit) {
  const DepthFrame f = noisy_frame(64, 64, 3);
  const auto packets = frame_packets(f);
  ASSERT_EQ(packets.size(), 1u);
  const Packet back = decode(encode(packets[0]));
  EXPECT_EQ(decode_frame_body(back.payload, back.timestamp_us, back.sequence), f);
}

TEST(Codec, FragmentedFrameReassembles) {
  const DepthFrame f = noisy_frame(64, 64, 4);
  const auto packets = frame_packets(f, 1000);
  ASSERT_GT(packets.size(), 5u);
  FrameBuffer buf;
  // Deliver in reverse order; only the last fragment completes the frame.
  for (std::size_t i = packets.size(); i-- > 0;) {
    const auto bytes = encode(packets[i]);
    EXPECT_LE(bytes.size(), 1000u);
    const auto r = buf.push_fragment(decode(bytes));
    EXPECT_EQ(r.status, i == 0 ? PushStatus::kCompleted : PushStatus::kAccepted);
  }
  ASSERT_TRUE(buf.latest_complete().has_value());
  EXPECT_EQ(*buf.latest_complete(), f);
}

TEST(Codec, DistinctDecodeErrors) {
  const auto good = encode(make_packet(PacketType::kPose, 1, 2, encode_pose(RigidTransform{})));
  for (std::size_t i = kHeaderBytes; i < good.size() - kCrcBytes; i += 7) {
    auto b = good;
    b[i] ^= 0x10;
    EXPECT_EQ(decode_failure([&] { decode(b); }), DecodeFailure::kChecksumMismatch) << "byte " << i;
  }
  auto magic = good;
  magic[1] = 'X';
  EXPECT_EQ(decode_failure([&] { decode(magic); }), DecodeFailure::kBadMagic);
  auto shortened = good;
  shortened.resize(good.size() - 1);
  EXPECT_EQ(decode_failure([&] { decode(shortened); }), DecodeFailure::kTruncated);
  EXPECT_EQ(decode_failure([&] { decode(std::vector<std::uint8_t>{'M', 'R'}); }), DecodeFailure::kTruncated);
  // Unknown type with a valid checksum.
  auto unknown = good;
  unknown[4] = 9;
  const std::size_t body = unknown.size() - kCrcBytes;
  const std::uint32_t crc = crc32_of(std::span(unknown).first(body));
  for (int k = 0; k < 4; ++k) unknown[body + k] = static_cast<std::uint8_t>(crc >> (8 * k));
  EXPECT_EQ(decode_failure([&] { decode(unknown); }), DecodeFailure::kUnknownType);
}

TEST(Codec, ConstantFrameCompressesBelowTenPercent) {
  CameraIntrinsics k;
  const DepthFrame f = DepthFrame::make(k, std::vector<double>(k.pixel_count(), 1.25), 0, 0);
  const auto body = encode_frame_body(f);
  const std::size_t raw = k.pixel_count() * sizeof(float);
  EXPECT_LT(body.size(), raw / 10);
}

TEST(Codec, DepthCodecIsLossless) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> d(1 + rng.index(2000));
    const bool f32 = trial % 2 == 0;
    for (auto& v : d) {
      const double u = rng.uniform();
      v = u < 0.2 ? 0.0 : u < 0.3 ? 2.5 : rng.uniform(0.1, 8.0);
      if (f32) v = static_cast<float>(v);
    }
    ByteWriter w;
    compress_depth(d, w);
    const auto bytes = w.take();
    ByteReader r(bytes);
    EXPECT_EQ(decompress_depth(r, d.size()), d);
    EXPECT_TRUE(r.done());
  }
}

TEST(Codec, TypedPayloadsRoundTrip) {
  Rng rng(9);
  const auto t = oracle::random_transform(rng, 3.0, 2.0);
  TransformPayload tp{t, 0.0123, {{1, 0}, {2, 2000}}};
  const auto back = decode_transform_payload(encode_payload(tp));
  EXPECT_EQ(back.transform, t);
  EXPECT_EQ(back.mean_matched_distance, 0.0123);
  EXPECT_EQ(back.cues, tp.cues);
  EXPECT_EQ(decode_pose(encode_pose(t)), t);
  EXPECT_EQ(decode_cue(encode_payload(Cue{7, 1234})), (Cue{7, 1234}));
  const ControlCommand c{Command::kPause, 3, 99};
  EXPECT_EQ(decode_control(encode_payload(c)), c);
  const Ack a{AckKind::kCalibrationStatus, 1, "retry please"};
  EXPECT_EQ(decode_ack(encode_payload(a)), a);
}

TEST(Codec, MalformedPayloadsAreRejected) {
  auto bytes = encode_pose(RigidTransform{});
  bytes[0] = 0;  // rotation(0,0) = 0 breaks orthonormality
  bytes[1] = 0;
  bytes[6] = 0;
  bytes[7] = 0;
  EXPECT_EQ(decode_failure([&] { decode_pose(bytes); }), DecodeFailure::kBadPayload);
  auto cmd = encode_payload(ControlCommand{});
  cmd[0] = 9;
  EXPECT_EQ(decode_failure([&] { decode_control(cmd); }), DecodeFailure::kBadPayload);
  cmd.pop_back();
  EXPECT_EQ(decode_failure([&] { decode_control(cmd); }), DecodeFailure::kBadPayload);
  auto cue = encode_payload(Cue{1, 2});
  cue.pop_back();
  EXPECT_EQ(decode_failure([&] { decode_cue(cue); }), DecodeFailure::kTruncated);
  EXPECT_EQ(decode_failure([&] { decode_frame_body(std::vector<std::uint8_t>(10, 0), 0, 0); }),
            DecodeFailure::kBadPayload);
}

// ---------------------------------------------------------------------------
// Frame buffer

TEST(FrameBufferTest, OldFrameEvicted) {
  FrameBuffer buf(500000);
  EXPECT_TRUE(buf.push(frame_at(0)).evicted.empty());
  EXPECT_TRUE(buf.push(frame_at(200000)).evicted.empty());
  const auto r = buf.push(frame_at(600000));
  EXPECT_EQ(r.evicted, std::vector<std::uint64_t>{0});
  EXPECT_EQ(buf.timestamps(), (std::vector<std::uint64_t>{200000, 600000}));
}

TEST(FrameBufferTest, EmptyHasNoFrame) {
  FrameBuffer buf;
  EXPECT_FALSE(buf.latest_complete().has_value());
  EXPECT_EQ(buf.span_us(), 0u);
}

TEST(FrameBufferTest, IncompleteNewerFrameIsSkipped) {
  FrameBuffer buf(500000);
  DepthFrame newer = noisy_frame(64, 64, 1);
  newer.timestamp_us = 1'000'000;
  const auto parts = frame_packets(newer, 4000);
  ASSERT_GE(parts.size(), 2u);
  buf.push_fragment(parts[0]);
  DepthFrame older = noisy_frame(8, 8, 2);
  older.timestamp_us = 900'000;
  buf.push(older);
  ASSERT_TRUE(buf.latest_complete().has_value());
  EXPECT_EQ(buf.latest_complete()->timestamp_us, 900'000u);
  for (std::size_t i = 1; i < parts.size(); ++i) buf.push_fragment(parts[i]);
  EXPECT_EQ(buf.latest_complete()->timestamp_us, 1'000'000u);
}

TEST(FrameBufferTest, LateAndDuplicateFramesRejected) {
  FrameBuffer buf(500000);
  buf.push(frame_at(1'000'000));
  EXPECT_EQ(buf.push(frame_at(400'000)).status, PushStatus::kLate);
  EXPECT_EQ(buf.push(frame_at(1'000'000)).status, PushStatus::kDuplicate);
  // Out of order but inside the window is fine.
  EXPECT_EQ(buf.push(frame_at(700'000)).status, PushStatus::kCompleted);
  const auto p = frame_packets(frame_at(1'000'000))[0];
  EXPECT_EQ(buf.push_fragment(p).status, PushStatus::kDuplicate);
}

TEST(FrameBufferTest, WindowAndConservationProperties) {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::uint64_t window = 100000 + rng.index(900000);
    FrameBuffer buf(window);
    std::size_t accepted = 0, evicted = 0;
    std::uint64_t t = 0;
    for (int i = 0; i < 200; ++i) {
      t += rng.index(60000);
      // Occasionally resend something older.
      const std::uint64_t ts = rng.uniform() < 0.2 && t > 300000 ? t - rng.index(300000) : t;
      const auto r = buf.push(frame_at(ts));
      if (r.status == PushStatus::kCompleted) ++accepted;
      evicted += r.evicted.size();
      ASSERT_LE(buf.span_us(), window);
      const auto ts_list = buf.timestamps();
      ASSERT_TRUE(std::adjacent_find(ts_list.begin(), ts_list.end(), std::greater_equal<>()) == ts_list.end());
    }
    EXPECT_EQ(evicted + buf.size(), accepted);
  }
}

// ---------------------------------------------------------------------------
// Cue pacing and scripts

TEST(CuePacerTest, FiresOnScheduleAndShifts) {
  CuePacer pacer;
  pacer.start(0, {{1, 0}, {2, 2000}, {3, 4000}});
  EXPECT_EQ(pacer.poll(0).size(), 1u);
  EXPECT_TRUE(pacer.poll(1'999'999).empty());
  // Skip at 1 s: cue 2 fires now, cue 3 moves 1 s earlier.
  EXPECT_EQ(pacer.skip(1'000'000), -1'000'000);
  EXPECT_EQ(pacer.schedule(), (std::vector<std::int64_t>{1'000'000, 3'000'000}));
  EXPECT_EQ(pacer.poll(1'000'000).size(), 1u);
  pacer.pause(1'500'000);
  EXPECT_TRUE(pacer.poll(5'000'000).empty());
  EXPECT_EQ(pacer.skip(1'600'000), 0);
  EXPECT_EQ(pacer.resume(2'500'000), 1'000'000);
  EXPECT_EQ(pacer.schedule(), (std::vector<std::int64_t>{4'000'000}));
  const auto fired = pacer.poll(4'000'000);
  ASSERT_EQ(fired.size(), 1u);
  EXPECT_EQ(fired[0].cue.cue_id, 3);
  EXPECT_EQ(pacer.pending(), 0u);
}

TEST(CuePacerTest, SkipNeverDelays) {
  CuePacer pacer;
  pacer.start(0, {{1, 1000}});
  EXPECT_EQ(pacer.skip(5'000'000), 0);  // already overdue
  EXPECT_EQ(pacer.schedule(), std::vector<std::int64_t>{1'000'000});
}

TEST(Scripts, ParseCuesAndClientScript) {
  EXPECT_EQ(parse_cues("1:0,2:2000"), (std::vector<Cue>{{1, 0}, {2, 2000}}));
  EXPECT_THROW(parse_cues("1-0"), Error);
  EXPECT_THROW(parse_cues("70000:1"), Error);
  const auto s = parse_script("# header\n2.5 pause\n1.0 skip  # inline\n\n3 resume\n");
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].command, Command::kSkip);
  EXPECT_EQ(s[0].t_s, 1.0);
  EXPECT_EQ(s[2].command, Command::kResume);
  EXPECT_THROW(parse_script("1.0 jump\n"), Error);
  EXPECT_THROW(parse_script("1.0\n"), Error);
}

TEST(ClientPayload, IdentityLeavesModelUnchanged) {
  Rng rng(1);
  PointCloud m;
  for (int i = 0; i < 100; ++i) m.points.emplace_back(rng.normal(), rng.normal(), rng.normal());
  EXPECT_EQ(apply_payload(m, TransformPayload{}).points, m.points);
}

// ---------------------------------------------------------------------------
// Loopback sessions

class Session : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const ScannerModel m;
    model_ = new PointCloud(sample_model_cloud(m, 20000, 7));
    patient_ = new PointCloud(patient_model_cloud(default_scene(m), 5000, 8));
    SceneConfig s = default_scene(m);
    s.noise_sigma = 0.003;
    s.dropout_rate = 0.05;
    s.seed = 11;
    const auto r = render_depth(s, CameraIntrinsics{});
    frame_ = new DepthFrame(to_sensor_precision(r.frame));
    truth_ = new RigidTransform(r.truth.camera_to_scanner);
  }
  static void TearDownTestSuite() {
    delete model_;
    delete patient_;
    delete frame_;
    delete truth_;
  }
  static std::unique_ptr<Calibrator> calibrator() {
    return std::make_unique<Calibrator>(*model_, *patient_, CalibrationConfig{},
                                        oracle::model_ground(ScannerModel{}));
  }
  static inline PointCloud* model_ = nullptr;
  static inline PointCloud* patient_ = nullptr;
  static inline DepthFrame* frame_ = nullptr;
  static inline RigidTransform* truth_ = nullptr;
};

TEST_F(Session, OneFrameOneTriggerGivesExactlyOneOutcome) {
  for (bool with_frame : {true, false}) {
    ServerConfig cfg;
    cfg.cues = {};
    Server server(cfg, calibrator());
    std::thread th([&] { server.run(); });
    UdpSocket src;
    const Endpoint ep = server.endpoint();
    auto send = [&](const Packet& p) { ASSERT_TRUE(src.send_to(ep, encode(p))); };
    send(make_packet(PacketType::kAck, 0, steady_now_us(), encode_payload(Ack{AckKind::kHello, kSourceRole, "source"})));
    if (with_frame) {
      DepthFrame f = *frame_;
      f.timestamp_us = steady_now_us();
      for (const auto& p : frame_packets(f)) send(p);
    }
    // Wait until the frame has been ingested before triggering.
    for (int i = 0; i < 400 && with_frame && server.stats().frames_completed == 0; ++i) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    send(make_packet(PacketType::kControlCommand, 1, steady_now_us(),
                     encode_payload(ControlCommand{Command::kRequestRecalibration, 0, 0})));
    for (int i = 0; i < 2000 && server.stats().calibrations == 0; ++i) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    // Give a stray second outcome time to show up.
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    send(make_packet(PacketType::kAck, 2, steady_now_us(), encode_payload(Ack{AckKind::kGoodbye, kSourceRole, "source"})));
    th.join();
    const ServerStats s = server.stats();
    EXPECT_EQ(s.calibrations, 1u);
    EXPECT_EQ(s.transform_broadcasts + s.status_broadcasts, 1u);
    if (with_frame) {
      EXPECT_EQ(s.transform_broadcasts, 1u);
    } else {
      EXPECT_EQ(s.status_broadcasts, 1u);
    }
    EXPECT_EQ(server.log().count("broadcast"), 2u);  // the outcome and the goodbye
  }
}

TEST_F(Session, ZeroClientsStillCalibrates) {
  SimulationConfig cfg;
  cfg.clients = 0;
  cfg.source.fps = 45.0;
  cfg.source.duration_s = 1.0;
  cfg.source.trigger_times_s = {0.3};
  const auto rep = run_simulation(cfg, calibrator(), {*frame_}, *patient_);
  EXPECT_EQ(rep.server.calibrations, 1u);
  EXPECT_EQ(rep.server.accepted, 1u);
  EXPECT_EQ(rep.server.transform_broadcasts, 1u);
  bool saw = false;
  for (const auto& e : rep.session_log) {
    if (e.event == "broadcast" && e.detail["kind"] == "transform") {
      saw = true;
      EXPECT_TRUE(e.detail["recipients"].empty());
      EXPECT_TRUE(e.detail["failed"].empty());
    }
  }
  EXPECT_TRUE(saw);
}

TEST_F(Session, EndToEndWithScriptedSkip) {
  SimulationConfig cfg;
  cfg.clients = 2;
  cfg.source.fps = 45.0;
  cfg.source.duration_s = 2.0;
  cfg.source.trigger_times_s = {0.2};
  cfg.server.cues = {{1, 0}, {2, 3000}, {3, 6000}};
  cfg.client_script = parse_script("1.0 skip\n");
  const auto rep = run_simulation(cfg, calibrator(), {*frame_}, *patient_);

  EXPECT_EQ(rep.source.frames_sent, 90u);
  EXPECT_EQ(rep.server.decode_errors, 0u);
  EXPECT_GE(rep.server.frames_completed, 85u);
  EXPECT_LE(rep.server.max_buffer_span_us, 500000u);
  ASSERT_GE(rep.server.accepted, 1u);
  for (const auto& c : rep.clients) {
    EXPECT_TRUE(c.connected);
    EXPECT_EQ(c.malformed, 0u);
    EXPECT_EQ(c.payloads, rep.server.transform_broadcasts);
    ASSERT_TRUE(c.last_transform.has_value());
    EXPECT_LE(translation_distance(*c.last_transform, *truth_), 0.02);
  }

  // Each client's skip arrives stamped about one second after it connected.
  std::size_t skips = 0;
  std::int64_t first_skip_t = -1;
  for (const auto& e : rep.session_log) {
    if (e.event == "control" && e.detail["command"] == "skip") {
      ++skips;
      const double client_s = e.detail["client_time_us"].get<double>() / 1e6;
      EXPECT_NEAR(client_s, 1.0, 0.05);
      if (first_skip_t < 0) first_skip_t = e.t_us;
    }
  }
  EXPECT_EQ(skips, 2u);
  // The first skip, after cue 1, pulls cue 2 forward to now.
  std::int64_t accepted_t = -1;
  for (const auto& e : rep.session_log) {
    if (e.event == "calibration" && e.detail["status"] == "accepted" && accepted_t < 0) accepted_t = e.t_us;
  }
  ASSERT_GE(accepted_t, 0);
  ASSERT_LT(accepted_t, first_skip_t);
  for (const auto& e : rep.session_log) {
    if (e.event == "cue_shift" && e.t_us >= first_skip_t) {
      EXPECT_LT(e.detail["shift_us"].get<std::int64_t>(), 0);
      break;
    }
  }
  // Log lines are totally ordered by the session clock.
  for (std::size_t i = 1; i < rep.session_log.size(); ++i) {
    EXPECT_LE(rep.session_log[i - 1].t_us, rep.session_log[i].t_us);
  }
}
