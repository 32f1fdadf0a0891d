#include <gtest/gtest.h>

#include <functional>

#include "oracle.hpp"

using namespace mirage;

namespace {

void expect_error(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
    ADD_FAILURE() << "no error thrown";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// Noiseless bore surface seen by the camera, camera frame, 1 cm voxels.
struct BoreView {
  SceneConfig scene;
  RenderedScene render;
  PointCloud bore;
};

BoreView bore_view(std::uint64_t seed) {
  Rng rng(seed);
  BoreView v;
  v.scene = oracle::random_scene(rng, 0.0, 0.0, seed);
  v.render = render_depth(v.scene, CameraIntrinsics{});
  v.bore = voxel_downsample(oracle::points_with_label(v.render, Label::kBore), 0.01);
  return v;
}

// Whole noiseless scene, centred at the origin, 2 cm voxels.
PointCloud scene_cloud() {
  const auto r = render_depth(default_scene(), CameraIntrinsics{});
  PointCloud c = voxel_downsample(backproject(r.frame), 0.02);
  const Vec3 mid = c.centroid();
  for (auto& p : c.points) p -= mid;
  return c;
}

RegistrationConfig exact_icp() {
  RegistrationConfig c;
  c.max_correspondence_dist_m = 1.0;
  c.convergence_eps_m = 1e-14;
  c.max_icp_iterations = 2000;
  return c;
}

}  // namespace

TEST(GlobalRegister, SelfAlignmentIsIdentity) {
  const PointCloud c = scene_cloud();
  ASSERT_GE(c.size(), 100u);
  const auto g = global_register(c, c, RegistrationConfig{});
  EXPECT_LE(rotation_angle_between(g.transform, RigidTransform{}), 1e-6);
  EXPECT_LE(translation_distance(g.transform, RigidTransform{}), 1e-6);
}

TEST(GlobalRegister, RecoversKnownTransformOfBoreCloud) {
  Rng rng(44);
  for (int trial = 0; trial < 5; ++trial) {
    const auto v = bore_view(200 + trial);
    const auto t = oracle::random_transform(rng, std::numbers::pi, 0.5);
    const auto g = global_register(v.bore, apply(t, v.bore), RegistrationConfig{});
    EXPECT_LE(rotation_angle_between(g.transform, t), 1.0 * std::numbers::pi / 180.0) << "trial " << trial;
    EXPECT_LE(translation_distance(g.transform, t), 0.005) << "trial " << trial;
  }
}

TEST(GlobalRegister, TooFewPointsFails) {
  PointCloud two;
  two.points = {Vec3::Zero(), Vec3::UnitX()};
  expect_error(ErrorCode::kGlobalRegistrationFailed, [&] { global_register(two, two, RegistrationConfig{}); });
}

TEST(PruneCorrespondences, RemovesMostLabelledOutliers) {
  const auto v = bore_view(7);
  const PointCloud& target = v.bore;
  Rng rng(71);
  const auto t = oracle::random_transform(rng, std::numbers::pi, 0.3);
  // Half the source are moved target points with their true partner; the
  // other half are uniform points in the bounding box paired at random.
  PointCloud source;
  std::vector<IndexPair> pairs;
  std::vector<bool> truthful;
  Vec3 lo = target[0], hi = target[0];
  for (const auto& p : target.points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  for (std::size_t i = 0; i < target.size(); i += 8) {
    pairs.push_back({source.size(), i});
    source.points.push_back(t(target[i]));
    truthful.push_back(true);
    const Vec3 u(rng.uniform(lo.x(), hi.x()), rng.uniform(lo.y(), hi.y()), rng.uniform(lo.z(), hi.z()));
    pairs.push_back({source.size(), rng.index(target.size())});
    source.points.push_back(t(u));
    truthful.push_back(false);
  }
  const auto kept = prune_correspondences(source, target, pairs, 0.02);
  std::size_t outliers = 0, kept_outliers = 0, kept_inliers = 0;
  for (bool b : truthful) outliers += !b;
  for (const auto& k : kept) {
    const auto pos = static_cast<std::size_t>(std::find(pairs.begin(), pairs.end(), k) - pairs.begin());
    ASSERT_LT(pos, pairs.size());
    (truthful[pos] ? kept_inliers : kept_outliers) += 1;
  }
  EXPECT_GE(1.0 - static_cast<double>(kept_outliers) / outliers, 0.9);
  EXPECT_GE(kept_inliers, outliers / 2);
}

TEST(IcpRefine, IdentityConvergesImmediately) {
  const PointCloud c = scene_cloud();
  const auto r = icp_refine(c, c, RigidTransform{}, RegistrationConfig{});
  EXPECT_LE(r.icp_iterations, 2);
  EXPECT_EQ(r.mean_matched_distance, 0.0);
  EXPECT_EQ(r.matched_fraction, 1.0);
  EXPECT_LE(rotation_angle_between(r.transform, RigidTransform{}), 1e-12);
}

TEST(IcpRefine, RecoversZRotationAndShift) {
  const PointCloud source = scene_cloud();
  const auto t = RigidTransform::from_axis_angle(Vec3::UnitZ(), 10.0 * std::numbers::pi / 180.0, Vec3(0.05, 0, 0));
  RegistrationConfig cfg = exact_icp();
  const auto r = icp_refine(source, apply(t, source), RigidTransform{}, cfg);
  EXPECT_LE(r.mean_matched_distance, 1e-6);
  EXPECT_LE(translation_distance(r.transform, t), 1e-6);
}

TEST(IcpRefine, FlippedInitNeverAccepted) {
  const ScannerModel m;
  const auto model = sample_model_cloud(m, 20000, 3);
  const KdTree tree(model);
  RegistrationConfig cfg;
  cfg.max_correspondence_dist_m = 0.01;
  // Upside down and end for end, about the face centre and the bore middle.
  // A half turn about the bore axis itself maps the visible surface onto
  // itself and is left to the couch prior.
  for (const Vec3& axis : {Vec3(Vec3::UnitX()), Vec3(Vec3::UnitY())}) {
    for (double pivot_z : {0.0, -0.8}) {
      const Vec3 pivot(0.0, 0.0, pivot_z);
      RigidTransform flip = RigidTransform::from_axis_angle(axis, std::numbers::pi, Vec3::Zero());
      flip.translation = pivot - flip.rotation * pivot;
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto v = bore_view(seed);
        const RigidTransform init = compose(flip, v.render.truth.camera_to_scanner);
        try {
          const auto r = icp_refine(v.bore, tree, init, cfg);
          EXPECT_EQ(validate(r, cfg), CalibrationStatus::kRetryRequested) << "seed " << seed;
          ASSERT_TRUE(r.mean_nearest_distance.has_value());
          EXPECT_GT(*r.mean_nearest_distance, cfg.validation_threshold_m);
        } catch (const IcpDivergedError& e) {
          EXPECT_EQ(e.code(), ErrorCode::kIcpDiverged);
        }
      }
    }
  }
}

TEST(IcpRefine, NoMatchesDiverges) {
  PointCloud a, b;
  a.points = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  b.points = {Vec3(10, 0, 0), Vec3(11, 0, 0), Vec3(10, 1, 0)};
  expect_error(ErrorCode::kIcpDiverged, [&] { icp_refine(a, b, RigidTransform{}, RegistrationConfig{}); });
  expect_error(ErrorCode::kParameter, [&] { icp_refine(a, PointCloud{}, RigidTransform{}, RegistrationConfig{}); });
}

TEST(IcpRefine, MeanDistanceNonIncreasing) {
  const PointCloud source = scene_cloud();
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto t = oracle::random_transform(rng, 0.3, 0.1);
    RegistrationConfig cfg;
    cfg.max_correspondence_dist_m = 0.3;
    const auto r = icp_refine(source, apply(t, source), RigidTransform{}, cfg);
    ASSERT_FALSE(r.history.empty());
    for (std::size_t i = 1; i < r.history.size(); ++i) {
      EXPECT_LE(r.history[i], r.history[i - 1] + 1e-12) << "trial " << trial << " iteration " << i;
    }
  }
}

TEST(IcpRefine, ExactFromNearbyInits) {
  const PointCloud source = scene_cloud();
  Rng rng(88);
  for (int trial = 0; trial < 10; ++trial) {
    const auto truth = oracle::random_transform(rng, std::numbers::pi, 1.0);
    const PointCloud target = apply(truth, source);
    const auto offset = oracle::random_transform(rng, 20.0 * std::numbers::pi / 180.0, 0.1 / std::sqrt(3.0));
    const auto r = icp_refine(source, target, compose(offset, truth), exact_icp());
    EXPECT_LE(translation_distance(r.transform, truth), 1e-6) << "trial " << trial;
  }
}

TEST(IcpRefine, ConjugationByCommonMotion) {
  const PointCloud source = scene_cloud();
  Rng rng(5);
  const auto t = RigidTransform::from_axis_angle(Vec3::UnitZ(), 10.0 * std::numbers::pi / 180.0, Vec3(0.05, 0, 0));
  const PointCloud target = apply(t, source);
  const auto r = icp_refine(source, target, RigidTransform{}, exact_icp());
  for (int trial = 0; trial < 5; ++trial) {
    const auto g = oracle::random_transform(rng, std::numbers::pi, 1.0);
    const auto rg = icp_refine(apply(g, source), apply(g, target), RigidTransform{}, exact_icp());
    const auto expect = compose(compose(g, r.transform), invert(g));
    EXPECT_LE(rotation_angle_between(rg.transform, expect), 1e-6);
    EXPECT_LE(translation_distance(rg.transform, expect), 1e-6);
  }
}

TEST(Validate, GateExamples) {
  RegistrationResult r;
  r.matched_fraction = 0.9;
  r.mean_matched_distance = 0.013;
  EXPECT_EQ(validate(r, 0.02), CalibrationStatus::kAccepted);
  r.mean_matched_distance = 0.025;
  EXPECT_EQ(validate(r, 0.02), CalibrationStatus::kRetryRequested);
  r.mean_matched_distance = 0.005;
  r.matched_fraction = 0.1;
  EXPECT_EQ(validate(r, 0.02), CalibrationStatus::kRetryRequested);
  r.matched_fraction = 0.3;
  r.mean_matched_distance = 0.02;
  EXPECT_EQ(validate(r, 0.02), CalibrationStatus::kAccepted);
  r.mean_matched_distance = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(validate(r, 0.02), CalibrationStatus::kRetryRequested);
  // Close matches but most points far from the target.
  r.mean_matched_distance = 0.005;
  r.matched_fraction = 0.6;
  r.mean_nearest_distance = 0.08;
  EXPECT_EQ(validate(r, 0.02), CalibrationStatus::kRetryRequested);
  r.mean_nearest_distance = 0.015;
  EXPECT_EQ(validate(r, 0.02), CalibrationStatus::kAccepted);
}

TEST(Validate, LowOverlapAlignmentIsRejected) {
  // A small patch matched perfectly while most of the source hangs in the air.
  const auto v = bore_view(3);
  const auto model = sample_model_cloud(ScannerModel{}, 20000, 5);
  PointCloud source = v.bore;
  const std::size_t n = source.size();
  for (std::size_t i = 0; i < 9 * n; ++i) source.points.push_back(Vec3(5.0 + 0.01 * i, 5.0, 5.0));
  const auto r = match_stats(source, KdTree(model), v.render.truth.camera_to_scanner, 0.05);
  EXPECT_LE(r.mean_matched_distance, 0.01);
  EXPECT_LT(r.matched_fraction, 0.3);
  EXPECT_EQ(validate(r, 0.02), CalibrationStatus::kRetryRequested);
}

class CalibrationTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const ScannerModel m;
    model_ = new PointCloud(sample_model_cloud(m, 20000, 7));
    patient_ = new PointCloud(patient_model_cloud(default_scene(m), 5000, 8));
  }
  static void TearDownTestSuite() {
    delete model_;
    delete patient_;
  }
  static inline PointCloud* model_ = nullptr;
  static inline PointCloud* patient_ = nullptr;
};

TEST_F(CalibrationTest, NoisyOracleSceneAccepted) {
  Rng rng(606);
  const CalibrationConfig cfg;
  for (int trial = 0; trial < 3; ++trial) {
    const auto r = render_depth(oracle::random_scene(rng, 0.003, 0.05, 300 + trial), CameraIntrinsics{});
    const std::vector<DepthFrame> frames{r.frame};
    const auto out = calibrate(frames, *model_, *patient_, cfg, oracle::model_ground(ScannerModel{}));
    ASSERT_EQ(out.status, CalibrationStatus::kAccepted) << out.cause;
    EXPECT_EQ(out.attempts, 1u);
    EXPECT_LE(translation_distance(out.result.transform, r.truth.camera_to_scanner), 0.02);
    ASSERT_TRUE(out.patient_residual.has_value());
    EXPECT_LE(*out.patient_residual, 0.02);
    EXPECT_GT(out.result.elapsed_s, 0.0);
  }
}

TEST_F(CalibrationTest, AcceptedTransformRechecksIndependently) {
  Rng rng(808);
  const CalibrationConfig cfg;
  const KdTree model_tree(*model_);
  for (int trial = 0; trial < 3; ++trial) {
    const auto r = render_depth(oracle::random_scene(rng, 0.003, 0.05, 400 + trial), CameraIntrinsics{});
    const std::vector<DepthFrame> frames{r.frame};
    const auto out = calibrate(frames, *model_, *patient_, cfg, oracle::model_ground(ScannerModel{}));
    ASSERT_EQ(out.status, CalibrationStatus::kAccepted) << out.cause;
    // Recompute the live bore cloud outside the solver.
    const auto seg = segment_scene(preprocess_frame(r.frame, cfg.preprocess), cfg.segmentation);
    double sum = 0.0;
    for (const auto& p : seg.bore.points) {
      const Vec3 q = out.result.transform(p);
      double best = std::numeric_limits<double>::infinity();
      for (const auto& m : model_->points) best = std::min(best, (m - q).squaredNorm());
      sum += std::sqrt(best);
    }
    EXPECT_LE(sum / seg.bore.size(), cfg.registration.validation_threshold_m);
  }
}

TEST_F(CalibrationTest, EmptyFramesAreAParameterError) {
  const std::vector<DepthFrame> none;
  expect_error(ErrorCode::kParameter, [&] { calibrate(none, *model_, *patient_, CalibrationConfig{}); });
  Calibrator c(*model_, *patient_, CalibrationConfig{});
  expect_error(ErrorCode::kParameter, [&] { c.attempt(none); });
  expect_error(ErrorCode::kParameter, [&] { Calibrator(PointCloud{}, *patient_, CalibrationConfig{}); });
}

TEST_F(CalibrationTest, UnsegmentableSceneRetriesWithCause) {
  SceneConfig s = default_scene();
  CameraPlacement p;
  p.target = Vec3(0.0, -0.2, 1.6);
  p.elevation_deg = 89.0;
  p.distance = 0.5;
  s.camera_pose = p.pose(s.scanner);
  const auto r = render_depth(s, CameraIntrinsics{});
  Calibrator cal(*model_, *patient_, CalibrationConfig{}, oracle::model_ground(ScannerModel{}));
  std::size_t scans = 0;
  const auto out = calibrate(cal, [&](std::size_t) {
    ++scans;
    return std::vector<DepthFrame>{r.frame};
  });
  EXPECT_EQ(out.status, CalibrationStatus::kRetryRequested);
  EXPECT_EQ(out.attempts, 3u);
  EXPECT_EQ(scans, 3u);
  EXPECT_FALSE(out.cause.empty());
}

TEST_F(CalibrationTest, RetryLoopStopsAtFirstAcceptance) {
  Rng rng(1);
  const auto good = render_depth(oracle::random_scene(rng, 0.003, 0.05, 77), CameraIntrinsics{});
  SceneConfig blank = default_scene();
  blank.dropout_rate = 1.0;
  const auto empty = render_depth(blank, CameraIntrinsics{});
  Calibrator cal(*model_, *patient_, CalibrationConfig{}, oracle::model_ground(ScannerModel{}));
  const auto out = calibrate(cal, [&](std::size_t attempt) {
    return std::vector<DepthFrame>{attempt == 1 ? empty.frame : good.frame};
  });
  EXPECT_EQ(out.status, CalibrationStatus::kAccepted) << out.cause;
  EXPECT_EQ(out.attempts, 2u);
  EXPECT_EQ(cal.attempts(), 2u);
}

TEST_F(CalibrationTest, BitIdenticalOnRepeat) {
  Rng rng(9);
  const auto r = render_depth(oracle::random_scene(rng, 0.003, 0.05, 5), CameraIntrinsics{});
  const std::vector<DepthFrame> frames{r.frame};
  const auto a = calibrate(frames, *model_, *patient_, CalibrationConfig{}, oracle::model_ground(ScannerModel{}));
  const auto b = calibrate(frames, *model_, *patient_, CalibrationConfig{}, oracle::model_ground(ScannerModel{}));
  EXPECT_EQ(a.status, b.status);
  EXPECT_EQ(a.result.transform, b.result.transform);
  EXPECT_EQ(a.result.mean_matched_distance, b.result.mean_matched_distance);
  EXPECT_EQ(a.result.matched_fraction, b.result.matched_fraction);
  EXPECT_EQ(a.result.icp_iterations, b.result.icp_iterations);
  EXPECT_EQ(a.result.history, b.result.history);
}
