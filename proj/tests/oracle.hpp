#pragma once

// Test-side helpers. Everything here is computed independently of the
// library code under test, except for the renderer that produces inputs.

#include <cmath>
#include <numbers>
#include <vector>

#include "mirage.hpp"

namespace oracle {

using mirage::Vec3;

/// Uniformly random rotation axis with angle in [0, max_angle].
inline mirage::RigidTransform random_transform(mirage::Rng& rng, double max_angle, double max_shift) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  if (axis.norm() < 1e-9) axis = Vec3::UnitX();
  const double angle = rng.uniform(0.0, max_angle);
  const Vec3 t(rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift),
               rng.uniform(-max_shift, max_shift));
  return mirage::RigidTransform::from_axis_angle(axis, angle, t);
}

/// Pinhole back-projection of a radial range, written out longhand.
inline Vec3 pixel_point(const mirage::CameraIntrinsics& k, double u, double v, double range) {
  const double x = (u - k.cx) / k.fx;
  const double y = (v - k.cy) / k.fy;
  const double n = std::sqrt(x * x + y * y + 1.0);
  return Vec3(x, y, 1.0) * (range / n);
}

struct LabeledPoint {
  Vec3 p;  // camera frame
  mirage::Label label;
};

/// Every valid pixel of a rendered frame with its ground-truth label.
inline std::vector<LabeledPoint> labeled_points(const mirage::RenderedScene& r) {
  std::vector<LabeledPoint> out;
  const auto& k = r.frame.intrinsics;
  for (std::uint32_t v = 0; v < k.height; ++v) {
    for (std::uint32_t u = 0; u < k.width; ++u) {
      const double d = r.frame.at(u, v);
      if (d <= 0.0) continue;
      out.push_back({pixel_point(k, u, v, d), r.truth.labels[r.frame.index(u, v)]});
    }
  }
  return out;
}

inline mirage::PointCloud points_with_label(const mirage::RenderedScene& r, mirage::Label label) {
  mirage::PointCloud c;
  for (const auto& lp : labeled_points(r)) {
    if (lp.label == label) c.points.push_back(lp.p);
  }
  return c;
}

/// Distance of a scanner-frame point to the bore surface it should lie on:
/// the interior shell (radius r, -length <= z <= 0) or the face annulus.
inline double bore_surface_distance(const mirage::ScannerModel& m, const Vec3& p) {
  const double rho = std::hypot(p.x(), p.y());
  double best = std::numeric_limits<double>::infinity();
  if (p.z() <= 1e-12 && p.z() >= -m.bore_length - 1e-12) best = std::abs(rho - m.bore_radius);
  if (rho >= m.bore_radius - 1e-12 && rho <= m.face_outer_radius + 1e-12) best = std::min(best, std::abs(p.z()));
  return best;
}

/// Camera looking straight down (world -y) from `eye`.
inline mirage::RigidTransform looking_down(const Vec3& eye) {
  mirage::RigidTransform t;
  t.rotation.col(0) = Vec3::UnitX();
  t.rotation.col(1) = Vec3::UnitZ();
  t.rotation.col(2) = -Vec3::UnitY();
  t.translation = eye;
  return t;
}

/// A default room seen from a random clinician viewpoint.
inline mirage::SceneConfig random_scene(mirage::Rng& rng, double sigma, double dropout, std::uint64_t seed) {
  mirage::SceneConfig s = mirage::default_scene();
  s.camera_pose = mirage::random_placement(rng).pose(s.scanner);
  s.noise_sigma = sigma;
  s.dropout_rate = dropout;
  s.seed = seed;
  return s;
}

/// Couch plane in the scanner frame, as the calibration pipeline expects.
inline mirage::Plane model_ground(const mirage::ScannerModel& m) { return mirage::Plane{Vec3::UnitY(), m.couch_height}; }

}  // namespace oracle
