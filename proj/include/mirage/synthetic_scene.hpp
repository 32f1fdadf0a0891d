#pragma once

// Analytic ground-truth oracle: a parametric scanner room (couch, torso
// capsule, bore shell with face plate) ray-cast into range images with known
// poses, noise and dropout.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "mirage/geometry.hpp"
#include "mirage/plane.hpp"
#include "mirage/random.hpp"

namespace mirage {

/// Scanner geometry in its local frame: bore axis along +z pointing out of
/// the bore into the room, face plate in z = 0, bore interior at z in
/// [-bore_length, 0], +y up.
struct ScannerModel {
  double bore_radius = 0.35;
  double bore_length = 1.6;
  double face_outer_radius = 0.5;
  /// Height of the couch top relative to the bore axis. The shell below it is
  /// never visible, so the model only covers the arc above.
  double couch_height = -0.2;
  RigidTransform pose;  // scanner -> world

  void validate() const {
    require(bore_radius > 0.0 && bore_radius < face_outer_radius, ErrorCode::kParameter,
            "scanner: need 0 < bore_radius < face_outer_radius");
    require(bore_length > 0.0, ErrorCode::kParameter, "scanner: bore_length must be > 0");
    require(std::abs(couch_height) < bore_radius, ErrorCode::kParameter,
            "scanner: couch must cut the bore");
    pose.validate();
  }

  /// Angular extent [lo, hi] (radians, measured from +x toward +y) of the
  /// shell arc above the couch.
  std::pair<double, double> arc_range() const {
    const double a = std::asin(std::clamp(couch_height / bore_radius, -1.0, 1.0));
    return {a, std::numbers::pi - a};
  }
};

/// Rectangular couch top lying in `plane`.
struct TableConfig {
  Plane plane{Vec3::UnitY(), -0.2};
  Vec3 center{0.0, -0.2, 0.3};
  Vec3 length_axis = Vec3::UnitZ();
  double half_length = 1.9;
  double half_width = 0.28;
};

struct Capsule {
  Vec3 a{0.0, -0.05, 0.35};
  Vec3 b{0.0, -0.05, 1.0};
  double radius = 0.15;

  double surface_distance(const Vec3& p) const {
    const Vec3 ab = b - a;
    const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
    return (p - (a + t * ab)).norm() - radius;
  }
};

struct SceneConfig {
  ScannerModel scanner;
  TableConfig table;
  Capsule torso;
  RigidTransform camera_pose;  // camera -> world; camera looks along +z, y down
  double noise_sigma = 0.0;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    scanner.validate();
    require(table.plane.is_valid(1e-9), ErrorCode::kParameter, "table plane normal must be unit");
    require(table.half_length > 0.0 && table.half_width > 0.0, ErrorCode::kParameter,
            "table extent must be positive");
    require(torso.radius > 0.0, ErrorCode::kParameter, "torso radius must be positive");
    camera_pose.validate();
    require(noise_sigma >= 0.0, ErrorCode::kParameter, "noise_sigma must be >= 0");
    require(dropout_rate >= 0.0 && dropout_rate <= 1.0, ErrorCode::kParameter,
            "dropout_rate must be in [0, 1]");
  }
};

enum class Label : std::uint8_t { kBackground = 0, kTable = 1, kTorso = 2, kBore = 3 };

struct GroundTruth {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<Label> labels;
  RigidTransform camera_to_scanner;
};

struct RenderedScene {
  DepthFrame frame;
  GroundTruth truth;
};

/// Camera pose looking from `eye` at `target`, with `roll_rad` about the
/// optical axis. World +y is up.
inline RigidTransform look_at(const Vec3& eye, const Vec3& target, double roll_rad = 0.0) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(Vec3::UnitY());
  if (x.norm() < 1e-9) x = Vec3::UnitX();
  x.normalize();
  const Vec3 y = z.cross(x);
  RigidTransform pose;
  pose.rotation.col(0) = x;
  pose.rotation.col(1) = y;
  pose.rotation.col(2) = z;
  pose.rotation = pose.rotation * Eigen::AngleAxisd(roll_rad, Vec3::UnitZ()).toRotationMatrix();
  pose.translation = eye;
  return pose;
}

/// Viewpoint of a clinician standing in front of the scanner.
struct CameraPlacement {
  double distance = 1.5;
  double azimuth_deg = 0.0;    // about world +y, 0 = straight down the bore axis
  double elevation_deg = 35.0;
  double roll_deg = 0.0;
  Vec3 target{0.0, -0.1, 0.3};

  RigidTransform pose(const ScannerModel& scanner) const {
    const double az = azimuth_deg * std::numbers::pi / 180.0;
    const double el = elevation_deg * std::numbers::pi / 180.0;
    const Vec3 dir(std::sin(az) * std::cos(el), std::sin(el), std::cos(az) * std::cos(el));
    const RigidTransform local = look_at(target + distance * dir, target, roll_deg * std::numbers::pi / 180.0);
    return compose(scanner.pose, local);
  }
};

/// Random clinician viewpoint within the working envelope used by the tests.
inline CameraPlacement random_placement(Rng& rng) {
  CameraPlacement p;
  p.distance = rng.uniform(1.3, 1.7);
  p.azimuth_deg = rng.uniform(-35.0, 35.0);
  p.elevation_deg = rng.uniform(30.0, 50.0);
  p.roll_deg = rng.uniform(-5.0, 5.0);
  p.target = Vec3(rng.uniform(-0.05, 0.05), rng.uniform(-0.15, -0.05), rng.uniform(0.2, 0.4));
  return p;
}

/// Default room: couch and torso placed relative to the scanner pose.
inline SceneConfig default_scene(const ScannerModel& scanner = {}) {
  SceneConfig s;
  s.scanner = scanner;
  const RigidTransform& w = scanner.pose;
  const double h = scanner.couch_height;
  s.table.center = w(Vec3(0.0, h, 0.3));
  s.table.length_axis = w.rotation * Vec3::UnitZ();
  s.table.plane = Plane::from_point_normal(s.table.center, w.rotation * Vec3::UnitY());
  s.torso.radius = 0.15;
  s.torso.a = w(Vec3(0.0, h + s.torso.radius, 0.35));
  s.torso.b = w(Vec3(0.0, h + s.torso.radius, 1.0));
  s.camera_pose = CameraPlacement{}.pose(scanner);
  return s;
}

namespace detail {

inline constexpr double kNoHit = std::numeric_limits<double>::infinity();

inline double intersect_table(const TableConfig& t, const Vec3& o, const Vec3& d) {
  const double denom = t.plane.normal.dot(d);
  if (std::abs(denom) < 1e-12) return kNoHit;
  const double s = (t.plane.offset - t.plane.normal.dot(o)) / denom;
  if (s <= 0.0) return kNoHit;
  const Vec3 rel = o + s * d - t.center;
  const Vec3 width_axis = t.plane.normal.cross(t.length_axis).normalized();
  if (std::abs(rel.dot(t.length_axis)) > t.half_length || std::abs(rel.dot(width_axis)) > t.half_width) {
    return kNoHit;
  }
  return s;
}

inline double intersect_capsule(const Capsule& c, const Vec3& o, const Vec3& d) {
  const Vec3 ba = c.b - c.a;
  const Vec3 oa = o - c.a;
  const double baba = ba.dot(ba);
  const double bard = ba.dot(d);
  const double baoa = ba.dot(oa);
  const double rdoa = d.dot(oa);
  const double oaoa = oa.dot(oa);
  const double r2 = c.radius * c.radius;
  const double qa = baba - bard * bard;
  const double qb = baba * rdoa - baoa * bard;
  const double qc = baba * oaoa - baoa * baoa - r2 * baba;
  double h = qb * qb - qa * qc;
  if (h >= 0.0 && qa > 1e-15) {
    const double t = (-qb - std::sqrt(h)) / qa;
    const double y = baoa + t * bard;
    if (y > 0.0 && y < baba) return t > 0.0 ? t : kNoHit;
  }
  // Hemispherical caps: test both, keep the nearest forward hit.
  double best = kNoHit;
  for (const Vec3* centre : {&c.a, &c.b}) {
    const Vec3 oc = o - *centre;
    const double b = d.dot(oc);
    const double cc = oc.dot(oc) - r2;
    h = b * b - cc;
    if (h < 0.0) continue;
    const double t = -b - std::sqrt(h);
    if (t <= 0.0) continue;
    // Only the cap half that lies outside the cylinder section counts.
    const double y = (o + t * d - c.a).dot(ba);
    if ((centre == &c.a && y <= 0.0) || (centre == &c.b && y >= baba)) best = std::min(best, t);
  }
  return best;
}

/// Visibility of the scanner in its local frame. The housing behind the face
/// plane is opaque except through the bore opening.
struct BoreHit {
  double t = kNoHit;           // nearest bore surface hit
  double occlude_after = kNoHit;  // anything beyond this distance is hidden
};

inline BoreHit intersect_bore(const ScannerModel& m, const Vec3& o, const Vec3& d) {
  BoreHit hit;
  if (!(o.z() > 0.0 && d.z() < 0.0)) return hit;
  const double t0 = -o.z() / d.z();
  const Vec3 p0 = o + t0 * d;
  const double rho0 = std::hypot(p0.x(), p0.y());
  if (rho0 >= m.bore_radius) {
    if (rho0 <= m.face_outer_radius) hit.t = t0;
    hit.occlude_after = t0;
    return hit;
  }
  // Inside the opening: the ray leaves the cylinder through its far root.
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a < 1e-15) return hit;  // parallel to the axis: exits the far end
  const double b = 2.0 * (o.x() * d.x() + o.y() * d.y());
  const double c = o.x() * o.x() + o.y() * o.y() - m.bore_radius * m.bore_radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return hit;
  const double t2 = (-b + std::sqrt(disc)) / (2.0 * a);
  if (t2 <= t0) return hit;
  const double z = o.z() + t2 * d.z();
  if (z >= -m.bore_length) {
    hit.t = t2;
    hit.occlude_after = t2;
  }
  return hit;
}

}  // namespace detail

/// Ray-casts the scene. Range noise is Gaussian along the ray; every pixel
/// draws from its own (seed, pixel) stream so the output is independent of
/// evaluation order.
inline RenderedScene render_depth(const SceneConfig& scene, const CameraIntrinsics& intrinsics,
                                  std::uint64_t timestamp_us = 0, std::uint64_t sequence = 0) {
  scene.validate();
  intrinsics.validate();
  RenderedScene out;
  out.frame.intrinsics = intrinsics;
  out.frame.timestamp_us = timestamp_us;
  out.frame.sequence = sequence;
  out.frame.depth.assign(intrinsics.pixel_count(), 0.0);
  out.truth.width = intrinsics.width;
  out.truth.height = intrinsics.height;
  out.truth.labels.assign(intrinsics.pixel_count(), Label::kBackground);
  out.truth.camera_to_scanner = compose(invert(scene.scanner.pose), scene.camera_pose);

  const RigidTransform world_to_scanner = invert(scene.scanner.pose);
  const Vec3 origin = scene.camera_pose.translation;
  const Vec3 origin_local = world_to_scanner(origin);

  for (std::uint32_t v = 0; v < intrinsics.height; ++v) {
    for (std::uint32_t u = 0; u < intrinsics.width; ++u) {
      const std::size_t idx = static_cast<std::size_t>(v) * intrinsics.width + u;
      const Vec3 dir = scene.camera_pose.rotation * intrinsics.pixel_ray(u, v);
      const Vec3 dir_local = world_to_scanner.rotation * dir;

      const detail::BoreHit bore = detail::intersect_bore(scene.scanner, origin_local, dir_local);
      double best = bore.t;
      Label label = std::isfinite(bore.t) ? Label::kBore : Label::kBackground;
      const double t_table = detail::intersect_table(scene.table, origin, dir);
      if (t_table < best && t_table < bore.occlude_after) {
        best = t_table;
        label = Label::kTable;
      }
      const double t_torso = detail::intersect_capsule(scene.torso, origin, dir);
      if (t_torso < best && t_torso < bore.occlude_after) {
        best = t_torso;
        label = Label::kTorso;
      }
      if (!std::isfinite(best)) continue;

      KeyedStream stream(scene.seed, idx);
      const double noise = scene.noise_sigma > 0.0 ? scene.noise_sigma * stream.normal() : 0.0;
      const bool dropped = scene.dropout_rate > 0.0 && stream.uniform() < scene.dropout_rate;
      out.truth.labels[idx] = label;
      if (!dropped) out.frame.depth[idx] = DepthFrame::sanitize(best + noise);
    }
  }
  return out;
}

/// Model cloud of the visible scanner surfaces in the scanner frame: the
/// face annulus and the shell arc above the couch, uniform by area.
inline PointCloud sample_model_cloud(const ScannerModel& model, std::size_t n, std::uint64_t seed) {
  model.validate();
  require(n >= 1, ErrorCode::kParameter, "sample count must be >= 1");
  Rng rng(seed);
  const auto [lo, hi] = model.arc_range();
  const double r = model.bore_radius;
  const double big_r = model.face_outer_radius;
  const double shell_area = (hi - lo) * r * model.bore_length;
  const double annulus_area = std::numbers::pi * (big_r * big_r - r * r);
  const double p_shell = shell_area / (shell_area + annulus_area);
  PointCloud out;
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.uniform() < p_shell) {
      const double theta = rng.uniform(lo, hi);
      const double z = -rng.uniform() * model.bore_length;
      out.points.emplace_back(r * std::cos(theta), r * std::sin(theta), z);
    } else {
      const double rho = std::sqrt(rng.uniform(r * r, big_r * big_r));
      const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
      out.points.emplace_back(rho * std::cos(phi), rho * std::sin(phi), 0.0);
    }
  }
  return out;
}

/// Surface samples of a capsule, uniform by area, in the frame the capsule is
/// given in.
inline PointCloud sample_capsule(const Capsule& c, std::size_t n, std::uint64_t seed) {
  require(n >= 1, ErrorCode::kParameter, "sample count must be >= 1");
  Rng rng(seed);
  const Vec3 axis = c.b - c.a;
  const double len = axis.norm();
  const Vec3 ax = axis / len;
  Vec3 e1 = ax.unitOrthogonal();
  const Vec3 e2 = ax.cross(e1);
  const double cyl_area = 2.0 * std::numbers::pi * c.radius * len;
  const double sph_area = 4.0 * std::numbers::pi * c.radius * c.radius;
  const double p_cyl = cyl_area / (cyl_area + sph_area);
  PointCloud out;
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.uniform() < p_cyl) {
      const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double s = rng.uniform() * len;
      out.points.push_back(c.a + s * ax + c.radius * (std::cos(phi) * e1 + std::sin(phi) * e2));
    } else {
      const double zc = rng.uniform(-1.0, 1.0);
      const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double rr = std::sqrt(std::max(0.0, 1.0 - zc * zc));
      const Vec3 dir = zc * ax + rr * (std::cos(phi) * e1 + std::sin(phi) * e2);
      const Vec3& centre = zc >= 0.0 ? c.b : c.a;
      out.points.push_back(centre + c.radius * dir);
    }
  }
  return out;
}

/// Patient surface model in the scanner frame (stands in for the
/// preoperative surface mesh).
inline PointCloud patient_model_cloud(const SceneConfig& scene, std::size_t n, std::uint64_t seed) {
  return apply(invert(scene.scanner.pose), sample_capsule(scene.torso, n, seed));
}

}  // namespace mirage
