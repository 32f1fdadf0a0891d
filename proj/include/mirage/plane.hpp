#pragma once

#include <cmath>

#include "mirage/geometry.hpp"

namespace mirage {

/// The set {p : normal · p = offset}.
struct Plane {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;

  static Plane from_point_normal(const Vec3& point, const Vec3& normal) {
    const Vec3 n = normal.normalized();
    return {n, n.dot(point)};
  }

  double signed_distance(const Vec3& p) const { return normal.dot(p) - offset; }
  double distance(const Vec3& p) const { return std::abs(signed_distance(p)); }

  bool is_valid(double tol = 1e-9) const {
    return normal.allFinite() && std::isfinite(offset) && std::abs(normal.norm() - 1.0) <= tol;
  }

  /// Same plane with the normal pointing toward `viewpoint`.
  Plane oriented_toward(const Vec3& viewpoint) const {
    return signed_distance(viewpoint) >= 0.0 ? *this : Plane{-normal, -offset};
  }
};

}  // namespace mirage
