#pragma once

// Surface normals and the local shape descriptor used to propose
// correspondences for global registration.

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mirage/geometry.hpp"
#include "mirage/kdtree.hpp"
#include "mirage/plane.hpp"

namespace mirage {

/// PCA normal over the k nearest neighbours of every point. Normals are
/// unit length; when `viewpoint` is given they are flipped to face it,
/// otherwise the sign is arbitrary.
inline std::vector<Vec3> estimate_normals(const PointCloud& cloud, const KdTree& tree,
                                          std::size_t k = 16,
                                          const std::optional<Vec3>& viewpoint = std::nullopt) {
  std::vector<Vec3> normals(cloud.size(), Vec3::UnitZ());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto nn = tree.knn(cloud[i], k);
    if (nn.size() < 3) continue;
    Vec3 mean = Vec3::Zero();
    for (const auto& n : nn) mean += tree.point(n.index);
    mean /= static_cast<double>(nn.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& n : nn) {
      const Vec3 d = tree.point(n.index) - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    Vec3 normal = es.eigenvectors().col(0);
    if (viewpoint && normal.dot(*viewpoint - cloud[i]) < 0.0) normal = -normal;
    normals[i] = normal.normalized();
  }
  return normals;
}

inline std::vector<Vec3> estimate_normals(const PointCloud& cloud, std::size_t k = 16,
                                          const std::optional<Vec3>& viewpoint = std::nullopt) {
  return estimate_normals(cloud, KdTree(cloud), k, viewpoint);
}

/// A reference plane known in a cloud's own frame (the couch top). When both
/// clouds of a registration carry one, descriptors gain the height above it,
/// which separates points that are otherwise alike under rotation about a
/// symmetry axis.
struct FrameReference {
  Plane ground;  // normal points up
};

inline constexpr std::size_t kDistanceBins = 4;
inline constexpr std::size_t kOffsetBins = 5;
inline constexpr std::size_t kAngleBins = 5;
inline constexpr std::size_t kContextDims = 2;
inline constexpr std::size_t kDescriptorDims = kDistanceBins + kOffsetBins + kAngleBins + kContextDims;

using Descriptor = std::array<double, kDescriptorDims>;

struct DescriptorParams {
  double radius = 0.12;
  /// Height differences are divided by this before entering the descriptor.
  double height_scale = 0.25;
};

/// Histogram descriptor around the selected points of the tree, expressed
/// relative to their normals: neighbour distance, |n · d| of the offset
/// direction and the angle between the normals, each normalised to a
/// distribution. The last two entries carry height above the reference plane
/// and |n · up| (zero without a reference). `normals` holds one normal per
/// tree point.
inline std::vector<Descriptor> compute_descriptors(const KdTree& tree, const std::vector<Vec3>& normals,
                                                   std::span<const std::size_t> at,
                                                   const DescriptorParams& params,
                                                   const std::optional<FrameReference>& ref = std::nullopt) {
  static constexpr std::array<double, kOffsetBins + 1> kOffsetEdges{0.0, 0.05, 0.15, 0.3, 0.6, 1.0001};
  static constexpr std::array<double, kAngleBins + 1> kAngleEdgesDeg{0.0, 5.0, 15.0, 30.0, 60.0, 90.0001};
  auto bin_of = [](double x, const auto& edges) {
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
      if (x < edges[b + 1]) return b;
    }
    return edges.size() - 2;
  };

  std::vector<Descriptor> out(at.size());
  for (std::size_t q = 0; q < at.size(); ++q) {
    Descriptor d{};
    const Vec3& p = tree.point(at[q]);
    const Vec3& n = normals[at[q]];
    const auto neighbours = tree.radius(p, params.radius);
    std::size_t count = 0;
    for (std::size_t j : neighbours) {
      const Vec3 off = tree.point(j) - p;
      const double dist = off.norm();
      if (dist <= 1e-12) continue;
      ++count;
      const std::size_t db = std::min<std::size_t>(kDistanceBins - 1,
                                                   static_cast<std::size_t>(dist / params.radius * kDistanceBins));
      d[db] += 1.0;
      d[kDistanceBins + bin_of(std::abs(n.dot(off)) / dist, kOffsetEdges)] += 1.0;
      const double ang = std::acos(std::min(1.0, std::abs(n.dot(normals[j])))) * 180.0 / std::numbers::pi;
      d[kDistanceBins + kOffsetBins + bin_of(ang, kAngleEdgesDeg)] += 1.0;
    }
    if (count > 0) {
      for (std::size_t b = 0; b < kDistanceBins + kOffsetBins + kAngleBins; ++b) {
        d[b] /= static_cast<double>(count);
      }
    }
    if (ref) {
      d[kDescriptorDims - 2] = ref->ground.signed_distance(p) / params.height_scale;
      d[kDescriptorDims - 1] = std::abs(n.dot(ref->ground.normal));
    }
    out[q] = d;
  }
  return out;
}

/// Descriptors at every point of the tree.
inline std::vector<Descriptor> compute_descriptors(const KdTree& tree, const std::vector<Vec3>& normals,
                                                   const DescriptorParams& params,
                                                   const std::optional<FrameReference>& ref = std::nullopt) {
  std::vector<std::size_t> all(tree.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return compute_descriptors(tree, normals, all, params, ref);
}

inline double descriptor_distance_sq(const Descriptor& a, const Descriptor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < kDescriptorDims; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace mirage
