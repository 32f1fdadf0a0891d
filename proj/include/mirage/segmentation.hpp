#pragma once

// Couch removal and patient / bore extraction from a scene cloud.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <unordered_map>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mirage/features.hpp"
#include "mirage/geometry.hpp"
#include "mirage/kdtree.hpp"
#include "mirage/plane.hpp"
#include "mirage/random.hpp"

namespace mirage {

struct PlaneFit {
  Plane plane;
  std::vector<std::size_t> inliers;  // ascending
};

namespace detail {

/// Flips the normal so its largest-magnitude component is positive.
inline Plane canonical(Plane p) {
  Eigen::Index axis = 0;
  p.normal.cwiseAbs().maxCoeff(&axis);
  if (p.normal[axis] < 0.0) return {-p.normal, -p.offset};
  return p;
}

}  // namespace detail

/// Total least-squares plane through the selected points.
inline Plane fit_plane_least_squares(const PointCloud& cloud, std::span<const std::size_t> indices) {
  require(indices.size() >= 3, ErrorCode::kDegenerateInput, "plane fit needs >= 3 points");
  Vec3 mean = Vec3::Zero();
  for (std::size_t i : indices) mean += cloud[i];
  mean /= static_cast<double>(indices.size());
  Mat3 cov = Mat3::Zero();
  for (std::size_t i : indices) {
    const Vec3 d = cloud[i] - mean;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  return detail::canonical(Plane::from_point_normal(mean, es.eigenvectors().col(0)));
}

inline std::vector<std::size_t> plane_inlier_indices(const PointCloud& cloud, const Plane& plane,
                                                     double dist_threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (plane.distance(cloud[i]) <= dist_threshold) out.push_back(i);
  }
  return out;
}

inline std::vector<std::size_t> plane_outlier_indices(const PointCloud& cloud, const Plane& plane,
                                                      double dist_threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (plane.distance(cloud[i]) > dist_threshold) out.push_back(i);
  }
  return out;
}

/// RANSAC over random point triplets. The winning hypothesis (most inliers,
/// then lowest mean inlier distance) is refit by least squares and its inlier
/// set recomputed against the refit plane.
inline PlaneFit ransac_plane(const PointCloud& cloud, double dist_threshold, int max_iterations,
                             std::uint64_t seed) {
  require(cloud.size() >= 3, ErrorCode::kDegenerateInput, "RANSAC plane needs >= 3 points");
  require(dist_threshold > 0.0, ErrorCode::kParameter, "distance threshold must be > 0");
  require(max_iterations >= 1, ErrorCode::kParameter, "max_iterations must be >= 1");

  Rng rng(seed);
  const std::size_t n = cloud.size();
  std::optional<Plane> best;
  std::size_t best_count = 0;
  double best_mean = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iterations; ++it) {
    const std::size_t i = rng.index(n);
    std::size_t j = rng.index(n);
    std::size_t k = rng.index(n);
    if (i == j || j == k || i == k) continue;
    const Vec3 normal = (cloud[j] - cloud[i]).cross(cloud[k] - cloud[i]);
    if (normal.norm() < 1e-12) continue;
    const Plane hyp = Plane::from_point_normal(cloud[i], normal);
    std::size_t count = 0;
    double sum = 0.0;
    for (const auto& p : cloud.points) {
      const double d = hyp.distance(p);
      if (d <= dist_threshold) {
        ++count;
        sum += d;
      }
    }
    const double mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
    if (count > best_count || (count == best_count && count > 0 && mean < best_mean)) {
      best = hyp;
      best_count = count;
      best_mean = mean;
    }
  }
  require(best.has_value() && best_count >= 3, ErrorCode::kNoPlaneFound,
          "no plane hypothesis reached 3 inliers");

  const auto seed_inliers = plane_inlier_indices(cloud, *best, dist_threshold);
  PlaneFit fit;
  fit.plane = fit_plane_least_squares(cloud, seed_inliers);
  fit.inliers = plane_inlier_indices(cloud, fit.plane, dist_threshold);
  require(fit.inliers.size() >= 3, ErrorCode::kNoPlaneFound, "refit plane lost its inliers");
  return fit;
}

/// Re-fits `plane` to the subset of `indices` lying within a gate of
/// 2.5 robust sigmas (never below `min_gate`), shrinking the gate until the
/// subset stops changing. Removes the bias from other surfaces that touch
/// the plane and fall inside a loose RANSAC threshold.
inline Plane refine_plane(const PointCloud& cloud, std::span<const std::size_t> indices, Plane plane,
                          double min_gate = 1e-4, int max_rounds = 10) {
  std::vector<std::size_t> kept(indices.begin(), indices.end());
  for (int round = 0; round < max_rounds && kept.size() >= 3; ++round) {
    std::vector<double> d;
    d.reserve(indices.size());
    for (std::size_t i : indices) d.push_back(plane.distance(cloud[i]));
    std::vector<double> sorted = d;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double gate = std::max(2.5 * 1.4826 * sorted[sorted.size() / 2], min_gate);
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k < indices.size(); ++k) {
      if (d[k] <= gate) next.push_back(indices[k]);
    }
    if (next.size() < 3) break;
    plane = fit_plane_least_squares(cloud, next);
    if (next == kept) break;
    kept = std::move(next);
  }
  return plane;
}

/// Points farther than dist_threshold from the plane, in input order.
inline PointCloud remove_plane(const PointCloud& cloud, const Plane& plane, double dist_threshold) {
  return cloud.select(plane_outlier_indices(cloud, plane, dist_threshold));
}

/// Single-linkage components over the "within link_radius" graph, found by
/// bucketing points into a grid of link_radius cells. Components smaller
/// than min_points are dropped; the rest are sorted by size (descending),
/// then centroid x (ascending).
inline std::vector<std::vector<std::size_t>> euclidean_cluster_indices(const PointCloud& cloud,
                                                                       double link_radius,
                                                                       std::size_t min_points) {
  require(link_radius > 0.0, ErrorCode::kParameter, "link radius must be > 0");
  const std::size_t n = cloud.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  auto unite = [&](std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent[a] = b;
  };

  struct CellHash {
    std::size_t operator()(const std::array<std::int64_t, 3>& k) const {
      return static_cast<std::size_t>(static_cast<std::uint64_t>(k[0]) * 73856093ULL ^
                                      static_cast<std::uint64_t>(k[1]) * 19349663ULL ^
                                      static_cast<std::uint64_t>(k[2]) * 83492791ULL);
    }
  };
  auto cell_of = [&](const Vec3& p) {
    return std::array<std::int64_t, 3>{static_cast<std::int64_t>(std::floor(p.x() / link_radius)),
                                       static_cast<std::int64_t>(std::floor(p.y() / link_radius)),
                                       static_cast<std::int64_t>(std::floor(p.z() / link_radius))};
  };
  std::unordered_map<std::array<std::int64_t, 3>, std::vector<std::size_t>, CellHash> grid;
  grid.reserve(n);
  for (std::size_t i = 0; i < n; ++i) grid[cell_of(cloud[i])].push_back(i);

  const double r2 = link_radius * link_radius;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = cell_of(cloud[i]);
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          const auto it = grid.find({c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == grid.end()) continue;
          for (std::size_t j : it->second) {
            if (j > i && (cloud[i] - cloud[j]).squaredNorm() <= r2) unite(i, j);
          }
        }
      }
    }
  }

  std::unordered_map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[find(i)].push_back(i);
  std::vector<std::vector<std::size_t>> clusters;
  for (auto& [root, members] : groups) {
    if (members.size() >= min_points) clusters.push_back(std::move(members));
  }
  std::vector<double> cx(clusters.size());
  for (std::size_t c = 0; c < clusters.size(); ++c) cx[c] = cloud.select(clusters[c]).centroid().x();
  std::vector<std::size_t> order(clusters.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (clusters[a].size() != clusters[b].size()) return clusters[a].size() > clusters[b].size();
    if (cx[a] != cx[b]) return cx[a] < cx[b];
    return clusters[a].front() < clusters[b].front();
  });
  std::vector<std::vector<std::size_t>> sorted;
  sorted.reserve(clusters.size());
  for (std::size_t i : order) sorted.push_back(std::move(clusters[i]));
  return sorted;
}

inline std::vector<PointCloud> euclidean_clusters(const PointCloud& cloud, double link_radius,
                                                  std::size_t min_points) {
  std::vector<PointCloud> out;
  for (const auto& idx : euclidean_cluster_indices(cloud, link_radius, min_points)) {
    out.push_back(cloud.select(idx));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bore labelling

/// Known-radius cylinder with a face plane across its opening.
struct BoreFit {
  Vec3 axis_point = Vec3::Zero();
  Vec3 axis_dir = Vec3::UnitZ();
  std::optional<double> face_offset;  // axial coordinate of the face plane
  double median_residual = std::numeric_limits<double>::infinity();
  std::size_t shell_inliers = 0;
};

struct BoreFitParams {
  double radius = 0.35;
  double tolerance = 0.01;
  int iterations = 300;
  std::size_t max_scored_points = 2000;
  std::uint64_t seed = 0;
};

/// Residual of p against the cylinder-plus-face surface.
inline double bore_residual(const BoreFit& fit, double radius, const Vec3& p) {
  const Vec3 rel = p - fit.axis_point;
  const double s = rel.dot(fit.axis_dir);
  const double rho = (rel - s * fit.axis_dir).norm();
  double r = std::abs(rho - radius);
  if (fit.face_offset) r = std::min(r, std::abs(s - *fit.face_offset));
  return r;
}

/// Fits the bore cylinder (known radius) to a cluster. Axis hypotheses come
/// from pairs of surface normals: the axis is parallel to n_i x n_j and passes
/// through p_i ± r n_i. The face plane sits at the median axial coordinate of
/// the points lying outside the shell.
inline BoreFit fit_bore_cylinder(const PointCloud& cluster, const BoreFitParams& params) {
  BoreFit best;
  if (cluster.size() < 6) return best;
  const KdTree tree(cluster);
  const auto normals = estimate_normals(cluster, tree, 12);
  Rng rng(params.seed);

  std::vector<std::size_t> scored(cluster.size());
  std::iota(scored.begin(), scored.end(), 0);
  if (scored.size() > params.max_scored_points) {
    const double stride = static_cast<double>(scored.size()) / static_cast<double>(params.max_scored_points);
    std::vector<std::size_t> sub;
    for (std::size_t k = 0; k < params.max_scored_points; ++k) {
      sub.push_back(static_cast<std::size_t>(static_cast<double>(k) * stride));
    }
    scored = std::move(sub);
  }

  const double r = params.radius;
  const double tol = params.tolerance;
  std::size_t best_count = 0;
  bool found = false;
  for (int it = 0; it < params.iterations; ++it) {
    const std::size_t i = rng.index(cluster.size());
    const std::size_t j = rng.index(cluster.size());
    if (i == j) continue;
    Vec3 axis = normals[i].cross(normals[j]);
    if (axis.norm() < std::sin(10.0 * std::numbers::pi / 180.0)) continue;
    axis.normalize();
    double best_gap = std::numeric_limits<double>::infinity();
    Vec3 centre = Vec3::Zero();
    for (double si : {1.0, -1.0}) {
      const Vec3 ci = cluster[i] + si * r * normals[i];
      for (double sj : {1.0, -1.0}) {
        const Vec3 cj = cluster[j] + sj * r * normals[j];
        const Vec3 rel = cj - ci;
        const double gap = (rel - rel.dot(axis) * axis).norm();
        if (gap < best_gap) {
          best_gap = gap;
          centre = ci;
        }
      }
    }
    if (best_gap > 2.0 * tol) continue;
    std::size_t count = 0;
    for (std::size_t k : scored) {
      const Vec3 rel = cluster[k] - centre;
      const double rho = (rel - rel.dot(axis) * axis).norm();
      if (std::abs(rho - r) <= tol) ++count;
    }
    if (count > best_count) {
      best_count = count;
      best.axis_point = centre;
      best.axis_dir = axis;
      found = true;
    }
  }
  if (!found) return best;

  std::vector<double> outside_axial;
  std::size_t shell = 0;
  for (const auto& p : cluster.points) {
    const Vec3 rel = p - best.axis_point;
    const double s = rel.dot(best.axis_dir);
    const double rho = (rel - s * best.axis_dir).norm();
    if (std::abs(rho - r) <= tol) ++shell;
    if (rho > r + tol) outside_axial.push_back(s);
  }
  best.shell_inliers = shell;
  if (!outside_axial.empty()) {
    auto mid = outside_axial.begin() + static_cast<long>(outside_axial.size() / 2);
    std::nth_element(outside_axial.begin(), mid, outside_axial.end());
    best.face_offset = *mid;
  }
  std::vector<double> residuals;
  residuals.reserve(cluster.size());
  for (const auto& p : cluster.points) residuals.push_back(bore_residual(best, r, p));
  auto mid = residuals.begin() + static_cast<long>(residuals.size() / 2);
  std::nth_element(residuals.begin(), mid, residuals.end());
  best.median_residual = *mid;
  return best;
}

// ---------------------------------------------------------------------------
// Scene segmentation

struct SegmentationConfig {
  int ransac_iterations = 500;
  double ransac_threshold_m = 0.01;
  double cluster_radius_m = 0.03;
  std::size_t cluster_min_points = 50;
  std::uint64_t seed = 0;
  /// Bore radius of the scanner model the bore cluster is tested against.
  double bore_radius_m = 0.35;
  double bore_fit_tolerance_m = 0.01;
  int bore_fit_iterations = 300;
  /// The couch normal is oriented toward this point (the sensor origin).
  Vec3 viewpoint = Vec3::Zero();
};

struct SegmentationOutput {
  Plane table_plane;
  std::vector<std::size_t> table_inliers;
  PointCloud patient;
  PointCloud bore;
  std::vector<std::size_t> patient_indices;
  std::vector<std::size_t> bore_indices;
  double bore_residual = 0.0;
};

/// ransac_plane -> remove_plane -> euclidean_clusters, then the cluster with
/// the smallest median residual against the bore cylinder becomes the bore
/// and the largest of the others the patient. Clusters whose second
/// principal spread is under a quarter of the bore radius are not bore
/// candidates.
inline SegmentationOutput segment_scene(const PointCloud& cloud, const SegmentationConfig& config) {
  require(!cloud.empty(), ErrorCode::kParameter, "segment_scene needs a nonempty cloud");
  SegmentationOutput out;
  PlaneFit table;
  try {
    table = ransac_plane(cloud, config.ransac_threshold_m, config.ransac_iterations, config.seed);
  } catch (const Error& e) {
    fail(ErrorCode::kSegmentationFailed, std::string("table plane: ") + e.what());
  }
  out.table_plane = refine_plane(cloud, table.inliers, table.plane).oriented_toward(config.viewpoint);
  out.table_inliers = table.inliers;

  const auto rest = plane_outlier_indices(cloud, table.plane, config.ransac_threshold_m);
  const PointCloud remaining = cloud.select(rest);
  auto clusters = euclidean_cluster_indices(remaining, config.cluster_radius_m, config.cluster_min_points);
  require(clusters.size() >= 2, ErrorCode::kSegmentationFailed,
          "expected patient and bore clusters above the couch, found " + std::to_string(clusters.size()));
  for (auto& c : clusters) {
    for (auto& i : c) i = rest[i];
  }

  BoreFitParams fit_params;
  fit_params.radius = config.bore_radius_m;
  fit_params.tolerance = config.bore_fit_tolerance_m;
  fit_params.iterations = config.bore_fit_iterations;
  fit_params.seed = config.seed;
  std::size_t bore_idx = 0;
  double bore_res = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    const PointCloud members = cloud.select(clusters[c]);
    // A patch or strip narrower than the bore radius fits many cylinders of
    // that radius; require spread along the two principal directions.
    const Vec3 mean = members.centroid();
    Mat3 cov = Mat3::Zero();
    for (const auto& p : members.points) cov += (p - mean) * (p - mean).transpose();
    cov /= static_cast<double>(members.size());
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov, Eigen::EigenvaluesOnly);
    if (std::sqrt(std::max(0.0, es.eigenvalues()(1))) < 0.25 * config.bore_radius_m) continue;
    const double res = fit_bore_cylinder(members, fit_params).median_residual;
    if (res < bore_res) {
      bore_res = res;
      bore_idx = c;
    }
  }
  require(std::isfinite(bore_res), ErrorCode::kSegmentationFailed, "no cluster fits the bore cylinder");
  const std::size_t patient_idx = bore_idx == 0 ? 1 : 0;

  out.bore_indices = clusters[bore_idx];
  out.patient_indices = clusters[patient_idx];
  std::sort(out.bore_indices.begin(), out.bore_indices.end());
  std::sort(out.patient_indices.begin(), out.patient_indices.end());
  out.bore = cloud.select(out.bore_indices);
  out.patient = cloud.select(out.patient_indices);
  out.bore_residual = bore_res;
  return out;
}

}  // namespace mirage
