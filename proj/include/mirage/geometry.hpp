#pragma once

// Depth frames, point clouds and SE(3) algebra shared by every other module.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "mirage/error.hpp"

namespace mirage {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Ranges beyond this are treated as sensor dropouts.
inline constexpr double kMaxRangeM = 20.0;

struct CameraIntrinsics {
  std::uint32_t width = 320;
  std::uint32_t height = 288;
  double fx = 260.0;
  double fy = 260.0;
  double cx = 159.5;
  double cy = 143.5;

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * height;
  }

  void validate() const {
    require(width >= 1 && height >= 1, ErrorCode::kParameter,
            "intrinsics: width and height must be >= 1");
    require(fx > 0.0 && fy > 0.0, ErrorCode::kParameter,
            "intrinsics: focal lengths must be positive");
    require(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height,
            ErrorCode::kParameter,
            "intrinsics: principal point must lie inside the image");
  }

  /// Unit-length viewing ray through the centre of pixel (u, v).
  Vec3 pixel_ray(double u, double v) const {
    return Vec3((u - cx) / fx, (v - cy) / fy, 1.0).normalized();
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

/// Row-major grid of radial ranges (metres along the pixel ray). 0 marks an
/// invalid sample.
struct DepthFrame {
  CameraIntrinsics intrinsics;
  std::uint64_t timestamp_us = 0;
  std::uint64_t sequence = 0;
  std::vector<double> depth;

  static double sanitize(double range) {
    if (!std::isfinite(range) || range <= 0.0 || range > kMaxRangeM) return 0.0;
    return range;
  }

  /// Builds a frame, clamping out-of-range or non-finite samples to invalid.
  static DepthFrame make(const CameraIntrinsics& intrinsics,
                         std::vector<double> depth, std::uint64_t timestamp_us = 0,
                         std::uint64_t sequence = 0) {
    intrinsics.validate();
    require(depth.size() == intrinsics.pixel_count(), ErrorCode::kParameter,
            "depth grid size does not match width x height");
    for (double& d : depth) d = sanitize(d);
    return DepthFrame{intrinsics, timestamp_us, sequence, std::move(depth)};
  }

  std::size_t index(std::uint32_t u, std::uint32_t v) const {
    return static_cast<std::size_t>(v) * intrinsics.width + u;
  }
  double at(std::uint32_t u, std::uint32_t v) const { return depth[index(u, v)]; }
  double& at(std::uint32_t u, std::uint32_t v) { return depth[index(u, v)]; }

  std::size_t valid_count() const {
    return static_cast<std::size_t>(
        std::count_if(depth.begin(), depth.end(), [](double d) { return d > 0.0; }));
  }

  void validate() const {
    intrinsics.validate();
    require(depth.size() == intrinsics.pixel_count(), ErrorCode::kParameter,
            "depth grid size does not match width x height");
    for (double d : depth) {
      require(std::isfinite(d) && d >= 0.0 && d <= kMaxRangeM, ErrorCode::kParameter,
              "depth samples must be finite and within [0, 20] m");
    }
  }

  bool operator==(const DepthFrame&) const = default;
};

struct PointCloud {
  std::vector<Vec3> points;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }
  Vec3& operator[](std::size_t i) { return points[i]; }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
  }

  PointCloud select(std::span<const std::size_t> indices) const {
    PointCloud out;
    out.points.reserve(indices.size());
    for (std::size_t i : indices) out.points.push_back(points[i]);
    return out;
  }

  bool operator==(const PointCloud& other) const { return points == other.points; }
};

/// Per-pixel flag grid; nonzero means "excluded".
using PixelMask = std::vector<std::uint8_t>;

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_axis_angle(const Vec3& axis, double angle_rad,
                                        const Vec3& translation = Vec3::Zero()) {
    RigidTransform t;
    t.rotation = Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
    t.translation = translation;
    return t;
  }

  Vec3 operator()(const Vec3& p) const { return rotation * p + translation; }

  bool is_valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }

  void validate(double tol = 1e-9) const {
    require(is_valid(tol), ErrorCode::kParameter,
            "rigid transform rotation is not orthonormal with det +1");
  }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  bool operator==(const RigidTransform&) const = default;
};

inline PointCloud apply(const RigidTransform& t, const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(t(p));
  return out;
}

/// a ∘ b: applies b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline RigidTransform invert(const RigidTransform& t) {
  Mat3 rt = t.rotation.transpose();
  return {rt, -(rt * t.translation)};
}

/// Geodesic angle (radians) of a.rotation^T b.rotation.
inline double rotation_angle_between(const RigidTransform& a, const RigidTransform& b) {
  const Mat3 d = a.rotation.transpose() * b.rotation;
  // atan2 keeps precision near 0 and pi, where acos of the trace does not.
  const Vec3 axis(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  return std::atan2(0.5 * axis.norm(), 0.5 * (d.trace() - 1.0));
}

inline double translation_distance(const RigidTransform& a, const RigidTransform& b) {
  return (a.translation - b.translation).norm();
}

/// Nearest proper rotation to m in the Frobenius sense.
inline Mat3 project_to_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  Mat3 s = Mat3::Identity();
  if ((u * v.transpose()).determinant() < 0.0) s(2, 2) = -1.0;
  return u * s * v.transpose();
}

// ---------------------------------------------------------------------------
// Frame filters

inline void check_median_window(int window) {
  require(window == 3 || window == 5 || window == 7, ErrorCode::kParameter,
          "median window must be 3, 5 or 7");
}

/// Median over the valid samples of each window; pixels with no valid
/// neighbour stay invalid. Even counts take the mean of the middle pair.
inline DepthFrame median_filter(const DepthFrame& frame, int window) {
  check_median_window(window);
  const int w = static_cast<int>(frame.intrinsics.width);
  const int h = static_cast<int>(frame.intrinsics.height);
  const int r = window / 2;
  DepthFrame out = frame;
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(window * window));
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      vals.clear();
      for (int dv = -r; dv <= r; ++dv) {
        const int vv = v + dv;
        if (vv < 0 || vv >= h) continue;
        for (int du = -r; du <= r; ++du) {
          const int uu = u + du;
          if (uu < 0 || uu >= w) continue;
          const double d = frame.depth[static_cast<std::size_t>(vv) * w + uu];
          if (d > 0.0) vals.push_back(d);
        }
      }
      double m = 0.0;
      if (!vals.empty()) {
        const std::size_t mid = vals.size() / 2;
        std::nth_element(vals.begin(), vals.begin() + static_cast<long>(mid), vals.end());
        m = vals[mid];
        if (vals.size() % 2 == 0) {
          const double lower = *std::max_element(vals.begin(), vals.begin() + static_cast<long>(mid));
          m = 0.5 * (lower + m);
        }
      }
      out.depth[static_cast<std::size_t>(v) * w + u] = m;
    }
  }
  return out;
}

/// Flags invalid pixels and pixels whose range jumps by more than
/// jump_threshold against any valid 4-neighbour.
inline PixelMask occlusion_mask(const DepthFrame& frame, double jump_threshold) {
  require(jump_threshold > 0.0, ErrorCode::kParameter, "jump threshold must be > 0");
  const std::uint32_t w = frame.intrinsics.width;
  const std::uint32_t h = frame.intrinsics.height;
  PixelMask mask(frame.depth.size(), 0);
  auto jumps = [&](double d, std::uint32_t u, std::uint32_t v) {
    const double n = frame.at(u, v);
    return n > 0.0 && std::abs(d - n) > jump_threshold;
  };
  for (std::uint32_t v = 0; v < h; ++v) {
    for (std::uint32_t u = 0; u < w; ++u) {
      const double d = frame.at(u, v);
      bool flagged = d <= 0.0;
      if (!flagged) {
        flagged = (u > 0 && jumps(d, u - 1, v)) || (u + 1 < w && jumps(d, u + 1, v)) ||
                  (v > 0 && jumps(d, u, v - 1)) || (v + 1 < h && jumps(d, u, v + 1));
      }
      mask[frame.index(u, v)] = flagged ? 1 : 0;
    }
  }
  return mask;
}

/// Back-projection that also reports the source pixel of every point.
struct IndexedCloud {
  PointCloud cloud;
  std::vector<std::size_t> pixels;
};

inline IndexedCloud backproject_indexed(const DepthFrame& frame, const PixelMask* mask = nullptr) {
  frame.intrinsics.validate();
  if (mask != nullptr) {
    require(mask->size() == frame.depth.size(), ErrorCode::kParameter,
            "mask size does not match frame");
  }
  IndexedCloud out;
  const auto& k = frame.intrinsics;
  for (std::uint32_t v = 0; v < k.height; ++v) {
    for (std::uint32_t u = 0; u < k.width; ++u) {
      const std::size_t i = frame.index(u, v);
      const double range = frame.depth[i];
      if (range <= 0.0 || (mask != nullptr && (*mask)[i] != 0)) continue;
      out.cloud.points.push_back(range * k.pixel_ray(u, v));
      out.pixels.push_back(i);
    }
  }
  return out;
}

inline PointCloud backproject(const DepthFrame& frame, const PixelMask* mask = nullptr) {
  return backproject_indexed(frame, mask).cloud;
}

/// One centroid per occupied voxel, keyed by floor(p / voxel) and emitted in
/// lexicographic key order.
inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  require(voxel > 0.0, ErrorCode::kParameter, "voxel size must be > 0");
  struct Key {
    std::int64_t x, y, z;
    bool operator==(const Key&) const = default;
    bool operator<(const Key& o) const {
      if (x != o.x) return x < o.x;
      if (y != o.y) return y < o.y;
      return z < o.z;
    }
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      std::uint64_t h = static_cast<std::uint64_t>(k.x) * 73856093ULL;
      h ^= static_cast<std::uint64_t>(k.y) * 19349663ULL;
      h ^= static_cast<std::uint64_t>(k.z) * 83492791ULL;
      return static_cast<std::size_t>(h);
    }
  };
  struct Acc {
    Vec3 sum = Vec3::Zero();
    std::size_t n = 0;
  };
  std::unordered_map<Key, Acc, KeyHash> cells;
  cells.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    Key k{static_cast<std::int64_t>(std::floor(p.x() / voxel)),
          static_cast<std::int64_t>(std::floor(p.y() / voxel)),
          static_cast<std::int64_t>(std::floor(p.z() / voxel))};
    auto& a = cells[k];
    a.sum += p;
    ++a.n;
  }
  std::vector<std::pair<Key, Acc>> sorted(cells.begin(), cells.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  PointCloud out;
  out.points.reserve(sorted.size());
  for (const auto& [key, acc] : sorted) out.points.push_back(acc.sum / static_cast<double>(acc.n));
  return out;
}

// ---------------------------------------------------------------------------
// Least-squares rigid fit

struct IndexPair {
  std::size_t source = 0;
  std::size_t target = 0;
  bool operator==(const IndexPair&) const = default;
};

/// Accumulates weighted point pairs and (optionally) weighted direction pairs
/// and solves  min Σ w‖R s + t − d‖² + Σ w_dir‖R a − b‖²  in closed form.
/// Direction pairs only constrain rotation.
class RigidFit {
 public:
  void add_pair(const Vec3& src, const Vec3& dst, double weight = 1.0) {
    src_.push_back(src);
    dst_.push_back(dst);
    w_.push_back(weight);
  }

  void add_direction(const Vec3& src_dir, const Vec3& dst_dir, double weight) {
    dir_src_.push_back(src_dir.normalized());
    dir_dst_.push_back(dst_dir.normalized());
    dir_w_.push_back(weight);
  }

  std::size_t pair_count() const { return src_.size(); }

  RigidTransform solve() const {
    require(src_.size() >= 3, ErrorCode::kDegenerateGeometry,
            "rigid fit needs at least 3 correspondences");
    double wsum = 0.0;
    Vec3 cs = Vec3::Zero();
    Vec3 cd = Vec3::Zero();
    for (std::size_t i = 0; i < src_.size(); ++i) {
      wsum += w_[i];
      cs += w_[i] * src_[i];
      cd += w_[i] * dst_[i];
    }
    require(wsum > 0.0, ErrorCode::kDegenerateGeometry, "rigid fit weights sum to zero");
    cs /= wsum;
    cd /= wsum;

    Mat3 h = Mat3::Zero();
    Mat3 cov_s = Mat3::Zero();
    Mat3 cov_d = Mat3::Zero();
    for (std::size_t i = 0; i < src_.size(); ++i) {
      const Vec3 a = src_[i] - cs;
      const Vec3 b = dst_[i] - cd;
      h += w_[i] * a * b.transpose();
      cov_s += w_[i] * a * a.transpose();
      cov_d += w_[i] * b * b.transpose();
    }
    require(!collinear(cov_s) && !collinear(cov_d), ErrorCode::kDegenerateGeometry,
            "correspondences are collinear or coincident");
    for (std::size_t i = 0; i < dir_src_.size(); ++i) {
      h += dir_w_[i] * dir_src_[i] * dir_dst_[i].transpose();
    }

    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat3& u = svd.matrixU();
    const Mat3& v = svd.matrixV();
    Mat3 s = Mat3::Identity();
    if ((v * u.transpose()).determinant() < 0.0) s(2, 2) = -1.0;
    RigidTransform t;
    t.rotation = v * s * u.transpose();
    t.translation = cd - t.rotation * cs;
    return t;
  }

 private:
  static bool collinear(const Mat3& cov) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov, Eigen::EigenvaluesOnly);
    const auto& ev = es.eigenvalues();  // ascending
    const double largest = ev(2);
    if (!(largest > 1e-24)) return true;
    return ev(1) <= 1e-12 * largest;
  }

  std::vector<Vec3> src_, dst_;
  std::vector<double> w_;
  std::vector<Vec3> dir_src_, dir_dst_;
  std::vector<double> dir_w_;
};

inline RigidTransform estimate_rigid_from_correspondences(const PointCloud& src,
                                                          const PointCloud& dst,
                                                          std::span<const IndexPair> pairs) {
  require(pairs.size() >= 3, ErrorCode::kDegenerateGeometry,
          "rigid fit needs at least 3 correspondences");
  RigidFit fit;
  for (const auto& p : pairs) {
    require(p.source < src.size() && p.target < dst.size(), ErrorCode::kParameter,
            "correspondence index out of range");
    fit.add_pair(src[p.source], dst[p.target]);
  }
  return fit.solve();
}

}  // namespace mirage
