#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <vector>

#include "mirage/geometry.hpp"

namespace mirage {

struct Neighbor {
  std::size_t index = 0;
  double dist_sq = 0.0;
};

/// Static 3-D k-d tree. Built once, queried many times; holds its own copy
/// of the points so the source cloud may go away.
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(const PointCloud& cloud) : KdTree(cloud.points) {}
  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    order_.resize(points_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (!points_.empty()) {
      nodes_.reserve(2 * points_.size() / kLeafSize + 1);
      build(0, points_.size());
    }
  }

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }
  const std::vector<Vec3>& points() const { return points_; }

  /// Closest point within max_dist (inclusive); nullopt when none.
  std::optional<Neighbor> nearest(const Vec3& q,
                                  double max_dist = std::numeric_limits<double>::infinity()) const {
    if (points_.empty()) return std::nullopt;
    Neighbor best{0, max_dist == std::numeric_limits<double>::infinity()
                         ? std::numeric_limits<double>::infinity()
                         : max_dist * max_dist};
    bool found = false;
    nearest_rec(0, q, best, found);
    if (!found) return std::nullopt;
    return best;
  }

  /// Indices of all points within radius (inclusive), ascending.
  std::vector<std::size_t> radius(const Vec3& q, double r) const {
    std::vector<std::size_t> out;
    if (!points_.empty()) radius_rec(0, q, r * r, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  /// k closest points sorted by distance (ties by index).
  std::vector<Neighbor> knn(const Vec3& q, std::size_t k) const {
    std::vector<Neighbor> heap;
    if (points_.empty() || k == 0) return heap;
    heap.reserve(k + 1);
    knn_rec(0, q, k, heap);
    std::sort(heap.begin(), heap.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.dist_sq < b.dist_sq || (a.dist_sq == b.dist_sq && a.index < b.index);
    });
    return heap;
  }

 private:
  static constexpr std::size_t kLeafSize = 12;

  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{begin, end});
    if (end - begin <= kLeafSize) return id;

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<long>(begin), order_.begin() + static_cast<long>(mid),
                     order_.begin() + static_cast<long>(end), [&](std::size_t a, std::size_t b) {
                       return points_[a][axis] < points_[b][axis];
                     });
    const double split = points_[order_[mid]][axis];
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void nearest_rec(std::size_t id, const Vec3& q, Neighbor& best, bool& found) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d = (points_[idx] - q).squaredNorm();
        if (d < best.dist_sq || (d == best.dist_sq && (!found || idx < best.index))) {
          best = {idx, d};
          found = true;
        }
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::size_t first = diff < 0.0 ? n.left : n.right;
    const std::size_t second = diff < 0.0 ? n.right : n.left;
    nearest_rec(first, q, best, found);
    if (diff * diff <= best.dist_sq) nearest_rec(second, q, best, found);
  }

  void radius_rec(std::size_t id, const Vec3& q, double r2, std::vector<std::size_t>& out) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        if ((points_[order_[i]] - q).squaredNorm() <= r2) out.push_back(order_[i]);
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    if (diff < 0.0 || diff * diff <= r2) radius_rec(n.left, q, r2, out);
    if (diff >= 0.0 || diff * diff <= r2) radius_rec(n.right, q, r2, out);
  }

  void knn_rec(std::size_t id, const Vec3& q, std::size_t k, std::vector<Neighbor>& heap) const {
    auto worse = [](const Neighbor& a, const Neighbor& b) {
      return a.dist_sq < b.dist_sq || (a.dist_sq == b.dist_sq && a.index < b.index);
    };
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        Neighbor cand{order_[i], (points_[order_[i]] - q).squaredNorm()};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end(), worse);
        } else if (worse(cand, heap.front())) {
          std::pop_heap(heap.begin(), heap.end(), worse);
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end(), worse);
        }
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::size_t first = diff < 0.0 ? n.left : n.right;
    const std::size_t second = diff < 0.0 ? n.right : n.left;
    knn_rec(first, q, k, heap);
    if (heap.size() < k || diff * diff <= heap.front().dist_sq) knn_rec(second, q, k, heap);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

/// Mean distance from each point of `cloud` to its nearest neighbour in `tree`.
inline double mean_nearest_distance(const PointCloud& cloud, const KdTree& tree) {
  if (cloud.empty() || tree.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& p : cloud.points) sum += std::sqrt(tree.nearest(p)->dist_sq);
  return sum / static_cast<double>(cloud.size());
}

}  // namespace mirage
