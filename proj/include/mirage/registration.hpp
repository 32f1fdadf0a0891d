#pragma once

// Bore-to-model registration: descriptor correspondences pruned by pairwise
// distance consistency, point-to-point ICP, the accept/retry gate, and the
// full calibration pipeline from depth frames.

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mirage/error.hpp"
#include "mirage/features.hpp"
#include "mirage/geometry.hpp"
#include "mirage/kdtree.hpp"
#include "mirage/segmentation.hpp"

namespace mirage {

struct RegistrationConfig {
  int max_icp_iterations = 60;
  double convergence_eps_m = 1e-5;
  double max_correspondence_dist_m = 0.05;
  double validation_threshold_m = 0.02;
  double min_matched_fraction = 0.3;
  /// Upper bound on keypoints per cloud in the global step.
  std::size_t global_sample_count = 500;
  /// Pairwise-consistency tolerance is twice this.
  double global_voxel_m = 0.01;
  std::size_t descriptor_neighbors = 3;
  double descriptor_radius_m = 0.12;
  std::size_t normal_neighbors = 16;
  std::size_t consensus_seeds = 100;
  /// With reference planes, candidate matches must agree in height this well.
  double height_gate_m = 0.03;
  /// Global hypotheses carried through ICP during calibration.
  std::size_t refined_hypotheses = 3;
  /// Weight of the up-direction constraint relative to the point spread.
  double up_prior_weight = 1.0;
  /// Point-to-plane iterations run after ICP during calibration; 0 skips them.
  int plane_refine_iterations = 30;
  std::uint64_t seed = 0;

  void validate() const {
    require(max_icp_iterations >= 1, ErrorCode::kParameter, "max_icp_iterations must be >= 1");
    require(convergence_eps_m > 0.0, ErrorCode::kParameter, "convergence_eps_m must be > 0");
    require(max_correspondence_dist_m > 0.0, ErrorCode::kParameter, "max_correspondence_dist_m must be > 0");
    require(validation_threshold_m > 0.0, ErrorCode::kParameter, "validation_threshold_m must be > 0");
    require(min_matched_fraction >= 0.0 && min_matched_fraction <= 1.0, ErrorCode::kParameter,
            "min_matched_fraction must be in [0, 1]");
    require(global_sample_count >= 3, ErrorCode::kParameter, "global_sample_count must be >= 3");
    require(global_voxel_m > 0.0, ErrorCode::kParameter, "global_voxel_m must be > 0");
    require(descriptor_neighbors >= 1, ErrorCode::kParameter, "descriptor_neighbors must be >= 1");
    require(descriptor_radius_m > 0.0, ErrorCode::kParameter, "descriptor_radius_m must be > 0");
    require(normal_neighbors >= 3, ErrorCode::kParameter, "normal_neighbors must be >= 3");
    require(height_gate_m > 0.0, ErrorCode::kParameter, "height_gate_m must be > 0");
    require(consensus_seeds >= 1, ErrorCode::kParameter, "consensus_seeds must be >= 1");
    require(refined_hypotheses >= 1, ErrorCode::kParameter, "refined_hypotheses must be >= 1");
    require(up_prior_weight >= 0.0, ErrorCode::kParameter, "up_prior_weight must be >= 0");
    require(plane_refine_iterations >= 0, ErrorCode::kParameter, "plane_refine_iterations must be >= 0");
  }
};

struct RegistrationResult {
  RigidTransform transform;
  double mean_matched_distance = 0.0;
  double matched_fraction = 0.0;
  int icp_iterations = 0;
  std::size_t global_inlier_count = 0;
  double elapsed_s = 0.0;
  /// Mean distance from every moved source point to its nearest target point,
  /// with no correspondence cap. The matched mean alone can never exceed
  /// max_correspondence_dist_m, so a tight cap hides gross misalignment.
  std::optional<double> mean_nearest_distance;
  /// Mean matched distance before each ICP update, then at the result.
  std::vector<double> history;
};

/// Matching the up direction of the source frame to that of the target frame
/// pins rotation about any vertical symmetry axis.
struct UpPrior {
  Vec3 source_up = Vec3::UnitY();
  Vec3 target_up = Vec3::UnitY();
};

// ---------------------------------------------------------------------------
// Global step

/// A cloud with everything the global step needs, so a static model can be
/// prepared once.
struct PreparedCloud {
  PointCloud cloud;
  KdTree tree;
  std::vector<Vec3> normals;
  std::vector<std::size_t> keypoints;  // indices into cloud
  std::vector<Descriptor> descriptors;  // one per keypoint
  std::optional<FrameReference> ref;
  bool oriented = false;  // normals face the viewpoint the cloud was seen from

  double height(std::size_t i) const { return ref ? ref->ground.signed_distance(cloud[i]) : 0.0; }
};

/// Evenly strided keypoints. Stride sampling is index-covariant, so a rigidly
/// moved copy of a cloud yields the same keypoints.
inline std::vector<std::size_t> stride_keypoints(std::size_t n, std::size_t max_count) {
  std::vector<std::size_t> out;
  if (n <= max_count) {
    out.resize(n);
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  out.reserve(max_count);
  for (std::size_t k = 0; k < max_count; ++k) out.push_back(k * n / max_count);
  return out;
}

/// `viewpoint`, when known, orients the normals toward it.
inline PreparedCloud prepare_cloud(const PointCloud& cloud, const RegistrationConfig& config,
                                   const std::optional<FrameReference>& ref = std::nullopt,
                                   const std::optional<Vec3>& viewpoint = std::nullopt) {
  PreparedCloud p;
  p.cloud = cloud;
  p.tree = KdTree(cloud);
  p.ref = ref;
  p.oriented = viewpoint.has_value();
  p.normals = estimate_normals(cloud, p.tree, config.normal_neighbors, viewpoint);
  p.keypoints = stride_keypoints(cloud.size(), config.global_sample_count);
  DescriptorParams params;
  params.radius = config.descriptor_radius_m;
  p.descriptors = compute_descriptors(p.tree, p.normals, p.keypoints, params, ref);
  return p;
}

/// Up directions of two prepared clouds, when both carry a reference plane.
inline std::optional<UpPrior> up_prior(const PreparedCloud& source, const PreparedCloud& target) {
  if (!source.ref || !target.ref) return std::nullopt;
  return UpPrior{source.ref->ground.normal, target.ref->ground.normal};
}

/// Candidate correspondences: each source keypoint to its k nearest target
/// keypoints in descriptor space. With reference planes on both sides only
/// targets within `height_gate` of the same height qualify, and with oriented
/// normals also only those whose normal makes a similar angle with up.
/// Indices are into the clouds, not keypoints.
inline std::vector<IndexPair> descriptor_correspondences(const PreparedCloud& source, const PreparedCloud& target,
                                                         std::size_t k, double height_gate) {
  constexpr double kNormalGate = 0.3;
  const auto up = up_prior(source, target);
  const bool oriented = up && source.oriented && target.oriented;
  std::vector<IndexPair> out;
  const std::size_t nt = target.keypoints.size();
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(nt);
  for (std::size_t i = 0; i < source.keypoints.size(); ++i) {
    const std::size_t si = source.keypoints[i];
    dist.clear();
    for (std::size_t j = 0; j < nt; ++j) {
      const std::size_t tj = target.keypoints[j];
      if (up && std::abs(source.height(si) - target.height(tj)) > height_gate) continue;
      if (oriented &&
          std::abs(source.normals[si].dot(up->source_up) - target.normals[tj].dot(up->target_up)) > kNormalGate) {
        continue;
      }
      dist.emplace_back(descriptor_distance_sq(source.descriptors[i], target.descriptors[j]), j);
    }
    const std::size_t kk = std::min(k, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(kk), dist.end());
    for (std::size_t m = 0; m < kk; ++m) out.push_back({si, target.keypoints[dist[m].second]});
  }
  return out;
}

namespace detail {

class BitMatrix {
 public:
  explicit BitMatrix(std::size_t n) : n_(n), words_((n + 63) / 64), bits_(n * words_, 0) {}
  void set(std::size_t i, std::size_t j) { bits_[i * words_ + j / 64] |= std::uint64_t{1} << (j % 64); }
  bool test(std::size_t i, std::size_t j) const { return (bits_[i * words_ + j / 64] >> (j % 64)) & 1U; }
  const std::uint64_t* row(std::size_t i) const { return bits_.data() + i * words_; }
  std::size_t words() const { return words_; }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_, words_;
  std::vector<std::uint64_t> bits_;
};

}  // namespace detail

/// Greedy maximum-consensus subsets of a correspondence set. Two
/// correspondences are consistent when |d(s_i, s_j) − d(t_i, t_j)| ≤
/// threshold and they use distinct points. Starting from each of the
/// `seeds` highest-degree correspondences, the clique grows by repeatedly
/// adding the candidate consistent with the most remaining candidates.
/// Returned cliques hold positions in `pairs`, sorted ascending, and are
/// ordered by size (largest first). With an up prior the height differences
/// must agree as well, since the sought rotation maps up onto up.
inline std::vector<std::vector<std::size_t>> consensus_cliques(const PointCloud& source, const PointCloud& target,
                                                               std::span<const IndexPair> pairs, double threshold,
                                                               std::size_t seeds,
                                                               const std::optional<UpPrior>& up = std::nullopt) {
  const std::size_t m = pairs.size();
  detail::BitMatrix adj(m);
  std::vector<std::size_t> degree(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const Vec3& si = source[pairs[i].source];
    const Vec3& ti = target[pairs[i].target];
    for (std::size_t j = i + 1; j < m; ++j) {
      if (pairs[i].source == pairs[j].source || pairs[i].target == pairs[j].target) continue;
      const double ds = (si - source[pairs[j].source]).norm();
      const double dt = (ti - target[pairs[j].target]).norm();
      if (std::abs(ds - dt) > threshold) continue;
      if (up) {
        const double hs = (si - source[pairs[j].source]).dot(up->source_up);
        const double ht = (ti - target[pairs[j].target]).dot(up->target_up);
        if (std::abs(hs - ht) > threshold) continue;
      }
      {
        adj.set(i, j);
        adj.set(j, i);
        ++degree[i];
        ++degree[j];
      }
    }
  }

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return degree[a] > degree[b]; });

  const double min_edge = 4.0 * threshold;
  auto well_shaped = [&](std::size_t a, std::size_t b, std::size_t c) {
    const Vec3 u = source[pairs[b].source] - source[pairs[a].source];
    const Vec3 v = source[pairs[c].source] - source[pairs[a].source];
    if (u.norm() < min_edge || v.norm() < min_edge) return false;
    return u.cross(v).norm() > 0.3 * u.norm() * v.norm();
  };
  // +1 when x lies on the same side of the triangle in both clouds, -1 when
  // it does not, 0 when the configuration is too flat to tell.
  auto handedness = [&](const std::array<std::size_t, 3>& tri, std::size_t x) {
    auto volume = [&](const PointCloud& cloud, auto member) {
      const Vec3& a = cloud[member(tri[0])];
      const Vec3 u = cloud[member(tri[1])] - a;
      const Vec3 v = cloud[member(tri[2])] - a;
      const Vec3 w = cloud[member(x)] - a;
      if (w.norm() < min_edge) return 0.0;
      const double det = u.cross(v).dot(w);
      return std::abs(det) > 0.2 * u.norm() * v.norm() * w.norm() ? det : 0.0;
    };
    const double vs = volume(source, [&](std::size_t i) { return pairs[i].source; });
    const double vt = volume(target, [&](std::size_t i) { return pairs[i].target; });
    if (vs == 0.0 || vt == 0.0) return 0;
    return (vs > 0.0) == (vt > 0.0) ? 1 : -1;
  };

  std::vector<std::vector<std::size_t>> cliques;
  const std::size_t words = adj.words();
  std::vector<std::uint64_t> cand(words);
  for (std::size_t s = 0; s < std::min(seeds, m); ++s) {
    const std::size_t seed = order[s];
    if (degree[seed] == 0) break;
    std::vector<std::size_t> clique{seed};
    std::optional<std::array<std::size_t, 3>> triangle;
    std::copy(adj.row(seed), adj.row(seed) + words, cand.begin());
    while (true) {
      std::size_t best = m;
      int best_score = -1;
      for (std::size_t w = 0; w < words; ++w) {
        std::uint64_t bits = cand[w];
        while (bits) {
          const std::size_t c = w * 64 + static_cast<std::size_t>(std::countr_zero(bits));
          bits &= bits - 1;
          int score = 0;
          const std::uint64_t* row = adj.row(c);
          for (std::size_t x = 0; x < words; ++x) score += std::popcount(row[x] & cand[x]);
          if (score > best_score) {
            best_score = score;
            best = c;
          }
        }
      }
      if (best == m) break;
      clique.push_back(best);
      const std::uint64_t* row = adj.row(best);
      for (std::size_t x = 0; x < words; ++x) cand[x] &= row[x];
      if (!triangle && clique.size() >= 3) {
        for (std::size_t i = 1; i + 1 < clique.size() && !triangle; ++i) {
          if (well_shaped(seed, clique[i], best)) triangle = {seed, clique[i], best};
        }
        if (triangle) {
          // Pairwise distances cannot tell a rotation from a reflection;
          // drop candidates whose handedness disagrees with the triangle.
          for (std::size_t w = 0; w < words; ++w) {
            std::uint64_t bits = cand[w];
            while (bits) {
              const std::size_t c = w * 64 + static_cast<std::size_t>(std::countr_zero(bits));
              bits &= bits - 1;
              if (handedness(*triangle, c) < 0) cand[w] &= ~(std::uint64_t{1} << (c % 64));
            }
          }
        }
      }
    }
    std::sort(clique.begin(), clique.end());
    if (std::find(cliques.begin(), cliques.end(), clique) == cliques.end()) cliques.push_back(std::move(clique));
  }
  std::stable_sort(cliques.begin(), cliques.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
  return cliques;
}

/// Correspondences kept by the largest consensus clique.
inline std::vector<IndexPair> prune_correspondences(const PointCloud& source, const PointCloud& target,
                                                    std::span<const IndexPair> pairs, double threshold,
                                                    std::size_t seeds = 12) {
  const auto cliques = consensus_cliques(source, target, pairs, threshold, seeds);
  std::vector<IndexPair> out;
  if (cliques.empty()) return out;
  for (std::size_t i : cliques.front()) out.push_back(pairs[i]);
  return out;
}

struct GlobalResult {
  RigidTransform transform;
  std::size_t inlier_count = 0;  // consensus correspondences agreeing with the transform
  std::size_t support = 0;       // source keypoints landing near the target
  double support_mean = 0.0;     // their mean distance to the target
};

namespace detail {

inline double spread(const PointCloud& cloud, std::span<const IndexPair> pairs) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : pairs) c += cloud[p.source];
  c /= static_cast<double>(pairs.size());
  double s = 0.0;
  for (const auto& p : pairs) s += (cloud[p.source] - c).squaredNorm();
  return s;
}

inline std::optional<RigidTransform> fit_pairs(const PointCloud& source, const PointCloud& target,
                                               std::span<const IndexPair> pairs,
                                               const std::optional<UpPrior>& up, double up_weight) {
  if (pairs.size() < 3) return std::nullopt;
  RigidFit fit;
  for (const auto& p : pairs) fit.add_pair(source[p.source], target[p.target]);
  if (up && up_weight > 0.0) fit.add_direction(up->source_up, up->target_up, up_weight * spread(source, pairs));
  try {
    return fit.solve();
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace detail

/// Every consensus clique yields a hypothesis, refit on the clique
/// correspondences it agrees with and scored by how many source keypoints it
/// places within the consistency tolerance of the target. Hypotheses are
/// returned best first (support, then mean distance of the supporting
/// keypoints). When both clouds carry oriented normals a keypoint only
/// supports a hypothesis if its moved normal also agrees with the target's.
/// Reference planes on both clouds turn on the up prior.
inline std::vector<GlobalResult> global_hypotheses(const PreparedCloud& source, const PreparedCloud& target,
                                                   const RegistrationConfig& config) {
  const auto up = up_prior(source, target);
  const bool oriented = source.oriented && target.oriented;
  config.validate();
  require(source.keypoints.size() >= 3 && target.keypoints.size() >= 3, ErrorCode::kGlobalRegistrationFailed,
          "global registration needs >= 3 keypoints per cloud");
  const double tol = 2.0 * config.global_voxel_m;
  const auto candidates =
      descriptor_correspondences(source, target, config.descriptor_neighbors, config.height_gate_m);
  const auto cliques = consensus_cliques(source.cloud, target.cloud, candidates, tol, config.consensus_seeds, up);

  std::vector<GlobalResult> out;
  for (const auto& clique : cliques) {
    if (clique.size() < 3) continue;
    std::vector<IndexPair> pairs;
    for (std::size_t i : clique) pairs.push_back(candidates[i]);
    auto hyp = detail::fit_pairs(source.cloud, target.cloud, pairs, up, config.up_prior_weight);
    if (!hyp) continue;

    std::vector<IndexPair> agreeing;
    for (const auto& p : pairs) {
      if (((*hyp)(source.cloud[p.source]) - target.cloud[p.target]).norm() <= tol) agreeing.push_back(p);
    }
    if (auto refit = detail::fit_pairs(source.cloud, target.cloud, agreeing, up, config.up_prior_weight)) {
      hyp = refit;
    }

    GlobalResult r{*hyp, agreeing.size(), 0, 0.0};
    double sum = 0.0;
    for (std::size_t k : source.keypoints) {
      if (auto nn = target.tree.nearest((*hyp)(source.cloud[k]), tol)) {
        if (oriented && (hyp->rotation * source.normals[k]).dot(target.normals[nn->index]) < 0.0) continue;
        ++r.support;
        sum += std::sqrt(nn->dist_sq);
      }
    }
    r.support_mean = r.support > 0 ? sum / static_cast<double>(r.support) : 0.0;
    out.push_back(r);
  }
  require(!out.empty(), ErrorCode::kGlobalRegistrationFailed,
          "fewer than 3 consistent correspondences survived pruning");
  std::stable_sort(out.begin(), out.end(), [](const GlobalResult& a, const GlobalResult& b) {
    if (a.support != b.support) return a.support > b.support;
    return a.support_mean < b.support_mean;
  });
  return out;
}

/// Coarse alignment of source onto target without an initial guess: the best
/// of global_hypotheses.
inline GlobalResult global_register(const PreparedCloud& source, const PreparedCloud& target,
                                    const RegistrationConfig& config) {
  return global_hypotheses(source, target, config).front();
}

inline GlobalResult global_register(const PointCloud& source, const PointCloud& target,
                                    const RegistrationConfig& config,
                                    const std::optional<FrameReference>& source_ref = std::nullopt,
                                    const std::optional<FrameReference>& target_ref = std::nullopt) {
  config.validate();
  require(source.size() >= 3 && target.size() >= 3, ErrorCode::kGlobalRegistrationFailed,
          "global registration needs >= 3 points per cloud");
  const bool with_ref = source_ref.has_value() && target_ref.has_value();
  const auto s = prepare_cloud(source, config, with_ref ? source_ref : std::nullopt);
  const auto t = prepare_cloud(target, config, with_ref ? target_ref : std::nullopt);
  return global_register(s, t, config);
}

// ---------------------------------------------------------------------------
// ICP

/// Thrown when an ICP iteration finds no correspondence; carries the state
/// reached so far.
class IcpDivergedError : public Error {
 public:
  IcpDivergedError(const std::string& message, RegistrationResult state)
      : Error(ErrorCode::kIcpDiverged, message), state_(std::move(state)) {}
  const RegistrationResult& state() const noexcept { return state_; }

 private:
  RegistrationResult state_;
};

/// Point-to-point ICP from `init`. Each iteration matches every source point
/// to its nearest target point within max_correspondence_dist_m, records the
/// mean matched distance, and refits. Stops when that mean changes by less
/// than convergence_eps_m, after max_icp_iterations, or when it would grow
/// (the previous transform is kept). The reported statistics are those of
/// the returned transform.
inline RegistrationResult icp_refine(const PointCloud& source, const KdTree& target, const RigidTransform& init,
                                     const RegistrationConfig& config,
                                     const std::optional<UpPrior>& up = std::nullopt) {
  config.validate();
  require(!source.empty() && !target.empty(), ErrorCode::kParameter, "ICP needs nonempty clouds");
  init.validate();
  const auto start = std::chrono::steady_clock::now();
  const double max_d = config.max_correspondence_dist_m;

  RegistrationResult res;
  RigidTransform current = init;
  std::optional<double> prev_mean;
  RigidTransform prev = init;
  double prev_fraction = 0.0;

  for (int iter = 1;; ++iter) {
    RigidFit fit;
    double sum = 0.0;
    std::size_t matched = 0;
    for (const auto& p : source.points) {
      const Vec3 q = current(p);
      if (auto nn = target.nearest(q, max_d)) {
        sum += std::sqrt(nn->dist_sq);
        ++matched;
        fit.add_pair(p, target.point(nn->index));
      }
    }
    if (matched == 0) {
      res.transform = current;
      res.icp_iterations = iter;
      res.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      throw IcpDivergedError("no correspondences within max_correspondence_dist at iteration " +
                                 std::to_string(iter),
                             res);
    }
    const double mean = sum / static_cast<double>(matched);
    const double fraction = static_cast<double>(matched) / static_cast<double>(source.size());

    if (prev_mean && mean > *prev_mean) {
      res.transform = prev;
      res.mean_matched_distance = *prev_mean;
      res.matched_fraction = prev_fraction;
      res.icp_iterations = iter - 1;
      break;
    }
    res.history.push_back(mean);
    res.transform = current;
    res.mean_matched_distance = mean;
    res.matched_fraction = fraction;
    res.icp_iterations = iter;
    if ((prev_mean && std::abs(*prev_mean - mean) < config.convergence_eps_m) || iter >= config.max_icp_iterations) {
      break;
    }

    if (up && config.up_prior_weight > 0.0) {
      // Weight against the spread of the matched source points.
      Vec3 c = Vec3::Zero();
      std::vector<Vec3> pts;
      for (const auto& p : source.points) {
        if (target.nearest(current(p), max_d)) pts.push_back(p);
      }
      for (const auto& p : pts) c += p;
      c /= static_cast<double>(pts.size());
      double s = 0.0;
      for (const auto& p : pts) s += (p - c).squaredNorm();
      fit.add_direction(up->source_up, up->target_up, config.up_prior_weight * s);
    }
    RigidTransform next;
    try {
      next = fit.solve();
    } catch (const Error&) {
      break;  // matches collapsed onto a line; keep the current estimate
    }
    prev = current;
    prev_mean = mean;
    prev_fraction = fraction;
    current = next;
  }
  res.mean_nearest_distance = mean_nearest_distance(apply(res.transform, source), target);
  res.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

inline RegistrationResult icp_refine(const PointCloud& source, const PointCloud& target, const RigidTransform& init,
                                     const RegistrationConfig& config) {
  require(!target.empty(), ErrorCode::kParameter, "ICP needs nonempty clouds");
  return icp_refine(source, KdTree(target), init, config);
}

/// Matching statistics of `source` moved by `t` against `target`.
inline RegistrationResult match_stats(const PointCloud& source, const KdTree& target, const RigidTransform& t,
                                      double max_d) {
  RegistrationResult r;
  r.transform = t;
  double sum = 0.0;
  std::size_t matched = 0;
  for (const auto& p : source.points) {
    if (auto nn = target.nearest(t(p), max_d)) {
      sum += std::sqrt(nn->dist_sq);
      ++matched;
    }
  }
  r.mean_matched_distance = matched ? sum / static_cast<double>(matched) : 0.0;
  r.matched_fraction = source.empty() ? 0.0 : static_cast<double>(matched) / static_cast<double>(source.size());
  r.mean_nearest_distance = mean_nearest_distance(apply(t, source), target);
  return r;
}

/// Gauss-Newton point-to-plane refinement against target points with unit
/// normals. Point-to-point ICP against a sampled model settles a few
/// millimetres off wherever the samples are sparse; matching to the local
/// tangent plane removes most of that. Returns the refined transform.
inline RigidTransform plane_refine(const PointCloud& source, const KdTree& target, std::span<const Vec3> normals,
                                   const RigidTransform& init, const RegistrationConfig& config,
                                   const std::optional<UpPrior>& up = std::nullopt) {
  require(normals.size() == target.size(), ErrorCode::kParameter, "one normal per target point required");
  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Vec6 = Eigen::Matrix<double, 6, 1>;
  RigidTransform current = init;
  for (int iter = 0; iter < config.plane_refine_iterations; ++iter) {
    Mat6 a = Mat6::Zero();
    Vec6 b = Vec6::Zero();
    struct Pair {
      Vec3 q;
      Vec3 normal;
      double r;
    };
    std::vector<Pair> pairs;
    pairs.reserve(source.size());
    for (const auto& p : source.points) {
      const Vec3 q = current(p);
      auto nn = target.nearest(q, config.max_correspondence_dist_m);
      if (!nn) continue;
      const Vec3& nrm = normals[nn->index];
      pairs.push_back({q, nrm, nrm.dot(q - target.point(nn->index))});
    }
    if (pairs.size() < 6) break;
    // Normals are poor where two surfaces meet; drop pairs far off the
    // typical residual.
    std::vector<double> abs_r;
    abs_r.reserve(pairs.size());
    for (const auto& pr : pairs) abs_r.push_back(std::abs(pr.r));
    std::nth_element(abs_r.begin(), abs_r.begin() + abs_r.size() / 2, abs_r.end());
    const double gate = std::max(3.0 * abs_r[abs_r.size() / 2], 1e-4);
    Vec3 c = Vec3::Zero();
    std::size_t n = 0;
    std::vector<Vec3> moved;
    moved.reserve(pairs.size());
    for (const auto& [q, nrm, r] : pairs) {
      if (std::abs(r) > gate) continue;
      Vec6 j;
      j.head<3>() = q.cross(nrm);
      j.tail<3>() = nrm;
      a += j * j.transpose();
      b -= j * r;
      c += q;
      moved.push_back(q);
      ++n;
    }
    if (n < 6) break;
    if (up && config.up_prior_weight > 0.0) {
      c /= static_cast<double>(n);
      double s = 0.0;
      for (const auto& q : moved) s += (q - c).squaredNorm();
      // Residual u - up with d(u)/d(omega) = -[u]x.
      const Vec3 u = current.rotation * up->source_up;
      Eigen::Matrix<double, 3, 6> j = Eigen::Matrix<double, 3, 6>::Zero();
      j.block<3, 3>(0, 0) << 0.0, u.z(), -u.y(), -u.z(), 0.0, u.x(), u.y(), -u.x(), 0.0;
      const double w = config.up_prior_weight * s;
      a += w * j.transpose() * j;
      b -= w * j.transpose() * (u - up->target_up);
    }
    Eigen::FullPivLU<Mat6> lu(a);
    if (lu.rank() < 6) break;  // sliding direction left free; stop here
    const Vec6 x = lu.solve(b);
    RigidTransform step;
    const double angle = x.head<3>().norm();
    if (angle > 0.0) step.rotation = Eigen::AngleAxisd(angle, x.head<3>() / angle).toRotationMatrix();
    step.translation = x.tail<3>();
    current = compose(step, current);
    current.rotation = Eigen::Quaterniond(current.rotation).normalized().toRotationMatrix();
    if (angle < 1e-10 && x.tail<3>().norm() < 1e-9) break;
  }
  return current;
}

// ---------------------------------------------------------------------------
// Validation gate

enum class CalibrationStatus { kAccepted, kRetryRequested };

inline std::string_view to_string(CalibrationStatus s) {
  return s == CalibrationStatus::kAccepted ? "accepted" : "retry_requested";
}

/// Accepted when the matched mean is within `threshold`, enough of the source
/// matched, and (when recorded) the uncapped mean nearest distance is within
/// `threshold` as well.
inline CalibrationStatus validate(const RegistrationResult& result, double threshold,
                                  double min_matched_fraction = 0.3) {
  const bool ok = std::isfinite(result.mean_matched_distance) && result.mean_matched_distance <= threshold &&
                  result.matched_fraction >= min_matched_fraction &&
                  (!result.mean_nearest_distance || *result.mean_nearest_distance <= threshold);
  return ok ? CalibrationStatus::kAccepted : CalibrationStatus::kRetryRequested;
}

inline CalibrationStatus validate(const RegistrationResult& result, const RegistrationConfig& config) {
  return validate(result, config.validation_threshold_m, config.min_matched_fraction);
}

// ---------------------------------------------------------------------------
// Calibration pipeline

struct PreprocessConfig {
  int median_window = 3;        // 0 disables the filter
  double occlusion_jump_m = 0.05;  // 0 disables the mask
  double downsample_voxel_m = 0.01;
};

struct CalibrationConfig {
  PreprocessConfig preprocess;
  SegmentationConfig segmentation;
  RegistrationConfig registration;
  std::size_t max_attempts = 3;
  /// A point in the scanner model frame from which every modelled surface is
  /// seen from its front side, e.g. where the operator stands. Orients the
  /// model normals; unset leaves normals unoriented on both sides.
  std::optional<Vec3> model_viewpoint = Vec3(0.0, 0.0, 1.5);
};

struct CalibrationOutcome {
  CalibrationStatus status = CalibrationStatus::kRetryRequested;
  RegistrationResult result;
  std::size_t attempts = 0;
  /// Diagnostic for a retry: the error category and message, or the failed gate.
  std::string cause;
  /// Camera -> scanner transform applied to the patient cloud.
  RigidTransform patient_transform;
  /// Mean nearest distance of the moved patient cloud to the patient model;
  /// reported, never gated.
  std::optional<double> patient_residual;
  std::size_t scene_points = 0;
  std::size_t bore_points = 0;
  std::size_t patient_points = 0;
};

/// Filter, back-project and downsample one depth frame.
inline PointCloud preprocess_frame(const DepthFrame& frame, const PreprocessConfig& config) {
  DepthFrame f = config.median_window > 0 ? median_filter(frame, config.median_window) : frame;
  PointCloud cloud;
  if (config.occlusion_jump_m > 0.0) {
    const PixelMask mask = occlusion_mask(f, config.occlusion_jump_m);
    cloud = backproject(f, &mask);
  } else {
    cloud = backproject(f);
  }
  if (config.downsample_voxel_m > 0.0 && !cloud.empty()) cloud = voxel_downsample(cloud, config.downsample_voxel_m);
  return cloud;
}

/// Ranks refined alignments: clearly larger overlap first, then lower mean
/// matched distance.
inline bool better_fit(const RegistrationResult& a, const RegistrationResult& b) {
  constexpr double kFractionMargin = 0.02;
  if (std::abs(a.matched_fraction - b.matched_fraction) > kFractionMargin) {
    return a.matched_fraction > b.matched_fraction;
  }
  return a.mean_matched_distance < b.mean_matched_distance;
}

/// Holds the prepared scanner and patient models and runs calibration
/// attempts against them. The attempt counter persists across calls until
/// reset(), so a caller drives the retry loop by feeding fresh scans.
class Calibrator {
 public:
  /// `model_ground` is the couch plane in the scanner model frame (normal
  /// up). When given, the couch found in the scene is matched to it.
  Calibrator(PointCloud scanner_model, PointCloud patient_model, CalibrationConfig config,
             std::optional<Plane> model_ground = std::nullopt)
      : config_(std::move(config)), model_ground_(model_ground) {
    require(!scanner_model.empty(), ErrorCode::kParameter, "scanner model is empty");
    require(!patient_model.empty(), ErrorCode::kParameter, "patient model is empty");
    config_.registration.validate();
    std::optional<FrameReference> ref;
    if (model_ground_) ref = FrameReference{*model_ground_};
    model_ = prepare_cloud(scanner_model, config_.registration, ref, config_.model_viewpoint);
    patient_tree_ = KdTree(std::move(patient_model));
  }

  const CalibrationConfig& config() const { return config_; }
  std::size_t attempts() const { return attempts_; }
  void reset() { attempts_ = 0; }

  /// One attempt on the most recent frame of the sequence.
  CalibrationOutcome attempt(std::span<const DepthFrame> frames) {
    require(!frames.empty(), ErrorCode::kParameter, "calibration needs at least one frame");
    const auto start = std::chrono::steady_clock::now();
    ++attempts_;
    CalibrationOutcome out;
    out.attempts = attempts_;
    try {
      run(frames.back(), out);
    } catch (const Error& e) {
      out.status = CalibrationStatus::kRetryRequested;
      out.cause = e.what();
    }
    out.result.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
  }

 private:
  void run(const DepthFrame& frame, CalibrationOutcome& out) {
    frame.validate();
    const auto& rc = config_.registration;
    const PointCloud scene = preprocess_frame(frame, config_.preprocess);
    out.scene_points = scene.size();
    require(!scene.empty(), ErrorCode::kSegmentationFailed, "frame has no valid points");
    const SegmentationOutput seg = segment_scene(scene, config_.segmentation);
    out.bore_points = seg.bore.size();
    out.patient_points = seg.patient.size();

    std::optional<FrameReference> scene_ref;
    std::optional<UpPrior> up;
    if (model_ground_) {
      scene_ref = FrameReference{seg.table_plane};
      up = UpPrior{seg.table_plane.normal, model_ground_->normal};
    }
    const std::optional<Vec3> sensor =
        config_.model_viewpoint ? std::optional<Vec3>(config_.segmentation.viewpoint) : std::nullopt;
    const PreparedCloud bore = prepare_cloud(seg.bore, rc, scene_ref, sensor);
    const auto hypotheses = global_hypotheses(bore, model_, rc);
    std::optional<RegistrationResult> best;
    std::optional<IcpDivergedError> last_error;
    for (std::size_t h = 0; h < std::min(rc.refined_hypotheses, hypotheses.size()); ++h) {
      try {
        RegistrationResult r = icp_refine(seg.bore, model_.tree, hypotheses[h].transform, rc, up);
        r.global_inlier_count = hypotheses[h].inlier_count;
        if (!best || better_fit(r, *best)) best = std::move(r);
      } catch (const IcpDivergedError& e) {
        last_error = e;
      }
    }
    if (!best) throw *last_error;
    if (rc.plane_refine_iterations > 0) {
      const RigidTransform t = plane_refine(seg.bore, model_.tree, model_.normals, best->transform, rc, up);
      RegistrationResult refined = match_stats(seg.bore, model_.tree, t, rc.max_correspondence_dist_m);
      // Guard against a refinement that slid off part of the overlap.
      if (refined.matched_fraction + 0.02 >= best->matched_fraction) {
        best->transform = t;
        best->mean_matched_distance = refined.mean_matched_distance;
        best->matched_fraction = refined.matched_fraction;
        best->mean_nearest_distance = refined.mean_nearest_distance;
      }
    }
    const RegistrationResult& res = *best;
    out.result = res;
    out.status = validate(res, rc);
    if (out.status == CalibrationStatus::kRetryRequested) {
      out.cause = "validation: mean matched distance " + std::to_string(res.mean_matched_distance) +
                  " m, matched fraction " + std::to_string(res.matched_fraction) + ", mean nearest distance " +
                  std::to_string(res.mean_nearest_distance.value_or(0.0)) + " m";
      return;
    }
    out.patient_transform = res.transform;
    out.patient_residual = mean_nearest_distance(apply(res.transform, seg.patient), patient_tree_);
  }

  CalibrationConfig config_;
  std::optional<Plane> model_ground_;
  PreparedCloud model_;
  KdTree patient_tree_;
  std::size_t attempts_ = 0;
};

/// Runs attempts until one is accepted or max_attempts is reached. `scan`
/// is called once per attempt with the 1-based attempt number and returns
/// the frames for that attempt.
inline CalibrationOutcome calibrate(Calibrator& calibrator,
                                    const std::function<std::vector<DepthFrame>(std::size_t)>& scan) {
  calibrator.reset();
  CalibrationOutcome out;
  const std::size_t max_attempts = std::max<std::size_t>(1, calibrator.config().max_attempts);
  for (std::size_t a = 1; a <= max_attempts; ++a) {
    const auto frames = scan(a);
    out = calibrator.attempt(frames);
    if (out.status == CalibrationStatus::kAccepted) break;
  }
  return out;
}

/// Single-attempt convenience form.
inline CalibrationOutcome calibrate(std::span<const DepthFrame> frames, const PointCloud& scanner_model,
                                    const PointCloud& patient_model, const CalibrationConfig& config,
                                    std::optional<Plane> model_ground = std::nullopt) {
  require(!frames.empty(), ErrorCode::kParameter, "calibration needs at least one frame");
  Calibrator c(scanner_model, patient_model, config, model_ground);
  return c.attempt(frames);
}

}  // namespace mirage
