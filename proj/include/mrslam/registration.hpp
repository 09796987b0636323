#pragma once

#include <array>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "mrslam/geometry.hpp"
#include "mrslam/point_cloud.hpp"
#include "mrslam/random.hpp"

namespace mrslam {

struct DegenerateGeometry : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct AmbiguousCorrespondence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Normals

/// PCA normals over k nearest neighbors, oriented toward the scan origin.
/// Points whose neighborhood is too sparse or too flat-degenerate get a zero
/// normal; callers skip those.
inline std::vector<Vec3> estimate_normals(const PointCloud& cloud, const KdTree& tree,
                                          int k = 10, const Vec3& view_origin = Vec3::Zero()) {
  std::vector<Vec3> normals(cloud.size(), Vec3::Zero());
  for (size_t i = 0; i < cloud.size(); ++i) {
    const auto hits = tree.knn(cloud[i].vec(), static_cast<size_t>(k));
    if (hits.size() < 5) continue;
    Vec3 mean = Vec3::Zero();
    for (const auto& h : hits) mean += cloud[h.index].vec();
    mean /= static_cast<double>(hits.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& h : hits) {
      const Vec3 d = cloud[h.index].vec() - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    Vec3 n = eig.eigenvectors().col(0);  // smallest eigenvalue direction
    if (n.norm() < 0.5) continue;
    if (n.dot(view_origin - cloud[i].vec()) < 0.0) n = -n;
    normals[i] = n.normalized();
  }
  return normals;
}

// ---------------------------------------------------------------------------
// Euclidean clustering

/// Partition into connected clusters of at least min_size points; two points
/// are connected when a chain of steps no longer than tolerance joins them.
inline std::vector<PointCloud> euclidean_cluster(const PointCloud& cloud, double tolerance,
                                                 int min_size) {
  std::vector<PointCloud> clusters;
  if (cloud.empty()) return clusters;
  const KdTree tree(cloud);
  std::vector<char> visited(cloud.size(), 0);
  for (size_t seed = 0; seed < cloud.size(); ++seed) {
    if (visited[seed]) continue;
    std::vector<uint32_t> members;
    std::deque<uint32_t> queue{static_cast<uint32_t>(seed)};
    visited[seed] = 1;
    while (!queue.empty()) {
      const uint32_t cur = queue.front();
      queue.pop_front();
      members.push_back(cur);
      for (uint32_t nbr : tree.radius(cloud[cur].vec(), tolerance)) {
        if (!visited[nbr]) {
          visited[nbr] = 1;
          queue.push_back(nbr);
        }
      }
    }
    if (static_cast<int>(members.size()) >= min_size) {
      std::sort(members.begin(), members.end());
      PointCloud c;
      c.reserve(members.size());
      for (uint32_t idx : members) c.push_back(cloud[idx]);
      clusters.push_back(std::move(c));
    }
  }
  return clusters;
}

// ---------------------------------------------------------------------------
// Three-point absolute orientation (gate calibration)

struct CalibrationResult {
  Pose transform;       // observed frame -> known frame
  double residual_rms = 0.0;
};

namespace detail {

inline std::array<double, 3> triangle_sides(const std::array<Vec3, 3>& p) {
  return {(p[1] - p[2]).norm(), (p[2] - p[0]).norm(), (p[0] - p[1]).norm()};
}

inline double triangle_area(const std::array<Vec3, 3>& p) {
  return 0.5 * ((p[1] - p[0]).cross(p[2] - p[0])).norm();
}

/// Horn's closed-form rigid fit on matched point sets.
inline Pose rigid_fit(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (const Vec3& p : src) cs += p;
  for (const Vec3& p : dst) cd += p;
  cs /= static_cast<double>(src.size());
  cd /= static_cast<double>(dst.size());
  Mat3 m = Mat3::Zero();
  for (size_t i = 0; i < src.size(); ++i) m += (src[i] - cs) * (dst[i] - cd).transpose();
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  Pose out;
  out.rotation = normalized_wpos(Eigen::Quaterniond(r));
  out.translation = cd - r * cs;
  return out;
}

}  // namespace detail

/// Least-squares rigid transform mapping three observed marker centroids onto
/// the known fiducial positions. Correspondence comes from matching the two
/// triangles' side lengths; near-isoceles layouts are rejected as ambiguous.
inline CalibrationResult align_three_points(const std::array<Vec3, 3>& observed,
                                            const std::array<Vec3, 3>& known) {
  if (detail::triangle_area(observed) <= 1e-6 || detail::triangle_area(known) <= 1e-6)
    throw DegenerateGeometry("collinear marker triplet");
  const auto known_sides = detail::triangle_sides(known);
  for (int i = 0; i < 3; ++i) {
    if (std::abs(known_sides[i] - known_sides[(i + 1) % 3]) < 0.01)
      throw AmbiguousCorrespondence("fiducial triangle is isoceles within 1 cm");
  }
  const auto obs_sides = detail::triangle_sides(observed);
  // assignment sigma: observed i plays the role of known sigma(i); the side
  // opposite a vertex identifies it
  static constexpr int kPerms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                       {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  int best = -1;
  double best_err = std::numeric_limits<double>::infinity();
  for (int p = 0; p < 6; ++p) {
    double err = 0;
    for (int i = 0; i < 3; ++i) {
      const double d = obs_sides[i] - known_sides[kPerms[p][i]];
      err += d * d;
    }
    if (err < best_err) {
      best_err = err;
      best = p;
    }
  }
  if (std::sqrt(best_err / 3.0) > 0.15)
    throw DegenerateGeometry("marker triangles do not match");

  std::vector<Vec3> src(3), dst(3);
  for (int i = 0; i < 3; ++i) {
    src[i] = observed[i];
    dst[i] = known[kPerms[best][i]];
  }
  CalibrationResult result;
  result.transform = detail::rigid_fit(src, dst);
  double sq = 0;
  for (int i = 0; i < 3; ++i) sq += (result.transform.apply(src[i]) - dst[i]).squaredNorm();
  result.residual_rms = std::sqrt(sq / 3.0);
  return result;
}

/// Full gate-calibration step: cluster the reflective returns, take the three
/// cluster centroids, and solve the absolute orientation against the surveyed
/// marker positions. The returned transform maps the robot's sensing frame
/// into the world frame.
inline CalibrationResult calibrate_gate(const PointCloud& marker_returns,
                                        const std::array<Vec3, 3>& known_markers,
                                        double cluster_tolerance = 0.3, int min_cluster = 5) {
  const auto clusters = euclidean_cluster(marker_returns, cluster_tolerance, min_cluster);
  if (clusters.size() != 3)
    throw DegenerateGeometry("expected 3 marker clusters, found " +
                             std::to_string(clusters.size()));
  std::array<Vec3, 3> centroids;
  for (int i = 0; i < 3; ++i) centroids[i] = cloud_centroid(clusters[i]);
  return align_three_points(centroids, known_markers);
}

// ---------------------------------------------------------------------------
// Registration results and parameters

struct RegistrationResult {
  bool success = false;
  Pose transform;               // source -> target
  double fitness_error = 0.0;   // mean |point-to-correspondence residual|, m
  double cumulative_error = 0.0;  // capped sum over correspondences, m
  int inlier_count = 0;
  Mat6 information = Mat6::Zero();  // J^T J of the point-to-plane system
  std::string failure_reason;

  static RegistrationResult failure(std::string reason) {
    RegistrationResult r;
    r.failure_reason = std::move(reason);
    return r;
  }
};

struct AlignmentParams {
  double sac_error_threshold = 32.0;        // capped cumulative error, m
  double sac_normalized_error_threshold = 0.5;  // per-correspondence, m
  int sac_max_iterations = 500;
  double icp_error_threshold = 0.9;         // mean residual, m
  int icp_max_iterations = 200;
  double correspondence_distance = 2.0;     // ICP gating radius, m
  double feature_radius = 1.5;              // descriptor neighborhood, m
  int min_inliers = 12;
  double keypoint_voxel = 0.8;              // keypoint subsampling leaf, m
  double sac_min_sample_separation = 1.5;   // between sampled basis points, m
  double huber_cap = 1.0;                   // per-correspondence error cap, m
  uint64_t seed = 0x5ac1a;                  // sample-consensus draw stream
};

// ---------------------------------------------------------------------------
// Point-to-plane ICP

namespace detail {

struct PlaneTarget {
  KdTree tree;
  std::vector<Vec3> normals;
};

inline PlaneTarget make_plane_target(const PointCloud& target) {
  PlaneTarget t{KdTree(target), {}};
  t.normals = estimate_normals(target, t.tree, 10);
  return t;
}

}  // namespace detail

/// Point-to-plane ICP seeded at init. Iterates nearest-neighbor
/// correspondences and a Gauss-Newton step on the 6-dof increment until the
/// update norm drops below 1e-6. Source points with no target surface inside
/// the correspondence radius count at the error cap, so a registration that
/// only explains part of the scan scores accordingly. Never throws: degenerate
/// inputs come back with the failure flag set.
inline RegistrationResult icp_point_to_plane(const PointCloud& source, const PointCloud& target,
                                             const Pose& init, const AlignmentParams& params) {
  if (source.size() < 50 || target.size() < 50)
    return RegistrationResult::failure("cloud below 50 points");
  const detail::PlaneTarget tgt = detail::make_plane_target(target);

  Pose T = init;
  Mat6 info = Mat6::Zero();
  double cum_err = 0.0;
  int n_corr = 0;
  const double max_d2 = params.correspondence_distance * params.correspondence_distance;

  for (int iter = 0; iter < params.icp_max_iterations; ++iter) {
    Mat6 H = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    double abs_res = 0.0;
    n_corr = 0;
    const Mat3 R = T.rotation.toRotationMatrix();
    for (const Point3& sp : source) {
      const Vec3 rotated = R * sp.vec();
      const Vec3 moved = rotated + T.translation;
      const auto hit = tgt.tree.nearest(moved);
      const Vec3& n = tgt.normals[hit.index];
      if (hit.sq_dist > max_d2 || n.squaredNorm() < 0.5) {
        abs_res += params.huber_cap;
        continue;
      }
      const double r = n.dot(moved - Vec3(target[hit.index].vec()));
      Vec6 J;
      J.head<3>() = rotated.cross(n);
      J.tail<3>() = n;
      H += J * J.transpose();
      g += J * r;
      abs_res += std::min(std::abs(r), params.huber_cap);
      ++n_corr;
    }
    if (n_corr < params.min_inliers) {
      auto fail = RegistrationResult::failure("too few correspondences (" +
                                              std::to_string(n_corr) + ")");
      fail.transform = T;
      fail.inlier_count = n_corr;
      return fail;
    }
    cum_err = abs_res;
    info = H;
    const Vec6 delta = (H + 1e-9 * Mat6::Identity()).ldlt().solve(-g);
    if (!delta.allFinite()) return RegistrationResult::failure("singular normal equations");
    T.rotation = normalized_wpos(so3_exp(delta.head<3>()) * T.rotation);
    T.translation += delta.tail<3>();
    if (delta.norm() < 1e-6) break;
  }

  RegistrationResult out;
  out.success = true;
  out.transform = T;
  out.fitness_error = cum_err / static_cast<double>(source.size());
  out.cumulative_error = cum_err;
  out.inlier_count = n_corr;
  out.information = 0.5 * (info + info.transpose());
  return out;
}

// ---------------------------------------------------------------------------
// FPFH-style descriptors + sample-consensus initial alignment

namespace detail {

constexpr int kFpfhBins = 11;
using Descriptor = Eigen::Matrix<float, 3 * kFpfhBins, 1>;

// Darboux-frame angle triplet histogram of one point against its neighbors.
inline void accumulate_spfh(const Vec3& p, const Vec3& n, const PointCloud& cloud,
                            const std::vector<Vec3>& normals,
                            const std::vector<uint32_t>& nbrs, size_t self,
                            Eigen::Matrix<float, 3 * kFpfhBins, 1>& hist) {
  int used = 0;
  for (uint32_t j : nbrs) {
    if (j == self) continue;
    const Vec3& nq = normals[j];
    if (nq.squaredNorm() < 0.5) continue;
    const Vec3 q = cloud[j].vec();
    Vec3 d = q - p;
    const double dist = d.norm();
    if (dist < 1e-9) continue;
    d /= dist;
    const Vec3& u = n;
    Vec3 v = d.cross(u);
    const double vn = v.norm();
    if (vn < 1e-9) continue;
    v /= vn;
    const Vec3 w = u.cross(v);
    const double alpha = v.dot(nq);                       // [-1,1]
    const double phi = u.dot(d);                          // [-1,1]
    const double theta = std::atan2(w.dot(nq), u.dot(nq));  // [-pi,pi]
    auto bin = [](double x, double lo, double hi) {
      int b = static_cast<int>((x - lo) / (hi - lo) * kFpfhBins);
      return std::clamp(b, 0, kFpfhBins - 1);
    };
    hist[bin(alpha, -1.0, 1.0)] += 1.f;
    hist[kFpfhBins + bin(phi, -1.0, 1.0)] += 1.f;
    hist[2 * kFpfhBins + bin(theta, -M_PI, M_PI)] += 1.f;
    ++used;
  }
  if (used > 0) hist *= 100.f / static_cast<float>(used);
}

struct FeatureCloud {
  PointCloud keypoints;
  std::vector<Descriptor> descriptors;
  bool degenerate = false;
};

/// Keypoints by voxel subsampling; 33-bin normal-relation histograms per
/// keypoint, smoothed over the neighborhood as in FPFH.
inline FeatureCloud compute_features(const PointCloud& cloud, const AlignmentParams& params) {
  FeatureCloud fc;
  const KdTree tree(cloud);
  const std::vector<Vec3> normals = estimate_normals(cloud, tree, 10);

  // SPFH for every point (the smoothing pass needs the neighbors' histograms)
  std::vector<Eigen::Matrix<float, 3 * kFpfhBins, 1>> spfh(cloud.size());
  std::vector<std::vector<uint32_t>> neighborhoods(cloud.size());
  int valid = 0;
  for (size_t i = 0; i < cloud.size(); ++i) {
    spfh[i].setZero();
    if (normals[i].squaredNorm() < 0.5) continue;
    auto nbrs = tree.radius(cloud[i].vec(), params.feature_radius);
    std::sort(nbrs.begin(), nbrs.end());
    if (nbrs.size() > 40) {  // cost cap: stride-sample across the whole disk
      std::vector<uint32_t> sampled;
      sampled.reserve(40);
      const double stride = static_cast<double>(nbrs.size()) / 40.0;
      for (int s = 0; s < 40; ++s)
        sampled.push_back(nbrs[static_cast<size_t>(s * stride)]);
      nbrs = std::move(sampled);
    }
    neighborhoods[i] = std::move(nbrs);
    accumulate_spfh(cloud[i].vec(), normals[i], cloud, normals, neighborhoods[i], i, spfh[i]);
    ++valid;
  }
  if (valid < 3) {
    fc.degenerate = true;
    return fc;
  }

  const PointCloud keys = voxel_downsample(cloud, params.keypoint_voxel);
  fc.keypoints.reserve(keys.size());
  fc.descriptors.reserve(keys.size());
  for (const Point3& kp : keys) {
    const auto hit = tree.nearest(kp.vec());
    const size_t i = hit.index;
    if (normals[i].squaredNorm() < 0.5) continue;
    Descriptor d = spfh[i];
    double wsum = 0;
    Descriptor acc = Descriptor::Zero();
    for (uint32_t j : neighborhoods[i]) {
      if (j == i) continue;
      const double dist = (cloud[j].vec() - cloud[i].vec()).norm();
      if (dist < 1e-9) continue;
      const double w = 1.0 / dist;
      acc += static_cast<float>(w) * spfh[j];
      wsum += w;
    }
    if (wsum > 0) d += acc / static_cast<float>(wsum);
    fc.keypoints.push_back(cloud[i]);
    fc.descriptors.push_back(d);
  }
  if (fc.keypoints.size() < 3) fc.degenerate = true;
  return fc;
}

}  // namespace detail

/// Sample-consensus initial alignment over FPFH-style correspondences.
/// Proposes rigid transforms from 3-point draws and keeps the one with the
/// lowest capped cumulative correspondence error; the failure flag is set
/// when even the best proposal scores above the configured thresholds or has
/// too few inliers.
inline RegistrationResult initial_alignment(const PointCloud& source, const PointCloud& target,
                                            const AlignmentParams& params) {
  if (source.size() < 200 || target.size() < 200)
    return RegistrationResult::failure("cloud below 200 points");
  const detail::FeatureCloud src = detail::compute_features(source, params);
  const detail::FeatureCloud dst = detail::compute_features(target, params);
  if (src.degenerate || dst.degenerate)
    return RegistrationResult::failure("degenerate normals, no descriptors");

  // Mutual nearest-descriptor correspondences with a ratio test. Keypoints on
  // self-similar surfaces (flat walls, straight tunnel) have near-identical
  // descriptors; their matches are ambiguous and are dropped here, which is
  // what starves degenerate candidate pairs of inliers.
  const float ratio2 = 0.75f * 0.75f;
  std::vector<int64_t> fwd(src.keypoints.size(), -1);
  for (size_t i = 0; i < src.keypoints.size(); ++i) {
    float best = std::numeric_limits<float>::max();
    float second = best;
    uint32_t arg = 0;
    for (size_t j = 0; j < dst.keypoints.size(); ++j) {
      const float d = (src.descriptors[i] - dst.descriptors[j]).squaredNorm();
      if (d < best) {
        second = best;
        best = d;
        arg = static_cast<uint32_t>(j);
      } else if (d < second) {
        second = d;
      }
    }
    if (best <= ratio2 * second) fwd[i] = arg;
  }
  std::vector<int64_t> bwd(dst.keypoints.size(), -1);
  for (size_t j = 0; j < dst.keypoints.size(); ++j) {
    float best = std::numeric_limits<float>::max();
    for (size_t i = 0; i < src.keypoints.size(); ++i) {
      const float d = (src.descriptors[i] - dst.descriptors[j]).squaredNorm();
      if (d < best) {
        best = d;
        bwd[j] = static_cast<int64_t>(i);
      }
    }
  }
  std::vector<std::pair<uint32_t, uint32_t>> corr;
  for (size_t i = 0; i < fwd.size(); ++i) {
    if (fwd[i] >= 0 && bwd[fwd[i]] == static_cast<int64_t>(i))
      corr.emplace_back(static_cast<uint32_t>(i), static_cast<uint32_t>(fwd[i]));
  }
  if (corr.size() < static_cast<size_t>(std::max(params.min_inliers, 3)))
    return RegistrationResult::failure("too few mutual correspondences (" +
                                       std::to_string(corr.size()) + ")");

  const size_t n = corr.size();
  Rng rng(params.seed);
  double best_err = std::numeric_limits<double>::infinity();
  Pose best_T;
  const double sep2 = params.sac_min_sample_separation * params.sac_min_sample_separation;
  for (int iter = 0; iter < params.sac_max_iterations; ++iter) {
    const size_t a = rng.uniform_index(n);
    const size_t b = rng.uniform_index(n);
    const size_t c = rng.uniform_index(n);
    if (a == b || b == c || a == c) continue;
    const Vec3 pa = src.keypoints[corr[a].first].vec(), pb = src.keypoints[corr[b].first].vec(),
               pc = src.keypoints[corr[c].first].vec();
    if ((pa - pb).squaredNorm() < sep2 || (pb - pc).squaredNorm() < sep2 ||
        (pa - pc).squaredNorm() < sep2)
      continue;
    const std::vector<Vec3> s{pa, pb, pc};
    const std::vector<Vec3> d{dst.keypoints[corr[a].second].vec(),
                              dst.keypoints[corr[b].second].vec(),
                              dst.keypoints[corr[c].second].vec()};
    if (detail::triangle_area({d[0], d[1], d[2]}) < 1e-6) continue;
    const Pose T = detail::rigid_fit(s, d);
    double err = 0;
    for (const auto& [si, di] : corr) {
      const double dist = (T.apply(src.keypoints[si].vec()) - dst.keypoints[di].vec()).norm();
      err += std::min(dist, params.huber_cap);
      if (err >= best_err) break;
    }
    if (err < best_err) {
      best_err = err;
      best_T = T;
    }
  }
  if (!std::isfinite(best_err)) return RegistrationResult::failure("no valid consensus sample");

  int inliers = 0;
  for (const auto& [si, di] : corr) {
    const double dist = (best_T.apply(src.keypoints[si].vec()) - dst.keypoints[di].vec()).norm();
    if (dist < params.huber_cap) ++inliers;
  }
  RegistrationResult out;
  out.transform = best_T;
  out.cumulative_error = best_err;
  out.fitness_error = best_err / static_cast<double>(n);
  out.inlier_count = inliers;
  out.success = best_err <= params.sac_error_threshold &&
                out.fitness_error <= params.sac_normalized_error_threshold &&
                inliers >= params.min_inliers;
  if (!out.success) out.failure_reason = "consensus alignment above error threshold";
  return out;
}

// ---------------------------------------------------------------------------
// Observability

/// Conditioning of the self-registration information matrix, in [0, 1].
/// Near zero for geometrically degenerate scans (plane, featureless tunnel),
/// larger for feature-rich scenes. Invariant under rigid motion of the cloud.
inline double observability_score(const PointCloud& cloud) {
  if (cloud.size() < 50) return 0.0;
  const KdTree tree(cloud);
  const std::vector<Vec3> normals = estimate_normals(cloud, tree, 10);
  const Vec3 centroid = cloud_centroid(cloud);
  double r2_sum = 0.0;
  int valid = 0;
  Mat6 H = Mat6::Zero();
  for (size_t i = 0; i < cloud.size(); ++i) {
    if (normals[i].squaredNorm() < 0.5) continue;
    const Vec3 p = cloud[i].vec() - centroid;
    Vec6 J;
    J.head<3>() = p.cross(normals[i]);
    J.tail<3>() = normals[i];
    H += J * J.transpose();
    r2_sum += p.squaredNorm();
    ++valid;
  }
  if (valid < 50) return 0.0;
  const double radius = std::sqrt(r2_sum / valid);
  if (radius < 1e-9) return 0.0;
  H /= static_cast<double>(valid);
  // bring rotation rows/cols to the translation scale
  Mat6 S = Mat6::Identity();
  S.diagonal().head<3>().setConstant(1.0 / radius);
  H = S * H * S;
  Eigen::SelfAdjointEigenSolver<Mat6> eig(H);
  const double lmax = eig.eigenvalues().maxCoeff();
  if (lmax <= 0.0) return 0.0;
  return std::max(0.0, eig.eigenvalues().minCoeff()) / lmax;
}

}  // namespace mrslam
