#pragma once

#include <map>
#include <optional>
#include <vector>

#include "mrslam/optimizer.hpp"
#include "mrslam/point_cloud.hpp"
#include "mrslam/pose_graph.hpp"

namespace mrslam {

/// Absolute trajectory error: RMSE of translation over the keys both
/// trajectories share. No alignment is applied; estimates and ground truth
/// live in the common calibrated frame.
inline double ate(const PoseMap& estimated, const PoseMap& ground_truth) {
  double sq_sum = 0;
  size_t n = 0;
  for (const auto& [key, est] : estimated) {
    auto it = ground_truth.find(key);
    if (it == ground_truth.end()) continue;
    sq_sum += (est.translation - it->second.translation).squaredNorm();
    ++n;
  }
  if (n == 0) throw GraphError("ate: trajectories share no keys");
  return std::sqrt(sq_sum / static_cast<double>(n));
}

/// Least-squares rigid alignment of the estimate onto the ground truth over
/// shared keys (optional sanity-run mode; off in the standard evaluation).
inline PoseMap align_trajectory(const PoseMap& estimated, const PoseMap& ground_truth);

struct StageCounts {
  int generated = 0;
  int verified = 0;  // passed two-stage registration
  int inliers = 0;   // survived outlier rejection
};

struct LoopMetrics {
  std::optional<double> recall_pct;
  std::optional<double> false_positive_pct;
  std::optional<double> mean_translation_error_m;
  std::optional<double> mean_rotation_error_deg;
  StageCounts counts;
};

struct LabeledLoopResult {
  NodeKey a, b;
  bool accepted = false;
  bool label_true = false;         // candidate is a genuine revisit
  Pose measured;                    // only meaningful when accepted
  std::optional<Pose> gt_relative;  // ground-truth relative pose a->b
};

/// Recall / false-positive rate over labeled registration outcomes, plus the
/// pose error of the accepted genuine loops against ground truth. Zero
/// denominators leave the metric unset rather than zero.
inline LoopMetrics loop_metrics(const std::vector<LabeledLoopResult>& results) {
  LoopMetrics m;
  int true_total = 0, true_accepted = 0, false_total = 0, false_accepted = 0;
  double terr = 0, rerr = 0;
  int err_n = 0;
  for (const auto& r : results) {
    if (r.label_true) {
      ++true_total;
      if (r.accepted) {
        ++true_accepted;
        if (r.gt_relative) {
          terr += (r.measured.translation - r.gt_relative->translation).norm();
          rerr += rotation_geodesic_deg(r.measured, *r.gt_relative);
          ++err_n;
        }
      }
    } else {
      ++false_total;
      if (r.accepted) ++false_accepted;
    }
  }
  if (true_total > 0) m.recall_pct = 100.0 * true_accepted / true_total;
  if (false_total > 0) m.false_positive_pct = 100.0 * false_accepted / false_total;
  if (err_n > 0) {
    m.mean_translation_error_m = terr / err_n;
    m.mean_rotation_error_deg = rerr / err_n;
  }
  return m;
}

struct MapErrorSummary {
  double mean = 0;
  double max = 0;
  std::vector<int> histogram;  // fixed bins [0, bin_width) ... plus overflow
  double bin_width = 0.1;
  std::vector<float> per_point;  // optional export, parallel to the estimate
};

/// Cloud-to-cloud error: for each estimated point, the distance to the
/// nearest ground-truth point.
inline MapErrorSummary map_error(const PointCloud& estimated, const PointCloud& ground_truth,
                                 int bins = 20, double bin_width = 0.1,
                                 bool keep_per_point = false) {
  if (estimated.empty() || ground_truth.empty())
    throw GraphError("map_error: empty cloud");
  MapErrorSummary out;
  out.bin_width = bin_width;
  out.histogram.assign(bins + 1, 0);
  const KdTree tree(ground_truth);
  double sum = 0;
  for (const Point3& p : estimated) {
    const double d = std::sqrt(tree.nearest(p.vec()).sq_dist);
    sum += d;
    out.max = std::max(out.max, d);
    const int b = std::min(static_cast<int>(d / bin_width), bins);
    out.histogram[b] += 1;
    if (keep_per_point) out.per_point.push_back(static_cast<float>(d));
  }
  out.mean = sum / static_cast<double>(estimated.size());
  return out;
}

namespace detail {

inline Vec3 pose_map_centroid(const PoseMap& poses, const std::vector<NodeKey>& keys) {
  Vec3 c = Vec3::Zero();
  for (const NodeKey& k : keys) c += poses.at(k).translation;
  return c / static_cast<double>(keys.size());
}

}  // namespace detail

inline PoseMap align_trajectory(const PoseMap& estimated, const PoseMap& ground_truth) {
  std::vector<NodeKey> shared;
  for (const auto& [key, est] : estimated)
    if (ground_truth.count(key)) shared.push_back(key);
  if (shared.size() < 3) throw GraphError("align_trajectory: need at least 3 shared keys");
  const Vec3 ce = detail::pose_map_centroid(estimated, shared);
  const Vec3 cg = detail::pose_map_centroid(ground_truth, shared);
  Mat3 m = Mat3::Zero();
  for (const NodeKey& k : shared)
    m += (estimated.at(k).translation - ce) * (ground_truth.at(k).translation - cg).transpose();
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  Pose T;
  T.rotation = normalized_wpos(Eigen::Quaterniond(svd.matrixV() * d * svd.matrixU().transpose()));
  T.translation = cg - T.rotation * ce;
  PoseMap out;
  for (const auto& [key, p] : estimated) out[key] = se3_compose(T, p);
  return out;
}

}  // namespace mrslam
