#pragma once

#include <string>
#include <vector>

#include "mrslam/pose_graph.hpp"
#include "mrslam/registration.hpp"

namespace mrslam {

struct OdometrySample {
  double timestamp = 0;  // seconds
  Pose pose;             // odometry frame (or world frame once calibrated)
};

struct ScanFrame {
  double timestamp = 0;
  std::vector<PointCloud> clouds;  // one per lidar
};

struct KeyingConfig {
  double translation_threshold = 2.0;  // meters
  double rotation_threshold = 30.0;    // degrees
  int target_point_count = 5000;
};

/// Motion-threshold keying rule: a new key node is due once the relative
/// motion since the last key reaches either threshold. The comparisons leave
/// a hair of slack so a displacement that equals the threshold in exact
/// arithmetic still fires after rounding.
inline bool should_create_key(const Pose& last_key_pose, const Pose& current,
                              const KeyingConfig& cfg) {
  const Pose rel = se3_between(last_key_pose, current);
  return rel.translation.norm() >= cfg.translation_threshold - 1e-12 ||
         rotation_geodesic_deg(last_key_pose, current) >= cfg.rotation_threshold - 1e-9;
}

/// Voxel filter whose leaf size is found by bisection so the output lands
/// within 5% of the target count regardless of input density. Inputs already
/// at or under the target pass through unchanged.
inline PointCloud adaptive_voxelize(const PointCloud& cloud, int target_count) {
  if (static_cast<int>(cloud.size()) <= target_count) return cloud;
  const double tol = 0.05 * target_count;
  double lo = 0.01, hi = 10.0;
  PointCloud best;
  double best_gap = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 32; ++iter) {
    const double leaf = 0.5 * (lo + hi);
    PointCloud out = voxel_downsample(cloud, leaf);
    const bool too_many = static_cast<int>(out.size()) > target_count;
    const double gap = std::abs(static_cast<double>(out.size()) - target_count);
    if (gap < best_gap) {
      best_gap = gap;
      best = std::move(out);
    }
    if (best_gap <= tol) break;
    if (too_many) {
      lo = leaf;  // too many points: grow the leaf
    } else {
      hi = leaf;
    }
  }
  return best;
}

/// Concatenation of per-lidar clouds brought into the body frame by their
/// extrinsics.
inline PointCloud merge_clouds(const std::vector<PointCloud>& clouds,
                               const std::vector<Pose>& extrinsics) {
  if (clouds.size() != extrinsics.size())
    throw std::invalid_argument("merge_clouds: clouds/extrinsics length mismatch");
  PointCloud out;
  size_t total = 0;
  for (const PointCloud& c : clouds) total += c.size();
  out.reserve(total);
  for (size_t i = 0; i < clouds.size(); ++i) {
    const PointCloud moved = transform_cloud(clouds[i], extrinsics[i]);
    out.insert(out.end(), moved.begin(), moved.end());
  }
  return out;
}

struct FrontendOutput {
  PoseGraph segment;                 // nodes + odometry edges (+ prior)
  std::vector<KeyedScan> scans;      // one per created key
  std::vector<double> key_times;     // sample timestamp per key, by index
  int skipped_keys = 0;              // keys dropped for lack of a nearby scan
};

struct FrontendConfig {
  KeyingConfig keying;
  uint16_t robot = 0;
  double scan_window = 0.1;  // max |scan time - key time|, seconds
  Mat6 odometry_information = [] {
    Mat6 m = Mat6::Zero();
    m.diagonal().head<3>().setConstant(25.0);   // sigma_rot ~ 0.2 rad
    m.diagonal().tail<3>().setConstant(100.0);  // sigma_t ~ 0.1 m
    return m;
  }();
  Mat6 prior_information = [] {
    Mat6 m = Mat6::Zero();
    m.diagonal().head<3>().setConstant(3000.0);
    m.diagonal().tail<3>().setConstant(400.0);
    return m;
  }();
  bool add_prior = true;
};

/// Runs the keying front-end over time-ordered odometry and scan streams:
/// a key at stream start and whenever the motion threshold fires, an odometry
/// edge between consecutive keys, and a merged+voxelized keyed scan per key.
/// Keys with no scan within the association window are skipped and counted.
inline FrontendOutput run_frontend(const std::vector<OdometrySample>& odometry,
                                   const std::vector<ScanFrame>& scans,
                                   const std::vector<Pose>& extrinsics,
                                   const FrontendConfig& cfg) {
  FrontendOutput out;
  if (odometry.empty()) return out;
  for (size_t i = 1; i < odometry.size(); ++i) {
    if (odometry[i].timestamp <= odometry[i - 1].timestamp)
      throw std::invalid_argument("odometry timestamps must be strictly increasing");
  }

  // nearest scan frame per query time, scanning forward monotonically
  size_t scan_cursor = 0;
  auto nearest_scan = [&](double t) -> const ScanFrame* {
    while (scan_cursor + 1 < scans.size() &&
           std::abs(scans[scan_cursor + 1].timestamp - t) <=
               std::abs(scans[scan_cursor].timestamp - t)) {
      ++scan_cursor;
    }
    if (scans.empty() || std::abs(scans[scan_cursor].timestamp - t) > cfg.scan_window)
      return nullptr;
    return &scans[scan_cursor];
  };

  double arc_length = 0;
  bool have_key = false;
  Pose last_key_pose;
  uint32_t next_index = 0;

  auto try_key = [&](const OdometrySample& sample) {
    const ScanFrame* frame = nearest_scan(sample.timestamp);
    if (frame == nullptr) {
      ++out.skipped_keys;
      return;
    }
    const NodeKey key{cfg.robot, next_index};
    GraphNode node;
    node.key = key;
    node.pose = sample.pose;
    node.odometric_distance = arc_length;
    out.segment.add_node(node);
    out.key_times.push_back(sample.timestamp);
    KeyedScan keyed;
    keyed.key = key;
    keyed.cloud = adaptive_voxelize(merge_clouds(frame->clouds, extrinsics),
                                    cfg.keying.target_point_count);
    out.scans.push_back(std::move(keyed));
    if (next_index == 0 && cfg.add_prior) {
      GraphEdge prior;
      prior.kind = EdgeKind::Prior;
      prior.from = prior.to = key;
      prior.measurement = sample.pose;
      prior.information = cfg.prior_information;
      out.segment.add_edge(prior);
    }
    if (next_index > 0) {
      GraphEdge e;
      e.kind = EdgeKind::Odometry;
      e.from = NodeKey{cfg.robot, next_index - 1};
      e.to = key;
      e.measurement = se3_between(last_key_pose, sample.pose);
      e.information = cfg.odometry_information;
      out.segment.add_edge(e);
    }
    last_key_pose = sample.pose;
    have_key = true;
    ++next_index;
  };

  for (size_t i = 0; i < odometry.size(); ++i) {
    if (i > 0) {
      arc_length += (odometry[i].pose.translation - odometry[i - 1].pose.translation).norm();
    }
    if (!have_key) {
      try_key(odometry[i]);  // key at stream start (first sample with a scan)
    } else if (should_create_key(last_key_pose, odometry[i].pose, cfg.keying)) {
      try_key(odometry[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Replay files: odometry CSV `t,tx,ty,tz,qw,qx,qy,qz`, scans `<t_ns>.kscn`.

inline std::string serialize_odometry(const std::vector<OdometrySample>& samples) {
  std::string out = "t,tx,ty,tz,qw,qx,qy,qz\n";
  char buf[64];
  for (const OdometrySample& s : samples) {
    std::snprintf(buf, sizeof(buf), "%.9f", s.timestamp);
    out += buf;
    const double vals[7] = {s.pose.translation.x(), s.pose.translation.y(),
                            s.pose.translation.z(), s.pose.rotation.w(),
                            s.pose.rotation.x(),    s.pose.rotation.y(),
                            s.pose.rotation.z()};
    for (double v : vals) {
      std::snprintf(buf, sizeof(buf), ",%.17g", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline std::vector<OdometrySample> parse_odometry(const std::string& text) {
  std::vector<OdometrySample> out;
  std::istringstream stream(text);
  std::string line;
  while (std::getline(stream, line)) {
    if (line.empty() || line[0] == 't') continue;
    std::istringstream in(line);
    OdometrySample s;
    char comma;
    double v[7];
    in >> s.timestamp;
    for (double& x : v) in >> comma >> x;
    if (!in) throw std::invalid_argument("bad odometry row: " + line);
    s.pose.translation = Vec3(v[0], v[1], v[2]);
    s.pose.rotation = Eigen::Quaterniond(v[3], v[4], v[5], v[6]);
    if (s.pose.rotation.w() < 0) s.pose.rotation.coeffs() = -s.pose.rotation.coeffs();
    out.push_back(s);
  }
  return out;
}

}  // namespace mrslam
