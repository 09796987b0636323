#pragma once

#include <array>
#include <string>
#include <vector>

#include "mrslam/frontend.hpp"
#include "mrslam/graph_io.hpp"
#include "mrslam/pose_graph.hpp"
#include "mrslam/random.hpp"

namespace mrslam {

struct Box {
  Vec3 lo, hi;

  bool contains(const Vec3& p, double margin = 0.0) const {
    return p.x() >= lo.x() - margin && p.x() <= hi.x() + margin && p.y() >= lo.y() - margin &&
           p.y() <= hi.y() + margin && p.z() >= lo.z() - margin && p.z() <= hi.z() + margin;
  }
};

/// Axis-aligned corridor segments whose union is the free space, plus the
/// three fiducial markers of the calibration gate.
struct World {
  std::vector<Box> corridors;
  std::array<Vec3, 3> gate_markers;

  bool contains(const Vec3& p, double margin = 0.0) const {
    for (const Box& b : corridors)
      if (b.contains(p, margin)) return true;
    return false;
  }
};

struct SimConfig {
  uint64_t seed = 1;
  int robots = 2;
  double odom_sigma_t = 0.02;    // translation noise, m per sqrt(m) traveled
  double odom_sigma_r = 0.002;   // rotation noise, rad per sqrt(m) traveled
  double range_sigma = 0.05;     // lidar range noise, m
  int scan_azimuths = 72;
  int scan_rings = 16;
  double scan_elevation_span = 40.0 * M_PI / 180.0;  // +/- radians
  double max_range = 40.0;
  double speed = 1.0;           // m/s along the route
  double sample_dt = 0.125;     // odometry/scan period, s
  double turn_rate = 45.0;      // in-place turning, deg/s
  double sensor_height = 1.0;   // sensor z above corridor floor
  int outlier_loop_count = 0;
  double outlier_translation = 10.0;  // minimum injected offset, m
  double outlier_rotation_deg = 90.0;
  double marker_sigma = 0.01;   // gate observation noise, m
};

enum class Preset { Tunnel, UrbanLike, Ku, AliasingStress };

inline const char* preset_name(Preset p) {
  switch (p) {
    case Preset::Tunnel: return "tunnel";
    case Preset::UrbanLike: return "urban-like";
    case Preset::Ku: return "ku";
    case Preset::AliasingStress: return "aliasing-stress";
  }
  return "?";
}

inline std::optional<Preset> preset_from_name(const std::string& name) {
  for (Preset p : {Preset::Tunnel, Preset::UrbanLike, Preset::Ku, Preset::AliasingStress})
    if (name == preset_name(p)) return p;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Worlds and routes

namespace detail {

inline Box corridor_x(double x0, double x1, double y, double width, double height) {
  return Box{Vec3(x0 - width / 2, y - width / 2, 0), Vec3(x1 + width / 2, y + width / 2, height)};
}

inline Box corridor_y(double y0, double y1, double x, double width, double height) {
  return Box{Vec3(x - width / 2, y0 - width / 2, 0), Vec3(x + width / 2, y1 + width / 2, height)};
}

inline std::array<Vec3, 3> gate_at(const Vec3& base, const Vec3& along, const Vec3& up) {
  // side lengths pairwise distinct (2.01 / 1.84 / 1.79 m)
  return {base - 1.0 * along + 0.4 * up, base + 1.0 * along + 0.6 * up,
          base - 0.2 * along + 2.0 * up};
}

}  // namespace detail

/// Deterministic world geometry for a preset. Every preset contains at least
/// one cycle of corridors and a region visited by more than one robot.
inline World generate_world(Preset preset) {
  World w;
  using detail::corridor_x;
  using detail::corridor_y;
  switch (preset) {
    case Preset::Tunnel: {
      // 60x40 m rectangular circuit of narrow featureless tunnels
      const double width = 3.0, height = 3.0;
      w.corridors.push_back(corridor_x(0, 60, 0, width, height));
      w.corridors.push_back(corridor_x(0, 60, 40, width, height));
      w.corridors.push_back(corridor_y(0, 40, 0, width, height));
      w.corridors.push_back(corridor_y(0, 40, 60, width, height));
      w.gate_markers = detail::gate_at(Vec3(0, -1.45, 0), Vec3::UnitX(), Vec3::UnitZ());
      break;
    }
    case Preset::UrbanLike: {
      // two parallel narrow corridors joined at both ends, rooms off to the side
      const double width = 2.5, height = 2.6;
      w.corridors.push_back(corridor_x(0, 36, 0, width, height));
      w.corridors.push_back(corridor_x(0, 36, 20, width, height));
      w.corridors.push_back(corridor_y(0, 20, 0, width, height));
      w.corridors.push_back(corridor_y(0, 20, 36, width, height));
      w.corridors.push_back(Box{Vec3(8, 1.0, 0), Vec3(16, 9, height)});    // room A
      w.corridors.push_back(Box{Vec3(22, 11, 0), Vec3(30, 19, height)});   // room B
      w.gate_markers = detail::gate_at(Vec3(0, -1.2, 0), Vec3::UnitX(), Vec3::UnitZ());
      break;
    }
    case Preset::Ku: {
      // wide-tunnel grid (15 m corridors) with a crossing corridor
      const double width = 15.0, height = 6.0;
      w.corridors.push_back(corridor_x(0, 120, 0, width, height));
      w.corridors.push_back(corridor_x(0, 120, 80, width, height));
      w.corridors.push_back(corridor_y(0, 80, 0, width, height));
      w.corridors.push_back(corridor_y(0, 80, 120, width, height));
      w.corridors.push_back(corridor_y(0, 80, 60, width, height));
      w.gate_markers = detail::gate_at(Vec3(0, -7.4, 0), Vec3::UnitX(), Vec3::UnitZ());
      break;
    }
    case Preset::AliasingStress: {
      // two geometrically identical corridors far apart, joined at one end
      const double width = 3.0, height = 3.0;
      w.corridors.push_back(corridor_x(0, 60, 0, width, height));
      w.corridors.push_back(corridor_x(0, 60, 200, width, height));
      w.corridors.push_back(corridor_y(0, 200, -9, width, height));
      w.corridors.push_back(corridor_x(-9, 0, 0, width, height));
      w.corridors.push_back(corridor_x(-9, 0, 200, width, height));
      w.gate_markers = detail::gate_at(Vec3(0, -1.45, 0), Vec3::UnitX(), Vec3::UnitZ());
      break;
    }
  }
  return w;
}

/// Waypoint routes (sensor-height polylines), one per robot.
inline std::vector<std::vector<Vec3>> preset_routes(Preset preset, int robots,
                                                    double sensor_height) {
  const double h = sensor_height;
  std::vector<std::vector<Vec3>> routes;
  switch (preset) {
    case Preset::Tunnel:
      routes.push_back({{0, 0, h}, {60, 0, h}, {60, 40, h}, {0, 40, h}, {0, 0, h}});
      routes.push_back({{2, 0, h}, {0, 0, h}, {0, 40, h}, {60, 40, h}, {60, 0, h}, {2, 0, h}});
      break;
    case Preset::UrbanLike:
      routes.push_back({{0, 0, h}, {36, 0, h}, {36, 20, h}, {0, 20, h}, {0, 0, h}});
      routes.push_back({{2, 0, h}, {0, 0, h}, {0, 20, h}, {36, 20, h}, {36, 0, h}, {2, 0, h}});
      break;
    case Preset::Ku:
      routes.push_back({{0, 0, h}, {60, 0, h}, {60, 80, h}, {0, 80, h}, {0, 0, h}});
      routes.push_back({{4, 0, h}, {120, 0, h}, {120, 80, h}, {60, 80, h}, {60, 0, h}});
      break;
    case Preset::AliasingStress:
      routes.push_back({{0, 0, h}, {57, 0, h}, {1, 0, h}});
      routes.push_back({{0, 200, h}, {57, 200, h}, {1, 200, h}});
      break;
  }
  while (static_cast<int>(routes.size()) > robots) routes.pop_back();
  while (static_cast<int>(routes.size()) < robots) routes.push_back(routes.back());
  return routes;
}

// ---------------------------------------------------------------------------
// Ray casting

/// Distance from an interior point to the boundary of the corridor union
/// along dir, or nullopt when the origin lies outside every corridor.
inline std::optional<double> raycast(const World& world, const Vec3& origin, const Vec3& dir) {
  std::vector<std::pair<double, double>> spans;
  for (const Box& b : world.corridors) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(dir[a]) < 1e-12) {
        if (origin[a] < b.lo[a] || origin[a] > b.hi[a]) miss = true;
        continue;
      }
      double ta = (b.lo[a] - origin[a]) / dir[a];
      double tb = (b.hi[a] - origin[a]) / dir[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) miss = true;
    }
    if (!miss && t1 > 0) spans.emplace_back(t0, t1);
  }
  std::sort(spans.begin(), spans.end());
  double end = 0;
  bool inside = false;
  for (const auto& [t0, t1] : spans) {
    if (t0 <= end + 1e-9) {
      if (t0 <= 1e-9) inside = true;
      end = std::max(end, t1);
    } else {
      break;
    }
  }
  if (!inside) return std::nullopt;
  return end;
}

// ---------------------------------------------------------------------------
// Robot simulation

struct SimulatedRobot {
  uint16_t robot = 0;
  Pose start_pose;                        // world frame, at route start
  std::vector<OdometrySample> ground_truth;  // world frame
  std::vector<OdometrySample> odometry;      // odometry frame, noisy
  std::vector<ScanFrame> scans;              // body frame
  PointCloud gate_observation;               // marker returns, body frame
};

namespace detail {

inline Pose heading_pose(const Vec3& pos, double yaw) {
  Pose p;
  p.rotation = normalized_wpos(Eigen::Quaterniond(Eigen::AngleAxisd(yaw, Vec3::UnitZ())));
  p.translation = pos;
  return p;
}

inline double wrap_angle(double a) {
  while (a > M_PI) a -= 2 * M_PI;
  while (a < -M_PI) a += 2 * M_PI;
  return a;
}

/// Ground-truth poses along a polyline: straight segments at cruise speed,
/// in-place turns at the waypoints.
inline std::vector<Pose> sample_route(const std::vector<Vec3>& route, const SimConfig& cfg) {
  std::vector<Pose> poses;
  if (route.size() < 2) return poses;
  double yaw = std::atan2(route[1].y() - route[0].y(), route[1].x() - route[0].x());
  poses.push_back(heading_pose(route[0], yaw));
  const double step = cfg.speed * cfg.sample_dt;
  const double turn_step = cfg.turn_rate * M_PI / 180.0 * cfg.sample_dt;
  for (size_t leg = 0; leg + 1 < route.size(); ++leg) {
    const Vec3 a = route[leg], b = route[leg + 1];
    const double target_yaw = std::atan2(b.y() - a.y(), b.x() - a.x());
    // rotate in place toward the leg heading
    double diff = wrap_angle(target_yaw - yaw);
    while (std::abs(diff) > 1e-9) {
      const double d = std::clamp(diff, -turn_step, turn_step);
      yaw = wrap_angle(yaw + d);
      poses.push_back(heading_pose(a, yaw));
      diff = wrap_angle(target_yaw - yaw);
    }
    // walk the leg
    const double len = (b - a).norm();
    const Vec3 dir = (b - a) / len;
    for (double s = step; s < len - 1e-9; s += step) {
      poses.push_back(heading_pose(a + s * dir, yaw));
    }
    poses.push_back(heading_pose(b, yaw));
  }
  return poses;
}

inline PointCloud cast_scan(const World& world, const Pose& sensor, const SimConfig& cfg,
                            Rng& rng) {
  PointCloud cloud;
  cloud.reserve(static_cast<size_t>(cfg.scan_azimuths) * cfg.scan_rings);
  const Mat3 R = sensor.rotation.toRotationMatrix();
  for (int ring = 0; ring < cfg.scan_rings; ++ring) {
    const double el = cfg.scan_rings == 1
                          ? 0.0
                          : -cfg.scan_elevation_span +
                                2 * cfg.scan_elevation_span * ring / (cfg.scan_rings - 1);
    for (int az = 0; az < cfg.scan_azimuths; ++az) {
      const double a = 2 * M_PI * az / cfg.scan_azimuths;
      const Vec3 d_body(std::cos(el) * std::cos(a), std::cos(el) * std::sin(a), std::sin(el));
      const auto hit = raycast(world, sensor.translation, R * d_body);
      const double noise = rng.gaussian(cfg.range_sigma);
      if (!hit) continue;
      const double range = *hit + noise;
      if (range <= 0.1 || *hit > cfg.max_range) continue;
      cloud.push_back(to_point(range * d_body));
    }
  }
  return cloud;
}

}  // namespace detail

/// Simulates one robot along its route: ground truth, odometry corrupted by a
/// distance-scaled random walk, body-frame lidar scans, and the gate
/// observation taken at the start pose. Deterministic for a fixed seed.
inline SimulatedRobot simulate_robot(const World& world, const std::vector<Vec3>& route,
                                     const SimConfig& cfg, uint16_t robot) {
  for (const Vec3& wp : route) {
    if (!world.contains(wp, -0.1))
      throw std::invalid_argument("route waypoint outside world: robot " +
                                  std::to_string(robot));
  }
  SimulatedRobot out;
  out.robot = robot;
  Rng rng(derive_seed(cfg.seed, 0x0b0700ULL + robot));

  const std::vector<Pose> gt = detail::sample_route(route, cfg);
  out.start_pose = gt.empty() ? Pose{} : gt.front();

  Pose odom;  // odometry frame starts at identity
  for (size_t i = 0; i < gt.size(); ++i) {
    const double t = static_cast<double>(i) * cfg.sample_dt;
    out.ground_truth.push_back(OdometrySample{t, gt[i]});
    if (i > 0) {
      const Pose rel = se3_between(gt[i - 1], gt[i]);
      const double dist = rel.translation.norm();
      Twist noise = Twist::Zero();
      if (dist > 1e-12) {
        const double scale = std::sqrt(dist);
        for (int k = 0; k < 3; ++k) noise(k) = rng.gaussian(cfg.odom_sigma_r * scale);
        for (int k = 3; k < 6; ++k) noise(k) = rng.gaussian(cfg.odom_sigma_t * scale);
      }
      odom = se3_compose(odom, se3_compose(rel, se3_exp(noise)));
    }
    out.odometry.push_back(OdometrySample{t, odom});
    out.scans.push_back(ScanFrame{t, {detail::cast_scan(world, gt[i], cfg, rng)}});
  }

  // reflective gate returns around each marker, observed from the start pose
  const Pose to_body = se3_inverse(out.start_pose);
  for (const Vec3& marker : world.gate_markers) {
    for (int i = 0; i < 40; ++i) {
      const Vec3 jitter(rng.gaussian(cfg.marker_sigma), rng.gaussian(cfg.marker_sigma),
                        rng.gaussian(cfg.marker_sigma));
      const Vec3 plate(0, 0.0, rng.uniform(-0.05, 0.05));  // small plate extent
      out.gate_observation.push_back(to_point(to_body.apply(marker + plate + jitter)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth loops and outlier injection

inline Mat6 default_loop_information() {
  Mat6 m = Mat6::Zero();
  m.diagonal().head<3>().setConstant(25.0);
  m.diagonal().tail<3>().setConstant(100.0);
  return m;
}

/// Ground-truth loop edges between keyed nodes whose true poses are within
/// `radius` and at least `min_index_separation` apart (or on distinct
/// robots). Measurements come from the true relative pose, optionally
/// perturbed by small Gaussian noise.
inline std::vector<LabeledLoop> make_true_loops(const PoseMap& gt_poses, double radius,
                                                uint32_t min_index_separation, int max_count,
                                                uint64_t seed, double noise_t = 0.0,
                                                double noise_r = 0.0,
                                                const Mat6& information =
                                                    default_loop_information()) {
  std::vector<LabeledLoop> loops;
  std::vector<std::pair<NodeKey, Pose>> nodes(gt_poses.begin(), gt_poses.end());
  std::vector<std::pair<size_t, size_t>> candidates;
  for (size_t i = 0; i < nodes.size(); ++i) {
    for (size_t j = i + 1; j < nodes.size(); ++j) {
      const auto& [ka, pa] = nodes[i];
      const auto& [kb, pb] = nodes[j];
      if (ka.robot == kb.robot &&
          (kb.index > ka.index ? kb.index - ka.index : ka.index - kb.index) <
              min_index_separation)
        continue;
      if ((pa.translation - pb.translation).norm() > radius) continue;
      candidates.emplace_back(i, j);
    }
  }
  Rng rng(derive_seed(seed, 0x100b5));
  // deterministic subsample
  while (static_cast<int>(candidates.size()) > max_count) {
    candidates.erase(candidates.begin() + static_cast<long>(rng.uniform_index(candidates.size())));
  }
  for (const auto& [i, j] : candidates) {
    LabeledLoop l;
    l.outlier = false;
    l.edge.kind = EdgeKind::LoopClosure;
    l.edge.from = nodes[i].first;
    l.edge.to = nodes[j].first;
    Twist noise = Twist::Zero();
    for (int k = 0; k < 3; ++k) noise(k) = rng.gaussian(noise_r);
    for (int k = 3; k < 6; ++k) noise(k) = rng.gaussian(noise_t);
    l.edge.measurement =
        se3_compose(se3_between(nodes[i].second, nodes[j].second), se3_exp(noise));
    l.edge.information = information;
    loops.push_back(l);
  }
  return loops;
}

/// Appends `cfg.outlier_loop_count` false loops between random node pairs.
/// Each measurement differs from the true relative pose by at least the
/// configured translation offset and rotation angle.
inline std::vector<LabeledLoop> inject_outlier_loops(const std::vector<LabeledLoop>& true_loops,
                                                     const PoseMap& gt_poses,
                                                     const SimConfig& cfg, uint64_t seed) {
  std::vector<LabeledLoop> out = true_loops;
  if (cfg.outlier_loop_count <= 0 || gt_poses.size() < 2) return out;
  std::vector<std::pair<NodeKey, Pose>> nodes(gt_poses.begin(), gt_poses.end());
  Rng rng(derive_seed(seed, 0xfa15e));
  Mat6 info = Mat6::Zero();
  info.diagonal().head<3>().setConstant(25.0);
  info.diagonal().tail<3>().setConstant(100.0);
  for (int k = 0; k < cfg.outlier_loop_count; ++k) {
    const size_t i = rng.uniform_index(nodes.size());
    size_t j = rng.uniform_index(nodes.size());
    if (j == i) j = (j + 1 + rng.uniform_index(nodes.size() - 1)) % nodes.size();
    LabeledLoop l;
    l.outlier = true;
    l.edge.kind = EdgeKind::LoopClosure;
    l.edge.from = nodes[i].first;
    l.edge.to = nodes[j].first;
    Vec3 dir(rng.gaussian(), rng.gaussian(), rng.gaussian());
    dir.normalize();
    const double mag = cfg.outlier_translation * rng.uniform(1.0, 1.5);
    Vec3 axis(rng.gaussian(), rng.gaussian(), rng.gaussian());
    axis.normalize();
    const double angle =
        rng.uniform(cfg.outlier_rotation_deg, std::min(175.0, cfg.outlier_rotation_deg + 60.0)) *
        M_PI / 180.0;
    Pose offset;
    offset.rotation = normalized_wpos(Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis)));
    offset.translation = mag * dir;
    l.edge.measurement =
        se3_compose(se3_between(nodes[i].second, nodes[j].second), offset);
    l.edge.information = info;
    out.push_back(l);
  }
  return out;
}

}  // namespace mrslam
