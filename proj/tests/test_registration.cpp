#include "mrslam/registration.hpp"

#include <gtest/gtest.h>

#include "synthetic_clouds.hpp"

namespace mrslam {
namespace {

using namespace testclouds;

Pose yaw_pose(double deg, const Vec3& t) {
  Pose p;
  p.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(deg * M_PI / 180.0, Vec3::UnitZ()));
  p.translation = t;
  return p;
}

TEST(EuclideanCluster, ThreeSeparatedBlobs) {
  Rng rng(1);
  PointCloud cloud = make_blob(Vec3(0, 0, 0), 50, 0.05, rng);
  append(cloud, make_blob(Vec3(1.5, 0, 0), 60, 0.05, rng));
  append(cloud, make_blob(Vec3(0, 2.0, 0), 40, 0.05, rng));
  const auto clusters = euclidean_cluster(cloud, 0.2, 10);
  EXPECT_EQ(clusters.size(), 3u);
}

TEST(EuclideanCluster, SingleBlob) {
  Rng rng(2);
  const auto clusters = euclidean_cluster(make_blob(Vec3::Zero(), 100, 0.1, rng), 0.5, 10);
  EXPECT_EQ(clusters.size(), 1u);
  EXPECT_EQ(clusters[0].size(), 100u);
}

TEST(EuclideanCluster, SmallClusterDropped) {
  PointCloud cloud;
  cloud.push_back(Point3{0, 0, 0});
  cloud.push_back(Point3{0.05f, 0, 0});
  const auto clusters = euclidean_cluster(cloud, 0.2, 3);
  EXPECT_TRUE(clusters.empty());
}

std::array<Vec3, 3> gate_markers() {
  // side lengths 2.01, 1.84, 1.79 m: distinct well beyond the 1 cm ambiguity
  // guard, so noisy observations still match unambiguously
  return {Vec3(-1.0, 0.0, 0.4), Vec3(1.0, 0.0, 0.6), Vec3(-0.2, 0.0, 2.0)};
}

TEST(AlignThreePoints, IdentityCase) {
  const auto markers = gate_markers();
  const auto result = align_three_points(markers, markers);
  EXPECT_LT(result.residual_rms, 1e-12);
  EXPECT_LT(result.transform.translation.norm(), 1e-12);
  EXPECT_NEAR(rotation_geodesic_deg(result.transform, Pose::identity()), 0.0, 1e-9);
}

TEST(AlignThreePoints, RecoversKnownTransform) {
  const auto known = gate_markers();
  const Pose T = yaw_pose(90, Vec3(5, 0, 0));
  // observed = inverse(T) applied to known, so that transform(observed)=known
  const Pose Ti = se3_inverse(T);
  std::array<Vec3, 3> observed;
  for (int i = 0; i < 3; ++i) observed[i] = Ti.apply(known[i]);
  // shuffle the observed order; side-length matching must untangle it
  std::swap(observed[0], observed[2]);
  const auto result = align_three_points(observed, known);
  EXPECT_LT(result.residual_rms, 1e-9);
  EXPECT_NEAR(rotation_geodesic_deg(result.transform, T), 0.0, 1e-7);
  EXPECT_LT((result.transform.translation - T.translation).norm(), 1e-9);
}

TEST(AlignThreePoints, MonteCarloNoise) {
  const auto known = gate_markers();
  int ok = 0;
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    // robots stage within a couple meters of the gate for calibration
    const Pose T =
        yaw_pose(rng.uniform(-180, 180), Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2), 0));
    const Pose Ti = se3_inverse(T);
    std::array<Vec3, 3> observed;
    for (int i = 0; i < 3; ++i) {
      observed[i] =
          Ti.apply(known[i]) + Vec3(rng.gaussian(0.01), rng.gaussian(0.01), rng.gaussian(0.01));
    }
    const auto result = align_three_points(observed, known);
    const double trans_err = (result.transform.translation - T.translation).norm();
    if (result.residual_rms <= 0.03 && trans_err <= 0.05) ++ok;
  }
  EXPECT_GE(ok, 97);  // a few 3-sigma outliers tolerated over 100 draws
}

TEST(AlignThreePoints, CollinearRejected) {
  const std::array<Vec3, 3> bad{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0)};
  EXPECT_THROW(align_three_points(bad, gate_markers()), DegenerateGeometry);
  EXPECT_THROW(align_three_points(gate_markers(), bad), DegenerateGeometry);
}

TEST(AlignThreePoints, IsocelesAmbiguityRejected) {
  const std::array<Vec3, 3> iso{Vec3(-1, 0, 0), Vec3(1, 0, 0), Vec3(0, 0, 1.7320508)};
  EXPECT_THROW(align_three_points(iso, iso), AmbiguousCorrespondence);
}

TEST(AlignThreePoints, RotationEquivariance) {
  const auto known = gate_markers();
  const Pose T = yaw_pose(40, Vec3(2, -1, 0.5));
  const Pose Ti = se3_inverse(T);
  std::array<Vec3, 3> observed;
  for (int i = 0; i < 3; ++i) observed[i] = Ti.apply(known[i]);

  Pose R;
  R.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(1.1, Vec3(1, 2, 0.5).normalized()));
  std::array<Vec3, 3> obs_rot, known_rot;
  for (int i = 0; i < 3; ++i) {
    obs_rot[i] = R.apply(observed[i]);
    known_rot[i] = R.apply(known[i]);
  }
  const Pose base = align_three_points(observed, known).transform;
  const Pose conj = align_three_points(obs_rot, known_rot).transform;
  const Pose expect = se3_compose(R, se3_compose(base, se3_inverse(R)));
  EXPECT_NEAR(rotation_geodesic_deg(conj, expect), 0.0, 1e-7);
  EXPECT_LT((conj.translation - expect.translation).norm(), 1e-7);
}

TEST(GateCalibration, ClustersAndAligns) {
  const auto known = gate_markers();
  Rng rng(42);
  const Pose robot = yaw_pose(25, Vec3(0.5, 3.0, 0));
  const Pose to_body = se3_inverse(robot);
  PointCloud returns;
  for (const Vec3& m : known) {
    for (int i = 0; i < 40; ++i) {
      const Vec3 jitter(rng.gaussian(0.02), rng.gaussian(0.02), rng.gaussian(0.02));
      returns.push_back(to_point(to_body.apply(m) + jitter));
    }
  }
  const auto result = calibrate_gate(returns, known);
  EXPECT_LT((result.transform.translation - robot.translation).norm(), 0.05);
  EXPECT_LT(rotation_geodesic_deg(result.transform, robot), 1.0);
}

TEST(Icp, SelfRegistrationIsIdentity) {
  const PointCloud cloud = make_corner();
  AlignmentParams params;
  const auto r = icp_point_to_plane(cloud, cloud, Pose::identity(), params);
  ASSERT_TRUE(r.success);
  EXPECT_LT(r.fitness_error, 1e-9);
  EXPECT_LT(r.transform.translation.norm(), 1e-9);
}

TEST(Icp, RecoversSmallShift) {
  const PointCloud target = make_corner();
  Pose shift;
  shift.translation = Vec3(0.3, 0, 0);
  // source = target shifted +0.3; registration must recover the -0.3 inverse
  const PointCloud source = transform_cloud(target, shift);
  AlignmentParams params;
  const auto r = icp_point_to_plane(source, target, Pose::identity(), params);
  ASSERT_TRUE(r.success);
  EXPECT_LT((r.transform.translation - Vec3(-0.3, 0, 0)).norm(), 0.01);
  EXPECT_LT(rotation_geodesic_deg(r.transform, Pose::identity()), 0.5);
  // spec invariant: converged error no worse than the starting error
  AlignmentParams one_step = params;
  one_step.icp_max_iterations = 1;
  const auto at_init = icp_point_to_plane(source, target, Pose::identity(), one_step);
  EXPECT_LE(r.fitness_error, at_init.fitness_error + 1e-12);
}

TEST(Icp, InformationIsPsd) {
  const PointCloud target = make_structured_room();
  Pose nudge = yaw_pose(3, Vec3(0.1, -0.05, 0.02));
  const PointCloud source = transform_cloud(target, nudge);
  AlignmentParams params;
  const auto r = icp_point_to_plane(source, target, Pose::identity(), params);
  ASSERT_TRUE(r.success);
  Eigen::SelfAdjointEigenSolver<Mat6> eig(r.information);
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-9);
  EXPECT_GT(eig.eigenvalues().maxCoeff(), 0.0);
}

TEST(Icp, UnrelatedRoomsRejected) {
  // a small room scan vs a large hall scan: the hall's surfaces sit beyond
  // the correspondence radius from almost every room point
  Rng rng(31);
  PointCloud room = make_corner(3.0, 0.12, &rng, 0.01);
  PointCloud hall;
  add_plane(hall, Vec3(-10, -10, -1), Vec3::UnitX(), Vec3::UnitY(), 20, 20, 0.4, &rng, 0.01);
  add_plane(hall, Vec3(-10, -10, -1), Vec3::UnitX(), Vec3::UnitZ(), 20, 8, 0.35, &rng, 0.01);
  add_plane(hall, Vec3(-10, -10, -1), Vec3::UnitY(), Vec3::UnitZ(), 20, 8, 0.35, &rng, 0.01);
  // center the room scan where the hall has no geometry at all
  Pose offset;
  offset.translation = Vec3(4, 4, 2.2);
  room = transform_cloud(room, offset);
  AlignmentParams params;
  const auto r = icp_point_to_plane(room, hall, Pose::identity(), params);
  // rejected either by the error threshold or by correspondence starvation
  EXPECT_TRUE(!r.success || r.fitness_error > params.icp_error_threshold);
}

TEST(Icp, TinyCloudFlagged) {
  PointCloud tiny(10, Point3{0, 0, 0});
  AlignmentParams params;
  const auto r = icp_point_to_plane(tiny, tiny, Pose::identity(), params);
  EXPECT_FALSE(r.success);
  EXPECT_FALSE(r.failure_reason.empty());
}

TEST(InitialAlignment, IdenticalCloudsNearIdentity) {
  const PointCloud cloud = make_structured_room();
  AlignmentParams params;
  const auto r = initial_alignment(cloud, cloud, params);
  ASSERT_TRUE(r.success) << r.failure_reason;
  EXPECT_LT(r.cumulative_error, 32.0 / 4.0);
  EXPECT_LT(r.transform.translation.norm(), 0.3);
  EXPECT_LT(rotation_geodesic_deg(r.transform, Pose::identity()), 5.0);
}

TEST(InitialAlignment, Recovers120DegreeYaw) {
  Rng rng(7);
  const PointCloud target = make_structured_room(&rng, 0.01);
  const Pose T = yaw_pose(120, Vec3(1.0, -0.5, 0));
  // source expressed in a frame rotated 120 degrees away
  const PointCloud source = transform_cloud(target, se3_inverse(T));
  AlignmentParams params;
  const auto r = initial_alignment(source, target, params);
  ASSERT_TRUE(r.success) << r.failure_reason;
  EXPECT_LT(rotation_geodesic_deg(r.transform, T), 10.0);
  EXPECT_LT((r.transform.translation - T.translation).norm(), 0.5);

  // and ICP refines it to centimeter level
  const auto refined = icp_point_to_plane(source, target, r.transform, params);
  ASSERT_TRUE(refined.success);
  EXPECT_LT(rotation_geodesic_deg(refined.transform, T), 1.0);
  EXPECT_LT((refined.transform.translation - T.translation).norm(), 0.05);
}

TEST(InitialAlignment, DisjointCorridorsFlagged) {
  Rng rng(9);
  const PointCloud a = make_corridor(12, 3, 3, 0.18, &rng, 0.01);
  const PointCloud b = make_corridor(12, 3, 3, 0.18, &rng, 0.01);
  AlignmentParams params;
  const auto r = initial_alignment(a, b, params);
  // featureless identical-looking sections: either flagged outright or the
  // consensus error stays above the acceptance thresholds
  EXPECT_FALSE(r.success && r.cumulative_error <= params.sac_error_threshold &&
               r.fitness_error <= params.sac_normalized_error_threshold);
}

TEST(InitialAlignment, SmallCloudFlagged) {
  PointCloud tiny(100, Point3{0, 0, 0});
  AlignmentParams params;
  EXPECT_FALSE(initial_alignment(tiny, tiny, params).success);
}

TEST(Observability, PlaneNearZero) {
  const double score = observability_score(make_plane_cloud());
  EXPECT_LT(score, 0.01);
}

TEST(Observability, CornerAboveThreshold) {
  const double score = observability_score(make_corner());
  EXPECT_GT(score, 0.1);
}

TEST(Observability, TunnelBelowCorner) {
  const double corridor = observability_score(make_corridor());
  const double corner = observability_score(make_corner());
  EXPECT_LT(corridor, corner);
  EXPECT_LT(corridor, 0.05);
}

TEST(Observability, RigidInvariance) {
  // jittered cloud: on exact grids, nearest-neighbor ties break differently
  // after a rotation and perturb the normals, which is not what this
  // invariance is about
  Rng rng(17);
  PointCloud cloud = make_structured_room(&rng, 0.02);
  // quantize to multiples of 2^-12 so the exact 90-degree transform below
  // keeps every coordinate representable; kd-tree neighborhoods then match
  // bit for bit and only the score's own math is under test
  for (Point3& p : cloud) {
    p.x = static_cast<float>(std::round(p.x * 4096.0) / 4096.0);
    p.y = static_cast<float>(std::round(p.y * 4096.0) / 4096.0);
    p.z = static_cast<float>(std::round(p.z * 4096.0) / 4096.0);
  }
  const double base = observability_score(cloud);
  const Pose T = yaw_pose(90, Vec3(8, -4, 2));
  const double moved = observability_score(transform_cloud(cloud, T));
  EXPECT_NEAR(base, moved, 1e-6);
}

TEST(Observability, TinyCloudZero) {
  PointCloud tiny(10, Point3{1, 2, 3});
  EXPECT_EQ(observability_score(tiny), 0.0);
}

}  // namespace
}  // namespace mrslam
