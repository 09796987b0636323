#include "mrslam/geometry.hpp"

#include <gtest/gtest.h>

#include "mrslam/random.hpp"

namespace mrslam {
namespace {

// Independent oracle: compose poses as 4x4 homogeneous matrices with plain
// loops, no library calls into the code under test.
Eigen::Matrix4d oracle_matmul(const Eigen::Matrix4d& a, const Eigen::Matrix4d& b) {
  Eigen::Matrix4d out = Eigen::Matrix4d::Zero();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 4; ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

Pose random_pose(Rng& rng, double max_angle = 3.0) {
  Vec3 axis(rng.gaussian(), rng.gaussian(), rng.gaussian());
  axis.normalize();
  const double angle = rng.uniform(0.0, max_angle);
  Pose p;
  p.rotation = normalized_wpos(Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis)));
  p.translation = Vec3(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10));
  return p;
}

Pose yaw_pose(double deg, const Vec3& t) {
  Pose p;
  p.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(deg * M_PI / 180.0, Vec3::UnitZ()));
  p.translation = t;
  return p;
}

double pose_error(const Pose& a, const Pose& b) {
  return std::max(rotation_geodesic_deg(a, b) * M_PI / 180.0,
                  (a.translation - b.translation).norm());
}

TEST(Compose, IdentityAndInverse) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const Pose p = random_pose(rng);
    EXPECT_LT(pose_error(se3_compose(Pose::identity(), p), p), 1e-12);
    EXPECT_LT(pose_error(se3_compose(p, se3_inverse(p)), Pose::identity()), 1e-9);
    EXPECT_NEAR(p.rotation.norm(), 1.0, 1e-9);
    EXPECT_GE(p.rotation.w(), 0.0);
  }
}

TEST(Compose, MatchesMatrixOracle) {
  // 90 yaw + (1,0,0) twice -> 180 yaw + (1,1,0)
  const Pose a = yaw_pose(90, Vec3(1, 0, 0));
  const Pose ab = se3_compose(a, a);
  const Eigen::Matrix4d expect = oracle_matmul(a.matrix(), a.matrix());
  EXPECT_LT((ab.matrix() - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(rotation_geodesic_deg(ab, Pose::identity()), 180.0, 1e-9);
  EXPECT_LT((ab.translation - Vec3(1, 1, 0)).norm(), 1e-12);

  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const Pose x = random_pose(rng), y = random_pose(rng);
    EXPECT_LT((se3_compose(x, y).matrix() - oracle_matmul(x.matrix(), y.matrix()))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
  }
}

TEST(Between, Laws) {
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    const Pose p = random_pose(rng), q = random_pose(rng);
    EXPECT_LT(pose_error(se3_between(p, p), Pose::identity()), 1e-9);
    EXPECT_LT(pose_error(se3_between(Pose::identity(), p), p), 1e-12);
    EXPECT_LT(pose_error(se3_compose(p, se3_between(p, q)), q), 1e-9);
  }
}

TEST(Between, MatrixOracle) {
  const Pose a = yaw_pose(90, Vec3(1, 0, 0));
  const Pose b = yaw_pose(90, Vec3(1, 1, 0));
  // oracle: inv(Ma) * Mb
  Eigen::Matrix4d inv_a = Eigen::Matrix4d::Identity();
  const Mat3 Rt = a.rotation.toRotationMatrix().transpose();
  inv_a.topLeftCorner<3, 3>() = Rt;
  inv_a.topRightCorner<3, 1>() = -Rt * a.translation;
  const Eigen::Matrix4d expect = oracle_matmul(inv_a, b.matrix());
  const Pose d = se3_between(a, b);
  EXPECT_LT((d.matrix() - expect).cwiseAbs().maxCoeff(), 1e-12);
  // the world-frame (0,1,0) offset lands on (0,1,0) rotated into a's frame
  EXPECT_LT((d.translation - Vec3(1, 0, 0)).norm(), 1e-12);
  EXPECT_NEAR(rotation_geodesic_deg(a, b), 0.0, 1e-9);
}

TEST(ExpLog, Basics) {
  EXPECT_LT(pose_error(se3_exp(Twist::Zero()), Pose::identity()), 1e-15);
  Twist yaw90 = Twist::Zero();
  yaw90(2) = M_PI / 2;
  const Pose p = se3_exp(yaw90);
  EXPECT_NEAR(rotation_geodesic_deg(p, Pose::identity()), 90.0, 1e-9);
  EXPECT_LT(p.translation.norm(), 1e-15);
}

TEST(ExpLog, RoundTripRandom) {
  Rng rng(17);
  double max_err = 0;
  for (int i = 0; i < 1000; ++i) {
    const Pose p = random_pose(rng, 3.0);
    const Pose q = se3_exp(se3_log(p));
    max_err = std::max(max_err, pose_error(p, q));
  }
  EXPECT_LT(max_err, 1e-9);
}

TEST(ExpLog, SmallAngleStable) {
  Rng rng(19);
  for (int i = 0; i < 100; ++i) {
    Twist xi = Twist::Zero();
    xi.head<3>() = Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian()) * 1e-10;
    xi.tail<3>() = Vec3(rng.gaussian(), rng.gaussian(), rng.gaussian());
    const Twist back = se3_log(se3_exp(xi));
    EXPECT_LT((back - xi).norm(), 1e-12);
  }
}

TEST(ExpLog, ThrowsNearPi) {
  Pose p;
  p.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(M_PI - 1e-9, Vec3::UnitX()));
  EXPECT_THROW(se3_log(p), std::domain_error);
}

TEST(Geodesic, Values) {
  const Pose a = yaw_pose(0, Vec3::Zero());
  EXPECT_NEAR(rotation_geodesic_deg(a, a), 0.0, 1e-12);
  EXPECT_NEAR(rotation_geodesic_deg(a, yaw_pose(30, Vec3(5, 5, 5))), 30.0, 1e-9);
  // 90 degrees about (1,1,1)/sqrt(3); oracle via rotation-matrix trace
  Pose b;
  b.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(M_PI / 2, Vec3(1, 1, 1).normalized()));
  const double trace = b.rotation.toRotationMatrix().trace();
  const double oracle_deg = std::acos(std::clamp((trace - 1.0) / 2.0, -1.0, 1.0)) * 180.0 / M_PI;
  EXPECT_NEAR(oracle_deg, 90.0, 1e-9);
  EXPECT_NEAR(rotation_geodesic_deg(a, b), oracle_deg, 1e-9);
}

TEST(Geodesic, SymmetricAndBounded) {
  Rng rng(23);
  for (int i = 0; i < 200; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    const double d1 = rotation_geodesic_deg(a, b);
    const double d2 = rotation_geodesic_deg(b, a);
    EXPECT_NEAR(d1, d2, 1e-9);
    EXPECT_GE(d1, 0.0);
    EXPECT_LE(d1, 180.0);
  }
}

TEST(Associativity, RandomTriples) {
  Rng rng(29);
  for (int i = 0; i < 200; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    const Pose lhs = se3_compose(se3_compose(a, b), c);
    const Pose rhs = se3_compose(a, se3_compose(b, c));
    EXPECT_LT(pose_error(lhs, rhs), 1e-8);
  }
}

// exp(xi + d) == exp(xi) * exp(Jr(xi) d): checks the right-Jacobian blocks
// (including the rotation-translation coupling) against finite differences.
TEST(Jacobians, RightJacobianMatchesFiniteDifference) {
  Rng rng(31);
  for (int i = 0; i < 50; ++i) {
    Twist xi;
    for (int k = 0; k < 6; ++k) xi(k) = rng.uniform(-1.5, 1.5);
    const Mat6 jr_inv = se3_right_jacobian_inverse(xi);
    Mat6 fd;  // numeric Jr
    const double h = 1e-6;
    for (int k = 0; k < 6; ++k) {
      Twist dp = xi, dm = xi;
      dp(k) += h;
      dm(k) -= h;
      const Twist lo = se3_log(se3_compose(se3_inverse(se3_exp(xi)), se3_exp(dp)));
      const Twist hi = se3_log(se3_compose(se3_inverse(se3_exp(xi)), se3_exp(dm)));
      fd.col(k) = (lo - hi) / (2 * h);
    }
    // jr_inv * fd should be identity
    EXPECT_LT((jr_inv * fd - Mat6::Identity()).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Adjoint, ConsistentWithConjugation) {
  Rng rng(37);
  for (int i = 0; i < 50; ++i) {
    const Pose T = random_pose(rng, 2.0);
    Twist xi;
    for (int k = 0; k < 6; ++k) xi(k) = rng.uniform(-0.3, 0.3);
    const Pose lhs = se3_compose(se3_compose(T, se3_exp(xi)), se3_inverse(T));
    const Pose rhs = se3_exp(se3_adjoint(T) * xi);
    EXPECT_LT(pose_error(lhs, rhs), 1e-8);
  }
}

}  // namespace
}  // namespace mrslam
