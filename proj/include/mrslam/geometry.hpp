#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>
#include <stdexcept>

namespace mrslam {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// Tangent-space coordinates, rotation first: (rx, ry, rz, tx, ty, tz).
// Every 6x6 information matrix in the project uses this same ordering.
using Twist = Vec6;

/// Rigid transform in SE(3): unit quaternion + translation in meters.
/// The quaternion is kept normalized with w >= 0 after every operation.
struct Pose {
  Eigen::Quaterniond rotation{1.0, 0.0, 0.0, 0.0};
  Eigen::Vector3d translation{0.0, 0.0, 0.0};

  static Pose identity() { return Pose{}; }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation.toRotationMatrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

inline Eigen::Quaterniond normalized_wpos(Eigen::Quaterniond q) {
  q.normalize();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  return q;
}

inline Pose make_pose(const Eigen::Quaterniond& q, const Vec3& t) {
  return Pose{normalized_wpos(q), t};
}

inline Pose se3_compose(const Pose& a, const Pose& b) {
  return make_pose(a.rotation * b.rotation, a.rotation * b.translation + a.translation);
}

inline Pose se3_inverse(const Pose& p) {
  const Eigen::Quaterniond qi = p.rotation.conjugate();
  return make_pose(qi, -(qi * p.translation));
}

/// Relative transform from a to b: inverse(a) * b.
inline Pose se3_between(const Pose& a, const Pose& b) {
  return se3_compose(se3_inverse(a), b);
}

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Eigen::Quaterniond so3_exp(const Vec3& w) {
  const double theta = w.norm();
  double half_sinc;  // sin(theta/2) / theta
  if (theta < 1e-8) {
    half_sinc = 0.5 - theta * theta / 48.0;
  } else {
    half_sinc = std::sin(0.5 * theta) / theta;
  }
  Eigen::Quaterniond q(std::cos(0.5 * theta), half_sinc * w.x(), half_sinc * w.y(),
                       half_sinc * w.z());
  return normalized_wpos(q);
}

/// Axis-angle vector of q. Throws near the pi boundary where the chart breaks.
inline Vec3 so3_log(const Eigen::Quaterniond& q_in) {
  const Eigen::Quaterniond q = normalized_wpos(q_in);
  const Vec3 v(q.x(), q.y(), q.z());
  const double vn = v.norm();
  if (vn < 1e-12) return 2.0 * v;
  const double angle = 2.0 * std::atan2(vn, q.w());
  if (angle > M_PI - 1e-6) {
    throw std::domain_error("so3_log: rotation angle within 1e-6 of pi");
  }
  return (angle / vn) * v;
}

/// Left Jacobian of SO(3); also the V matrix coupling rotation to translation
/// in the SE(3) exponential.
inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = skew(w);
  double a, b;  // (1-cos)/t^2, (t-sin)/t^3
  if (theta < 1e-6) {
    a = 0.5 - theta2 / 24.0;
    b = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    a = (1.0 - std::cos(theta)) / theta2;
    b = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + a * W + b * W * W;
}

inline Mat3 so3_left_jacobian_inverse(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = skew(w);
  double c;
  if (theta < 1e-6) {
    c = 1.0 / 12.0 + theta2 / 720.0;
  } else {
    c = 1.0 / theta2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  return Mat3::Identity() - 0.5 * W + c * W * W;
}

inline Pose se3_exp(const Twist& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 rho = xi.tail<3>();
  return make_pose(so3_exp(w), so3_left_jacobian(w) * rho);
}

inline Twist se3_log(const Pose& p) {
  const Vec3 w = so3_log(p.rotation);
  Twist xi;
  xi.head<3>() = w;
  xi.tail<3>() = so3_left_jacobian_inverse(w) * p.translation;
  return xi;
}

/// Geodesic angle between the rotations of a and b, in [0, 180] degrees.
inline double rotation_geodesic_deg(const Pose& a, const Pose& b) {
  const Eigen::Quaterniond q = a.rotation.conjugate() * b.rotation;
  const double vn = Vec3(q.x(), q.y(), q.z()).norm();
  const double angle = 2.0 * std::atan2(vn, std::abs(q.w()));
  return angle * 180.0 / M_PI;
}

/// Adjoint of T in the (rot, trans) twist ordering.
inline Mat6 se3_adjoint(const Pose& T) {
  const Mat3 R = T.rotation.toRotationMatrix();
  Mat6 adj = Mat6::Zero();
  adj.topLeftCorner<3, 3>() = R;
  adj.bottomRightCorner<3, 3>() = R;
  adj.bottomLeftCorner<3, 3>() = skew(T.translation) * R;
  return adj;
}

namespace detail {

// Coupling block of the SE(3) left Jacobian (Barfoot's Q), written for the
// (rot, trans) ordering used throughout.
inline Mat3 se3_jacobian_q(const Vec3& w, const Vec3& rho) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 W = skew(w);
  const Mat3 P = skew(rho);
  double c1, c2, c3;  // series coefficients with small-angle fallbacks
  if (theta < 1e-4) {
    c1 = 1.0 / 6.0 - theta2 / 120.0;
    c2 = 1.0 / 24.0 - theta2 / 720.0;
    c3 = -0.5 * (c2 - 3.0 * (-1.0 / 120.0 + theta2 / 5040.0));
  } else {
    const double st = std::sin(theta);
    const double ct = std::cos(theta);
    c1 = (theta - st) / (theta2 * theta);
    c2 = (1.0 - 0.5 * theta2 - ct) / (theta2 * theta2);
    c3 = -0.5 * (c2 - 3.0 * (theta - st - theta2 * theta / 6.0) / (theta2 * theta2 * theta));
  }
  return 0.5 * P + c1 * (W * P + P * W + W * P * W) -
         c2 * (W * W * P + P * W * W - 3.0 * W * P * W) + c3 * (W * P * W * W + W * W * P * W);
}

}  // namespace detail

inline Mat6 se3_left_jacobian(const Twist& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 rho = xi.tail<3>();
  const Mat3 J = so3_left_jacobian(w);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = J;
  out.bottomRightCorner<3, 3>() = J;
  out.bottomLeftCorner<3, 3>() = detail::se3_jacobian_q(w, rho);
  return out;
}

inline Mat6 se3_left_jacobian_inverse(const Twist& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 rho = xi.tail<3>();
  const Mat3 Ji = so3_left_jacobian_inverse(w);
  const Mat3 Q = detail::se3_jacobian_q(w, rho);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = Ji;
  out.bottomRightCorner<3, 3>() = Ji;
  out.bottomLeftCorner<3, 3>() = -Ji * Q * Ji;
  return out;
}

inline Mat6 se3_right_jacobian_inverse(const Twist& xi) {
  return se3_left_jacobian_inverse(-xi);
}

inline bool pose_approx_equal(const Pose& a, const Pose& b, double tol) {
  return rotation_geodesic_deg(a, b) * M_PI / 180.0 <= tol &&
         (a.translation - b.translation).norm() <= tol;
}

}  // namespace mrslam
