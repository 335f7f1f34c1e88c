#include "dexforge/geometry.hpp"

#include <cmath>

#include "dexforge/errors.hpp"

namespace dexforge {

RigidTransform RigidTransform::from_matrix(const Eigen::Matrix4d& m) {
  RigidTransform t;
  t.translation = m.block<3, 1>(0, 3);
  t.rotation = Quat(Mat3(m.block<3, 3>(0, 0))).normalized();
  return t;
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  RigidTransform out;
  out.rotation = (rotation * rhs.rotation).normalized();
  out.translation = rotation * rhs.translation + translation;
  return out;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.rotation = rotation.conjugate();
  out.translation = -(out.rotation * translation);
  return out;
}

Eigen::Matrix4d RigidTransform::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 3>(0, 0) = rotation.toRotationMatrix();
  m.block<3, 1>(0, 3) = translation;
  return m;
}

void RigidTransform::validate() const {
  if (!translation.allFinite() || !rotation.coeffs().allFinite()) {
    throw ValidationError("rigid transform has non-finite components");
  }
  if (std::abs(rotation.norm() - 1.0) > 1e-9) {
    throw ValidationError("rigid transform quaternion is not unit norm");
  }
}

namespace so3 {

Mat3 hat(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Mat3 exp(const Vec3& rotvec) {
  const double t2 = rotvec.squaredNorm();
  const Mat3 k = hat(rotvec);
  double a, b;
  if (t2 < 1e-12) {
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    const double t = std::sqrt(t2);
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  return Mat3::Identity() + a * k + b * k * k;
}

Quat exp_quat(const Vec3& rotvec) {
  const double t = rotvec.norm();
  const double half = 0.5 * t;
  const double s = t < 1e-8 ? 0.5 - t * t / 48.0 : std::sin(half) / t;
  return Quat(std::cos(half), s * rotvec.x(), s * rotvec.y(), s * rotvec.z());
}

Vec3 log(const Quat& q_in) {
  Quat q = q_in.normalized();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const Vec3 v = q.vec();
  const double n = v.norm();
  if (n < 1e-12) return 2.0 * v;
  const double angle = 2.0 * std::atan2(n, q.w());
  return v * (angle / n);
}

Vec3 log(const Mat3& r) { return log(Quat(r)); }

Mat3 right_jacobian(const Vec3& v) {
  const double t2 = v.squaredNorm();
  const Mat3 k = hat(v);
  double a, b;
  if (t2 < 1e-10) {
    a = 0.5 - t2 / 24.0;
    b = 1.0 / 6.0 - t2 / 120.0;
  } else {
    const double t = std::sqrt(t2);
    a = (1.0 - std::cos(t)) / t2;
    b = (t - std::sin(t)) / (t2 * t);
  }
  return Mat3::Identity() - a * k + b * k * k;
}

}  // namespace so3

double geodesic_angle(const Quat& a, const Quat& b) {
  // Same quantity as 2*acos(|<a,b>|); the atan2 form keeps precision near 0.
  const Quat rel = a.normalized().conjugate() * b.normalized();
  const double angle = 2.0 * std::atan2(rel.vec().norm(), std::abs(rel.w()));
  return std::min(angle, M_PI);
}

Quat slerp(const Quat& a, const Quat& b, double t) {
  Quat bb = b;
  if (a.dot(b) < 0.0) bb.coeffs() = -b.coeffs();
  const Vec3 delta = so3::log(a.conjugate() * bb);
  return (a * so3::exp_quat(t * delta)).normalized();
}

RigidTransform interpolate(const RigidTransform& a, const RigidTransform& b,
                           double t) {
  RigidTransform out;
  out.translation = (1.0 - t) * a.translation + t * b.translation;
  out.rotation = slerp(a.rotation, b.rotation, t);
  return out;
}

}  // namespace dexforge
