#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace dexforge {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

// SE(3) pose: x_world = rotation * x_local + translation.
struct RigidTransform {
  Vec3 translation = Vec3::Zero();
  Quat rotation = Quat::Identity();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_matrix(const Eigen::Matrix4d& m);

  RigidTransform operator*(const RigidTransform& rhs) const;
  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const;
  Eigen::Matrix4d matrix() const;

  // Throws ValidationError when the quaternion norm is off by more than 1e-9
  // or any component is non-finite.
  void validate() const;
};

namespace so3 {

Mat3 hat(const Vec3& v);

// Rodrigues: rotation vector -> rotation matrix.
Mat3 exp(const Vec3& rotvec);
Quat exp_quat(const Vec3& rotvec);

// Rotation vector with angle in [0, pi].
Vec3 log(const Quat& q);
Vec3 log(const Mat3& r);

// d/dv exp(v) = exp(v) * hat(right_jacobian(v) * dv).
Mat3 right_jacobian(const Vec3& v);

}  // namespace so3

// Geodesic angle between two orientations, in [0, pi].
double geodesic_angle(const Quat& a, const Quat& b);

Quat slerp(const Quat& a, const Quat& b, double t);
RigidTransform interpolate(const RigidTransform& a, const RigidTransform& b,
                           double t);

}  // namespace dexforge
