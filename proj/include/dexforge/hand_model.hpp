#pragma once

// Parametric right hand: a 16-joint skeleton (floating wrist + 5 fingers x 3
// articulations) whose bone offsets are affine in a 10-D shape vector, with
// 14 virtual marker sites. Angles are axis-angle per joint (45 parameters).

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dexforge/geometry.hpp"

namespace dexforge::hand {

inline constexpr int kShapeDim = 10;
inline constexpr int kJointCount = 16;
inline constexpr int kArticulatedJoints = 15;
inline constexpr int kFingerParams = 45;
inline constexpr int kMarkerCount = 14;
inline constexpr int kWristParams = 6;
inline constexpr int kPoseParams = kWristParams + kFingerParams;

using ShapeCoeffs = Eigen::Matrix<double, kShapeDim, 1>;
using FingerAngles = Eigen::Matrix<double, kFingerParams, 1>;

struct ShapeVector {
  ShapeCoeffs beta = ShapeCoeffs::Zero();

  static ShapeVector zero() { return {}; }
  bool operator==(const ShapeVector& o) const { return beta == o.beta; }
};

struct HandPose {
  RigidTransform wrist;
  FingerAngles finger_angles = FingerAngles::Zero();
};

// Digit that owns a joint; kPalm is the wrist/root body.
enum class Digit { kThumb = 0, kIndex, kMiddle, kRing, kPinky, kPalm };
inline constexpr int kDigitCount = 6;
const char* digit_name(Digit d);

struct JointLimit {
  double lo = 0.0;
  double hi = 0.0;
  bool locked() const { return hi <= lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
  double mid() const { return 0.5 * (lo + hi); }
};

struct JointDef {
  std::string name;
  int parent = -1;
  Digit digit = Digit::kPalm;
  // Position of this joint in the parent's frame at beta = 0.
  Vec3 rest_offset = Vec3::Zero();
  // d(rest_offset)/d(beta).
  Eigen::Matrix<double, 3, kShapeDim> shape_mix =
      Eigen::Matrix<double, 3, kShapeDim>::Zero();
  // Fixed rotation applied before the articulation (axis-angle).
  Vec3 rest_rotation = Vec3::Zero();
  std::array<JointLimit, 3> limits{};
  // Local axis actuated by the physics hinge (flexion).
  int hinge_axis = 1;
  // End of this joint's bone for leaf joints, in the joint frame.
  Vec3 segment_end = Vec3::Zero();
};

struct MarkerSite {
  std::string name;
  int joint = 0;
  Vec3 offset = Vec3::Zero();
};

class HandSkeleton {
 public:
  HandSkeleton(std::string name, std::vector<JointDef> joints,
               std::vector<MarkerSite> markers, double shape_bound);

  // Built-in right hand; data/right_hand.json holds the same definition.
  static HandSkeleton right_hand();
  static HandSkeleton from_json(const nlohmann::json& doc);
  static HandSkeleton load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  const std::string& name() const { return name_; }
  const std::vector<JointDef>& joints() const { return joints_; }
  const std::vector<MarkerSite>& markers() const { return markers_; }
  double shape_bound() const { return shape_bound_; }

  Vec3 rest_offset(int joint, const ShapeVector& shape) const;
  // True when `ancestor` lies on the chain from the root to `joint`
  // (inclusive of `joint` itself).
  bool on_chain(int ancestor, int joint) const;
  // Children of a joint in index order.
  const std::vector<int>& children(int joint) const { return children_[joint]; }

  // Finger parameter index for articulated joint j (1..15) and axis (0..2).
  static int angle_index(int joint, int axis) { return (joint - 1) * 3 + axis; }
  const JointLimit& limit(int angle_param) const;
  // Finger parameters whose limit interval has nonzero width.
  const std::vector<int>& free_parameters() const { return free_params_; }
  // Finger parameter actuated by each articulated joint's hinge.
  std::vector<int> hinge_parameters() const;

  // Throws DomainError when any |beta_k| exceeds shape_bound or is non-finite.
  void check_shape(const ShapeVector& shape) const;
  // Throws ValidationError on non-unit quaternion, non-finite values, or
  // finger angles outside their limits.
  void check_pose(const HandPose& pose) const;
  // Clamp finger angles into their limit intervals.
  FingerAngles project_to_limits(const FingerAngles& angles) const;
  FingerAngles mid_range() const;

 private:
  void validate() const;

  std::string name_;
  std::vector<JointDef> joints_;
  std::vector<MarkerSite> markers_;
  double shape_bound_;
  std::vector<std::vector<int>> children_;
  std::vector<int> free_params_;
};

// World frames of every joint.
struct JointFrames {
  std::vector<Mat3> rotation;
  std::vector<Vec3> origin;
};

struct FkResult {
  std::vector<Vec3> joint_positions;   // kJointCount
  std::vector<Vec3> marker_positions;  // kMarkerCount
};

// Frames without validation; used inside solvers whose iterates may leave
// the joint limits.
JointFrames compute_frames(const HandSkeleton& skel, const ShapeVector& shape,
                           const HandPose& pose);

// Checks the shape box and the wrist quaternion; never clamps angles.
FkResult forward_kinematics(const HandSkeleton& skel, const ShapeVector& shape,
                            const HandPose& pose);

// Marker positions flattened as [x0 y0 z0 x1 ...], no validation.
Eigen::VectorXd marker_vector(const HandSkeleton& skel, const ShapeVector& shape,
                              const HandPose& pose);

// 42 x 51 Jacobian of marker positions. Columns 0-2: wrist translation.
// Columns 3-5: wrist rotation as a world-frame rotation vector applied on the
// left (wrist.rotation <- exp(d) * wrist.rotation). Columns 6..50: finger
// axis-angle components in angle_index order.
Eigen::MatrixXd fk_jacobian(const HandSkeleton& skel, const ShapeVector& shape,
                            const HandPose& pose);

// 42 x 10 Jacobian of marker positions with respect to beta. Constant in
// beta because rest offsets are affine in it.
Eigen::MatrixXd shape_jacobian(const HandSkeleton& skel,
                               const ShapeVector& shape, const HandPose& pose);

// Apply a wrist tangent step in the convention used by fk_jacobian.
RigidTransform retract_wrist(const RigidTransform& wrist,
                             const Eigen::Ref<const Eigen::VectorXd>& delta6);

}  // namespace dexforge::hand
