#pragma once

// Fixed-step rigid-body simulation of a floating-base actuated hand and one
// free object on a static table (the plane z = 0). Contacts are penalty
// springs with viscous, Coulomb-capped friction; every reported contact
// force is exactly the force applied to the object.

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dexforge/geometry.hpp"
#include "dexforge/hand_model.hpp"

namespace dexforge::physics {

inline constexpr double kControlDt = 1.0 / 120.0;
inline constexpr int kHingeCount = hand::kArticulatedJoints;
// Base (3 translation + 3 rotation) plus one hinge per articulated joint.
inline constexpr int kActuatedDofs = 6 + kHingeCount;

enum class ShapeType { kSphere, kBox, kCapsule, kCylinder };
const char* shape_type_name(ShapeType t);
ShapeType shape_type_from_name(const std::string& name);

// Primitive in its body frame, centered at the origin. Capsules and
// cylinders run along the local z axis.
struct Shape {
  ShapeType type = ShapeType::kSphere;
  // sphere: (r, -, -); box: half extents; capsule, cylinder: (r, halflen, -).
  Vec3 dims = Vec3::Zero();

  static Shape sphere(double r) { return {ShapeType::kSphere, Vec3(r, 0, 0)}; }
  static Shape box(double hx, double hy, double hz) { return {ShapeType::kBox, Vec3(hx, hy, hz)}; }
  static Shape capsule(double r, double halflen) { return {ShapeType::kCapsule, Vec3(r, halflen, 0)}; }
  static Shape cylinder(double r, double halflen) { return {ShapeType::kCylinder, Vec3(r, halflen, 0)}; }

  struct Distance {
    double value = 0.0;     // signed distance, negative inside
    Vec3 normal = Vec3::UnitZ();  // outward surface normal at the closest point
  };
  // Exact signed distance for a point in the body frame.
  Distance signed_distance(const Vec3& p) const;
  double volume() const;
  // Solid inertia about the center for unit mass.
  Mat3 unit_inertia() const;
  // Candidate table contact points in the world for a body at `pose`: the
  // lowest point of a sphere or of each capsule cap, box corners, and a ring
  // of points on each cylinder rim.
  std::vector<Vec3> table_points(const RigidTransform& pose) const;
  // Half height when resting in its default orientation.
  double rest_height() const;
  // Largest extent across the horizontal plane (object-size scale).
  double size() const;
  void validate() const;
};

struct BodyDef {
  Shape shape;
  double mass = 1.0;
  Mat3 inertia = Mat3::Identity();
  double friction_mu = 0.6;   // against the table
  double restitution = 0.0;   // recorded; the penalty damping sets the bounce

  // Uniform solid of the given mass.
  static BodyDef solid(const Shape& shape, double mass, double friction_mu = 0.6);
  void validate() const;
};

// Object catalog: id, shape, dimensions in centimeters, weight in grams.
class ObjectCatalog {
 public:
  static ObjectCatalog from_json(const nlohmann::json& doc);
  static ObjectCatalog load(const std::filesystem::path& path);
  const BodyDef& at(const std::string& id) const;
  bool contains(const std::string& id) const { return entries_.count(id) > 0; }
  std::vector<std::string> ids() const;

 private:
  std::map<std::string, BodyDef> entries_;
};

struct ContactParams {
  double k_n = 1e4;     // N/m
  double c_n = 50.0;    // N s/m
  double c_t = 100.0;   // N s/m, viscous friction before the Coulomb cap
  double mu_hand = 0.9;
};

struct HandGains {
  double finger_kp = 20.0;     // N m/rad
  double finger_kd = 0.5;      // N m s/rad
  double finger_armature = 1e-3;  // kg m^2
  double finger_torque_limit = 0.5;  // N m, on the stiffness term
  double base_mass = 0.5;      // kg
  double base_inertia = 1e-2;  // kg m^2, isotropic
  double base_kp_lin = 400.0;  // N/m
  double base_kd_lin = 30.0;   // N s/m
  double base_kp_rot = 10.0;   // N m/rad
  double base_kd_rot = 0.6;    // N m s/rad
};

struct SimConfig {
  ContactParams contact;
  HandGains gains;
  Vec3 gravity = Vec3(0.0, 0.0, -9.81);
  int substeps = 8;
  bool hand_enabled = true;
};

// Collision primitive rigidly attached to one skeleton joint.
struct HandBody {
  std::string name;
  int joint = 0;
  hand::Digit digit = hand::Digit::kPalm;
  bool fingertip = false;
  // Segment endpoints in the joint frame; a == b for spheres.
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();
  double radius = 0.0;
};

// Body ids used in contact records.
inline constexpr int kTableBody = 0;
inline constexpr int kObjectBody = 1;
inline constexpr int kFirstHandBody = 2;

// Capsule per phalanx, sphere per fingertip and four palm capsules.
std::vector<HandBody> hand_bodies(const hand::HandSkeleton& skel, const hand::ShapeVector& shape);

struct ContactRecord {
  long frame = 0;
  int body_a = 0;      // table or hand body
  int body_b = kObjectBody;
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();  // unit, from body_a into body_b
  Vec3 force = Vec3::Zero();    // total contact force on body_b
  double penetration = 0.0;
  double mu = 0.0;              // friction coefficient of the pair
};

struct Wrench {
  Vec3 force = Vec3::Zero();
  Vec3 torque = Vec3::Zero();  // about the object COM, world frame
};

// Target pose of the base plus finger angles. Hinge components are PD
// targets; the remaining free finger angles (abduction) are set directly.
struct HandCommand {
  RigidTransform base;
  hand::FingerAngles fingers = hand::FingerAngles::Zero();
};

struct StepResult {
  std::vector<ContactRecord> contacts;
  Wrench wrench;
};

struct ObjectError {
  double goal_dist = 0.0;  // m
  double rot_error = 0.0;  // rad, in [0, pi]
};

struct RigidState {
  RigidTransform pose;
  Vec3 linear_velocity = Vec3::Zero();
  Vec3 angular_velocity = Vec3::Zero();
};

// Complete dynamical state. `layout` identifies the world it came from.
struct WorldState {
  std::vector<long> layout;
  long frame = 0;
  RigidState object;
  RigidState base;
  hand::FingerAngles fingers = hand::FingerAngles::Zero();
  Eigen::Matrix<double, kHingeCount, 1> hinge_velocity =
      Eigen::Matrix<double, kHingeCount, 1>::Zero();
  bool operator==(const WorldState& o) const;
};

class World {
 public:
  World(std::shared_ptr<const hand::HandSkeleton> skeleton, const hand::ShapeVector& shape,
        const BodyDef& object, const SimConfig& config = {});

  const SimConfig& config() const { return config_; }
  const BodyDef& object_def() const { return object_; }
  const hand::HandSkeleton& skeleton() const { return *skeleton_; }
  const std::vector<HandBody>& bodies() const { return *bodies_; }
  long frame() const { return state_.frame; }

  // Object at rest on the table at (x, y) with the given yaw; zero velocity.
  void place_object(double x, double y, double yaw = 0.0);
  void set_object(const RigidState& s);
  const RigidState& object() const { return state_.object; }
  // Hand placed exactly at the pose with zero velocity.
  void set_hand(const hand::HandPose& pose);
  hand::HandPose hand_pose() const;
  const RigidState& base() const { return state_.base; }
  Eigen::Matrix<double, kHingeCount, 1> hinge_velocity() const { return state_.hinge_velocity; }

  // One control step of kControlDt. Each contact is reported once with its
  // force averaged over the substeps, so the wrench is the mean over the
  // step. Throws SimulationDiverged on non-finite state.
  StepResult step(const HandCommand& cmd);
  // Targets as [base position, base rotation vector, 15 hinge angles]; other
  // finger angles keep their current values.
  StepResult step(const Eigen::Ref<const Eigen::VectorXd>& targets);
  // Step with the hand disabled or holding its pose.
  StepResult step();

  ObjectError query_object_error(const RigidTransform& target) const;

  WorldState get_state() const { return state_; }
  // Throws ValidationError when the state comes from a different world.
  void set_state(const WorldState& s);

  // Kinetic plus gravitational energy of the object.
  double object_energy() const;

 private:
  struct Contact;
  struct Kinematics;

  Kinematics hand_kinematics() const;
  void detect(const Kinematics& kin, std::vector<Contact>& out) const;
  void substep(const HandCommand& cmd, bool drive, double h, std::vector<Contact>& contacts);
  std::vector<long> layout() const;

  std::shared_ptr<const hand::HandSkeleton> skeleton_;
  hand::ShapeVector shape_;
  BodyDef object_;
  SimConfig config_;
  std::shared_ptr<const std::vector<HandBody>> bodies_;
  std::vector<int> hinges_;
  WorldState state_;
};

// Targets vector for step() from a command.
Eigen::VectorXd command_vector(const HandCommand& cmd, const hand::HandSkeleton& skel);

}  // namespace dexforge::physics
