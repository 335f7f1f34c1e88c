#include "dexforge/physics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "dexforge/errors.hpp"

namespace dexforge::physics {

using hand::HandPose;
using hand::HandSkeleton;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

const char* shape_type_name(ShapeType t) {
  switch (t) {
    case ShapeType::kSphere: return "sphere";
    case ShapeType::kBox: return "box";
    case ShapeType::kCapsule: return "capsule";
    case ShapeType::kCylinder: return "cylinder";
  }
  return "?";
}

ShapeType shape_type_from_name(const std::string& name) {
  for (ShapeType t : {ShapeType::kSphere, ShapeType::kBox, ShapeType::kCapsule,
                      ShapeType::kCylinder}) {
    if (name == shape_type_name(t)) return t;
  }
  throw ValidationError("unknown shape '" + name + "'");
}

Shape::Distance Shape::signed_distance(const Vec3& p) const {
  Distance out;
  switch (type) {
    case ShapeType::kSphere: {
      const double n = p.norm();
      out.value = n - dims[0];
      out.normal = n > 0.0 ? Vec3(p / n) : Vec3::UnitZ();
      break;
    }
    case ShapeType::kBox: {
      const Vec3 q = p.cwiseAbs() - dims;
      if ((q.array() > 0.0).any()) {
        const Vec3 c = p.cwiseMax(-dims).cwiseMin(dims);
        const Vec3 d = p - c;
        out.value = d.norm();
        out.normal = d / out.value;
      } else {
        int axis = 0;
        out.value = q.maxCoeff(&axis);
        out.normal = Vec3::Zero();
        out.normal[axis] = p[axis] < 0.0 ? -1.0 : 1.0;
      }
      break;
    }
    case ShapeType::kCapsule: {
      const Vec3 s(0.0, 0.0, std::clamp(p.z(), -dims[1], dims[1]));
      const Vec3 d = p - s;
      const double n = d.norm();
      out.value = n - dims[0];
      out.normal = n > 0.0 ? Vec3(d / n) : Vec3::UnitX();
      break;
    }
    case ShapeType::kCylinder: {
      const double r = dims[0], h = dims[1];
      const double rho = std::hypot(p.x(), p.y());
      const Vec3 radial = rho > 0.0 ? Vec3(p.x() / rho, p.y() / rho, 0.0) : Vec3::UnitX();
      const double dr = rho - r, dz = std::abs(p.z()) - h;
      if (dr > 0.0 || dz > 0.0) {
        const Vec3 c = std::min(rho, r) * radial + Vec3(0.0, 0.0, std::clamp(p.z(), -h, h));
        const Vec3 d = p - c;
        out.value = d.norm();
        out.normal = d / out.value;
      } else if (dr > dz) {
        out.value = dr;
        out.normal = radial;
      } else {
        out.value = dz;
        out.normal = Vec3(0.0, 0.0, p.z() < 0.0 ? -1.0 : 1.0);
      }
      break;
    }
  }
  return out;
}

double Shape::volume() const {
  const double r = dims[0];
  switch (type) {
    case ShapeType::kSphere: return 4.0 / 3.0 * M_PI * r * r * r;
    case ShapeType::kBox: return 8.0 * dims.prod();
    case ShapeType::kCapsule: return M_PI * r * r * 2.0 * dims[1] + 4.0 / 3.0 * M_PI * r * r * r;
    case ShapeType::kCylinder: return M_PI * r * r * 2.0 * dims[1];
  }
  return 0.0;
}

Mat3 Shape::unit_inertia() const {
  const double r = dims[0];
  Vec3 d;
  switch (type) {
    case ShapeType::kSphere:
      d.setConstant(0.4 * r * r);
      break;
    case ShapeType::kBox: {
      const Vec3 s = dims.cwiseAbs2();
      d = Vec3(s.y() + s.z(), s.x() + s.z(), s.x() + s.y()) / 3.0;
      break;
    }
    case ShapeType::kCylinder: {
      const double h = dims[1];
      d = Vec3((3.0 * r * r + 4.0 * h * h) / 12.0, (3.0 * r * r + 4.0 * h * h) / 12.0, 0.5 * r * r);
      break;
    }
    case ShapeType::kCapsule: {
      const double h = dims[1];
      const double vc = M_PI * r * r * 2.0 * h, vs = 4.0 / 3.0 * M_PI * r * r * r;
      const double mc = vc / (vc + vs), ms = vs / (vc + vs);
      const double lateral = mc * (h * h / 3.0 + r * r / 4.0) +
                             ms * (0.4 * r * r + h * h + 0.75 * h * r);
      d = Vec3(lateral, lateral, mc * 0.5 * r * r + ms * 0.4 * r * r);
      break;
    }
  }
  return d.asDiagonal();
}

std::vector<Vec3> Shape::table_points(const RigidTransform& pose) const {
  std::vector<Vec3> out;
  const Mat3 rot = pose.rotation.toRotationMatrix();
  switch (type) {
    case ShapeType::kSphere:
      out.push_back(pose.translation - dims[0] * Vec3::UnitZ());
      break;
    case ShapeType::kCapsule:
      for (double s : {-1.0, 1.0}) {
        out.push_back(pose * Vec3(0.0, 0.0, s * dims[1]) - dims[0] * Vec3::UnitZ());
      }
      break;
    case ShapeType::kBox:
      for (int c = 0; c < 8; ++c) {
        const Vec3 corner((c & 1 ? 1 : -1) * dims.x(), (c & 2 ? 1 : -1) * dims.y(),
                          (c & 4 ? 1 : -1) * dims.z());
        out.push_back(pose.translation + rot * corner);
      }
      break;
    case ShapeType::kCylinder: {
      constexpr int kRim = 16;
      for (double s : {-1.0, 1.0}) {
        for (int k = 0; k < kRim; ++k) {
          const double a = 2.0 * M_PI * k / kRim;
          out.push_back(pose * Vec3(dims[0] * std::cos(a), dims[0] * std::sin(a), s * dims[1]));
        }
      }
      break;
    }
  }
  return out;
}

double Shape::rest_height() const {
  switch (type) {
    case ShapeType::kSphere: return dims[0];
    case ShapeType::kBox: return dims[2];
    case ShapeType::kCapsule: return dims[1] + dims[0];
    case ShapeType::kCylinder: return dims[1];
  }
  return 0.0;
}

double Shape::size() const {
  switch (type) {
    case ShapeType::kSphere:
    case ShapeType::kCapsule:
    case ShapeType::kCylinder: return 2.0 * dims[0];
    case ShapeType::kBox: return 2.0 * std::max(dims[0], dims[1]);
  }
  return 0.0;
}

void Shape::validate() const {
  const int n = type == ShapeType::kSphere ? 1 : type == ShapeType::kBox ? 3 : 2;
  for (int i = 0; i < n; ++i) {
    if (!(dims[i] > 0.0) || !std::isfinite(dims[i])) {
      throw ValidationError(std::string(shape_type_name(type)) + " dimensions must be positive");
    }
  }
}

BodyDef BodyDef::solid(const Shape& shape, double mass, double friction_mu) {
  BodyDef b;
  b.shape = shape;
  b.mass = mass;
  b.inertia = mass * shape.unit_inertia();
  b.friction_mu = friction_mu;
  b.validate();
  return b;
}

void BodyDef::validate() const {
  shape.validate();
  if (!(mass > 0.0) || !std::isfinite(mass)) throw ValidationError("mass must be positive");
  if (!inertia.allFinite() || !inertia.isApprox(inertia.transpose(), 1e-12)) {
    throw ValidationError("inertia must be symmetric");
  }
  if (Eigen::SelfAdjointEigenSolver<Mat3>(inertia).eigenvalues().minCoeff() <= 0.0) {
    throw ValidationError("inertia must be positive definite");
  }
  if (!(friction_mu >= 0.0)) throw ValidationError("friction must be nonnegative");
  if (!(restitution >= 0.0 && restitution <= 1.0)) {
    throw ValidationError("restitution must lie in [0, 1]");
  }
}

ObjectCatalog ObjectCatalog::from_json(const nlohmann::json& doc) {
  ObjectCatalog cat;
  try {
    for (const auto& e : doc.at("objects")) {
      const std::string id = e.at("id").get<std::string>();
      const ShapeType type = shape_type_from_name(e.at("shape").get<std::string>());
      const auto cm = e.at("dimensions_cm").get<std::vector<double>>();
      const double grams = e.at("weight_g").get<double>();
      Shape shape;
      auto need = [&](std::size_t n) {
        if (cm.size() != n) throw ValidationError(id + ": expected " + std::to_string(n) + " dimensions");
      };
      switch (type) {
        case ShapeType::kSphere:  // diameter
          need(1);
          shape = Shape::sphere(0.5 * cm[0] / 100.0);
          break;
        case ShapeType::kBox:  // edge lengths
          need(3);
          shape = Shape::box(0.5 * cm[0] / 100.0, 0.5 * cm[1] / 100.0, 0.5 * cm[2] / 100.0);
          break;
        case ShapeType::kCapsule:
        case ShapeType::kCylinder:  // diameter, length
          need(2);
          shape = Shape{type, Vec3(0.5 * cm[0] / 100.0, 0.5 * cm[1] / 100.0, 0.0)};
          break;
      }
      BodyDef body = BodyDef::solid(shape, grams / 1000.0, e.value("friction_mu", 0.6));
      body.restitution = e.value("restitution", 0.0);
      body.validate();
      if (!cat.entries_.emplace(id, body).second) throw ValidationError("duplicate object " + id);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("object catalog: ") + e.what());
  }
  return cat;
}

ObjectCatalog ObjectCatalog::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open object catalog " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

const BodyDef& ObjectCatalog::at(const std::string& id) const {
  const auto it = entries_.find(id);
  if (it == entries_.end()) throw ConfigError("unknown object '" + id + "'");
  return it->second;
}

std::vector<std::string> ObjectCatalog::ids() const {
  std::vector<std::string> out;
  for (const auto& kv : entries_) out.push_back(kv.first);
  return out;
}

std::vector<HandBody> hand_bodies(const HandSkeleton& skel, const hand::ShapeVector& shape) {
  const auto& joints = skel.joints();
  auto radius = [](hand::Digit d) {
    switch (d) {
      case hand::Digit::kThumb: return 0.0095;
      case hand::Digit::kIndex:
      case hand::Digit::kMiddle: return 0.0085;
      case hand::Digit::kRing: return 0.008;
      case hand::Digit::kPinky: return 0.007;
      case hand::Digit::kPalm: return 0.012;
    }
    return 0.008;
  };
  std::vector<HandBody> out;
  for (int root : skel.children(0)) {
    if (joints[root].digit == hand::Digit::kThumb) continue;
    HandBody palm;
    palm.name = std::string("palm_") + hand::digit_name(joints[root].digit);
    palm.joint = 0;
    palm.digit = hand::Digit::kPalm;
    const Vec3 base = skel.rest_offset(root, shape);
    palm.a = Vec3(0.02, base.y(), base.z());
    palm.b = base - Vec3(0.012, 0.0, 0.0);
    palm.radius = radius(hand::Digit::kPalm);
    out.push_back(palm);
  }
  for (int j = 1; j < hand::kJointCount; ++j) {
    const auto& jd = joints[j];
    const double r = radius(jd.digit);
    HandBody seg;
    seg.name = jd.name;
    seg.joint = j;
    seg.digit = jd.digit;
    seg.radius = r;
    if (!skel.children(j).empty()) {
      seg.b = skel.rest_offset(skel.children(j).front(), shape);
      out.push_back(seg);
    } else {
      seg.b = 0.45 * jd.segment_end;
      out.push_back(seg);
      HandBody tip = seg;
      tip.name = jd.name + "_tip";
      tip.fingertip = true;
      tip.a = tip.b = 0.7 * jd.segment_end;
      out.push_back(tip);
    }
  }
  return out;
}

bool WorldState::operator==(const WorldState& o) const {
  auto same = [](const RigidState& a, const RigidState& b) {
    return a.pose.translation == b.pose.translation &&
           a.pose.rotation.coeffs() == b.pose.rotation.coeffs() &&
           a.linear_velocity == b.linear_velocity && a.angular_velocity == b.angular_velocity;
  };
  return layout == o.layout && frame == o.frame && same(object, o.object) && same(base, o.base) &&
         fingers == o.fingers && hinge_velocity == o.hinge_velocity;
}

// Geometric contact with everything the implicit solve needs.
struct World::Contact {
  int body_a = kTableBody;
  int joint = -1;  // hand joint carrying body_a, -1 for the table
  int feature = 0;  // table support point index
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  double depth = 0.0;
  double mu = 0.0;
  Vec3 other_velocity = Vec3::Zero();
  Vec3 force = Vec3::Zero();
  bool active = true;
  bool sliding = false;
  Vec3 slide_force = Vec3::Zero();
};

struct World::Kinematics {
  hand::JointFrames frames;
  // World hinge axis per joint (index 1..15).
  std::vector<Vec3> axes;

  Vec3 point_velocity(const World& w, int joint, const Vec3& p) const {
    const RigidState& b = w.state_.base;
    Vec3 v = b.linear_velocity + b.angular_velocity.cross(p - frames.origin[0]);
    for (int j = joint; j > 0; j = w.skeleton_->joints()[j].parent) {
      v += w.state_.hinge_velocity[j - 1] * axes[j].cross(p - frames.origin[j]);
    }
    return v;
  }
};

World::World(std::shared_ptr<const HandSkeleton> skeleton, const hand::ShapeVector& shape,
             const BodyDef& object, const SimConfig& config)
    : skeleton_(std::move(skeleton)), shape_(shape), object_(object), config_(config) {
  if (!skeleton_) throw ValidationError("world needs a skeleton");
  skeleton_->check_shape(shape_);
  object_.validate();
  if (config_.substeps < 1) throw ValidationError("substeps must be positive");
  const HandGains& g = config_.gains;
  for (double v : {g.finger_kp, g.finger_kd, g.finger_armature, g.finger_torque_limit,
                   g.base_mass, g.base_inertia, g.base_kp_lin, g.base_kd_lin, g.base_kp_rot,
                   g.base_kd_rot}) {
    if (!(v > 0.0)) throw ValidationError("hand gains must be positive");
  }
  hinges_ = skeleton_->hinge_parameters();
  if (static_cast<int>(hinges_.size()) != kHingeCount) {
    throw ValidationError("skeleton must have one hinge per articulated joint");
  }
  bodies_ = std::make_shared<const std::vector<HandBody>>(
      config_.hand_enabled ? hand_bodies(*skeleton_, shape_) : std::vector<HandBody>{});
  state_.layout = layout();
  state_.base.pose.translation = Vec3(0.0, 0.0, 0.5);
  state_.fingers = skeleton_->project_to_limits(hand::FingerAngles::Zero());
  place_object(0.0, 0.0);
}

std::vector<long> World::layout() const {
  return {1 + static_cast<long>(bodies_->size()), config_.hand_enabled ? kHingeCount : 0,
          static_cast<long>(object_.shape.type)};
}

void World::place_object(double x, double y, double yaw) {
  state_.object = RigidState{};
  state_.object.pose.translation = Vec3(x, y, object_.shape.rest_height());
  state_.object.pose.rotation = Quat(Eigen::AngleAxisd(yaw, Vec3::UnitZ()));
}

void World::set_object(const RigidState& s) {
  s.pose.validate();
  state_.object = s;
  state_.object.pose.rotation.normalize();
}

void World::set_hand(const HandPose& pose) {
  pose.wrist.validate();
  state_.base = RigidState{};
  state_.base.pose = pose.wrist;
  state_.fingers = skeleton_->project_to_limits(pose.finger_angles);
  state_.hinge_velocity.setZero();
}

HandPose World::hand_pose() const {
  HandPose p;
  p.wrist = state_.base.pose;
  p.finger_angles = state_.fingers;
  return p;
}

ObjectError World::query_object_error(const RigidTransform& target) const {
  return {(state_.object.pose.translation - target.translation).norm(),
          geodesic_angle(state_.object.pose.rotation, target.rotation)};
}

void World::set_state(const WorldState& s) {
  if (s.layout != layout()) throw ValidationError("state belongs to a different world");
  state_ = s;
}

double World::object_energy() const {
  const RigidState& o = state_.object;
  const Mat3 r = o.pose.rotation.toRotationMatrix();
  const Mat3 inertia = r * object_.inertia * r.transpose();
  return 0.5 * object_.mass * o.linear_velocity.squaredNorm() +
         0.5 * o.angular_velocity.dot(inertia * o.angular_velocity) -
         object_.mass * config_.gravity.dot(o.pose.translation);
}

World::Kinematics World::hand_kinematics() const {
  Kinematics k;
  k.frames = hand::compute_frames(*skeleton_, shape_, hand_pose());
  k.axes.assign(hand::kJointCount, Vec3::Zero());
  for (int j = 1; j < hand::kJointCount; ++j) {
    const Vec3 theta = state_.fingers.segment<3>(3 * (j - 1));
    const int axis = skeleton_->joints()[j].hinge_axis;
    k.axes[j] = k.frames.rotation[j] * so3::right_jacobian(theta).col(axis);
  }
  return k;
}

namespace {

// Minimum of a convex function on [0, 1].
template <class F>
double golden_section(const F& f) {
  constexpr double kInvPhi = 0.6180339887498949;
  double lo = 0.0, hi = 1.0;
  double x1 = hi - kInvPhi * (hi - lo), x2 = lo + kInvPhi * (hi - lo);
  double f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < 40; ++it) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - kInvPhi * (hi - lo);
      f1 = f(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + kInvPhi * (hi - lo);
      f2 = f(x2);
    }
  }
  double best = 0.5 * (lo + hi), fb = f(best);
  for (double s : {0.0, 1.0}) {
    const double v = f(s);
    if (v < fb) {
      fb = v;
      best = s;
    }
  }
  return best;
}

}  // namespace

void World::detect(const Kinematics& kin, std::vector<Contact>& out) const {
  out.clear();
  const RigidState& o = state_.object;
  const std::vector<Vec3> support = object_.shape.table_points(o.pose);
  for (std::size_t k = 0; k < support.size(); ++k) {
    const Vec3& p = support[k];
    if (p.z() >= 0.0) continue;
    Contact c;
    c.body_a = kTableBody;
    c.feature = static_cast<int>(k);
    c.point = Vec3(p.x(), p.y(), 0.0);
    c.normal = Vec3::UnitZ();
    c.depth = -p.z();
    c.mu = object_.friction_mu;
    out.push_back(c);
  }
  if (!config_.hand_enabled) return;

  const Quat inv = o.pose.rotation.conjugate();
  const Mat3 rot = o.pose.rotation.toRotationMatrix();
  const double reach = 0.5 * object_.shape.size() + object_.shape.rest_height() + 0.05;
  auto sdf = [&](const Vec3& world) {
    return object_.shape.signed_distance(inv * (world - o.pose.translation));
  };
  const auto& bodies = *bodies_;
  for (std::size_t i = 0; i < bodies.size(); ++i) {
    const HandBody& hb = bodies[i];
    const Mat3& rj = kin.frames.rotation[hb.joint];
    const Vec3& oj = kin.frames.origin[hb.joint];
    const Vec3 a = oj + rj * hb.a, b = oj + rj * hb.b;
    const Vec3 mid = 0.5 * (a + b);
    if ((mid - o.pose.translation).norm() > reach + 0.5 * (b - a).norm() + hb.radius) continue;
    Vec3 p = a;
    if (hb.a != hb.b) {
      const double s = golden_section([&](double t) { return sdf(a + t * (b - a)).value; });
      p = a + s * (b - a);
    }
    const Shape::Distance d = sdf(p);
    if (d.value >= hb.radius) continue;
    const Vec3 outward = rot * d.normal;
    Contact c;
    c.body_a = kFirstHandBody + static_cast<int>(i);
    c.joint = hb.joint;
    c.normal = -outward;
    c.point = p - d.value * outward;
    c.depth = hb.radius - d.value;
    c.mu = config_.contact.mu_hand;
    c.other_velocity = kin.point_velocity(*this, hb.joint, c.point);
    out.push_back(c);
  }
}

void World::substep(const HandCommand& cmd, bool drive, double h, std::vector<Contact>& contacts) {
  const ContactParams& cp = config_.contact;
  Kinematics kin;
  if (config_.hand_enabled) kin = hand_kinematics();
  detect(kin, contacts);

  // Object: backward Euler on the linearized contact springs and dampers,
  // with an active set for separating and sliding contacts.
  RigidState& o = state_.object;
  const Mat3 rot = o.pose.rotation.toRotationMatrix();
  const Mat3 inertia = rot * object_.inertia * rot.transpose();
  Mat6 mass = Mat6::Zero();
  mass.topLeftCorner<3, 3>() = object_.mass * Mat3::Identity();
  mass.bottomRightCorner<3, 3>() = inertia;
  Vec6 u;
  u << o.linear_velocity, o.angular_velocity;
  Vec6 external;
  external << object_.mass * config_.gravity,
      -o.angular_velocity.cross(inertia * o.angular_velocity);

  auto jacobian = [&](const Contact& c) {
    Eigen::Matrix<double, 3, 6> j;
    j << Mat3::Identity(), -so3::hat(c.point - o.pose.translation);
    return j;
  };
  auto stiffness = [&](const Contact& c) {
    const Mat3 nn = c.normal * c.normal.transpose();
    Mat3 k = (cp.k_n * h + cp.c_n) * nn;
    if (!c.sliding) k += cp.c_t * (Mat3::Identity() - nn);
    return k;
  };
  auto force_at = [&](const Contact& c, const Vec6& vel) {
    const Vec3 rel = jacobian(c) * vel - c.other_velocity;
    return Vec3(cp.k_n * c.depth * c.normal - stiffness(c) * rel + c.slide_force);
  };

  Vec6 u_new = u;
  for (int pass = 0; pass < 8; ++pass) {
    Mat6 a = mass;
    Vec6 rhs = mass * u + h * external;
    for (const Contact& c : contacts) {
      if (!c.active) continue;
      const auto j = jacobian(c);
      const Mat3 k = stiffness(c);
      a += h * j.transpose() * k * j;
      rhs += h * j.transpose() * (cp.k_n * c.depth * c.normal + k * c.other_velocity + c.slide_force);
    }
    u_new = contacts.empty() ? Vec6(u + h * mass.ldlt().solve(external)) : Vec6(a.ldlt().solve(rhs));
    bool changed = false;
    for (Contact& c : contacts) {
      if (!c.active) continue;
      const Vec3 f = force_at(c, u_new);
      const double fn = f.dot(c.normal);
      if (fn < 0.0) {
        c.active = false;
        changed = true;
        continue;
      }
      const Vec3 ft = f - fn * c.normal;
      if (!c.sliding && ft.norm() > c.mu * fn) {
        c.sliding = true;
        c.slide_force = c.mu * fn * ft.normalized();
        changed = true;
      }
    }
    if (!changed) break;
  }

  // Clamp onto the cone and apply exactly the reported forces.
  Vec6 generalized = external;
  for (Contact& c : contacts) {
    c.force.setZero();
    if (!c.active) continue;
    const Vec3 f = force_at(c, u_new);
    const double fn = std::max(0.0, f.dot(c.normal));
    Vec3 ft = f - f.dot(c.normal) * c.normal;
    const double cap = c.mu * fn;
    if (ft.norm() > cap) ft *= cap / ft.norm();
    c.force = fn * c.normal + ft;
    generalized += jacobian(c).transpose() * c.force;
  }
  Vec6 accel;
  accel << generalized.head<3>() / object_.mass, inertia.ldlt().solve(generalized.tail<3>());
  const Vec6 u_final = u + h * accel;
  o.linear_velocity = u_final.head<3>();
  o.angular_velocity = u_final.tail<3>();
  o.pose.translation += h * o.linear_velocity;
  o.pose.rotation = (so3::exp_quat(h * o.angular_velocity) * o.pose.rotation).normalized();

  if (!config_.hand_enabled) return;

  // Hand: reaction forces explicit, PD implicit per degree of freedom.
  const HandGains& g = config_.gains;
  Vec3 base_force = Vec3::Zero(), base_torque = Vec3::Zero();
  Eigen::Matrix<double, kHingeCount, 1> tau = Eigen::Matrix<double, kHingeCount, 1>::Zero();
  for (const Contact& c : contacts) {
    if (c.joint < 0 || c.force.isZero(0.0)) continue;
    const Vec3 f = -c.force;
    base_force += f;
    base_torque += (c.point - kin.frames.origin[0]).cross(f);
    for (int j = c.joint; j > 0; j = skeleton_->joints()[j].parent) {
      tau[j - 1] += kin.axes[j].dot((c.point - kin.frames.origin[j]).cross(f));
    }
  }

  RigidState& b = state_.base;
  const RigidTransform target = drive ? cmd.base : b.pose;
  const double m = g.base_mass, ib = g.base_inertia;
  b.linear_velocity = (m * b.linear_velocity +
                       h * (g.base_kp_lin * (target.translation - b.pose.translation) + base_force)) /
                      (m + h * g.base_kd_lin + h * h * g.base_kp_lin);
  const Vec3 err = so3::log(target.rotation * b.pose.rotation.conjugate());
  b.angular_velocity = (ib * b.angular_velocity + h * (g.base_kp_rot * err + base_torque)) /
                       (ib + h * g.base_kd_rot + h * h * g.base_kp_rot);
  b.pose.translation += h * b.linear_velocity;
  b.pose.rotation = (so3::exp_quat(h * b.angular_velocity) * b.pose.rotation).normalized();

  const double ia = g.finger_armature;
  for (int k = 0; k < kHingeCount; ++k) {
    const int p = hinges_[k];
    double& theta = state_.fingers[p];
    double& rate = state_.hinge_velocity[k];
    const double goal = drive ? cmd.fingers[p] : theta;
    double next = (ia * rate + h * (g.finger_kp * (goal - theta) + tau[k])) /
                  (ia + h * g.finger_kd + h * h * g.finger_kp);
    const double spring = g.finger_kp * (goal - theta - h * next);
    if (std::abs(spring) > g.finger_torque_limit) {
      next = (ia * rate + h * (std::copysign(g.finger_torque_limit, spring) + tau[k])) /
             (ia + h * g.finger_kd);
    }
    rate = next;
    theta += h * rate;
    const hand::JointLimit& lim = skeleton_->limit(p);
    if (theta < lim.lo || theta > lim.hi) {
      theta = std::clamp(theta, lim.lo, lim.hi);
      rate = 0.0;
    }
  }
  if (drive) {
    for (int p : skeleton_->free_parameters()) {
      if (std::find(hinges_.begin(), hinges_.end(), p) == hinges_.end()) {
        state_.fingers[p] = std::clamp(cmd.fingers[p], skeleton_->limit(p).lo, skeleton_->limit(p).hi);
      }
    }
  }
}

StepResult World::step(const HandCommand& cmd) {
  if (!cmd.base.translation.allFinite() || !cmd.base.rotation.coeffs().allFinite() ||
      !cmd.fingers.allFinite()) {
    throw ValidationError("hand command must be finite");
  }
  HandCommand c = cmd;
  c.base.rotation.normalize();
  const double h = kControlDt / config_.substeps;
  std::vector<Contact> contacts;
  // Per (body, feature): force sum, |f|-weighted point and depth, fn-weighted normal.
  struct Sum {
    Vec3 force = Vec3::Zero(), point = Vec3::Zero(), normal = Vec3::Zero();
    double weight = 0.0, depth = 0.0, mu = 0.0;
  };
  std::map<std::pair<int, int>, Sum> sums;
  for (int s = 0; s < config_.substeps; ++s) {
    substep(c, true, h, contacts);
    const RigidState& o = state_.object;
    const bool finite = o.pose.translation.allFinite() && o.linear_velocity.allFinite() &&
                        o.angular_velocity.allFinite() && state_.base.pose.translation.allFinite() &&
                        state_.fingers.allFinite() && state_.hinge_velocity.allFinite();
    if (!finite || o.pose.translation.norm() > 1e3) {
      throw SimulationDiverged("simulation state left the finite range", state_.frame);
    }
    for (const Contact& k : contacts) {
      const double fn = k.force.dot(k.normal);
      if (!k.active || fn <= 0.0) continue;
      Sum& sum = sums[{k.body_a, k.feature}];
      const double w = k.force.norm();
      sum.force += k.force;
      sum.point += w * k.point;
      sum.depth += w * k.depth;
      sum.normal += fn * k.normal;
      sum.weight += w;
      sum.mu = k.mu;
    }
  }
  ++state_.frame;

  // Frame averages over the substeps, projected onto the cone of the mean
  // normal.
  StepResult out;
  for (const auto& [key, sum] : sums) {
    ContactRecord r;
    r.frame = state_.frame;
    r.body_a = key.first;
    r.normal = sum.normal.normalized();
    r.point = sum.point / sum.weight;
    r.penetration = sum.depth / sum.weight;
    r.mu = sum.mu;
    const Vec3 f = sum.force / config_.substeps;
    const double fn = f.dot(r.normal);
    if (!(fn > 0.0)) continue;
    Vec3 ft = f - fn * r.normal;
    if (ft.norm() > r.mu * fn) ft *= r.mu * fn / ft.norm();
    r.force = fn * r.normal + ft;
    out.wrench.force += r.force;
    out.wrench.torque += (r.point - state_.object.pose.translation).cross(r.force);
    out.contacts.push_back(r);
  }
  return out;
}

StepResult World::step(const Eigen::Ref<const Eigen::VectorXd>& targets) {
  if (targets.size() != kActuatedDofs) {
    throw ValidationError("expected " + std::to_string(kActuatedDofs) + " joint targets");
  }
  HandCommand cmd;
  cmd.base.translation = targets.head<3>();
  cmd.base.rotation = so3::exp_quat(targets.segment<3>(3));
  cmd.fingers = state_.fingers;
  for (int k = 0; k < kHingeCount; ++k) cmd.fingers[hinges_[k]] = targets[6 + k];
  return step(cmd);
}

StepResult World::step() {
  HandCommand hold;
  hold.base = state_.base.pose;
  hold.fingers = state_.fingers;
  return step(hold);
}

Eigen::VectorXd command_vector(const HandCommand& cmd, const HandSkeleton& skel) {
  Eigen::VectorXd v(kActuatedDofs);
  v.head<3>() = cmd.base.translation;
  v.segment<3>(3) = so3::log(cmd.base.rotation);
  const std::vector<int> hinges = skel.hinge_parameters();
  for (int k = 0; k < kHingeCount; ++k) v[6 + k] = cmd.fingers[hinges[k]];
  return v;
}

}  // namespace dexforge::physics
