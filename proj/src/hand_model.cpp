#include "dexforge/hand_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "dexforge/errors.hpp"

namespace dexforge::hand {

using nlohmann::json;

const char* digit_name(Digit d) {
  switch (d) {
    case Digit::kThumb: return "thumb";
    case Digit::kIndex: return "index";
    case Digit::kMiddle: return "middle";
    case Digit::kRing: return "ring";
    case Digit::kPinky: return "pinky";
    case Digit::kPalm: return "palm";
  }
  return "?";
}

namespace {

Digit parse_digit(const std::string& s) {
  for (int i = 0; i < kDigitCount; ++i) {
    if (s == digit_name(static_cast<Digit>(i))) return static_cast<Digit>(i);
  }
  throw ValidationError("unknown digit '" + s + "'");
}

Vec3 vec3_from(const json& j) {
  if (!j.is_array() || j.size() != 3) {
    throw ValidationError("expected a 3-element array");
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json vec3_to(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace

HandSkeleton::HandSkeleton(std::string name, std::vector<JointDef> joints,
                           std::vector<MarkerSite> markers, double shape_bound)
    : name_(std::move(name)),
      joints_(std::move(joints)),
      markers_(std::move(markers)),
      shape_bound_(shape_bound) {
  validate();
  children_.assign(joints_.size(), {});
  for (int j = 1; j < static_cast<int>(joints_.size()); ++j) {
    children_[joints_[j].parent].push_back(j);
  }
  for (int p = 0; p < kFingerParams; ++p) {
    if (!limit(p).locked()) free_params_.push_back(p);
  }
}

void HandSkeleton::validate() const {
  if (joints_.size() != static_cast<std::size_t>(kJointCount)) {
    throw ValidationError("skeleton must have 16 joints (wrist + 15)");
  }
  if (markers_.size() != static_cast<std::size_t>(kMarkerCount)) {
    throw ValidationError("skeleton must have exactly 14 marker sites");
  }
  if (joints_[0].parent != -1) {
    throw ValidationError("joint 0 must be the root");
  }
  for (int j = 1; j < kJointCount; ++j) {
    const auto& jd = joints_[j];
    if (jd.parent < 0 || jd.parent >= j) {
      throw ValidationError("joint '" + jd.name +
                            "' must have a parent with a smaller index");
    }
    if (!jd.rest_offset.allFinite() || !jd.shape_mix.allFinite() ||
        !jd.rest_rotation.allFinite()) {
      throw ValidationError("joint '" + jd.name + "' has non-finite geometry");
    }
    if (jd.hinge_axis < 0 || jd.hinge_axis > 2 ||
        jd.limits[jd.hinge_axis].locked()) {
      throw ValidationError("joint '" + jd.name + "' hinge axis must be free");
    }
    for (const auto& l : jd.limits) {
      if (l.hi < l.lo) {
        throw ValidationError("joint '" + jd.name + "' has an inverted limit");
      }
    }
  }
  for (const auto& m : markers_) {
    if (m.joint < 0 || m.joint >= kJointCount || !m.offset.allFinite()) {
      throw ValidationError("marker '" + m.name + "' is malformed");
    }
  }
  if (!(shape_bound_ > 0.0) || !std::isfinite(shape_bound_)) {
    throw ValidationError("shape bound must be positive");
  }
}

HandSkeleton HandSkeleton::from_json(const json& doc) {
  try {
    std::vector<JointDef> joints;
    for (const auto& jj : doc.at("joints")) {
      JointDef jd;
      jd.name = jj.at("name").get<std::string>();
      jd.parent = jj.at("parent").get<int>();
      jd.digit = parse_digit(jj.value("digit", std::string("palm")));
      if (jj.contains("offset")) jd.rest_offset = vec3_from(jj["offset"]);
      if (jj.contains("rest_rotation")) {
        jd.rest_rotation = vec3_from(jj["rest_rotation"]);
      }
      if (jj.contains("segment_end")) {
        jd.segment_end = vec3_from(jj["segment_end"]);
      }
      jd.hinge_axis = jj.value("hinge_axis", 1);
      if (jj.contains("limits")) {
        const auto& lim = jj["limits"];
        if (lim.size() != 3) throw ValidationError("limits need 3 axes");
        for (int a = 0; a < 3; ++a) {
          jd.limits[a] = {lim[a].at(0).get<double>(), lim[a].at(1).get<double>()};
        }
      }
      if (jj.contains("shape_mix")) {
        const auto& mix = jj["shape_mix"];
        if (mix.size() != 3) throw ValidationError("shape_mix needs 3 rows");
        for (int r = 0; r < 3; ++r) {
          if (mix[r].size() != kShapeDim) {
            throw ValidationError("shape_mix rows need 10 entries");
          }
          for (int k = 0; k < kShapeDim; ++k) {
            jd.shape_mix(r, k) = mix[r][k].get<double>();
          }
        }
      }
      joints.push_back(std::move(jd));
    }
    std::vector<MarkerSite> markers;
    for (const auto& mj : doc.at("markers")) {
      markers.push_back({mj.at("name").get<std::string>(),
                         mj.at("joint").get<int>(), vec3_from(mj.at("offset"))});
    }
    return HandSkeleton(doc.value("name", std::string("custom")),
                        std::move(joints), std::move(markers),
                        doc.value("shape_bound", 3.0));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed skeleton document: ") +
                          e.what());
  }
}

HandSkeleton HandSkeleton::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open skeleton file " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(doc);
}

json HandSkeleton::to_json() const {
  json joints = json::array();
  for (const auto& jd : joints_) {
    json jj;
    jj["name"] = jd.name;
    jj["parent"] = jd.parent;
    jj["digit"] = digit_name(jd.digit);
    if (jd.parent >= 0) {
      jj["offset"] = vec3_to(jd.rest_offset);
      jj["rest_rotation"] = vec3_to(jd.rest_rotation);
      jj["segment_end"] = vec3_to(jd.segment_end);
      jj["hinge_axis"] = jd.hinge_axis;
      json lim = json::array();
      for (const auto& l : jd.limits) lim.push_back({l.lo, l.hi});
      jj["limits"] = lim;
      json mix = json::array();
      for (int r = 0; r < 3; ++r) {
        json row = json::array();
        for (int k = 0; k < kShapeDim; ++k) row.push_back(jd.shape_mix(r, k));
        mix.push_back(row);
      }
      jj["shape_mix"] = mix;
    }
    joints.push_back(jj);
  }
  json markers = json::array();
  for (const auto& m : markers_) {
    markers.push_back(
        {{"name", m.name}, {"joint", m.joint}, {"offset", vec3_to(m.offset)}});
  }
  return {{"name", name_},
          {"shape_bound", shape_bound_},
          {"joints", joints},
          {"markers", markers}};
}

Vec3 HandSkeleton::rest_offset(int joint, const ShapeVector& shape) const {
  const auto& jd = joints_[joint];
  return jd.rest_offset + jd.shape_mix * shape.beta;
}

bool HandSkeleton::on_chain(int ancestor, int joint) const {
  for (int j = joint; j >= 0; j = joints_[j].parent) {
    if (j == ancestor) return true;
  }
  return false;
}

const JointLimit& HandSkeleton::limit(int angle_param) const {
  return joints_[angle_param / 3 + 1].limits[angle_param % 3];
}

std::vector<int> HandSkeleton::hinge_parameters() const {
  std::vector<int> out;
  for (int j = 1; j < kJointCount; ++j) {
    out.push_back(angle_index(j, joints_[j].hinge_axis));
  }
  return out;
}

void HandSkeleton::check_shape(const ShapeVector& shape) const {
  for (int k = 0; k < kShapeDim; ++k) {
    const double b = shape.beta[k];
    if (!std::isfinite(b) || std::abs(b) > shape_bound_) {
      throw DomainError("shape coefficient " + std::to_string(k) +
                        " outside the admissible box");
    }
  }
}

void HandSkeleton::check_pose(const HandPose& pose) const {
  pose.wrist.validate();
  if (!pose.finger_angles.allFinite()) {
    throw ValidationError("finger angles must be finite");
  }
  for (int p = 0; p < kFingerParams; ++p) {
    if (!limit(p).contains(pose.finger_angles[p])) {
      throw ValidationError("finger angle " + std::to_string(p) +
                            " outside its joint limit");
    }
  }
}

FingerAngles HandSkeleton::project_to_limits(const FingerAngles& angles) const {
  FingerAngles out;
  for (int p = 0; p < kFingerParams; ++p) {
    out[p] = std::clamp(angles[p], limit(p).lo, limit(p).hi);
  }
  return out;
}

FingerAngles HandSkeleton::mid_range() const {
  FingerAngles out;
  for (int p = 0; p < kFingerParams; ++p) out[p] = limit(p).mid();
  return out;
}

JointFrames compute_frames(const HandSkeleton& skel, const ShapeVector& shape,
                           const HandPose& pose) {
  const auto& joints = skel.joints();
  JointFrames f;
  f.rotation.resize(joints.size());
  f.origin.resize(joints.size());
  f.rotation[0] = pose.wrist.rotation.toRotationMatrix();
  f.origin[0] = pose.wrist.translation;
  for (std::size_t j = 1; j < joints.size(); ++j) {
    const auto& jd = joints[j];
    const Mat3& gp = f.rotation[jd.parent];
    f.origin[j] = f.origin[jd.parent] + gp * skel.rest_offset(j, shape);
    const Vec3 theta = pose.finger_angles.segment<3>(3 * (j - 1));
    Mat3 local = so3::exp(theta);
    if (!jd.rest_rotation.isZero()) local = so3::exp(jd.rest_rotation) * local;
    f.rotation[j] = gp * local;
  }
  return f;
}

FkResult forward_kinematics(const HandSkeleton& skel, const ShapeVector& shape,
                            const HandPose& pose) {
  skel.check_shape(shape);
  pose.wrist.validate();
  if (!pose.finger_angles.allFinite()) {
    throw ValidationError("finger angles must be finite");
  }
  const JointFrames f = compute_frames(skel, shape, pose);
  FkResult out;
  out.joint_positions = f.origin;
  out.marker_positions.reserve(skel.markers().size());
  for (const auto& m : skel.markers()) {
    out.marker_positions.push_back(f.origin[m.joint] +
                                   f.rotation[m.joint] * m.offset);
  }
  return out;
}

Eigen::VectorXd marker_vector(const HandSkeleton& skel, const ShapeVector& shape,
                              const HandPose& pose) {
  const JointFrames f = compute_frames(skel, shape, pose);
  Eigen::VectorXd x(3 * skel.markers().size());
  for (std::size_t i = 0; i < skel.markers().size(); ++i) {
    const auto& m = skel.markers()[i];
    x.segment<3>(3 * i) = f.origin[m.joint] + f.rotation[m.joint] * m.offset;
  }
  return x;
}

Eigen::MatrixXd fk_jacobian(const HandSkeleton& skel, const ShapeVector& shape,
                            const HandPose& pose) {
  const JointFrames f = compute_frames(skel, shape, pose);
  const auto& markers = skel.markers();
  const auto& joints = skel.joints();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(3 * markers.size(), kPoseParams);

  // World-frame rotation axes for each finger parameter.
  std::vector<Mat3> axes(joints.size(), Mat3::Zero());
  for (std::size_t j = 1; j < joints.size(); ++j) {
    const Vec3 theta = pose.finger_angles.segment<3>(3 * (j - 1));
    axes[j] = f.rotation[j] * so3::right_jacobian(theta);
  }

  for (std::size_t i = 0; i < markers.size(); ++i) {
    const auto& m = markers[i];
    const Vec3 x = f.origin[m.joint] + f.rotation[m.joint] * m.offset;
    const int row = 3 * static_cast<int>(i);
    jac.block<3, 3>(row, 0).setIdentity();
    jac.block<3, 3>(row, 3) = -so3::hat(x - f.origin[0]);
    for (int j = m.joint; j > 0; j = joints[j].parent) {
      const Vec3 lever = x - f.origin[j];
      for (int a = 0; a < 3; ++a) {
        jac.block<3, 1>(row, kWristParams + HandSkeleton::angle_index(j, a)) =
            axes[j].col(a).cross(lever);
      }
    }
  }
  return jac;
}

Eigen::MatrixXd shape_jacobian(const HandSkeleton& skel,
                               const ShapeVector& shape, const HandPose& pose) {
  const JointFrames f = compute_frames(skel, shape, pose);
  const auto& markers = skel.markers();
  const auto& joints = skel.joints();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(3 * markers.size(), kShapeDim);
  for (std::size_t i = 0; i < markers.size(); ++i) {
    for (int j = markers[i].joint; j > 0; j = joints[j].parent) {
      jac.block<3, kShapeDim>(3 * i, 0) +=
          f.rotation[joints[j].parent] * joints[j].shape_mix;
    }
  }
  return jac;
}

RigidTransform retract_wrist(const RigidTransform& wrist,
                             const Eigen::Ref<const Eigen::VectorXd>& delta6) {
  RigidTransform out;
  out.translation = wrist.translation + delta6.head<3>();
  out.rotation = (so3::exp_quat(delta6.segment<3>(3)) * wrist.rotation).normalized();
  return out;
}

}  // namespace dexforge::hand
