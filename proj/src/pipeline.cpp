#include "dexforge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dexforge/errors.hpp"
#include "dexforge/marker_fit.hpp"
#include "dexforge/registration.hpp"

namespace dexforge::pipeline {

void DemoScript::validate() const {
  if (object.empty()) throw ConfigError("demo script needs an object id");
  if (!dataset::is_manipulation_type(manipulation_type)) {
    throw ConfigError("unknown manipulation type " + manipulation_type);
  }
  if (approach_frames < 1 || close_frames < 1 || lift_frames < 1 || hold_frames < 1) {
    throw ConfigError("every demo phase needs at least one frame");
  }
  for (double v : {approach_height, lift_height, wrist_offset.x(), wrist_offset.y(), wrist_offset.z(),
                   thumb_open, thumb_closed, index_open, index_closed, middle_open, middle_closed,
                   ring_pinky, thumb_abduction}) {
    if (!std::isfinite(v)) throw ConfigError("demo script values must be finite");
  }
  if (approach_height < 0.0 || lift_height < 0.0) throw ConfigError("heights must be nonnegative");
}

nlohmann::json DemoScript::to_json() const {
  return {{"object", object},
          {"manipulation_type", manipulation_type},
          {"approach_frames", approach_frames},
          {"close_frames", close_frames},
          {"lift_frames", lift_frames},
          {"hold_frames", hold_frames},
          {"approach_height", approach_height},
          {"lift_height", lift_height},
          {"wrist_offset", {wrist_offset.x(), wrist_offset.y(), wrist_offset.z()}},
          {"thumb", {thumb_open, thumb_closed}},
          {"index", {index_open, index_closed}},
          {"middle", {middle_open, middle_closed}},
          {"ring_pinky", ring_pinky},
          {"thumb_abduction", thumb_abduction}};
}

DemoScript DemoScript::from_json(const nlohmann::json& doc) {
  DemoScript s;
  try {
    s.object = doc.value("object", s.object);
    s.manipulation_type = doc.value("manipulation_type", s.manipulation_type);
    s.approach_frames = doc.value("approach_frames", s.approach_frames);
    s.close_frames = doc.value("close_frames", s.close_frames);
    s.lift_frames = doc.value("lift_frames", s.lift_frames);
    s.hold_frames = doc.value("hold_frames", s.hold_frames);
    s.approach_height = doc.value("approach_height", s.approach_height);
    s.lift_height = doc.value("lift_height", s.lift_height);
    if (doc.contains("wrist_offset")) {
      const auto& w = doc.at("wrist_offset");
      s.wrist_offset = Vec3(w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>());
    }
    auto pair = [&](const char* key, double& open, double& closed) {
      if (!doc.contains(key)) return;
      open = doc.at(key).at(0).get<double>();
      closed = doc.at(key).at(1).get<double>();
    };
    pair("thumb", s.thumb_open, s.thumb_closed);
    pair("index", s.index_open, s.index_closed);
    pair("middle", s.middle_open, s.middle_closed);
    s.ring_pinky = doc.value("ring_pinky", s.ring_pinky);
    s.thumb_abduction = doc.value("thumb_abduction", s.thumb_abduction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad demo script: ") + e.what());
  }
  s.validate();
  return s;
}

DemoScript DemoScript::cube_tripod() { return {}; }

DemoScript DemoScript::cylinder_tripod() {
  DemoScript s;
  s.object = "cylinder3";
  return s;
}

// Precision pinch with the thumb opposing the index and middle tips; a
// two-tip pinch does not hold a sphere under the creeping friction model.
DemoScript DemoScript::sphere_pinch() {
  DemoScript s;
  s.object = "sphere1";
  s.manipulation_type = "precision_sphere";
  return s;
}

hand::HandPose scripted_pose(const hand::HandSkeleton& skel, const DemoScript& script,
                             double object_rest_height, int frame) {
  if (frame < 0 || frame >= script.frames()) throw RangeError("frame outside the demo script");
  const int a = script.approach_frames, c = script.close_frames, l = script.lift_frames;
  const double approach = 1.0 - std::min(1.0, static_cast<double>(frame) / a);
  const double close = std::clamp(static_cast<double>(frame - a) / c, 0.0, 1.0);
  const double lift = std::clamp(static_cast<double>(frame - a - c) / l, 0.0, 1.0);

  hand::HandPose pose;
  pose.wrist.rotation = Quat(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitY()));
  pose.wrist.translation = script.wrist_offset + Vec3(0.0, 0.0, object_rest_height);
  pose.wrist.translation.z() += script.approach_height * approach + script.lift_height * lift;
  auto set = [&](int first, int last, double open, double closed) {
    for (int j = first; j <= last; ++j) {
      pose.finger_angles[hand::HandSkeleton::angle_index(j, 1)] = open + close * (closed - open);
    }
  };
  set(1, 3, script.thumb_open, script.thumb_closed);
  set(4, 6, script.index_open, script.index_closed);
  set(7, 9, script.middle_open, script.middle_closed);
  set(10, 15, script.ring_pinky, script.ring_pinky);
  pose.finger_angles[hand::HandSkeleton::angle_index(1, 2)] = script.thumb_abduction;
  pose.finger_angles = skel.project_to_limits(pose.finger_angles);
  return pose;
}

dataset::Trajectory generate_demo(std::shared_ptr<const hand::HandSkeleton> skeleton,
                                  const physics::BodyDef& object, const DemoScript& script,
                                  const physics::SimConfig& sim) {
  script.validate();
  const double rest = object.shape.rest_height();
  dataset::Trajectory traj(script.frames());
  traj.meta.operator_id = "synthetic";
  traj.meta.object = script.object;
  traj.meta.manipulation_type = script.manipulation_type;
  traj.meta.active_start = 0;
  traj.meta.active_end = script.frames();

  // The world sees the stored (float32) values so a replay starts identically.
  const hand::HandPose start = scripted_pose(*skeleton, script, rest, 0);
  traj.set_hand(0, start);
  physics::World world(skeleton, hand::ShapeVector{}, object, sim);
  world.place_object(0.0, 0.0);
  traj.set_object(0, world.object().pose);
  physics::RigidState obj = world.object();
  obj.pose = traj.object(0);
  world.set_object(obj);
  world.set_hand(traj.hand(0));
  for (int f = 1; f < script.frames(); ++f) {
    traj.set_hand(f, scripted_pose(*skeleton, script, rest, f));
    const hand::HandPose target = traj.hand(f);
    world.step(physics::HandCommand{target.wrist, target.finger_angles});
    traj.set_object(f, world.object().pose);
  }
  traj.validate();
  return traj;
}

std::vector<Vec3> object_marker_template(const physics::Shape& shape) {
  Vec3 e;
  switch (shape.type) {
    case physics::ShapeType::kSphere:
      e = Vec3::Constant(shape.dims[0]);
      break;
    case physics::ShapeType::kBox:
      e = shape.dims;
      break;
    case physics::ShapeType::kCapsule:
      e = Vec3(shape.dims[0], shape.dims[0], shape.dims[1] + shape.dims[0]);
      break;
    case physics::ShapeType::kCylinder:
      e = Vec3(shape.dims[0], shape.dims[0], shape.dims[1]);
      break;
  }
  return {Vec3(e.x(), 0, 0), Vec3(0, e.y(), 0), Vec3(0, 0, e.z()), Vec3(-e.x(), 0, 0)};
}

std::vector<registration::MarkerFrame> synthesize_demo_markers(const hand::HandSkeleton& skel,
                                                               const physics::BodyDef& object,
                                                               const dataset::Trajectory& clean,
                                                               const NoiseModel& noise) {
  if (!(noise.marker_sigma >= 0.0)) throw ConfigError("marker noise must be nonnegative");
  clean.validate();
  std::mt19937_64 rng(noise.seed);
  std::normal_distribution<double> jitter(0.0, noise.marker_sigma);
  auto noisy = [&](const Vec3& p) {
    return noise.marker_sigma > 0.0 ? Vec3(p + Vec3(jitter(rng), jitter(rng), jitter(rng))) : p;
  };
  const hand::ShapeVector shape{clean.meta.mano_shape};
  const std::vector<Vec3> tmpl = object_marker_template(object.shape);
  std::vector<registration::MarkerFrame> frames(clean.frames());
  for (int f = 0; f < clean.frames(); ++f) {
    const double stamp = static_cast<double>(f) / dataset::kKinematicsFps;
    frames[f] = fit::synthesize_markers(skel, shape, clean.hand(f), stamp);
    for (auto& m : frames[f].points) m.position = noisy(m.position);
    const RigidTransform pose = clean.object(f);
    for (std::size_t k = 0; k < tmpl.size(); ++k) {
      frames[f].points.push_back({kObjectMarkerBase + static_cast<int>(k), noisy(pose * tmpl[k]), true});
    }
  }
  return frames;
}

Reconstruction reconstruct(const hand::HandSkeleton& skel, const physics::BodyDef& object,
                           std::span<const registration::MarkerFrame> frames,
                           const dataset::TrajectoryMeta& meta) {
  const int n = static_cast<int>(frames.size());
  if (n == 0) throw ValidationError("no marker frames to reconstruct");
  const std::vector<Vec3> tmpl = object_marker_template(object.shape);
  std::vector<int> ids;
  for (std::size_t k = 0; k < tmpl.size(); ++k) ids.push_back(kObjectMarkerBase + static_cast<int>(k));

  std::vector<registration::MarkerFrame> hand_frames(n);
  std::vector<RigidTransform> object_poses(n);
  std::vector<bool> valid(n, false);
  for (int f = 0; f < n; ++f) {
    hand_frames[f].timestamp = frames[f].timestamp;
    std::vector<Vec3> observed;
    for (const auto& m : frames[f].points) {
      if (m.id < kObjectMarkerBase) hand_frames[f].points.push_back(m);
    }
    for (int id : ids) {
      if (const auto* m = frames[f].visible_marker(id)) observed.push_back(m->position);
    }
    if (observed.size() == tmpl.size()) {
      object_poses[f] = registration::register_rigid_body(tmpl, observed).transform;
      valid[f] = true;
    }
  }
  if (std::find(valid.begin(), valid.end(), true) == valid.end()) {
    throw ValidationError("no frame shows all object markers");
  }
  Reconstruction out;
  out.object_filled = registration::interpolate_pose_gaps(object_poses, valid);
  const fit::FitProblem problem{&skel, hand::ShapeVector{meta.mano_shape}, {}};
  const fit::FitResult fitted = fit::fit_trajectory(problem, hand_frames);
  out.tag = registration::worst(fitted.tag, registration::check_constellation(frames, ids, tmpl, 0.01));
  if (out.object_filled > 0) out.tag = registration::worst(out.tag, registration::QualityTag::kInterpolated);
  out.trajectory = dataset::Trajectory(n);
  out.trajectory.meta = meta;
  double rms_sq = 0.0;
  for (int f = 0; f < n; ++f) {
    out.trajectory.set_hand(f, fitted.poses[f]);
    out.trajectory.set_object(f, object_poses[f]);
    rms_sq += fitted.rms[f] * fitted.rms[f];
  }
  out.hand_marker_rms = std::sqrt(rms_sq / n);
  out.trajectory.validate();
  return out;
}

NoisyDemo add_fitting_noise(const hand::HandSkeleton& skel, const physics::BodyDef& object,
                            const dataset::Trajectory& clean, const NoiseModel& noise) {
  NoisyDemo out;
  out.markers = synthesize_demo_markers(skel, object, clean, noise);
  Reconstruction rec = reconstruct(skel, object, out.markers, clean.meta);
  out.trajectory = std::move(rec.trajectory);
  out.hand_marker_rms = rec.hand_marker_rms;
  const int n = clean.frames();
  const std::vector<int> hinges = skel.hinge_parameters();
  double wrist_sq = 0.0, finger_sq = 0.0, obj_sq = 0.0;
  for (int f = 0; f < n; ++f) {
    const hand::HandPose fitted = out.trajectory.hand(f);
    const hand::HandPose truth = clean.hand(f);
    wrist_sq += (fitted.wrist.translation - truth.wrist.translation).squaredNorm();
    for (int p : hinges) {
      const double d = fitted.finger_angles[p] - truth.finger_angles[p];
      finger_sq += d * d;
    }
    obj_sq += (out.trajectory.object(f).translation - clean.object(f).translation).squaredNorm();
  }
  out.wrist_error = std::sqrt(wrist_sq / n);
  out.finger_error = std::sqrt(finger_sq / (static_cast<double>(n) * hinges.size()));
  out.object_error = std::sqrt(obj_sq / n);
  return out;
}

}  // namespace dexforge::pipeline
