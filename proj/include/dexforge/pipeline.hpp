#pragma once

// Synthetic demonstrations recorded inside the simulator and the mocap
// round trip that turns them into noisy kinematic demos: scripted
// pick-and-lift, marker synthesis with Gaussian jitter, per-frame fitting
// and object registration.

#include <cstdint>
#include <memory>
#include <span>
#include <string>

#include <json.hpp>

#include "dexforge/dataset.hpp"
#include "dexforge/hand_model.hpp"
#include "dexforge/physics.hpp"
#include "dexforge/registration.hpp"

namespace dexforge::pipeline {

// Scripted pick-and-lift: approach from above, close the digits, lift,
// hold. The wrist points the fingers down with the palm facing -x; the
// offset places it relative to the resting object's center.
struct DemoScript {
  std::string object = "cube2";
  std::string manipulation_type = "tripod";
  int approach_frames = 60;
  int close_frames = 90;
  int lift_frames = 120;
  int hold_frames = 121;  // about 1 s; keeps the length a multiple of 4
  double approach_height = 0.08;  // m above the grasp pose at frame 0
  double lift_height = 0.10;      // m
  Vec3 wrist_offset = Vec3(0.032, -0.015, 0.11);
  // Hinge angles (rad) of every joint of a digit group, open then closed.
  double thumb_open = -0.6, thumb_closed = 0.7;
  double index_open = -0.3, index_closed = 1.0;
  double middle_open = -0.3, middle_closed = 1.0;
  double ring_pinky = 1.5;       // held curled throughout
  double thumb_abduction = 0.0;  // CMC abduction, held throughout

  int frames() const { return 1 + approach_frames + close_frames + lift_frames + hold_frames; }
  // Frame range of the final hold.
  int hold_start() const { return frames() - hold_frames; }
  void validate() const;
  nlohmann::json to_json() const;
  static DemoScript from_json(const nlohmann::json& doc);

  // Tripod pick-lift of cube2 and cylinder3, precision pinch of sphere1.
  static DemoScript cube_tripod();
  static DemoScript cylinder_tripod();
  static DemoScript sphere_pinch();
};

// Hand commands per frame; frame t + 1 is the command of step t.
hand::HandPose scripted_pose(const hand::HandSkeleton& skel, const DemoScript& script,
                             double object_rest_height, int frame);

// Records the script in the simulator: hand columns hold the commanded
// targets, object columns the simulated object. No contact block.
dataset::Trajectory generate_demo(std::shared_ptr<const hand::HandSkeleton> skeleton,
                                  const physics::BodyDef& object, const DemoScript& script,
                                  const physics::SimConfig& sim = {});

// Four surface markers spanning the object's three axes.
std::vector<Vec3> object_marker_template(const physics::Shape& shape);

struct NoiseModel {
  double marker_sigma = 0.002;  // m, per coordinate
  std::uint64_t seed = 1;
};

// Object markers carry ids kObjectMarkerBase + k for template point k.
inline constexpr int kObjectMarkerBase = 100;

// Hand markers of every frame of a clean demo plus the object markers,
// each coordinate jittered by the noise model.
std::vector<registration::MarkerFrame> synthesize_demo_markers(const hand::HandSkeleton& skel,
                                                               const physics::BodyDef& object,
                                                               const dataset::Trajectory& clean,
                                                               const NoiseModel& noise);

struct Reconstruction {
  dataset::Trajectory trajectory;
  double hand_marker_rms = 0.0;  // m
  int object_filled = 0;         // object poses filled by interpolation
  registration::QualityTag tag = registration::QualityTag::kClean;
};

// Per-frame hand fit with the meta's shape plus object registration.
// Frames missing object markers take interpolated poses; ValidationError
// when no frame shows them all.
Reconstruction reconstruct(const hand::HandSkeleton& skel, const physics::BodyDef& object,
                           std::span<const registration::MarkerFrame> frames,
                           const dataset::TrajectoryMeta& meta);

struct NoisyDemo {
  dataset::Trajectory trajectory;
  std::vector<registration::MarkerFrame> markers;
  double hand_marker_rms = 0.0;  // fitted marker residual, m
  double wrist_error = 0.0;      // rms wrist position error vs the clean demo, m
  double finger_error = 0.0;     // rms hinge error vs the clean demo, rad
  double object_error = 0.0;     // rms object position error, m
};

// Synthesized markers reconstructed, with errors against the clean demo.
NoisyDemo add_fitting_noise(const hand::HandSkeleton& skel, const physics::BodyDef& object,
                            const dataset::Trajectory& clean, const NoiseModel& noise);

}  // namespace dexforge::pipeline
