#pragma once

#include <random>

#include "dexforge/dataset.hpp"
#include "dexforge/hand_model.hpp"
#include "dexforge/physics.hpp"

namespace testsupport {

using dexforge::Quat;
using dexforge::RigidTransform;
using dexforge::Vec3;

inline Vec3 random_vec(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  return {u(rng), u(rng), u(rng)};
}

inline Quat random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Quat q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q;
}

inline RigidTransform random_transform(std::mt19937_64& rng, double scale = 0.5) {
  RigidTransform t;
  t.translation = random_vec(rng, scale);
  t.rotation = random_rotation(rng);
  return t;
}

// Random pose with free angles at least `margin` inside their limits.
inline dexforge::hand::HandPose random_pose(const dexforge::hand::HandSkeleton& skel,
                                            std::mt19937_64& rng,
                                            double margin = 0.1) {
  dexforge::hand::HandPose pose;
  pose.wrist = random_transform(rng, 0.3);
  for (int p : skel.free_parameters()) {
    const auto& lim = skel.limit(p);
    std::uniform_real_distribution<double> u(lim.lo + margin, lim.hi - margin);
    pose.finger_angles[p] = u(rng);
  }
  return pose;
}

// Random valid trajectory. contacts: 0 none, 1 zero-slot block, 2 random
// sparse block, 3 every slot filled.
inline dexforge::dataset::Trajectory random_trajectory(std::mt19937_64& rng, int frames,
                                                       int contacts) {
  using namespace dexforge;
  dataset::Trajectory t(frames);
  std::uniform_int_distribution<int> label(0, dataset::kManipulationTypes.size() - 1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  t.meta.operator_id = "op" + std::to_string(rng() % 7);
  t.meta.object = (rng() % 2) ? "cube2" : "sphere1";
  t.meta.manipulation_type = dataset::kManipulationTypes[label(rng)];
  for (int k = 0; k < hand::kShapeDim; ++k) t.meta.mano_shape[k] = 2.0 * u(rng);
  t.meta.active_start = static_cast<int>(rng() % frames);
  t.meta.active_end = t.meta.active_start + 1 +
                      static_cast<int>(rng() % (frames - t.meta.active_start));
  for (int f = 0; f < frames; ++f) {
    hand::HandPose p;
    p.wrist = random_transform(rng, 0.5);
    for (int k = 0; k < hand::kFingerParams; ++k) p.finger_angles[k] = u(rng);
    t.set_hand(f, p);
    t.set_object(f, random_transform(rng, 0.5));
  }
  if (contacts == 1) t.contacts = dataset::ContactBlock(frames, 0);
  if (contacts >= 2) {
    dataset::ContactBlock c(frames, dataset::kContactSlots);
    for (int f = 0; f < frames; ++f) {
      for (int s = 0; s < c.slots; ++s) {
        if (contacts == 2 && rng() % 4 != 0) continue;
        c.bodies(f, s) = static_cast<float>(rng() % 20);
        for (int a = 0; a < 3; ++a) {
          c.points(f, 3 * s + a) = static_cast<float>(0.1 * u(rng));
          c.forces(f, 3 * s + a) = static_cast<float>(u(rng));
        }
      }
      for (int a = 0; a < 6; ++a) c.wrench(f, a) = static_cast<float>(u(rng));
    }
    t.contacts = std::move(c);
  }
  return t;
}

// Thumb and index tips facing each other with a plate between them.
struct Pinch {
  dexforge::hand::HandPose pose;
  RigidTransform plate;
  double half_gap = 0.0;
};

inline Pinch pinch_setup(const dexforge::hand::HandSkeleton& skel) {
  using namespace dexforge;
  using namespace dexforge::physics;
  Pinch p;
  p.pose.wrist.translation = Vec3(0.0, 0.0, 0.3);
  hand::FingerAngles a = hand::FingerAngles::Zero();
  for (int j = 4; j <= 6; ++j) a[hand::HandSkeleton::angle_index(j, 1)] = 0.6;
  a[hand::HandSkeleton::angle_index(1, 2)] = 0.5;
  p.pose.finger_angles = skel.project_to_limits(a);
  const auto frames = hand::compute_frames(skel, {}, p.pose);
  Vec3 thumb, index;
  for (const HandBody& b : hand_bodies(skel, {})) {
    const Vec3 x = frames.origin[b.joint] + frames.rotation[b.joint] * b.a;
    if (b.name == "thumb_ip_tip") thumb = x;
    if (b.name == "index_dip_tip") index = x;
  }
  p.half_gap = 0.5 * (index - thumb).norm();
  p.plate.translation = 0.5 * (thumb + index);
  p.plate.rotation = Quat::FromTwoVectors(Vec3::UnitX(), index - thumb);
  return p;
}

}  // namespace testsupport
