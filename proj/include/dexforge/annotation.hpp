#pragma once

// Force annotation of simulated rollouts: per-frame hand-object contacts in
// fixed-width slots, the object wrench from the hand, perturbation-based
// data synthesis, and per-finger contact statistics.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dexforge/dataset.hpp"
#include "dexforge/physics.hpp"
#include "dexforge/rl.hpp"

namespace dexforge::annotation {

// Kinematic frames per auxiliary frame.
inline constexpr int kRateRatio = dataset::kKinematicsFps / dataset::kAuxiliaryFps;

// Contacts into `slots` records: the strongest slots - 1 kept as they are,
// the rest merged into the last slot with summed force at the
// force-weighted centroid, owned by the strongest merged body. Only hand
// contacts are stored; body ids index World::bodies().
void fill_contact_slots(dataset::ContactBlock& block, int frame,
                        std::span<const physics::ContactRecord> contacts, const Vec3& object_com);

struct AnnotationResult {
  bool success = false;
  // Set on success: kinematics as simulated plus the contact block. The
  // length is trimmed to a multiple of kRateRatio.
  std::optional<dataset::Trajectory> trajectory;
  int termination_frame = 0;  // demo frame at the end of the episode
  std::string cause;
  rl::RolloutLog log;
};

// Rolls the actor out from env.reset(seed) and records every frame. The
// actor's noise stream is seeded as in rl::run_episode. Failed rollouts
// return only the report.
AnnotationResult annotate_rollout(rl::ResidualEnv& env, const rl::Actor& actor, std::uint64_t seed);

// Kinematic frame of every auxiliary frame; throws ValidationError unless
// the frame count is a multiple of kRateRatio.
std::vector<int> auxiliary_index(int kinematic_frames);

struct VariationSpec {
  double pose_jitter = 0.0;   // fraction of object size, at most 0.2
  double size_scale = 0.0;    // at most 0.2
  double mass_scale = 0.0;
  double shape_jitter = 0.0;  // uniform offset of every shape coefficient
  void validate() const;
  nlohmann::json to_json() const;
  static VariationSpec from_json(const nlohmann::json& doc);
};

struct SynthesisResult {
  std::vector<dataset::Trajectory> accepted;
  std::vector<AnnotationResult> reports;  // one per attempt, trajectories moved out
  double acceptance_rate = 0.0;
};

// Variation i rolls out with seed rollout_seed(seed, i) under a fresh
// perturbation drawn from that seed; only successes are kept.
SynthesisResult synthesize_variations(std::shared_ptr<const hand::HandSkeleton> skeleton,
                                      std::shared_ptr<const dataset::Trajectory> demo,
                                      const physics::BodyDef& object, const rl::EnvConfig& config,
                                      const rl::Actor& actor, const VariationSpec& spec, int count,
                                      std::uint64_t seed, int jobs = 1);

// Channels: thumb, index, middle, ring, pinky, palm.
inline constexpr int kChannels = hand::kDigitCount;

// Per-frame force magnitudes of one annotated trajectory.
struct FingerForces {
  Eigen::MatrixXd channel;       // frames x kChannels, sum of |f| per digit
  Eigen::VectorXd max_series;    // pointwise max over the channels
  Eigen::VectorXd peak_contact;  // largest single contact per frame
};
FingerForces finger_forces(const dataset::Trajectory& traj, std::span<const physics::HandBody> bodies);

// Order-independent aggregate over rollouts. Force totals are kept in
// integer micronewtons so any reduction order gives the same bits.
struct ContactStats {
  long frames = 0;  // (trial, frame) pairs
  int trials = 0;
  std::vector<long> joint_frames;  // per joint: pairs with a contact on it
  std::array<std::int64_t, kChannels> force_micro{};
  std::array<long, kChannels> channel_frames{};

  explicit ContactStats(int joints = hand::kJointCount);
  void add(const dataset::Trajectory& traj, std::span<const physics::HandBody> bodies);
  ContactStats& merge(const ContactStats& other);
  // Fraction of (trial, frame) pairs with a contact on each joint.
  Eigen::VectorXd joint_frequency() const;
  // Fraction of pairs with a contact on each digit channel.
  Eigen::VectorXd channel_frequency() const;
  // Mean per-frame force magnitude per channel, newtons.
  Eigen::VectorXd mean_force() const;
  bool operator==(const ContactStats& o) const = default;
  nlohmann::json to_json(const hand::HandSkeleton& skel) const;
};

// Throws ValidationError on an empty set.
ContactStats compute_contact_stats(std::span<const dataset::Trajectory> rollouts,
                                   std::span<const physics::HandBody> bodies);

// Mean object force from the hand over frames [begin, end).
Vec3 mean_wrench_force(const dataset::Trajectory& traj, int begin, int end);

}  // namespace dexforge::annotation
