#pragma once

// Trajectory container: metadata, synchronized hand/object kinematics and an
// optional fixed-width contact block, stored on disk as one directory per
// trajectory with little-endian float32 column files and a checksummed
// manifest. Also the per-environment trajectory buffer used for parallel RL.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dexforge/geometry.hpp"
#include "dexforge/hand_model.hpp"

namespace dexforge::dataset {

inline constexpr int kSchemaVersion = 1;
inline constexpr int kKinematicsFps = 120;
inline constexpr int kAuxiliaryFps = 30;
inline constexpr int kContactSlots = 32;
inline constexpr int kFingerPoseDim = hand::kFingerParams;

// Closed set of manipulation-type labels.
inline constexpr std::array<const char*, 21> kManipulationTypes = {
    "large_diameter",     "small_diameter",     "medium_wrap",    "power_disk",
    "power_sphere",       "adducted_thumb",     "lateral_pinch",  "writing_tripod",
    "ventral",            "extension_type",     "palmar_pinch",   "tripod",
    "tip_pinch",          "prismatic_2_finger", "prismatic_4_finger",
    "precision_disk",     "precision_sphere",   "rolling",        "sliding",
    "finger_transfer",    "rotation",
};
bool is_manipulation_type(const std::string& label);

struct TrajectoryMeta {
  std::string operator_id;
  std::string object;
  std::string manipulation_type;
  hand::ShapeCoeffs mano_shape = hand::ShapeCoeffs::Zero();
  // Half-open [start, end) range of active manipulation frames.
  int active_start = 0;
  int active_end = 0;
  int fps_kinematics = kKinematicsFps;
  int fps_auxiliary = kAuxiliaryFps;

  // Throws ValidationError unless 0 <= start < end <= frames, the label is
  // in the closed set and the rates are 120/30.
  void validate(int frames) const;
  nlohmann::json to_json() const;
  static TrajectoryMeta from_json(const nlohmann::json& doc);
  bool operator==(const TrajectoryMeta& o) const = default;
};

using Columns = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-frame contacts in N fixed slots. A slot whose body id is negative is
// empty; its point and force are zero.
struct ContactBlock {
  int slots = kContactSlots;
  Columns points;  // T x 3N, meters
  Columns forces;  // T x 3N, newtons, force on the object
  Columns bodies;  // T x N, hand body id or -1
  Columns wrench;  // T x 6, object wrench (force, torque about the COM)

  ContactBlock() = default;
  ContactBlock(int frames, int slots);
  bool valid(int t, int slot) const { return bodies(t, slot) >= 0.0f; }
  int count(int t) const;
  bool operator==(const ContactBlock& o) const;
};

struct Trajectory {
  TrajectoryMeta meta;
  Columns wrist_position;   // T x 3
  Columns wrist_rotation;   // T x 3, axis-angle
  Columns finger_pose;      // T x 45, axis-angle per joint
  Columns object_position;  // T x 3
  Columns object_rotation;  // T x 3, axis-angle
  std::optional<ContactBlock> contacts;

  Trajectory() = default;
  explicit Trajectory(int frames);

  int frames() const { return static_cast<int>(wrist_position.rows()); }
  void set_hand(int t, const hand::HandPose& pose);
  void set_object(int t, const RigidTransform& pose);
  hand::HandPose hand(int t) const;
  RigidTransform object(int t) const;

  // Shape, finiteness and canonical axis-angle checks plus meta.validate.
  void validate() const;
  bool operator==(const Trajectory& o) const;
};

// Directory container. A contact block with zero slots is not written and
// reads back absent.
void write_trajectory(const Trajectory& traj, const std::filesystem::path& dir);
Trajectory read_trajectory(const std::filesystem::path& dir);

// Root directory holding one subdirectory per trajectory id plus index.json
// mapping ids to their meta.
class TrajectoryStore {
 public:
  explicit TrajectoryStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  void write(const std::string& id, const Trajectory& traj);
  Trajectory read(const std::string& id) const;
  bool contains(const std::string& id) const;
  // Ids in lexicographic order.
  std::vector<std::string> ids() const;
  const TrajectoryMeta& meta(const std::string& id) const;
  // Ids whose meta satisfies the predicate, lexicographic.
  std::vector<std::string> filter(
      const std::function<bool(const TrajectoryMeta&)>& predicate) const;

 private:
  void save_index() const;

  std::filesystem::path root_;
  std::map<std::string, TrajectoryMeta> index_;
};

// --data-root flag if given, else DEXFORGE_DATA; ConfigError when neither.
std::filesystem::path resolve_data_root(const std::optional<std::string>& flag);

// splitmix64 stream; the buffer's trajectory sampler.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  // Uniform in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t state_;
};

// View of one frame of a resident trajectory; no payload is copied.
struct FrameView {
  const Trajectory* trajectory = nullptr;
  int trajectory_index = -1;
  int timestep = 0;

  Eigen::Map<const Eigen::Vector3f> wrist_position() const;
  Eigen::Map<const Eigen::Vector3f> wrist_rotation() const;
  Eigen::Map<const Eigen::Matrix<float, kFingerPoseDim, 1>> finger_pose() const;
  Eigen::Map<const Eigen::Vector3f> object_position() const;
  Eigen::Map<const Eigen::Vector3f> object_rotation() const;
  // Null when the trajectory has no contact block.
  const float* forces() const;
};

struct SlotState {
  int trajectory_index = -1;
  int timestep = 0;
  bool needs_reset = false;
  bool operator==(const SlotState& o) const = default;
};

// Each slot owns one trajectory from the resident pool and its own timestep.
// Reads of distinct slots may run concurrently; reset_envs needs exclusive
// access to the slots it touches.
class TrajectoryBuffer {
 public:
  TrajectoryBuffer(std::vector<std::shared_ptr<const Trajectory>> pool, int num_envs,
                   std::uint64_t seed);

  int num_envs() const { return static_cast<int>(slots_.size()); }
  const std::vector<std::shared_ptr<const Trajectory>>& pool() const { return pool_; }

  std::vector<FrameView> get_observations() const;
  FrameView observation(int slot) const;
  // New sampled trajectory and timestep 0 for the listed slots, in ascending
  // slot order; duplicates count once. RangeError before any mutation when
  // an index is out of range.
  void reset_envs(std::span<const int> slots);
  // Every slot steps forward; a slot at its last frame stays there and
  // raises its needs-reset flag.
  void advance_timesteps();

  const SlotState& slot(int i) const { return slots_.at(i); }
  const std::vector<SlotState>& state() const { return slots_; }

 private:
  int sample();

  std::vector<std::shared_ptr<const Trajectory>> pool_;
  std::vector<SlotState> slots_;
  SplitMix64 rng_;
};

}  // namespace dexforge::dataset
