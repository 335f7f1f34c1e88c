#pragma once

// Mocap preprocessing: rigid registration of marker constellations, the fixed
// mocap-world -> model-world change of frame, occlusion gap filling and
// multi-rate stream alignment.

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dexforge/geometry.hpp"

namespace dexforge::registration {

struct MarkerObservation {
  int id = 0;
  Vec3 position = Vec3::Zero();
  bool visible = true;
};

struct MarkerFrame {
  double timestamp = 0.0;
  std::vector<MarkerObservation> points;

  // Visible observation with the given id, or nullptr.
  const MarkerObservation* visible_marker(int id) const;
  int visible_count() const;
};

// Ordered by severity; combining two tags keeps the worse one.
enum class QualityTag { kClean = 0, kInterpolated, kOccluded, kBrokenConstellation };
const char* quality_tag_name(QualityTag tag);
QualityTag quality_tag_from_name(const std::string& name);
QualityTag worst(QualityTag a, QualityTag b);
// Trials tagged occluded or broken are left out of training.
bool usable_for_training(QualityTag tag);

struct Registration {
  RigidTransform transform;
  double rms_residual = 0.0;
};

// Least-squares proper rigid transform mapping template points onto observed
// points (SVD Procrustes with reflection correction).
Registration register_rigid_body(std::span<const Vec3> template_points,
                                 std::span<const Vec3> observed);

// Fixed transform from the mocap world (W) to the model world (M).
struct FrameTransform {
  RigidTransform model_from_mocap;
};

RigidTransform to_model_frame(const RigidTransform& pose_w,
                              const FrameTransform& t_mw);
std::vector<RigidTransform> to_model_frame(std::span<const RigidTransform> traj_w,
                                           const FrameTransform& t_mw);
// Absolute joint rotations change frame by left-multiplying R_MW.
Quat to_model_frame(const Quat& joint_rotation_w, const FrameTransform& t_mw);

inline constexpr int kDefaultMaxGap = 12;

struct GapFill {
  std::vector<MarkerFrame> frames;
  QualityTag tag = QualityTag::kClean;
  int filled = 0;     // marker samples filled by interpolation
  int remaining = 0;  // marker samples left invisible
};

// Fill runs of at most max_gap invisible frames per marker by linear
// interpolation in time. Longer runs, and runs touching either end of the
// sequence, stay invisible and tag the trial occluded.
GapFill interpolate_gaps(std::span<const MarkerFrame> frames,
                         int max_gap = kDefaultMaxGap);

// Fill gaps in a pose stream (position lerp, orientation slerp). `valid[i]`
// marks poses that were measured; returns the number of poses filled. Poses
// outside the first/last valid sample are held constant.
int interpolate_pose_gaps(std::vector<RigidTransform>& poses,
                          std::vector<bool>& valid);

// Tag a trial broken-constellation when any frame's object markers cannot be
// registered to the template within `tolerance` meters rms.
QualityTag check_constellation(std::span<const MarkerFrame> frames,
                               std::span<const int> marker_ids,
                               std::span<const Vec3> template_points,
                               double tolerance);

struct StreamAlignment {
  // Nearest kinematic frame for every auxiliary frame.
  std::vector<std::size_t> aux_to_kin;
  double max_drift = 0.0;  // seconds
};

// Map each auxiliary-stream frame to the nearest kinematic frame. Nominally
// aux frame k sits at kinematic frame k * (kin_rate / aux_rate); a deviation
// beyond half an auxiliary period raises AlignmentError.
StreamAlignment align_streams(std::span<const double> kin_timestamps,
                              std::span<const double> aux_timestamps,
                              double kin_rate = 120.0, double aux_rate = 30.0);

// Raw marker CSV: header "timestamp,marker_id,x,y,z,visible", rows grouped
// into frames by timestamp.
std::vector<MarkerFrame> read_marker_csv(std::istream& in);
void write_marker_csv(std::ostream& out, std::span<const MarkerFrame> frames);

}  // namespace dexforge::registration
