#pragma once

// Marker-to-model fitting: per-frame wrist transform and finger pose by
// Levenberg-Marquardt on
//
//   sum_i |x_i - p_i(T, beta, theta)|^2 + lambda_pose * psi(theta)
//
// with psi a smooth hinge on the joint limits, plus per-subject shape
// estimation from a calibration sequence.

#include <span>
#include <vector>

#include "dexforge/hand_model.hpp"
#include "dexforge/registration.hpp"

namespace dexforge::fit {

using hand::HandPose;
using hand::HandSkeleton;
using hand::ShapeVector;
using registration::MarkerFrame;

inline constexpr int kMinVisibleMarkers = 6;
inline constexpr int kMinCalibrationFrames = 30;
// Markers rigidly attached to the palm (three knuckles and the wrist).
inline constexpr int kPalmMarkerIds[4] = {10, 11, 12, 13};

struct FitOptions {
  double lambda_pose = 1e-3;
  double sharpness = 50.0;
  int max_iterations = 200;
  // Stop once an accepted step lowers the objective by less than this
  // fraction of its current value.
  double tolerance = 1e-10;
};

struct FitProblem {
  const HandSkeleton* skeleton = nullptr;
  ShapeVector shape;
  FitOptions options;
};

struct FrameFit {
  HandPose pose;
  double rms = 0.0;  // marker residual rms, meters
  bool converged = false;
  int iterations = 0;  // accepted steps
  // psi at the optimum, before the final projection onto the limits.
  double prior = 0.0;
  // Objective after every accepted step, starting with the initial value.
  std::vector<double> objective;
};

struct FitResult {
  std::vector<HandPose> poses;
  std::vector<double> rms;
  std::vector<bool> converged;
  std::vector<int> iterations;
  // Frames that were skipped as occluded and filled by interpolation.
  std::vector<bool> interpolated;
  registration::QualityTag tag = registration::QualityTag::kClean;
};

// Soft joint-limit prior: sum over free finger parameters of
// softplus_s(theta - hi)^2 + softplus_s(lo - theta)^2.
double pose_prior(const HandSkeleton& skel, const hand::FingerAngles& angles,
                  double sharpness = 50.0);

// Wrist from the palm markers. Finger hinges are seeded per digit from a
// coarse grid over their limits; abduction starts at mid-range.
HandPose initial_pose(const HandSkeleton& skel, const ShapeVector& shape,
                      const MarkerFrame& frame);

FrameFit fit_frame(const FitProblem& problem, const MarkerFrame& frame,
                   const HandPose& init);

// Sequential warm-started fit. Frames with fewer than kMinVisibleMarkers
// visible markers are skipped and filled by interpolation afterwards.
FitResult fit_trajectory(const FitProblem& problem,
                         std::span<const MarkerFrame> frames);

// A single frame does not pin the shape down (bone lengths trade off
// against joint angles), so shape is fitted jointly over short windows of
// calibration frames that share one beta.
inline constexpr int kShapeWindow = 5;

struct ShapeWindowFit {
  ShapeVector shape;
  std::vector<HandPose> poses;
  double rms = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Joint (shape, poses) fit of a window of frames with all markers visible.
ShapeWindowFit fit_shape_window(const HandSkeleton& skel,
                                std::span<const MarkerFrame> frames,
                                const FitOptions& options = {});

// Per coordinate: drop samples further than 2 MADs from the median and
// average the rest.
hand::ShapeCoeffs robust_mean(std::span<const hand::ShapeCoeffs> samples);

// Robust mean of windowed joint shape fits over a calibration sequence of
// at least 30 frames showing all 14 markers.
ShapeVector estimate_shape(const HandSkeleton& skel,
                           std::span<const MarkerFrame> calibration,
                           const FitOptions& options = {});

// Marker frame holding the model's markers for a given shape and pose.
MarkerFrame synthesize_markers(const HandSkeleton& skel, const ShapeVector& shape,
                               const HandPose& pose, double timestamp = 0.0);

}  // namespace dexforge::fit
