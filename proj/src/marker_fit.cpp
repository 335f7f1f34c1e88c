#include "dexforge/marker_fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>

#include "dexforge/errors.hpp"

namespace dexforge::fit {

using hand::FingerAngles;
using hand::kFingerParams;
using hand::kMarkerCount;
using hand::kShapeDim;
using hand::kWristParams;

namespace {

constexpr int kShapeRounds = 4;

double softplus(double x, double s) {
  const double z = s * x;
  return (std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)))) / s;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Visible marker ids of a frame, in id order, with their positions.
struct Observed {
  std::vector<int> ids;
  Eigen::VectorXd x;
};

Observed collect(const MarkerFrame& frame) {
  Observed o;
  for (int id = 0; id < kMarkerCount; ++id) {
    if (frame.visible_marker(id)) o.ids.push_back(id);
  }
  o.x.resize(3 * o.ids.size());
  for (std::size_t k = 0; k < o.ids.size(); ++k) {
    o.x.segment<3>(3 * k) = frame.visible_marker(o.ids[k])->position;
  }
  return o;
}

// Levenberg-Marquardt over per-frame wrist tangents and free finger
// parameters, optionally with shape coefficients shared by all frames.
// Locked finger axes stay at zero.
class Solver {
 public:
  struct Outcome {
    bool converged = false;
    int iterations = 0;
    std::vector<double> objective;
  };

  Solver(const HandSkeleton& skel, std::vector<Observed> obs, const FitOptions& opt,
         bool with_shape)
      : skel_(skel),
        obs_(std::move(obs)),
        opt_(opt),
        with_shape_(with_shape),
        free_(skel.free_parameters()) {
    nf_ = static_cast<int>(free_.size());
    per_frame_ = kWristParams + nf_;
    const int frames = static_cast<int>(obs_.size());
    n_params_ = frames * per_frame_ + (with_shape_ ? kShapeDim : 0);
    for (const auto& o : obs_) {
      row_offset_.push_back(n_rows_);
      n_rows_ += 3 * static_cast<int>(o.ids.size()) + 2 * nf_;
    }
  }

  Outcome run(ShapeVector& shape, std::vector<HandPose>& poses) {
    for (auto& pose : poses) {
      for (int p = 0; p < kFingerParams; ++p) {
        if (skel_.limit(p).locked()) pose.finger_angles[p] = 0.0;
      }
    }
    Outcome out;
    Eigen::VectorXd r = residual(shape, poses);
    double f = r.squaredNorm();
    if (!std::isfinite(f)) throw NumericalError("non-finite fit objective");
    out.objective.push_back(f);

    Eigen::MatrixXd jac = jacobian(shape, poses);
    Eigen::MatrixXd a = jac.transpose() * jac;
    Eigen::VectorXd g = jac.transpose() * r;
    double mu = 1e-3 * a.diagonal().maxCoeff();
    double nu = 2.0;

    for (int it = 0; it < opt_.max_iterations; ++it) {
      if (f <= std::numeric_limits<double>::min()) {
        out.converged = true;
        break;
      }
      Eigen::MatrixXd damped = a;
      for (int i = 0; i < n_params_; ++i) {
        damped(i, i) += mu * std::max(a(i, i), 1e-12);
      }
      const Eigen::VectorXd step = damped.ldlt().solve(-g);
      if (!step.allFinite()) throw NumericalError("non-finite fit step");

      ShapeVector shape_new = shape;
      std::vector<HandPose> poses_new = poses;
      apply(step, shape_new, poses_new);
      const Eigen::VectorXd r_new = residual(shape_new, poses_new);
      const double f_new = r_new.squaredNorm();
      if (!std::isfinite(f_new)) throw NumericalError("non-finite fit objective");

      const double predicted = -(2.0 * g.dot(step) + step.dot(a * step));
      if (f_new < f) {
        const double decrease = f - f_new;
        shape = shape_new;
        poses = std::move(poses_new);
        r = r_new;
        f = f_new;
        out.objective.push_back(f);
        ++out.iterations;
        if (decrease < opt_.tolerance * (f + decrease)) {
          out.converged = true;
          break;
        }
        jac = jacobian(shape, poses);
        a = jac.transpose() * jac;
        g = jac.transpose() * r;
        const double rho = predicted > 0.0 ? decrease / predicted : 1.0;
        mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
        nu = 2.0;
      } else {
        mu *= nu;
        nu *= 2.0;
        // No representable improvement left: the current point is optimal
        // to working precision.
        if (mu > 1e16 * std::max(1.0, a.diagonal().maxCoeff())) {
          out.converged = true;
          break;
        }
      }
    }
    return out;
  }

  double marker_rms(const ShapeVector& shape, const HandPose& pose,
                    std::size_t frame = 0) const {
    const Observed& o = obs_[frame];
    if (o.ids.empty()) return 0.0;
    const Eigen::VectorXd r = marker_residual(o, shape, pose);
    return std::sqrt(r.squaredNorm() / static_cast<double>(o.ids.size()));
  }

 private:
  Eigen::VectorXd marker_residual(const Observed& o, const ShapeVector& shape,
                                  const HandPose& pose) const {
    const Eigen::VectorXd all = hand::marker_vector(skel_, shape, pose);
    Eigen::VectorXd r(3 * o.ids.size());
    for (std::size_t k = 0; k < o.ids.size(); ++k) {
      r.segment<3>(3 * k) = all.segment<3>(3 * o.ids[k]) - o.x.segment<3>(3 * k);
    }
    return r;
  }

  Eigen::VectorXd residual(const ShapeVector& shape,
                           const std::vector<HandPose>& poses) const {
    Eigen::VectorXd r(n_rows_);
    const double w = std::sqrt(opt_.lambda_pose);
    for (std::size_t fr = 0; fr < obs_.size(); ++fr) {
      const int markers = 3 * static_cast<int>(obs_[fr].ids.size());
      const int row = row_offset_[fr];
      r.segment(row, markers) = marker_residual(obs_[fr], shape, poses[fr]);
      for (int k = 0; k < nf_; ++k) {
        const auto& lim = skel_.limit(free_[k]);
        const double th = poses[fr].finger_angles[free_[k]];
        r[row + markers + 2 * k] = w * softplus(th - lim.hi, opt_.sharpness);
        r[row + markers + 2 * k + 1] = w * softplus(lim.lo - th, opt_.sharpness);
      }
    }
    return r;
  }

  Eigen::MatrixXd jacobian(const ShapeVector& shape,
                           const std::vector<HandPose>& poses) const {
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n_rows_, n_params_);
    const double w = std::sqrt(opt_.lambda_pose);
    const double s = opt_.sharpness;
    const int shape_col = static_cast<int>(obs_.size()) * per_frame_;
    for (std::size_t fr = 0; fr < obs_.size(); ++fr) {
      const Observed& o = obs_[fr];
      const int row = row_offset_[fr];
      const int col = static_cast<int>(fr) * per_frame_;
      const Eigen::MatrixXd full = hand::fk_jacobian(skel_, shape, poses[fr]);
      Eigen::MatrixXd full_shape;
      if (with_shape_) full_shape = hand::shape_jacobian(skel_, shape, poses[fr]);
      for (std::size_t k = 0; k < o.ids.size(); ++k) {
        const int src = 3 * o.ids[k];
        const int dst = row + 3 * static_cast<int>(k);
        jac.block(dst, col, 3, kWristParams) = full.block(src, 0, 3, kWristParams);
        for (int c = 0; c < nf_; ++c) {
          jac.block<3, 1>(dst, col + kWristParams + c) =
              full.block<3, 1>(src, kWristParams + free_[c]);
        }
        if (with_shape_) {
          jac.block(dst, shape_col, 3, kShapeDim) = full_shape.block(src, 0, 3, kShapeDim);
        }
      }
      const int prior_row = row + 3 * static_cast<int>(o.ids.size());
      for (int c = 0; c < nf_; ++c) {
        const auto& lim = skel_.limit(free_[c]);
        const double th = poses[fr].finger_angles[free_[c]];
        jac(prior_row + 2 * c, col + kWristParams + c) = w * sigmoid(s * (th - lim.hi));
        jac(prior_row + 2 * c + 1, col + kWristParams + c) =
            -w * sigmoid(s * (lim.lo - th));
      }
    }
    return jac;
  }

  void apply(const Eigen::VectorXd& step, ShapeVector& shape,
             std::vector<HandPose>& poses) const {
    for (std::size_t fr = 0; fr < poses.size(); ++fr) {
      const int col = static_cast<int>(fr) * per_frame_;
      poses[fr].wrist = hand::retract_wrist(poses[fr].wrist, step.segment<kWristParams>(col));
      for (int c = 0; c < nf_; ++c) {
        poses[fr].finger_angles[free_[c]] += step[col + kWristParams + c];
      }
    }
    if (with_shape_) {
      const int shape_col = static_cast<int>(poses.size()) * per_frame_;
      const double bound = skel_.shape_bound();
      for (int k = 0; k < kShapeDim; ++k) {
        shape.beta[k] = std::clamp(shape.beta[k] + step[shape_col + k], -bound, bound);
      }
    }
  }

  const HandSkeleton& skel_;
  std::vector<Observed> obs_;
  FitOptions opt_;
  bool with_shape_;
  const std::vector<int>& free_;
  int nf_ = 0;
  int per_frame_ = 0;
  int n_params_ = 0;
  int n_rows_ = 0;
  std::vector<int> row_offset_;
};

void check_options(const FitOptions& opt) {
  if (!(opt.lambda_pose >= 0.0) || !(opt.sharpness > 0.0) ||
      opt.max_iterations < 0 || !(opt.tolerance >= 0.0)) {
    throw ValidationError("invalid fit options");
  }
}

// Chains hanging off the wrist, with the markers each one carries.
struct DigitChain {
  std::vector<int> hinges;
  std::vector<int> markers;
};

std::vector<DigitChain> digit_chains(const HandSkeleton& skel, const Observed& obs) {
  std::vector<DigitChain> out;
  for (int root : skel.children(0)) {
    DigitChain c;
    for (int j = root; j < hand::kJointCount; ++j) {
      if (skel.on_chain(root, j)) {
        c.hinges.push_back(HandSkeleton::angle_index(j, skel.joints()[j].hinge_axis));
      }
    }
    for (std::size_t k = 0; k < obs.ids.size(); ++k) {
      if (skel.on_chain(root, skel.markers()[obs.ids[k]].joint)) {
        c.markers.push_back(static_cast<int>(k));
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

double chain_error(const HandSkeleton& skel, const ShapeVector& shape,
                   const HandPose& pose, const Observed& obs, const DigitChain& c) {
  const Eigen::VectorXd x = hand::marker_vector(skel, shape, pose);
  double ss = 0.0;
  for (int k : c.markers) {
    ss += (x.segment<3>(3 * obs.ids[k]) - obs.x.segment<3>(3 * k)).squaredNorm();
  }
  return ss;
}

// Tip and middle-phalanx markers admit a second, folded finger configuration
// that fits almost as well, so a single start easily lands in the wrong one.
// Each digit's hinges are grid-searched, the best few distinct seeds are
// polished by the solver, and each digit keeps its best outcome.
void seed_digits(const HandSkeleton& skel, const ShapeVector& shape,
                 const Observed& obs, HandPose& pose) {
  constexpr int kLevels = 9;
  constexpr int kSeeds = 5;
  constexpr double kSeparation = 0.3;
  const std::vector<DigitChain> chains = digit_chains(skel, obs);

  std::vector<std::vector<Eigen::VectorXd>> seeds(chains.size());
  for (std::size_t ci = 0; ci < chains.size(); ++ci) {
    const DigitChain& c = chains[ci];
    if (c.markers.empty()) continue;
    int combos = 1;
    for (std::size_t k = 0; k < c.hinges.size(); ++k) combos *= kLevels;
    std::vector<std::pair<double, Eigen::VectorXd>> scored;
    HandPose trial = pose;
    for (int code0 = 0; code0 < combos; ++code0) {
      int code = code0;
      Eigen::VectorXd v(c.hinges.size());
      for (std::size_t k = 0; k < c.hinges.size(); ++k) {
        const auto& lim = skel.limit(c.hinges[k]);
        v[k] = lim.lo + (lim.hi - lim.lo) * (code % kLevels) / (kLevels - 1);
        trial.finger_angles[c.hinges[k]] = v[k];
        code /= kLevels;
      }
      scored.emplace_back(chain_error(skel, shape, trial, obs, c), v);
    }
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [err, v] : scored) {
      bool distinct = true;
      for (const auto& kept : seeds[ci]) {
        if ((kept - v).cwiseAbs().maxCoeff() < kSeparation) distinct = false;
      }
      if (distinct) seeds[ci].push_back(v);
      if (static_cast<int>(seeds[ci].size()) == kSeeds) break;
    }
  }

  // Each digit is polished against the palm markers and its own markers
  // only, so a wrong branch on one digit cannot drag the wrist for another.
  std::vector<int> palm;
  for (std::size_t k = 0; k < obs.ids.size(); ++k) {
    if (skel.markers()[obs.ids[k]].joint == 0) palm.push_back(static_cast<int>(k));
  }
  FitOptions opt;
  opt.max_iterations = 50;
  HandPose best = pose;
  for (std::size_t ci = 0; ci < chains.size(); ++ci) {
    const DigitChain& c = chains[ci];
    if (seeds[ci].empty()) continue;
    Observed sub;
    std::vector<int> keep = palm;
    keep.insert(keep.end(), c.markers.begin(), c.markers.end());
    sub.x.resize(3 * keep.size());
    for (std::size_t k = 0; k < keep.size(); ++k) {
      sub.ids.push_back(obs.ids[keep[k]]);
      sub.x.segment<3>(3 * k) = obs.x.segment<3>(3 * keep[k]);
    }
    Solver solver(skel, {sub}, opt, false);
    DigitChain local = c;
    for (std::size_t k = 0; k < local.markers.size(); ++k) {
      local.markers[k] = static_cast<int>(palm.size() + k);
    }
    double best_err = std::numeric_limits<double>::infinity();
    for (const Eigen::VectorXd& v : seeds[ci]) {
      std::vector<HandPose> poses = {pose};
      for (std::size_t h = 0; h < c.hinges.size(); ++h) poses[0].finger_angles[c.hinges[h]] = v[h];
      ShapeVector sh = shape;
      solver.run(sh, poses);
      const double err = chain_error(skel, shape, poses[0], sub, local);
      if (err < best_err) {
        best_err = err;
        for (int j = 1; j < hand::kJointCount; ++j) {
          // Copy every angle of the chain, not only its hinges.
          if (skel.on_chain(skel.children(0)[ci], j)) {
            best.finger_angles.segment<3>(3 * (j - 1)) = poses[0].finger_angles.segment<3>(3 * (j - 1));
          }
        }
      }
    }
  }
  best.finger_angles = skel.project_to_limits(best.finger_angles);
  pose = best;
}

}  // namespace

double pose_prior(const HandSkeleton& skel, const FingerAngles& angles,
                  double sharpness) {
  double psi = 0.0;
  for (int p : skel.free_parameters()) {
    const auto& lim = skel.limit(p);
    const double hi = softplus(angles[p] - lim.hi, sharpness);
    const double lo = softplus(lim.lo - angles[p], sharpness);
    psi += hi * hi + lo * lo;
  }
  return psi;
}

HandPose initial_pose(const HandSkeleton& skel, const ShapeVector& shape,
                      const MarkerFrame& frame) {
  skel.check_shape(shape);
  std::vector<Vec3> tmpl, obs;
  for (int id : kPalmMarkerIds) {
    const auto* m = frame.visible_marker(id);
    if (!m) continue;
    const auto& site = skel.markers()[id];
    if (site.joint != 0) throw ValidationError("palm marker not attached to the wrist");
    tmpl.push_back(site.offset);
    obs.push_back(m->position);
  }
  if (tmpl.size() < 3) {
    throw UnderdeterminedError("fewer than 3 palm markers visible for initialization");
  }
  HandPose pose;
  pose.wrist = registration::register_rigid_body(tmpl, obs).transform;
  pose.finger_angles = skel.mid_range();
  seed_digits(skel, shape, collect(frame), pose);
  return pose;
}

FrameFit fit_frame(const FitProblem& problem, const MarkerFrame& frame,
                   const HandPose& init) {
  if (!problem.skeleton) throw ValidationError("fit problem has no skeleton");
  const HandSkeleton& skel = *problem.skeleton;
  check_options(problem.options);
  skel.check_shape(problem.shape);
  skel.check_pose(init);
  const Observed obs = collect(frame);
  if (static_cast<int>(obs.ids.size()) < kMinVisibleMarkers) {
    throw UnderdeterminedError("only " + std::to_string(obs.ids.size()) +
                               " visible markers; need at least 6");
  }
  Solver solver(skel, {obs}, problem.options, false);
  ShapeVector shape = problem.shape;
  std::vector<HandPose> poses = {init};
  Solver::Outcome run = solver.run(shape, poses);
  FrameFit out;
  out.pose = poses[0];
  out.converged = run.converged;
  out.iterations = run.iterations;
  out.objective = std::move(run.objective);
  out.prior = pose_prior(skel, out.pose.finger_angles, problem.options.sharpness);
  out.pose.finger_angles = skel.project_to_limits(out.pose.finger_angles);
  out.rms = solver.marker_rms(shape, out.pose);
  return out;
}

FitResult fit_trajectory(const FitProblem& problem,
                         std::span<const MarkerFrame> frames) {
  if (!problem.skeleton) throw ValidationError("fit problem has no skeleton");
  if (frames.empty()) throw ArityError("cannot fit an empty sequence");
  const HandSkeleton& skel = *problem.skeleton;
  const std::size_t n = frames.size();

  FitResult out;
  out.poses.resize(n);
  out.rms.assign(n, 0.0);
  out.converged.assign(n, false);
  out.iterations.assign(n, 0);
  out.interpolated.assign(n, false);

  bool have_prev = false;
  HandPose prev;
  for (std::size_t t = 0; t < n; ++t) {
    if (frames[t].visible_count() < kMinVisibleMarkers) {
      out.interpolated[t] = true;
      continue;
    }
    try {
      const HandPose init =
          have_prev ? prev : initial_pose(skel, problem.shape, frames[t]);
      FrameFit f = fit_frame(problem, frames[t], init);
      out.poses[t] = f.pose;
      out.rms[t] = f.rms;
      out.converged[t] = f.converged;
      out.iterations[t] = f.iterations;
      prev = f.pose;
      have_prev = true;
    } catch (const FrameError&) {
      throw;
    } catch (const Error& e) {
      throw FrameError(e.what(), t);
    }
  }
  if (!have_prev) throw UnderdeterminedError("no frame has enough visible markers");

  // Fill skipped frames: wrist by slerp, fingers linearly, ends held.
  std::vector<RigidTransform> wrists(n);
  std::vector<bool> valid(n);
  for (std::size_t t = 0; t < n; ++t) {
    wrists[t] = out.poses[t].wrist;
    valid[t] = !out.interpolated[t];
  }
  if (registration::interpolate_pose_gaps(wrists, valid) > 0) {
    out.tag = registration::QualityTag::kInterpolated;
    int last = -1;
    for (std::size_t t = 0; t < n; ++t) {
      if (out.interpolated[t]) continue;
      const int cur = static_cast<int>(t);
      const int from = last < 0 ? 0 : last + 1;
      for (int k = from; k < cur; ++k) {
        if (last < 0) {
          out.poses[k].finger_angles = out.poses[cur].finger_angles;
        } else {
          const double s = static_cast<double>(k - last) / (cur - last);
          out.poses[k].finger_angles = (1.0 - s) * out.poses[last].finger_angles +
                                       s * out.poses[cur].finger_angles;
        }
      }
      last = cur;
    }
    for (std::size_t k = last + 1; k < n; ++k) {
      out.poses[k].finger_angles = out.poses[last].finger_angles;
    }
    for (std::size_t t = 0; t < n; ++t) {
      out.poses[t].wrist = wrists[t];
      if (out.interpolated[t]) {
        const Observed obs = collect(frames[t]);
        Solver probe(skel, {obs}, problem.options, false);
        out.rms[t] = probe.marker_rms(problem.shape, out.poses[t]);
      }
    }
  }
  return out;
}

ShapeWindowFit fit_shape_window(const HandSkeleton& skel,
                                std::span<const MarkerFrame> frames,
                                const FitOptions& options) {
  check_options(options);
  if (frames.empty()) throw ArityError("shape window is empty");
  std::vector<Observed> obs;
  std::vector<HandPose> poses;
  for (const auto& f : frames) {
    obs.push_back(collect(f));
    if (static_cast<int>(obs.back().ids.size()) < kMarkerCount) {
      throw UnderdeterminedError("shape fitting needs all 14 markers visible");
    }
    poses.push_back(initial_pose(skel, ShapeVector{}, f));
  }
  // Poses seeded at the mean shape can sit on the wrong finger branch once
  // the shape moves; re-seed at the current estimate until the fit settles.
  Solver solver(skel, obs, options, true);
  ShapeWindowFit out;
  double best = std::numeric_limits<double>::infinity();
  ShapeVector shape;
  std::vector<HandPose> best_poses = poses;
  for (int round = 0; round < kShapeRounds; ++round) {
    if (round > 0) {
      for (std::size_t i = 0; i < poses.size(); ++i) {
        poses[i] = initial_pose(skel, shape, frames[i]);
      }
    }
    ShapeVector trial = shape;
    std::vector<HandPose> trial_poses = poses;
    const Solver::Outcome run = solver.run(trial, trial_poses);
    const double f = run.objective.back();
    if (f < best) {
      best = f;
      out.shape = trial;
      out.converged = run.converged;
      best_poses = trial_poses;
    }
    out.iterations += run.iterations;
    shape = trial;
    if (f <= 1e-20 * static_cast<double>(frames.size())) break;
  }
  poses = std::move(best_poses);
  double ss = 0.0;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    poses[i].finger_angles = skel.project_to_limits(poses[i].finger_angles);
    ss += std::pow(solver.marker_rms(out.shape, poses[i], i), 2);
  }
  out.poses = std::move(poses);
  out.rms = std::sqrt(ss / static_cast<double>(frames.size()));
  return out;
}

hand::ShapeCoeffs robust_mean(std::span<const hand::ShapeCoeffs> samples) {
  if (samples.empty()) throw ArityError("robust mean of no samples");
  const std::size_t n = samples.size();
  auto median = [](std::vector<double> v) {
    const std::size_t m = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + m, v.end());
    double med = v[m];
    if (v.size() % 2 == 0) {
      med = 0.5 * (med + *std::max_element(v.begin(), v.begin() + m));
    }
    return med;
  };
  hand::ShapeCoeffs out;
  std::vector<double> col(n), dev(n);
  for (int k = 0; k < kShapeDim; ++k) {
    for (std::size_t i = 0; i < n; ++i) col[i] = samples[i][k];
    const double med = median(col);
    for (std::size_t i = 0; i < n; ++i) dev[i] = std::abs(col[i] - med);
    const double mad = median(dev);
    double sum = 0.0;
    int kept = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (dev[i] <= 2.0 * mad) {
        sum += col[i] - med;
        ++kept;
      }
    }
    out[k] = med + sum / kept;
  }
  return out;
}

ShapeVector estimate_shape(const HandSkeleton& skel,
                           std::span<const MarkerFrame> calibration,
                           const FitOptions& options) {
  std::vector<const MarkerFrame*> usable;
  for (const auto& f : calibration) {
    if (f.visible_count() >= kMarkerCount && collect(f).ids.size() == kMarkerCount) {
      usable.push_back(&f);
    }
  }
  if (static_cast<int>(usable.size()) < kMinCalibrationFrames) {
    throw ArityError("shape estimation needs at least 30 frames with all markers; got " +
                     std::to_string(usable.size()));
  }
  std::vector<hand::ShapeCoeffs> estimates;
  std::vector<MarkerFrame> window;
  std::size_t windows = 0;
  for (std::size_t start = 0; start + kShapeWindow <= usable.size();
       start += kShapeWindow) {
    window.clear();
    for (int k = 0; k < kShapeWindow; ++k) window.push_back(*usable[start + k]);
    ++windows;
    const ShapeWindowFit fit = fit_shape_window(skel, window, options);
    if (fit.converged) estimates.push_back(fit.shape.beta);
  }
  if (2 * estimates.size() < windows) {
    throw ArityError("more than half of the calibration windows did not converge");
  }
  ShapeVector out;
  out.beta = robust_mean(estimates);
  return out;
}

MarkerFrame synthesize_markers(const HandSkeleton& skel, const ShapeVector& shape,
                               const HandPose& pose, double timestamp) {
  const hand::FkResult fk = hand::forward_kinematics(skel, shape, pose);
  MarkerFrame frame;
  frame.timestamp = timestamp;
  for (int i = 0; i < kMarkerCount; ++i) {
    frame.points.push_back({i, fk.marker_positions[i], true});
  }
  return frame;
}

}  // namespace dexforge::fit
