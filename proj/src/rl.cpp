#include "dexforge/rl.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <zlib.h>

#include "dexforge/errors.hpp"
#include "dexforge/parallel.hpp"

namespace dexforge::rl {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

double uniform(Rng& rng, double half_width) {
  if (half_width <= 0.0) return 0.0;
  return std::uniform_real_distribution<double>(-half_width, half_width)(rng);
}

}  // namespace

VectorXd ActionBounds::scale() const {
  VectorXd s(kActionDim);
  s.head<3>().setConstant(lin);
  s.segment<3>(3).setConstant(rot);
  s.tail(physics::kHingeCount).setConstant(finger);
  return s;
}

VectorXd accumulate(const VectorXd& u, const VectorXd& a, double tau) {
  if (u.size() != a.size()) throw ValidationError("action and accumulator sizes differ");
  return tau * u + a;
}

RewardTerms compute_reward(double goal_dist, double rot_error, const VectorXd& penalized,
                           double w_act) {
  if (!(goal_dist >= 0.0) || !std::isfinite(goal_dist)) {
    throw ValidationError("goal distance must be finite and nonnegative");
  }
  if (!(rot_error >= 0.0) || rot_error > M_PI + 1e-12) {
    throw ValidationError("rotation error must lie in [0, pi]");
  }
  if (!(w_act >= 0.0)) throw ValidationError("action weight must be nonnegative");
  RewardTerms r;
  r.r_dist = std::exp(-60.0 * goal_dist);
  r.r_rot = std::exp(-10.0 * rot_error);
  r.c_act = w_act * penalized.squaredNorm();
  r.total = r.r_dist + r.r_rot - r.c_act;
  return r;
}

VectorXd normalized_q(const physics::World& world) {
  VectorXd q(kQDim);
  const physics::RigidState& base = world.base();
  q.head<3>() = (base.pose.translation / 0.5).cwiseMax(-1.0).cwiseMin(1.0);
  q.segment<3>(3) = so3::log(base.pose.rotation) / M_PI;
  const auto& skel = world.skeleton();
  const hand::FingerAngles fingers = world.hand_pose().finger_angles;
  const std::vector<int> hinges = skel.hinge_parameters();
  for (int k = 0; k < physics::kHingeCount; ++k) {
    const hand::JointLimit& lim = skel.limit(hinges[k]);
    q[6 + k] = 2.0 * (fingers[hinges[k]] - lim.lo) / (lim.hi - lim.lo) - 1.0;
  }
  return q;
}

VectorXd build_observation(const physics::World& world, const dataset::Trajectory& demo, int t,
                           const Accumulator& acc, const VectorXd& previous_q) {
  if (t < demo.meta.active_start || t >= demo.meta.active_end) {
    throw RangeError("frame " + std::to_string(t) + " outside the active range");
  }
  VectorXd obs(kObservationDim);
  const VectorXd q = normalized_q(world);
  int i = 0;
  obs.segment(i, kQDim) = q;
  i += kQDim;
  obs.segment(i, kQDim) = ((q - previous_q) / physics::kControlDt).cwiseMax(-kQDotClip).cwiseMin(kQDotClip);
  i += kQDim;
  auto put_pose = [&](const RigidTransform& p) {
    obs.segment<3>(i) = p.translation;
    obs.segment<4>(i + 3) << p.rotation.w(), p.rotation.x(), p.rotation.y(), p.rotation.z();
    i += 7;
  };
  const RigidTransform& object = world.object().pose;
  put_pose(object);
  const RigidTransform& hand = world.base().pose;
  obs.segment<3>(i) = object.translation - hand.translation;
  obs.segment<3>(i + 3) = so3::log(hand.rotation.conjugate() * object.rotation);
  i += 6;
  put_pose(demo.object(t));
  obs.segment<3>(i) = demo.object(std::min(t + kPreviewSteps, demo.frames() - 1)).translation;
  i += 3;
  obs.segment<3>(i) = acc.u.head<3>();
  return obs;
}

void Perturbation::validate() const {
  for (double v : {pose_offset, yaw, size_scale, mass_scale}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("perturbation bounds must be nonnegative");
  }
  if (size_scale >= 1.0 || mass_scale >= 1.0) throw ConfigError("scale bounds must stay below 1");
}

nlohmann::json Perturbation::to_json() const {
  return {{"pose_offset", pose_offset}, {"yaw", yaw}, {"size_scale", size_scale},
          {"mass_scale", mass_scale}};
}

Perturbation Perturbation::from_json(const nlohmann::json& doc) {
  Perturbation p;
  p.pose_offset = doc.value("pose_offset", 0.0);
  p.yaw = doc.value("yaw", 0.0);
  p.size_scale = doc.value("size_scale", 0.0);
  p.mass_scale = doc.value("mass_scale", 0.0);
  p.validate();
  return p;
}

nlohmann::json EnvConfig::to_json() const {
  return {{"a_max", bounds.lin},
          {"r_max", bounds.rot},
          {"finger_max", bounds.finger},
          {"tau", tau},
          {"w_act", w_act},
          {"penalize_raw_action", penalize_raw_action},
          {"substeps", sim.substeps},
          {"k_n", sim.contact.k_n},
          {"c_n", sim.contact.c_n},
          {"c_t", sim.contact.c_t},
          {"mu_hand", sim.contact.mu_hand}};
}

EnvConfig EnvConfig::from_json(const nlohmann::json& doc) {
  EnvConfig c;
  c.bounds.lin = doc.value("a_max", c.bounds.lin);
  c.bounds.rot = doc.value("r_max", c.bounds.rot);
  c.bounds.finger = doc.value("finger_max", c.bounds.finger);
  c.tau = doc.value("tau", c.tau);
  c.w_act = doc.value("w_act", c.w_act);
  c.penalize_raw_action = doc.value("penalize_raw_action", c.penalize_raw_action);
  c.sim.substeps = doc.value("substeps", c.sim.substeps);
  c.sim.contact.k_n = doc.value("k_n", c.sim.contact.k_n);
  c.sim.contact.c_n = doc.value("c_n", c.sim.contact.c_n);
  c.sim.contact.c_t = doc.value("c_t", c.sim.contact.c_t);
  c.sim.contact.mu_hand = doc.value("mu_hand", c.sim.contact.mu_hand);
  if (!(c.tau >= 0.8 && c.tau <= 0.95)) throw ConfigError("tau must lie in [0.8, 0.95]");
  if (!(c.bounds.lin > 0 && c.bounds.rot > 0 && c.bounds.finger > 0)) {
    throw ConfigError("action bounds must be positive");
  }
  if (!(c.w_act >= 0.0)) throw ConfigError("w_act must be nonnegative");
  return c;
}

ResidualEnv::ResidualEnv(std::shared_ptr<const hand::HandSkeleton> skeleton,
                         std::shared_ptr<const dataset::Trajectory> demo, physics::BodyDef object,
                         EnvConfig config, Perturbation perturbation)
    : skeleton_(std::move(skeleton)),
      demo_(std::move(demo)),
      object_(std::move(object)),
      config_(std::move(config)),
      perturbation_(perturbation),
      episode_object_(object_) {
  if (!skeleton_ || !demo_) throw ValidationError("environment needs a skeleton and a demo");
  demo_->validate();
  if (demo_->meta.active_end - demo_->meta.active_start < 2) {
    throw ValidationError("demo needs at least two active frames");
  }
  object_.validate();
  perturbation_.validate();
  acc_.tau = config_.tau;
  scale_ = config_.bounds.scale();
}

physics::HandCommand ResidualEnv::target(int t) const {
  const hand::HandPose pose = demo_->hand(t);
  physics::HandCommand cmd;
  cmd.base.translation = pose.wrist.translation + acc_.u.head<3>();
  cmd.base.rotation = (so3::exp_quat(acc_.u.segment<3>(3)) * pose.wrist.rotation).normalized();
  cmd.fingers = pose.finger_angles;
  const std::vector<int> hinges = skeleton_->hinge_parameters();
  for (int k = 0; k < physics::kHingeCount; ++k) cmd.fingers[hinges[k]] += acc_.u[6 + k];
  cmd.fingers = skeleton_->project_to_limits(cmd.fingers);
  return cmd;
}

VectorXd ResidualEnv::reset(std::uint64_t seed) {
  Rng rng(seed);
  const double size = object_.shape.size();
  const double dx = uniform(rng, perturbation_.pose_offset * size);
  const double dy = uniform(rng, perturbation_.pose_offset * size);
  const double yaw = uniform(rng, perturbation_.yaw);
  const double s = 1.0 + uniform(rng, perturbation_.size_scale);
  const double m = 1.0 + uniform(rng, perturbation_.mass_scale);

  physics::Shape shape = object_.shape;
  shape.dims *= s;
  episode_object_ = physics::BodyDef::solid(shape, object_.mass * s * s * s * m, object_.friction_mu);
  episode_object_.restitution = object_.restitution;
  world_ = std::make_unique<physics::World>(skeleton_, hand::ShapeVector{demo_->meta.mano_shape},
                                            episode_object_, config_.sim);

  t_ = demo_->meta.active_start;
  hand::HandPose pose = demo_->hand(t_);
  world_->set_hand(pose);
  physics::RigidState obj;
  obj.pose = demo_->object(t_);
  obj.pose.translation += Vec3(dx, dy, (s - 1.0) * object_.shape.rest_height());
  obj.pose.rotation = (Quat(Eigen::AngleAxisd(yaw, Vec3::UnitZ())) * obj.pose.rotation).normalized();
  world_->set_object(obj);

  acc_.u.setZero(kActionDim);
  last_ = {};
  command_ = target(t_);
  previous_q_ = normalized_q(*world_);
  return build_observation(*world_, *demo_, t_, acc_, previous_q_);
}

StepOutcome ResidualEnv::step(const VectorXd& action) {
  if (!world_) throw ValidationError("environment stepped before reset");
  if (action.size() != kActionDim || !action.allFinite()) {
    throw ValidationError("action must be finite with " + std::to_string(kActionDim) + " components");
  }
  const VectorXd a = action.cwiseMax(-1.0).cwiseMin(1.0).cwiseProduct(scale_);
  acc_.push(a);
  command_ = target(t_ + 1);
  StepOutcome out;
  try {
    last_ = world_->step(command_);
  } catch (const SimulationDiverged& e) {
    out.done = true;
    out.cause = "diverged";
    out.observation = VectorXd::Zero(kObservationDim);
    return out;
  }
  ++t_;
  const physics::ObjectError err = world_->query_object_error(demo_->object(t_));
  out.reward = compute_reward(err.goal_dist, std::min(err.rot_error, M_PI),
                              config_.penalize_raw_action ? a : acc_.u, config_.w_act);
  out.observation = build_observation(*world_, *demo_, t_, acc_, previous_q_);
  previous_q_ = normalized_q(*world_);
  if (err.goal_dist > kFailureDistance) {
    out.done = true;
    out.cause = "object_lost";
  } else if (t_ == demo_->meta.active_end - 1) {
    out.done = true;
    out.success = true;
    out.cause = "completed";
  }
  return out;
}

double ToyTrackingEnv::reference(int t) const {
  return 0.05 * std::sin(0.5 * M_PI * t / kHorizon);
}

double ToyTrackingEnv::target(int t) const { return reference(t); }

VectorXd ToyTrackingEnv::observe() const {
  VectorXd o(4);
  o << (x_ - target(t_)) / 0.05, acc_.u[0] / 0.05, v_ / 0.5, static_cast<double>(t_) / kHorizon;
  return o;
}

VectorXd ToyTrackingEnv::reset(std::uint64_t seed) {
  Rng rng(seed);
  bias_ = uniform(rng, 0.04);
  t_ = 0;
  x_ = reference(0) + bias_;
  v_ = 0.0;
  acc_.u.setZero();
  return observe();
}

StepOutcome ToyTrackingEnv::step(const VectorXd& action) {
  if (action.size() != 1 || !action.allFinite()) throw ValidationError("toy action must be one finite value");
  const VectorXd a = action.cwiseMax(-1.0).cwiseMin(1.0) * 0.005;
  acc_.push(a);
  ++t_;
  const double cmd = reference(t_) + bias_ + acc_.u[0];
  constexpr double kp = 3600.0, kd = 120.0, dt = physics::kControlDt;
  v_ += dt * (kp * (cmd - x_) - kd * v_);
  x_ += dt * v_;
  StepOutcome out;
  // Distance term only: a point has no orientation to track.
  out.reward = compute_reward(std::abs(x_ - target(t_)), 0.0, acc_.u, 0.01);
  out.reward.r_rot = 0.0;
  out.reward.total = out.reward.r_dist - out.reward.c_act;
  out.observation = observe();
  if (t_ == kHorizon) {
    out.done = true;
    out.success = true;
    out.cause = "completed";
  }
  return out;
}

Mlp::Mlp(std::vector<int> sizes, Rng& rng, double output_gain) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw ValidationError("network needs an input and an output layer");
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const int in = sizes_[l], out = sizes_[l + 1];
    const double gain = (l + 2 == sizes_.size()) ? output_gain : 1.0;
    MatrixXd w(out, in);
    for (int i = 0; i < w.size(); ++i) w.data()[i] = gain * n(rng) / std::sqrt(in);
    weights_.push_back(w);
    biases_.push_back(VectorXd::Zero(out));
  }
}

int Mlp::parameter_count() const {
  int n = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
  return n;
}

VectorXd Mlp::parameters() const {
  VectorXd p(parameter_count());
  int i = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    p.segment(i, weights_[l].size()) = weights_[l].reshaped();
    i += weights_[l].size();
    p.segment(i, biases_[l].size()) = biases_[l];
    i += biases_[l].size();
  }
  return p;
}

void Mlp::set_parameters(const VectorXd& p) {
  if (p.size() != parameter_count()) throw ValidationError("parameter count mismatch");
  int i = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    weights_[l].reshaped() = p.segment(i, weights_[l].size());
    i += weights_[l].size();
    biases_[l] = p.segment(i, biases_[l].size());
    i += biases_[l].size();
  }
}

MatrixXd Mlp::forward(const MatrixXd& x) const {
  Tape tape;
  return forward(x, tape);
}

MatrixXd Mlp::forward(const MatrixXd& x, Tape& tape) const {
  if (x.rows() != input_dim()) throw ValidationError("network input has the wrong size");
  tape.activations.assign(1, x);
  MatrixXd a = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    MatrixXd z = weights_[l] * a;
    z.colwise() += biases_[l];
    if (l + 1 < weights_.size()) {
      a = z.array().tanh().matrix();
      tape.activations.push_back(a);
    } else {
      a = std::move(z);
    }
  }
  return a;
}

VectorXd Mlp::backward(const Tape& tape, const MatrixXd& upstream) const {
  VectorXd grad(parameter_count());
  std::vector<int> offsets(weights_.size());
  for (std::size_t l = 0, i = 0; l < weights_.size(); ++l) {
    offsets[l] = static_cast<int>(i);
    i += weights_[l].size() + biases_[l].size();
  }
  MatrixXd g = upstream;
  for (int l = static_cast<int>(weights_.size()) - 1; l >= 0; --l) {
    const MatrixXd& a = tape.activations[l];
    const MatrixXd dw = g * a.transpose();
    grad.segment(offsets[l], dw.size()) = dw.reshaped();
    grad.segment(offsets[l] + dw.size(), biases_[l].size()) = g.rowwise().sum();
    if (l > 0) {
      g = (weights_[l].transpose() * g).cwiseProduct((1.0 - a.array().square()).matrix());
    }
  }
  return grad;
}

Normalizer::Normalizer(int dim)
    : mean(VectorXd::Zero(dim)), var(VectorXd::Ones(dim)), count(1e-4) {}

void Normalizer::update(const MatrixXd& batch) {
  const double n = static_cast<double>(batch.cols());
  if (n == 0) return;
  const VectorXd bmean = batch.rowwise().mean();
  const VectorXd bvar = (batch.colwise() - bmean).array().square().rowwise().mean();
  const double total = count + n;
  const VectorXd delta = bmean - mean;
  mean += delta * (n / total);
  var = (var * count + bvar * n + delta.cwiseAbs2() * (count * n / total)) / total;
  count = total;
}

MatrixXd Normalizer::apply(const MatrixXd& x) const {
  const VectorXd inv = (var.array() + 1e-8).rsqrt();
  MatrixXd out = (x.colwise() - mean).array().colwise() * inv.array();
  return out.cwiseMax(-10.0).cwiseMin(10.0);
}

nlohmann::json PpoConfig::to_json() const {
  return {{"num_envs", num_envs}, {"horizon", horizon},   {"total_steps", total_steps},
          {"hidden", hidden},     {"clip", clip},         {"gamma", gamma},
          {"lambda", lambda},     {"epochs", epochs},     {"minibatches", minibatches},
          {"learning_rate", learning_rate}, {"entropy_coef", entropy_coef},
          {"value_coef", value_coef}, {"max_grad_norm", max_grad_norm},
          {"init_log_std", init_log_std}, {"reward_scale", reward_scale}, {"seed", seed}};
}

PpoConfig PpoConfig::from_json(const nlohmann::json& doc) {
  PpoConfig c;
  try {
    c.num_envs = doc.value("num_envs", c.num_envs);
    c.horizon = doc.value("horizon", c.horizon);
    c.total_steps = doc.value("total_steps", c.total_steps);
    c.hidden = doc.value("hidden", c.hidden);
    c.clip = doc.value("clip", c.clip);
    c.gamma = doc.value("gamma", c.gamma);
    c.lambda = doc.value("lambda", c.lambda);
    c.epochs = doc.value("epochs", c.epochs);
    c.minibatches = doc.value("minibatches", c.minibatches);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.entropy_coef = doc.value("entropy_coef", c.entropy_coef);
    c.value_coef = doc.value("value_coef", c.value_coef);
    c.max_grad_norm = doc.value("max_grad_norm", c.max_grad_norm);
    c.init_log_std = doc.value("init_log_std", c.init_log_std);
    c.reward_scale = doc.value("reward_scale", c.reward_scale);
    c.seed = doc.value("seed", c.seed);
    c.jobs = doc.value("jobs", c.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ppo config: ") + e.what());
  }
  if (c.num_envs < 1 || c.horizon < 1 || c.total_steps < 1 || c.hidden < 1 || c.epochs < 1 ||
      c.minibatches < 1 || c.jobs < 1) {
    throw ConfigError("ppo sizes must be positive");
  }
  if (!(c.clip > 0 && c.gamma >= 0 && c.gamma <= 1 && c.lambda >= 0 && c.lambda <= 1 &&
        c.learning_rate > 0 && c.reward_scale > 0)) {
    throw ConfigError("ppo coefficients out of range");
  }
  return c;
}

std::uint32_t config_hash(const nlohmann::json& config) {
  const std::string text = config.dump();
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

Policy::Policy(int obs_dim, int act_dim, int hidden, double init_log_std, Rng& rng)
    : actor_({obs_dim, hidden, hidden, act_dim}, rng, 0.01),
      critic_({obs_dim, hidden, hidden, 1}, rng, 1.0),
      log_std_(VectorXd::Constant(act_dim, init_log_std)),
      normalizer_(obs_dim) {}

VectorXd Policy::value(const MatrixXd& obs) const { return critic_.forward(obs).row(0).transpose(); }

VectorXd Policy::act(const VectorXd& raw_obs, Rng& rng, bool deterministic) const {
  const VectorXd mu = actor_.forward(normalizer_.apply(raw_obs)).col(0);
  if (deterministic) return mu;
  std::normal_distribution<double> n(0.0, 1.0);
  const VectorXd sigma = log_std().array().exp();
  VectorXd a(mu.size());
  for (int j = 0; j < mu.size(); ++j) a[j] = mu[j] + sigma[j] * n(rng);
  return a;
}

double Policy::log_prob(const VectorXd& normalized_obs, const VectorXd& action) const {
  const VectorXd mu = actor_.forward(normalized_obs).col(0);
  const VectorXd ls = log_std();
  const VectorXd z = (action - mu).array() / ls.array().exp();
  return -0.5 * z.squaredNorm() - ls.sum() - 0.5 * kLog2Pi * mu.size();
}

int Policy::parameter_count() const {
  return actor_.parameter_count() + static_cast<int>(log_std_.size()) + critic_.parameter_count();
}

VectorXd Policy::parameters() const {
  VectorXd p(parameter_count());
  p << actor_.parameters(), log_std_, critic_.parameters();
  return p;
}

void Policy::set_parameters(const VectorXd& p) {
  if (p.size() != parameter_count()) throw ValidationError("parameter count mismatch");
  const int na = actor_.parameter_count(), ns = static_cast<int>(log_std_.size());
  actor_.set_parameters(p.head(na));
  log_std_ = p.segment(na, ns);
  critic_.set_parameters(p.tail(critic_.parameter_count()));
}

namespace {

constexpr char kMagic[8] = {'D', 'X', 'P', 'O', 'L', 'I', 'C', 'Y'};
constexpr std::uint32_t kCheckpointVersion = 1;
static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");

template <class T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_vector(std::string& buf, const VectorXd& v) {
  put(buf, static_cast<std::uint64_t>(v.size()));
  buf.append(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& name;
  template <class T>
  T get() {
    if (pos + sizeof(T) > buf.size()) throw CorruptionError(name + ": checkpoint truncated");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  VectorXd get_vector() {
    const auto n = get<std::uint64_t>();
    if (n > (buf.size() - pos) / sizeof(double)) throw CorruptionError(name + ": checkpoint truncated");
    VectorXd v(static_cast<Eigen::Index>(n));
    std::memcpy(v.data(), buf.data() + pos, sizeof(double) * n);
    pos += sizeof(double) * n;
    return v;
  }
};

}  // namespace

void Policy::save(const std::filesystem::path& path, std::uint32_t hash) const {
  std::string buf(kMagic, kMagic + 8);
  put(buf, kCheckpointVersion);
  put(buf, hash);
  put(buf, static_cast<std::int32_t>(observation_dim()));
  put(buf, static_cast<std::int32_t>(action_dim()));
  put(buf, static_cast<std::int32_t>(actor_.parameter_count()));
  put(buf, static_cast<std::int32_t>(critic_.parameter_count()));
  // Hidden width recovered from the parameter count of a 2-hidden-layer net.
  put_vector(buf, parameters());
  put(buf, normalizer_.count);
  put_vector(buf, normalizer_.mean);
  put_vector(buf, normalizer_.var);
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put(buf, crc);
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  std::filesystem::rename(tmp, path);
}

Policy Policy::load(const std::filesystem::path& path, std::optional<std::uint32_t> expected_hash,
                    std::uint32_t* hash_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (buf.size() < 8 + 4 || std::memcmp(buf.data(), kMagic, 8) != 0) {
    throw CorruptionError(name + ": not a policy checkpoint");
  }
  Reader r{buf, 8, name};
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError(name + ": checkpoint version " + std::to_string(version));
  }
  if (buf.size() < 4) throw CorruptionError(name + ": checkpoint truncated");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (crc != stored_crc) throw CorruptionError(name + ": checkpoint checksum mismatch");
  const auto hash = r.get<std::uint32_t>();
  if (hash_out) *hash_out = hash;
  if (expected_hash && *expected_hash != hash) {
    throw ConfigError(name + ": checkpoint was trained with a different configuration");
  }
  const int obs = r.get<std::int32_t>(), act = r.get<std::int32_t>();
  const int na = r.get<std::int32_t>(), nc = r.get<std::int32_t>();
  // Solve na = obs*h + h + h*h + h + h*act + act for the hidden width h.
  const double b = obs + act + 2.0, c = static_cast<double>(act) - na;
  const int hidden = static_cast<int>(std::lround((-b + std::sqrt(b * b - 4.0 * c)) / 2.0));
  Rng rng(0);
  Policy p(obs, act, hidden, 0.0, rng);
  if (p.actor_.parameter_count() != na || p.critic_.parameter_count() != nc) {
    throw CorruptionError(name + ": inconsistent network sizes");
  }
  p.set_parameters(r.get_vector());
  p.normalizer_.count = r.get<double>();
  p.normalizer_.mean = r.get_vector();
  p.normalizer_.var = r.get_vector();
  if (p.normalizer_.mean.size() != obs || p.normalizer_.var.size() != obs) {
    throw CorruptionError(name + ": inconsistent normalizer");
  }
  return p;
}

VectorXd gae(const VectorXd& rewards, const VectorXd& values, const std::vector<bool>& done,
             double bootstrap, double gamma, double lambda) {
  const Eigen::Index n = rewards.size();
  if (values.size() != n || static_cast<Eigen::Index>(done.size()) != n) {
    throw ValidationError("advantage inputs differ in length");
  }
  VectorXd adv(n);
  double next_adv = 0.0;
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    const double next_value = t + 1 < n ? values[t + 1] : bootstrap;
    const double live = done[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * next_value * live - values[t];
    next_adv = delta + gamma * lambda * live * next_adv;
    adv[t] = next_adv;
  }
  return adv;
}

LossTerms ppo_loss(const Policy& policy, const Batch& batch, const PpoConfig& config,
                   bool with_gradient) {
  const Eigen::Index n = batch.observations.cols();
  const int act = policy.action_dim();
  if (n == 0) throw ValidationError("empty batch");
  Mlp::Tape actor_tape, critic_tape;
  const MatrixXd mu = policy.actor().forward(batch.observations, actor_tape);
  const MatrixXd v = policy.critic().forward(batch.observations, critic_tape);
  const VectorXd raw_ls = policy.parameters().segment(policy.actor().parameter_count(), act);
  const VectorXd ls = policy.log_std();
  const VectorXd sigma = ls.array().exp();

  const MatrixXd z = (batch.actions - mu).array().colwise() / sigma.array();
  const VectorXd logp =
      (-0.5 * z.array().square().colwise().sum()).transpose() - ls.sum() - 0.5 * kLog2Pi * act;
  const VectorXd ratio = (logp - batch.old_log_prob).array().exp();

  LossTerms out;
  VectorXd dlogp(n);
  double surrogate = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = batch.advantages[i];
    const double clipped = std::clamp(ratio[i], 1.0 - config.clip, 1.0 + config.clip);
    const double u = ratio[i] * a, c = clipped * a;
    surrogate += std::min(u, c);
    dlogp[i] = (u <= c) ? -a * ratio[i] / n : 0.0;
  }
  out.policy = -surrogate / n;
  out.entropy = ls.sum() + 0.5 * (kLog2Pi + 1.0) * act;
  const VectorXd verr = v.row(0).transpose() - batch.returns;
  out.value = verr.squaredNorm() / n;
  out.total = out.policy + config.value_coef * out.value - config.entropy_coef * out.entropy;
  out.mean_ratio = ratio.mean();
  if (!with_gradient) return out;

  // d logp / d mu = z / sigma; d logp / d log_std = z^2 - 1.
  const MatrixXd dmu = (z.array().colwise() / sigma.array()).rowwise() * dlogp.transpose().array();
  VectorXd dls = (z.array().square() - 1.0).matrix() * dlogp;
  dls.array() -= config.entropy_coef;
  for (int j = 0; j < act; ++j) {
    if (raw_ls[j] < kLogStdMin || raw_ls[j] > kLogStdMax) dls[j] = 0.0;
  }
  const MatrixXd dv = (2.0 * config.value_coef / n) * verr.transpose();
  out.gradient.resize(policy.parameter_count());
  out.gradient << policy.actor().backward(actor_tape, dmu), dls,
      policy.critic().backward(critic_tape, dv);
  return out;
}

Adam::Adam(int dim, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(VectorXd::Zero(dim)), v_(VectorXd::Zero(dim)) {}

void Adam::step(VectorXd& params, const VectorXd& grad) {
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

void write_curves_csv(const std::vector<CurvePoint>& curves, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "step,mean_reward,success_rate\n";
  out.precision(9);
  for (const CurvePoint& c : curves) {
    out << c.step << ',' << c.mean_reward << ',' << c.success_rate << '\n';
  }
}

std::uint64_t rollout_seed(std::uint64_t base, std::uint64_t index) {
  dataset::SplitMix64 g(base ^ (0x9E3779B97F4A7C15ULL * (index + 1)));
  return g.next();
}

namespace {

struct EnvSlot {
  std::unique_ptr<Env> env;
  Rng rng;
  VectorXd obs;
  std::uint64_t episodes = 0;
  std::uint64_t seed_base = 0;
  double episode_return = 0.0;
  // Segment storage.
  MatrixXd raw_obs, norm_obs, actions;
  VectorXd rewards, values, log_probs;
  std::vector<bool> done;
  double bootstrap = 0.0;
  std::vector<std::pair<double, bool>> finished;
};

void collect(EnvSlot& s, const Policy& policy, int horizon, double reward_scale) {
  const int od = policy.observation_dim(), ad = policy.action_dim();
  s.raw_obs.resize(od, horizon);
  s.norm_obs.resize(od, horizon);
  s.actions.resize(ad, horizon);
  s.rewards.resize(horizon);
  s.values.resize(horizon);
  s.log_probs.resize(horizon);
  s.done.assign(horizon, false);
  s.finished.clear();
  const VectorXd sigma = policy.log_std().array().exp();
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int h = 0; h < horizon; ++h) {
    const VectorXd x = policy.normalizer().apply(s.obs);
    const VectorXd mu = policy.mean(x).col(0);
    VectorXd a(ad);
    for (int j = 0; j < ad; ++j) a[j] = mu[j] + sigma[j] * normal(s.rng);
    s.raw_obs.col(h) = s.obs;
    s.norm_obs.col(h) = x;
    s.actions.col(h) = a;
    s.values[h] = policy.value(x)[0];
    s.log_probs[h] = policy.log_prob(x, a);
    const StepOutcome out = s.env->step(a);
    s.rewards[h] = reward_scale * out.reward.total;
    s.episode_return += out.reward.total;
    if (out.done) {
      s.done[h] = true;
      s.finished.emplace_back(s.episode_return, out.success);
      s.episode_return = 0.0;
      s.obs = s.env->reset(rollout_seed(s.seed_base, s.episodes++));
    } else {
      s.obs = out.observation;
    }
  }
  s.bootstrap = policy.value(policy.normalizer().apply(s.obs))[0];
}

}  // namespace

TrainResult train_ppo(const EnvFactory& make_env, const PpoConfig& config,
                      const std::optional<std::filesystem::path>& checkpoint,
                      const std::function<void(const CurvePoint&)>& progress) {
  Rng rng(config.seed);
  std::vector<EnvSlot> slots(config.num_envs);
  for (int e = 0; e < config.num_envs; ++e) {
    slots[e].env = make_env();
    slots[e].rng.seed(rollout_seed(config.seed, 1000 + e));
    slots[e].seed_base = rollout_seed(config.seed, 2000 + e);
    slots[e].obs = slots[e].env->reset(rollout_seed(slots[e].seed_base, slots[e].episodes++));
  }
  const int od = slots[0].env->observation_dim(), ad = slots[0].env->action_dim();
  TrainResult result;
  result.policy = Policy(od, ad, config.hidden, config.init_log_std, rng);
  Policy& policy = result.policy;
  Adam adam(policy.parameter_count(), config.learning_rate);
  const std::uint32_t hash = config_hash(config.to_json());

  const long per_iter = static_cast<long>(config.num_envs) * config.horizon;
  // Observation statistics come from one warm-up segment and stay frozen.
  parallel_for(config.num_envs, config.jobs,
               [&](int e) { collect(slots[e], policy, config.horizon, config.reward_scale); });
  for (EnvSlot& s : slots) policy.normalizer().update(s.raw_obs);
  result.steps += per_iter;
  while (result.steps < config.total_steps) {
    parallel_for(config.num_envs, config.jobs,
                 [&](int e) { collect(slots[e], policy, config.horizon, config.reward_scale); });
    result.steps += per_iter;

    Batch batch;
    batch.observations.resize(od, per_iter);
    batch.actions.resize(ad, per_iter);
    batch.old_log_prob.resize(per_iter);
    batch.advantages.resize(per_iter);
    batch.returns.resize(per_iter);
    double ret_sum = 0.0;
    int episodes = 0, successes = 0;
    for (int e = 0; e < config.num_envs; ++e) {
      EnvSlot& s = slots[e];
      const VectorXd adv = gae(s.rewards, s.values, s.done, s.bootstrap, config.gamma, config.lambda);
      const long off = static_cast<long>(e) * config.horizon;
      batch.observations.middleCols(off, config.horizon) = s.norm_obs;
      batch.actions.middleCols(off, config.horizon) = s.actions;
      batch.old_log_prob.segment(off, config.horizon) = s.log_probs;
      batch.advantages.segment(off, config.horizon) = adv;
      batch.returns.segment(off, config.horizon) = adv + s.values;
      for (const auto& [ret, ok] : s.finished) {
        ret_sum += ret;
        ++episodes;
        successes += ok;
      }
    }

    const VectorXd good = policy.parameters();
    std::vector<Eigen::Index> order(per_iter);
    std::iota(order.begin(), order.end(), 0);
    const long mb = std::max<long>(1, per_iter / config.minibatches);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (long start = 0; start + mb <= per_iter; start += mb) {
        Batch m;
        m.observations.resize(od, mb);
        m.actions.resize(ad, mb);
        m.old_log_prob.resize(mb);
        m.advantages.resize(mb);
        m.returns.resize(mb);
        for (long k = 0; k < mb; ++k) {
          const Eigen::Index i = order[start + k];
          m.observations.col(k) = batch.observations.col(i);
          m.actions.col(k) = batch.actions.col(i);
          m.old_log_prob[k] = batch.old_log_prob[i];
          m.advantages[k] = batch.advantages[i];
          m.returns[k] = batch.returns[i];
        }
        const double mean = m.advantages.mean();
        const double sd = std::sqrt((m.advantages.array() - mean).square().mean());
        m.advantages = (m.advantages.array() - mean) / (sd + 1e-8);
        LossTerms loss = ppo_loss(policy, m, config, true);
        if (!std::isfinite(loss.total) || !loss.gradient.allFinite()) {
          Policy last = policy;
          last.set_parameters(good);
          std::string where = "(none)";
          if (checkpoint) {
            last.save(*checkpoint, hash);
            where = checkpoint->string();
          }
          throw TrainingDiverged("non-finite PPO loss at step " + std::to_string(result.steps), where);
        }
        const double norm = loss.gradient.norm();
        if (norm > config.max_grad_norm) loss.gradient *= config.max_grad_norm / norm;
        VectorXd p = policy.parameters();
        adam.step(p, loss.gradient);
        policy.set_parameters(p);
      }
    }

    CurvePoint point;
    point.step = result.steps;
    if (episodes > 0) {
      point.mean_reward = ret_sum / episodes;
      point.success_rate = static_cast<double>(successes) / episodes;
    } else if (!result.curves.empty()) {
      point.mean_reward = result.curves.back().mean_reward;
      point.success_rate = result.curves.back().success_rate;
    }
    result.curves.push_back(point);
    if (progress) progress(point);
    if (checkpoint) policy.save(*checkpoint, hash);
  }
  return result;
}

Actor zero_actor(int act_dim) {
  return [act_dim](const VectorXd&, Rng&) { return VectorXd::Zero(act_dim).eval(); };
}

Actor policy_actor(const Policy& policy, bool deterministic) {
  return [policy, deterministic](const VectorXd& obs, Rng& rng) {
    return policy.act(obs, rng, deterministic);
  };
}

RolloutLog run_episode(Env& env, const Actor& actor, std::uint64_t seed) {
  RolloutLog log;
  log.seed = seed;
  VectorXd obs = env.reset(seed);
  Rng rng(rollout_seed(seed, 7));
  for (;;) {
    const StepOutcome out = env.step(actor(obs, rng));
    ++log.steps;
    log.total_reward += out.reward.total;
    if (out.done) {
      log.success = out.success;
      log.cause = out.cause;
      return log;
    }
    obs = out.observation;
  }
}

EvalResult evaluate_success(const EnvFactory& make_env, const Actor& actor, int n_rollouts,
                            std::uint64_t base_seed, int jobs) {
  if (n_rollouts < 1) throw ValidationError("need at least one rollout");
  EvalResult result;
  result.rollouts.resize(n_rollouts);
  parallel_for(n_rollouts, jobs, [&](int i) {
    auto env = make_env();
    result.rollouts[i] = run_episode(*env, actor, rollout_seed(base_seed, i));
  });
  int ok = 0;
  double reward = 0.0;
  for (const RolloutLog& r : result.rollouts) {
    ok += r.success;
    reward += r.total_reward;
  }
  result.success_rate = static_cast<double>(ok) / n_rollouts;
  result.mean_reward = reward / n_rollouts;
  return result;
}

}  // namespace dexforge::rl
