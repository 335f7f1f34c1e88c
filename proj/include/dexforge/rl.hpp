#pragma once

// Residual tracking MDP over a demonstration and the PPO learner: bounded
// residual actions accumulated with exponential decay, privileged
// observations, the tracking reward, Gaussian MLP policies with a
// hand-written backward pass, and versioned checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dexforge/dataset.hpp"
#include "dexforge/physics.hpp"

namespace dexforge::rl {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Rng = std::mt19937_64;

inline constexpr int kActionDim = physics::kActuatedDofs;
inline constexpr int kQDim = physics::kActuatedDofs;
// q, q_dot, object pose, relative pose, target pose, preview, offsets.
inline constexpr int kObservationDim = 2 * kQDim + 7 + 6 + 7 + 3 + 3;
inline constexpr int kPreviewSteps = 10;
inline constexpr double kFailureDistance = 0.05;  // m

// Per-step residual caps; actions arrive in [-1, 1] and are scaled by them.
struct ActionBounds {
  double lin = 0.002;    // m/step
  double rot = 0.02;     // rad/step
  double finger = 0.05;  // rad/step
  VectorXd scale() const;
};

// u' = tau * u + a, componentwise.
VectorXd accumulate(const VectorXd& u, const VectorXd& a, double tau);

struct Accumulator {
  double tau = 0.9;
  VectorXd u = VectorXd::Zero(kActionDim);
  void push(const VectorXd& a) { u = accumulate(u, a, tau); }
};

struct RewardTerms {
  double r_dist = 0.0;
  double r_rot = 0.0;
  double c_act = 0.0;
  double total = 0.0;
};

// r_dist = exp(-60 d), r_rot = exp(-10 theta), c_act = w_act |penalized|^2.
RewardTerms compute_reward(double goal_dist, double rot_error, const VectorXd& penalized,
                           double w_act = 0.01);

// Hand coordinates [wrist position, wrist rotation vector, hinge angles]
// normalized into [-1, 1]: position over a +-0.5 m workspace, rotation
// over pi, hinges over their limits.
VectorXd normalized_q(const physics::World& world);
inline constexpr double kQDotClip = 10.0;  // normalized units per second

// Table layout: q, q_dot, object pose (p, quaternion wxyz), relative pose
// (p_o - p_h, rotation vector of R_h^T R_o), target pose, target position
// kPreviewSteps ahead (clamped to the last frame), position accumulator.
VectorXd build_observation(const physics::World& world, const dataset::Trajectory& demo, int t,
                           const Accumulator& acc, const VectorXd& previous_q);

// Object perturbation at episode start, bounds as fractions of object size.
struct Perturbation {
  double pose_offset = 0.0;  // planar offset of the initial object pose
  double yaw = 0.0;          // rad
  double size_scale = 0.0;   // uniform scale in [1 - s, 1 + s]
  double mass_scale = 0.0;   // mass in [1 - m, 1 + m]
  bool any() const { return pose_offset > 0 || yaw > 0 || size_scale > 0 || mass_scale > 0; }
  void validate() const;
  nlohmann::json to_json() const;
  static Perturbation from_json(const nlohmann::json& doc);
};

struct EnvConfig {
  ActionBounds bounds;
  double tau = 0.9;
  double w_act = 0.01;
  // Penalize the raw action instead of the accumulated control.
  bool penalize_raw_action = false;
  physics::SimConfig sim;
  nlohmann::json to_json() const;
  static EnvConfig from_json(const nlohmann::json& doc);
};

struct StepOutcome {
  VectorXd observation;
  RewardTerms reward;
  bool done = false;
  bool success = false;
  std::string cause;  // "", "completed", "object_lost", "diverged"
};

class Env {
 public:
  virtual ~Env() = default;
  virtual int observation_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual VectorXd reset(std::uint64_t seed) = 0;
  // Action components in [-1, 1]; larger values are clipped.
  virtual StepOutcome step(const VectorXd& action) = 0;
};

using EnvFactory = std::function<std::unique_ptr<Env>()>;

// One demo replayed in the simulator: joint targets are the demo pose at
// the next frame composed with the accumulated residual. The episode runs
// over the demo's active frames and fails once the object drifts more than
// 5 cm from its target.
class ResidualEnv : public Env {
 public:
  ResidualEnv(std::shared_ptr<const hand::HandSkeleton> skeleton,
              std::shared_ptr<const dataset::Trajectory> demo, physics::BodyDef object,
              EnvConfig config = {}, Perturbation perturbation = {});

  int observation_dim() const override { return kObservationDim; }
  int action_dim() const override { return kActionDim; }
  VectorXd reset(std::uint64_t seed) override;
  StepOutcome step(const VectorXd& action) override;

  const physics::World& world() const { return *world_; }
  const physics::StepResult& last_step() const { return last_; }
  const physics::BodyDef& episode_object() const { return episode_object_; }
  const dataset::Trajectory& demo() const { return *demo_; }
  const Accumulator& accumulator() const { return acc_; }
  int frame() const { return t_; }
  // Joint targets applied for the most recent step.
  const physics::HandCommand& last_command() const { return command_; }

 private:
  physics::HandCommand target(int t) const;

  std::shared_ptr<const hand::HandSkeleton> skeleton_;
  std::shared_ptr<const dataset::Trajectory> demo_;
  physics::BodyDef object_;
  EnvConfig config_;
  Perturbation perturbation_;
  physics::BodyDef episode_object_;
  std::unique_ptr<physics::World> world_;
  Accumulator acc_;
  VectorXd scale_;
  VectorXd previous_q_;
  physics::StepResult last_;
  physics::HandCommand command_;
  int t_ = 0;
};

// Point mass driven by a PD servo toward a reference plus the accumulated
// residual; the reference carries a per-episode bias that the policy must
// cancel. Reward is the distance term minus the action cost; a point has
// no orientation to track.
class ToyTrackingEnv : public Env {
 public:
  static constexpr int kHorizon = 100;
  int observation_dim() const override { return 4; }
  int action_dim() const override { return 1; }
  VectorXd reset(std::uint64_t seed) override;
  StepOutcome step(const VectorXd& action) override;

 private:
  VectorXd observe() const;
  double reference(int t) const;
  double target(int t) const;

  double bias_ = 0.0;
  double x_ = 0.0, v_ = 0.0;
  Accumulator acc_{0.9, VectorXd::Zero(1)};
  int t_ = 0;
};

// Fully connected tanh network with a linear output layer. Columns of the
// input matrix are samples.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<int> sizes, Rng& rng, double output_gain = 1.0);

  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  int parameter_count() const;
  VectorXd parameters() const;
  void set_parameters(const VectorXd& p);

  MatrixXd forward(const MatrixXd& x) const;
  // Forward pass keeping activations, then the parameter gradient of
  // sum(out .* upstream).
  struct Tape {
    std::vector<MatrixXd> activations;
  };
  MatrixXd forward(const MatrixXd& x, Tape& tape) const;
  VectorXd backward(const Tape& tape, const MatrixXd& upstream) const;

 private:
  std::vector<int> sizes_;
  std::vector<MatrixXd> weights_;
  std::vector<VectorXd> biases_;
};

// Running mean and variance of observations (parallel Welford merge).
struct Normalizer {
  VectorXd mean;
  VectorXd var;
  double count = 0.0;
  explicit Normalizer(int dim = 0);
  void update(const MatrixXd& batch);
  MatrixXd apply(const MatrixXd& x) const;
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 1.0;

struct PpoConfig {
  int num_envs = 8;
  int horizon = 256;  // steps per environment per iteration
  long total_steps = 200000;
  int hidden = 256;
  double clip = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  int epochs = 4;
  int minibatches = 8;
  double learning_rate = 3e-4;
  double entropy_coef = 1e-3;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double init_log_std = -1.0;
  // Rewards are multiplied by this before advantage estimation.
  double reward_scale = 0.01;
  int jobs = 1;
  std::uint64_t seed = 1;
  nlohmann::json to_json() const;
  static PpoConfig from_json(const nlohmann::json& doc);
};

// Stable hash of a configuration document, embedded in checkpoints.
std::uint32_t config_hash(const nlohmann::json& config);

// Gaussian policy with a state-independent log-std plus a value network.
class Policy {
 public:
  Policy() = default;
  Policy(int obs_dim, int act_dim, int hidden, double init_log_std, Rng& rng);

  int observation_dim() const { return actor_.input_dim(); }
  int action_dim() const { return actor_.output_dim(); }

  // Inputs are normalized observations (columns).
  MatrixXd mean(const MatrixXd& obs) const { return actor_.forward(obs); }
  VectorXd value(const MatrixXd& obs) const;
  VectorXd log_std() const { return log_std_.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax); }

  // Raw observation in, action out; deterministic returns the mean.
  VectorXd act(const VectorXd& raw_obs, Rng& rng, bool deterministic) const;
  double log_prob(const VectorXd& normalized_obs, const VectorXd& action) const;

  // Flat parameters: actor, log-std, critic.
  VectorXd parameters() const;
  void set_parameters(const VectorXd& p);
  int parameter_count() const;

  const Mlp& actor() const { return actor_; }
  const Mlp& critic() const { return critic_; }
  Normalizer& normalizer() { return normalizer_; }
  const Normalizer& normalizer() const { return normalizer_; }

  void save(const std::filesystem::path& path, std::uint32_t hash) const;
  // VersionError on an unknown format, ConfigError when `expected_hash` is
  // given and differs, CorruptionError when truncated.
  static Policy load(const std::filesystem::path& path,
                     std::optional<std::uint32_t> expected_hash = std::nullopt,
                     std::uint32_t* hash_out = nullptr);

 private:
  Mlp actor_;
  Mlp critic_;
  VectorXd log_std_;
  Normalizer normalizer_;
};

// Generalized advantage estimates for one environment's segment. done[t]
// marks a terminal transition; bootstrap is V of the state after the last
// step (ignored when the last step is terminal).
VectorXd gae(const VectorXd& rewards, const VectorXd& values, const std::vector<bool>& done,
             double bootstrap, double gamma, double lambda);

struct Batch {
  MatrixXd observations;  // normalized, obs_dim x n
  MatrixXd actions;       // act_dim x n, unclipped samples
  VectorXd old_log_prob;
  VectorXd advantages;
  VectorXd returns;
};

struct LossTerms {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double mean_ratio = 0.0;
  VectorXd gradient;  // d total / d parameters, when requested
};

// Clipped surrogate: -mean(min(r A, clip(r) A)) + c_v mean((V - R)^2)
// - c_e entropy, with advantages used as given.
LossTerms ppo_loss(const Policy& policy, const Batch& batch, const PpoConfig& config,
                   bool with_gradient);

class Adam {
 public:
  Adam(int dim, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(VectorXd& params, const VectorXd& grad);

 private:
  double lr_, beta1_, beta2_, eps_;
  VectorXd m_, v_;
  long t_ = 0;
};

struct CurvePoint {
  long step = 0;
  double mean_reward = 0.0;   // mean episode return of finished episodes
  double success_rate = 0.0;  // among finished episodes
};
void write_curves_csv(const std::vector<CurvePoint>& curves, const std::filesystem::path& path);

struct TrainResult {
  Policy policy;
  std::vector<CurvePoint> curves;
  long steps = 0;
};

// Throws TrainingDiverged carrying the last good checkpoint (written to
// `checkpoint` when given) on a non-finite loss.
TrainResult train_ppo(const EnvFactory& make_env, const PpoConfig& config,
                      const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                      const std::function<void(const CurvePoint&)>& progress = {});

// Maps raw observations to actions.
using Actor = std::function<VectorXd(const VectorXd& obs, Rng& rng)>;
Actor zero_actor(int act_dim);
Actor policy_actor(const Policy& policy, bool deterministic);

struct RolloutLog {
  std::uint64_t seed = 0;
  bool success = false;
  int steps = 0;
  double total_reward = 0.0;
  std::string cause;
};

struct EvalResult {
  double success_rate = 0.0;
  double mean_reward = 0.0;
  std::vector<RolloutLog> rollouts;
};

RolloutLog run_episode(Env& env, const Actor& actor, std::uint64_t seed);
// Rollout i uses seed (base_seed, i) for the environment and the actor.
EvalResult evaluate_success(const EnvFactory& make_env, const Actor& actor, int n_rollouts,
                            std::uint64_t base_seed, int jobs = 1);

// Seed of rollout `index` derived from a base seed.
std::uint64_t rollout_seed(std::uint64_t base, std::uint64_t index);

}  // namespace dexforge::rl
