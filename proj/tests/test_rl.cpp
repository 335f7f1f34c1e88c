#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dexforge/errors.hpp"
#include "dexforge/pipeline.hpp"
#include "dexforge/rl.hpp"

using namespace dexforge;
using namespace dexforge::rl;

namespace {

std::shared_ptr<const hand::HandSkeleton> skeleton() {
  static const auto s = std::make_shared<const hand::HandSkeleton>(hand::HandSkeleton::right_hand());
  return s;
}

const physics::ObjectCatalog& catalog() {
  static const physics::ObjectCatalog c =
      physics::ObjectCatalog::load(std::filesystem::path(DEXFORGE_SOURCE_DIR) / "data/objects.json");
  return c;
}

// Simulator-recorded cube pick-lift; replaying it reproduces the recording.
std::shared_ptr<const dataset::Trajectory> cube_demo() {
  static const auto d = std::make_shared<const dataset::Trajectory>(pipeline::generate_demo(
      skeleton(), catalog().at("cube2"), pipeline::DemoScript::cube_tripod()));
  return d;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dexforge_rl_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Frozen batch around a small random policy with ratios spread around 1.
Batch frozen_batch(const Policy& policy, Rng& rng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  Batch b;
  b.observations = MatrixXd::NullaryExpr(policy.observation_dim(), n, [&] { return g(rng); });
  b.actions.resize(policy.action_dim(), n);
  b.old_log_prob.resize(n);
  b.advantages.resize(n);
  b.returns.resize(n);
  const VectorXd sigma = policy.log_std().array().exp();
  const MatrixXd mu = policy.mean(b.observations);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < policy.action_dim(); ++j) b.actions(j, i) = mu(j, i) + sigma[j] * g(rng);
    b.old_log_prob[i] = policy.log_prob(b.observations.col(i), b.actions.col(i)) + 0.1 * g(rng);
    b.advantages[i] = g(rng);
    b.returns[i] = g(rng);
  }
  return b;
}

}  // namespace

TEST_CASE("accumulator reproduces the worked value") {
  VectorXd u = VectorXd::Zero(1);
  const VectorXd a = VectorXd::Constant(1, 0.01);
  for (int t = 0; t < 5; ++t) u = accumulate(u, a, 0.9);
  CHECK(std::abs(u[0] - 0.040951) < 1e-12);
}

TEST_CASE("accumulator matches direct summation") {
  Rng rng(3);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double tau : {0.8, 0.9, 0.95}) {
    std::vector<VectorXd> a;
    Accumulator acc{tau, VectorXd::Zero(kActionDim)};
    for (int t = 1; t <= 50; ++t) {
      a.push_back(VectorXd::NullaryExpr(kActionDim, [&] { return d(rng); }));
      acc.push(a.back());
      VectorXd direct = VectorXd::Zero(kActionDim);
      for (int i = 1; i <= t; ++i) direct += std::pow(tau, t - i) * a[i - 1];
      CHECK((acc.u - direct).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("accumulator decays geometrically and stays bounded") {
  Accumulator acc{0.9, VectorXd::LinSpaced(kActionDim, -1.0, 1.0)};
  const VectorXd u0 = acc.u;
  for (int t = 1; t <= 30; ++t) {
    acc.push(VectorXd::Zero(kActionDim));
    CHECK((acc.u - std::pow(0.9, t) * u0).cwiseAbs().maxCoeff() < 1e-15);
  }
  Rng rng(5);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  const VectorXd b = ActionBounds{}.scale();
  for (double tau : {0.8, 0.95}) {
    Accumulator bounded{tau, VectorXd::Zero(kActionDim)};
    for (int t = 0; t < 2000; ++t) {
      bounded.push(VectorXd::NullaryExpr(kActionDim, [&] { return d(rng) > 0 ? 1.0 : -1.0; })
                       .cwiseProduct(b));
      CHECK((bounded.u.cwiseAbs().array() <= b.array() / (1.0 - tau) + 1e-12).all());
    }
  }
}

TEST_CASE("reward terms match the closed forms") {
  const VectorXd zero = VectorXd::Zero(kActionDim);
  const RewardTerms best = compute_reward(0.0, 0.0, zero);
  CHECK(best.r_dist == 1.0);
  CHECK(best.r_rot == 1.0);
  CHECK(best.c_act == 0.0);
  CHECK(best.total == 2.0);
  CHECK(std::abs(compute_reward(0.05, 0.0, zero).r_dist - 0.0497870683678639429793424) < 1e-12);
  CHECK(std::abs(compute_reward(0.0, M_PI / 2, zero).r_rot - 1.507017275390064610748e-7) < 1e-12);
  VectorXd u = VectorXd::Zero(kActionDim);
  u[0] = 0.1;
  u[1] = 0.2;
  const RewardTerms r = compute_reward(0.012, 0.3, u);
  CHECK(std::abs(r.total - 0.5360393243278355930355) < 1e-12);
  CHECK(std::abs(r.total - (r.r_dist + r.r_rot - r.c_act)) < 1e-15);
  CHECK(std::abs(compute_reward(0.0, 0.0, u, 0.5).c_act - 0.5 * 0.05) < 1e-15);
}

TEST_CASE("reward inputs are validated") {
  const VectorXd zero = VectorXd::Zero(kActionDim);
  CHECK_THROWS_AS(compute_reward(-1e-9, 0.0, zero), ValidationError);
  CHECK_THROWS_AS(compute_reward(0.0, -0.1, zero), ValidationError);
  CHECK_THROWS_AS(compute_reward(0.0, 4.0, zero), ValidationError);
  CHECK_THROWS_AS(compute_reward(NAN, 0.0, zero), ValidationError);
  CHECK_THROWS_AS(compute_reward(0.0, 0.0, zero, -1.0), ValidationError);
}

TEST_CASE("reward stays within its range") {
  Rng rng(9);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  const double tau = 0.9;
  const double bound_sq = (ActionBounds{}.scale() / (1.0 - tau)).squaredNorm();
  for (int i = 0; i < 1000; ++i) {
    const VectorXd u = (ActionBounds{}.scale() / (1.0 - tau))
                           .cwiseProduct(VectorXd::NullaryExpr(kActionDim, [&] { return 2 * d(rng) - 1; }));
    const RewardTerms r = compute_reward(d(rng), M_PI * d(rng), u);
    CHECK(r.r_dist > 0.0);
    CHECK(r.r_dist <= 1.0);
    CHECK(r.r_rot > 0.0);
    CHECK(r.r_rot <= 1.0);
    CHECK(r.c_act >= 0.0);
    CHECK(r.total > -0.01 * bound_sq);
    CHECK(r.total <= 2.0);
  }
}

TEST_CASE("observation layout and clamping") {
  const auto demo = cube_demo();
  ResidualEnv env(skeleton(), demo, catalog().at("cube2"));
  VectorXd obs = env.reset(1);
  CHECK(obs.size() == kObservationDim);
  CHECK(kObservationDim == 68);
  CHECK(obs.allFinite());
  for (int t = 0; t < 40; ++t) obs = env.step(VectorXd::Zero(kActionDim)).observation;
  const int quat_object = 2 * kQDim + 3, quat_target = 2 * kQDim + 7 + 6 + 3;
  CHECK(std::abs(obs.segment<4>(quat_object).norm() - 1.0) < 1e-12);
  CHECK(std::abs(obs.segment<4>(quat_target).norm() - 1.0) < 1e-6);
  CHECK((obs.head(kQDim).cwiseAbs().array() <= 1.0 + 1e-12).all());
  CHECK((obs.segment(kQDim, kQDim).cwiseAbs().array() <= kQDotClip).all());

  const int last = demo->meta.active_end - 1;
  Accumulator acc;
  const VectorXd q = normalized_q(env.world());
  const VectorXd end = build_observation(env.world(), *demo, last, acc, q);
  const int preview = 2 * kQDim + 7 + 6 + 7;
  CHECK(end.segment<3>(preview).cast<float>() == demo->object(last).translation.cast<float>());
  const VectorXd near_end = build_observation(env.world(), *demo, last - 3, acc, q);
  CHECK(near_end.segment<3>(preview) == end.segment<3>(preview));
  CHECK_THROWS_AS(build_observation(env.world(), *demo, demo->meta.active_end, acc, q), RangeError);
  CHECK_THROWS_AS(build_observation(env.world(), *demo, -1, acc, q), RangeError);
  CHECK(build_observation(env.world(), *demo, 10, acc, q) == build_observation(env.world(), *demo, 10, acc, q));
}

TEST_CASE("observation on target has zero tracking offsets") {
  const auto demo = cube_demo();
  ResidualEnv env(skeleton(), demo, catalog().at("cube2"));
  const VectorXd obs = env.reset(1);
  const int object = 2 * kQDim, target = object + 7 + 6;
  CHECK((obs.segment<7>(object) - obs.segment<7>(target)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(obs.tail<3>().isZero());
  CHECK(env.world().query_object_error(demo->object(0)).goal_dist < 1e-12);
}

TEST_CASE("zero residual replays a self-consistent demo") {
  const auto demo = cube_demo();
  EnvFactory make = [&] {
    return std::make_unique<ResidualEnv>(skeleton(), demo, catalog().at("cube2"));
  };
  const EvalResult ev = evaluate_success(make, zero_actor(kActionDim), 3, 11);
  CHECK(ev.success_rate == 1.0);
  for (const RolloutLog& r : ev.rollouts) {
    CHECK(r.cause == "completed");
    CHECK(r.steps == demo->meta.active_end - demo->meta.active_start - 1);
    // Targets are stored as float32; the replay tracks them to that precision.
    CHECK(std::abs(r.total_reward - 2.0 * r.steps) < 1e-3);
  }
}

TEST_CASE("episode length follows the active range") {
  dataset::Trajectory trimmed = *cube_demo();
  trimmed.meta.active_start = 20;
  trimmed.meta.active_end = 57;
  auto demo = std::make_shared<const dataset::Trajectory>(trimmed);
  ResidualEnv env(skeleton(), demo, catalog().at("cube2"));
  const RolloutLog log = run_episode(env, zero_actor(kActionDim), 4);
  CHECK(log.success);
  CHECK(log.steps == 36);
  CHECK(env.frame() == 56);
}

TEST_CASE("lifting the wrist away loses the object before the horizon") {
  const auto demo = std::make_shared<const dataset::Trajectory>(pipeline::generate_demo(
      skeleton(), catalog().at("cylinder3"), pipeline::DemoScript::cylinder_tripod()));
  ResidualEnv env(skeleton(), demo, catalog().at("cylinder3"));
  Actor up = [](const VectorXd&, Rng&) {
    VectorXd a = VectorXd::Zero(kActionDim);
    a[2] = 1.0;
    return a;
  };
  const RolloutLog log = run_episode(env, up, 2);
  CHECK_FALSE(log.success);
  CHECK(log.cause == "object_lost");
  CHECK(log.steps < demo->meta.active_end - demo->meta.active_start - 1);
  CHECK(env.accumulator().u[2] <= 0.002 / (1.0 - 0.9) + 1e-12);
}

TEST_CASE("actions are clipped and composed onto the demo") {
  const auto demo = cube_demo();
  ResidualEnv env(skeleton(), demo, catalog().at("cube2"));
  env.reset(1);
  VectorXd a = VectorXd::Zero(kActionDim);
  a[0] = 5.0;
  a[4] = -3.0;
  env.step(a);
  CHECK(env.accumulator().u[0] == doctest::Approx(0.002));
  CHECK(env.accumulator().u[4] == doctest::Approx(-0.02));
  const hand::HandPose target = demo->hand(1);
  CHECK((env.last_command().base.translation - target.wrist.translation - Vec3(0.002, 0, 0)).norm() < 1e-12);
  CHECK_THROWS_AS(env.step(VectorXd::Zero(3)), ValidationError);
  CHECK_THROWS_AS(env.step(VectorXd::Constant(kActionDim, NAN)), ValidationError);
}

TEST_CASE("perturbation moves and scales the episode object") {
  const auto demo = cube_demo();
  Perturbation p;
  p.pose_offset = 0.2;
  p.size_scale = 0.2;
  ResidualEnv env(skeleton(), demo, catalog().at("cube2"), {}, p);
  const double size = catalog().at("cube2").shape.size();
  bool moved = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    env.reset(seed);
    const Vec3 d = env.world().object().pose.translation - demo->object(0).translation;
    CHECK(std::abs(d.x()) <= 0.2 * size + 1e-9);
    CHECK(std::abs(d.y()) <= 0.2 * size + 1e-9);
    const double s = env.episode_object().shape.dims[0] / catalog().at("cube2").shape.dims[0];
    CHECK(s >= 0.8);
    CHECK(s <= 1.2);
    moved = moved || d.head<2>().norm() > 1e-4;
  }
  CHECK(moved);
  p.pose_offset = -0.1;
  CHECK_THROWS_AS(ResidualEnv(skeleton(), demo, catalog().at("cube2"), {}, p), ConfigError);
}

TEST_CASE("config documents round trip and reject bad values") {
  PpoConfig c;
  c.hidden = 32;
  c.learning_rate = 1e-4;
  const PpoConfig back = PpoConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(config_hash(c.to_json()) == config_hash(back.to_json()));
  CHECK(config_hash(c.to_json()) != config_hash(PpoConfig{}.to_json()));
  nlohmann::json env = EnvConfig{}.to_json();
  env["tau"] = 0.7;
  CHECK_THROWS_AS(EnvConfig::from_json(env), ConfigError);
  env["tau"] = 0.85;
  CHECK(EnvConfig::from_json(env).tau == 0.85);
}

TEST_CASE("clipped surrogate gradient matches finite differences") {
  Rng rng(21);
  Policy policy(12, 4, 16, -0.7, rng);
  const Batch batch = frozen_batch(policy, rng, 64);
  PpoConfig config;
  const LossTerms loss = ppo_loss(policy, batch, config, true);
  const VectorXd p0 = policy.parameters();
  VectorXd fd(p0.size());
  const double h = 1e-6;
  for (Eigen::Index k = 0; k < p0.size(); ++k) {
    VectorXd p = p0;
    p[k] += h;
    policy.set_parameters(p);
    const double plus = ppo_loss(policy, batch, config, false).total;
    p[k] = p0[k] - h;
    policy.set_parameters(p);
    const double minus = ppo_loss(policy, batch, config, false).total;
    fd[k] = (plus - minus) / (2 * h);
  }
  policy.set_parameters(p0);
  CHECK((loss.gradient - fd).norm() / fd.norm() < 1e-4);
}

TEST_CASE("importance ratio is one at epoch start") {
  Rng rng(8);
  Policy policy(6, 3, 16, -1.0, rng);
  Batch batch = frozen_batch(policy, rng, 32);
  for (int i = 0; i < 32; ++i) {
    Batch one;
    one.observations = batch.observations.col(i);
    one.actions = batch.actions.col(i);
    one.old_log_prob = VectorXd::Constant(1, policy.log_prob(one.observations.col(0), one.actions.col(0)));
    one.advantages = batch.advantages.segment(i, 1);
    one.returns = batch.returns.segment(i, 1);
    CHECK(std::abs(ppo_loss(policy, one, PpoConfig{}, false).mean_ratio - 1.0) < 1e-12);
  }
}

TEST_CASE("advantage estimation") {
  const VectorXd r = (VectorXd(5) << 1.0, -0.5, 0.25, 2.0, 0.0).finished();
  const VectorXd v = (VectorXd(5) << 0.3, 0.1, -0.2, 0.7, 0.4).finished();
  const std::vector<bool> done = {false, false, true, false, false};
  CHECK(gae(r, v, done, 0.9, 0.0, 0.95) == r - v);
  // Lambda 1 gives discounted returns minus values, cut at terminals.
  const VectorXd a = gae(r, v, done, 0.9, 0.99, 1.0);
  CHECK(a[2] == doctest::Approx(0.25 + 0.2));
  CHECK(a[1] == doctest::Approx(-0.5 + 0.99 * 0.25 - 0.1));
  CHECK(a[4] == doctest::Approx(0.0 + 0.99 * 0.9 - 0.4));
  CHECK(a[3] == doctest::Approx(2.0 + 0.99 * (0.0 + 0.99 * 0.9) - 0.7));
}

TEST_CASE("policy sampling matches the network mean") {
  Rng rng(13);
  Policy policy(5, 3, 16, -0.5, rng);
  const VectorXd obs = VectorXd::LinSpaced(5, -1.0, 1.0);
  const VectorXd mu = policy.mean(policy.normalizer().apply(obs)).col(0);
  const int n = 10000;
  VectorXd sum = VectorXd::Zero(3);
  for (int i = 0; i < n; ++i) sum += policy.act(obs, rng, false);
  const VectorXd se = policy.log_std().array().exp() / std::sqrt(static_cast<double>(n));
  CHECK(((sum / n - mu).cwiseAbs().array() <= 3.0 * se.array()).all());
  CHECK(policy.act(obs, rng, true) == mu);
}

TEST_CASE("checkpoints round trip and reject bad files") {
  const auto dir = temp_dir("ckpt");
  Rng rng(4);
  Policy policy(7, 3, 24, -0.8, rng);
  policy.normalizer().update(MatrixXd::Random(7, 50));
  const auto path = dir / "policy.bin";
  policy.save(path, 0xABCDu);
  std::uint32_t hash = 0;
  const Policy back = Policy::load(path, 0xABCDu, &hash);
  CHECK(hash == 0xABCDu);
  CHECK(back.parameters() == policy.parameters());
  CHECK(back.normalizer().mean == policy.normalizer().mean);
  CHECK(back.normalizer().var == policy.normalizer().var);
  CHECK(back.observation_dim() == 7);
  CHECK_THROWS_AS(Policy::load(path, 0x1234u), ConfigError);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(dir / "bad.bin", std::ios::binary);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  std::string versioned = bytes;
  versioned[8] = 9;
  write(versioned);
  CHECK_THROWS_AS(Policy::load(dir / "bad.bin"), VersionError);
  write(bytes.substr(0, bytes.size() - 11));
  CHECK_THROWS_AS(Policy::load(dir / "bad.bin"), CorruptionError);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write(flipped);
  CHECK_THROWS_AS(Policy::load(dir / "bad.bin"), CorruptionError);
}

TEST_CASE("training curves are written as csv") {
  const auto dir = temp_dir("curves");
  write_curves_csv({{100, 1.5, 0.25}, {200, 2.0, 0.5}}, dir / "curves.csv");
  std::ifstream in(dir / "curves.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,mean_reward,success_rate");
  CHECK(row == "100,1.5,0.25");
}

TEST_CASE("evaluation is deterministic per seed") {
  EnvFactory make = [] { return std::make_unique<ToyTrackingEnv>(); };
  Rng rng(2);
  const Policy policy(4, 1, 8, -1.0, rng);
  const EvalResult a = evaluate_success(make, policy_actor(policy, false), 6, 17, 1);
  const EvalResult b = evaluate_success(make, policy_actor(policy, false), 6, 17, 3);
  for (int i = 0; i < 6; ++i) CHECK(a.rollouts[i].total_reward == b.rollouts[i].total_reward);
  const EvalResult det = evaluate_success(make, policy_actor(policy, true), 4, 17);
  CHECK((det.success_rate == 0.0 || det.success_rate == 1.0));
  CHECK_THROWS_AS(evaluate_success(make, zero_actor(1), 0, 1), ValidationError);
}

TEST_CASE("ppo beats the zero residual on the toy tracking task") {
  EnvFactory make = [] { return std::make_unique<ToyTrackingEnv>(); };
  const EvalResult baseline = evaluate_success(make, zero_actor(1), 100, 99);
  PpoConfig config;
  config.hidden = 64;
  config.horizon = 128;
  config.init_log_std = -0.5;
  config.total_steps = 200000;
  const TrainResult trained = train_ppo(make, config);
  CHECK(trained.steps <= 200000 + config.num_envs * config.horizon);
  CHECK(!trained.curves.empty());
  const EvalResult learned = evaluate_success(make, policy_actor(trained.policy, true), 100, 99);
  CHECK(learned.mean_reward >= 1.5 * baseline.mean_reward);
}

TEST_CASE("non-finite loss raises with the last good checkpoint") {
  struct Exploding : Env {
    int t = 0;
    int observation_dim() const override { return 2; }
    int action_dim() const override { return 1; }
    VectorXd reset(std::uint64_t) override {
      t = 0;
      return VectorXd::Zero(2);
    }
    StepOutcome step(const VectorXd&) override {
      StepOutcome out;
      out.observation = VectorXd::Constant(2, ++t);
      out.reward.total = t > 40 ? NAN : 1.0;
      out.done = t % 50 == 0;
      return out;
    }
  };
  const auto dir = temp_dir("diverge");
  PpoConfig config;
  config.num_envs = 2;
  config.horizon = 32;
  config.hidden = 8;
  config.total_steps = 4096;
  EnvFactory make = [] { return std::make_unique<Exploding>(); };
  try {
    train_ppo(make, config, dir / "last.bin");
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.last_good_checkpoint() == (dir / "last.bin").string());
    CHECK(Policy::load(dir / "last.bin").parameters().allFinite());
  }
}
