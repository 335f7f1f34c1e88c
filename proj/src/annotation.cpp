#include "dexforge/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dexforge/errors.hpp"
#include "dexforge/parallel.hpp"

namespace dexforge::annotation {

void fill_contact_slots(dataset::ContactBlock& block, int frame,
                        std::span<const physics::ContactRecord> contacts, const Vec3& object_com) {
  std::vector<const physics::ContactRecord*> hand;
  for (const physics::ContactRecord& c : contacts) {
    if (c.body_a >= physics::kFirstHandBody && c.body_b == physics::kObjectBody) hand.push_back(&c);
  }
  std::stable_sort(hand.begin(), hand.end(), [](const auto* a, const auto* b) {
    return a->force.norm() > b->force.norm();
  });
  Vec3 force = Vec3::Zero(), torque = Vec3::Zero();
  for (const auto* c : hand) {
    force += c->force;
    torque += (c->point - object_com).cross(c->force);
  }
  for (int s = 0; s < block.slots; ++s) {
    block.bodies(frame, s) = -1.0f;
    block.points.block<1, 3>(frame, 3 * s).setZero();
    block.forces.block<1, 3>(frame, 3 * s).setZero();
  }
  const int n = static_cast<int>(hand.size());
  const int kept = n > block.slots ? block.slots - 1 : n;
  auto put = [&](int s, int body, const Vec3& p, const Vec3& f) {
    block.bodies(frame, s) = static_cast<float>(body);
    block.points.block<1, 3>(frame, 3 * s) = p.transpose().cast<float>();
    block.forces.block<1, 3>(frame, 3 * s) = f.transpose().cast<float>();
  };
  for (int s = 0; s < kept; ++s) {
    put(s, hand[s]->body_a - physics::kFirstHandBody, hand[s]->point, hand[s]->force);
  }
  if (n > kept && block.slots > 0) {
    Vec3 f = Vec3::Zero(), p = Vec3::Zero();
    double w = 0.0;
    for (int i = kept; i < n; ++i) {
      f += hand[i]->force;
      p += hand[i]->force.norm() * hand[i]->point;
      w += hand[i]->force.norm();
    }
    p = w > 0.0 ? Vec3(p / w) : hand[kept]->point;
    put(block.slots - 1, hand[kept]->body_a - physics::kFirstHandBody, p, f);
  }
  block.wrench.block<1, 3>(frame, 0) = force.transpose().cast<float>();
  block.wrench.block<1, 3>(frame, 3) = torque.transpose().cast<float>();
}

AnnotationResult annotate_rollout(rl::ResidualEnv& env, const rl::Actor& actor, std::uint64_t seed) {
  AnnotationResult result;
  result.log.seed = seed;
  Eigen::VectorXd obs = env.reset(seed);
  rl::Rng rng(rl::rollout_seed(seed, 7));
  const physics::World* world = &env.world();

  std::vector<hand::HandPose> hands{world->hand_pose()};
  std::vector<RigidTransform> objects{world->object().pose};
  std::vector<std::vector<physics::ContactRecord>> contacts(1);
  for (;;) {
    const rl::StepOutcome out = env.step(actor(obs, rng));
    ++result.log.steps;
    result.log.total_reward += out.reward.total;
    if (out.cause != "diverged") {
      hands.push_back(world->hand_pose());
      objects.push_back(world->object().pose);
      contacts.push_back(env.last_step().contacts);
    }
    if (out.done) {
      result.success = out.success;
      result.cause = out.cause;
      result.log.success = out.success;
      result.log.cause = out.cause;
      break;
    }
    obs = out.observation;
  }
  result.termination_frame = env.frame();
  if (!result.success) return result;

  const int frames = static_cast<int>(hands.size()) / kRateRatio * kRateRatio;
  dataset::Trajectory traj(frames);
  traj.meta = env.demo().meta;
  traj.meta.active_start = 0;
  traj.meta.active_end = frames;
  dataset::ContactBlock block(frames, dataset::kContactSlots);
  for (int f = 0; f < frames; ++f) {
    traj.set_hand(f, hands[f]);
    traj.set_object(f, objects[f]);
    fill_contact_slots(block, f, contacts[f], objects[f].translation);
  }
  traj.contacts = std::move(block);
  traj.validate();
  result.trajectory = std::move(traj);
  return result;
}

std::vector<int> auxiliary_index(int kinematic_frames) {
  if (kinematic_frames < 0 || kinematic_frames % kRateRatio != 0) {
    throw ValidationError("kinematic frame count " + std::to_string(kinematic_frames) +
                          " is not a multiple of " + std::to_string(kRateRatio));
  }
  std::vector<int> idx(kinematic_frames / kRateRatio);
  for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = static_cast<int>(k) * kRateRatio;
  return idx;
}

void VariationSpec::validate() const {
  for (double v : {pose_jitter, size_scale, mass_scale, shape_jitter}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("variation bounds must be nonnegative");
  }
  if (pose_jitter > 0.2 || size_scale > 0.2) {
    throw ConfigError("pose and size variation are capped at 20% of object size");
  }
  if (mass_scale >= 1.0) throw ConfigError("mass variation must stay below 100%");
}

nlohmann::json VariationSpec::to_json() const {
  return {{"pose_jitter", pose_jitter},
          {"size_scale", size_scale},
          {"mass_scale", mass_scale},
          {"shape_jitter", shape_jitter}};
}

VariationSpec VariationSpec::from_json(const nlohmann::json& doc) {
  VariationSpec s;
  try {
    s.pose_jitter = doc.value("pose_jitter", 0.0);
    s.size_scale = doc.value("size_scale", 0.0);
    s.mass_scale = doc.value("mass_scale", 0.0);
    s.shape_jitter = doc.value("shape_jitter", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad variation spec: ") + e.what());
  }
  s.validate();
  return s;
}

SynthesisResult synthesize_variations(std::shared_ptr<const hand::HandSkeleton> skeleton,
                                      std::shared_ptr<const dataset::Trajectory> demo,
                                      const physics::BodyDef& object, const rl::EnvConfig& config,
                                      const rl::Actor& actor, const VariationSpec& spec, int count,
                                      std::uint64_t seed, int jobs) {
  spec.validate();
  if (count < 1) throw ValidationError("need at least one variation");
  if (!skeleton || !demo) throw ValidationError("synthesis needs a skeleton and a demo");
  rl::Perturbation pert;
  pert.pose_offset = spec.pose_jitter;
  pert.size_scale = spec.size_scale;
  pert.mass_scale = spec.mass_scale;

  std::vector<AnnotationResult> results(count);
  parallel_for(count, jobs, [&](int i) {
    const std::uint64_t s = rl::rollout_seed(seed, i);
    std::shared_ptr<const dataset::Trajectory> episode_demo = demo;
    if (spec.shape_jitter > 0.0) {
      rl::Rng rng(rl::rollout_seed(s, 3));
      std::uniform_real_distribution<double> u(-spec.shape_jitter, spec.shape_jitter);
      auto jittered = std::make_shared<dataset::Trajectory>(*demo);
      const double bound = skeleton->shape_bound();
      for (int k = 0; k < hand::kShapeDim; ++k) {
        jittered->meta.mano_shape[k] = std::clamp(jittered->meta.mano_shape[k] + u(rng), -bound, bound);
      }
      episode_demo = jittered;
    }
    rl::ResidualEnv env(skeleton, episode_demo, object, config, pert);
    results[i] = annotate_rollout(env, actor, s);
  });

  SynthesisResult out;
  int ok = 0;
  for (AnnotationResult& r : results) {
    if (r.success) {
      ++ok;
      out.accepted.push_back(std::move(*r.trajectory));
      r.trajectory.reset();
    }
    out.reports.push_back(std::move(r));
  }
  out.acceptance_rate = static_cast<double>(ok) / count;
  return out;
}

FingerForces finger_forces(const dataset::Trajectory& traj, std::span<const physics::HandBody> bodies) {
  if (!traj.contacts) throw ValidationError("trajectory has no contact block");
  const dataset::ContactBlock& c = *traj.contacts;
  const int frames = traj.frames();
  FingerForces out;
  out.channel = Eigen::MatrixXd::Zero(frames, kChannels);
  out.peak_contact = Eigen::VectorXd::Zero(frames);
  for (int f = 0; f < frames; ++f) {
    for (int s = 0; s < c.slots; ++s) {
      if (!c.valid(f, s)) continue;
      const int body = static_cast<int>(c.bodies(f, s));
      if (body >= static_cast<int>(bodies.size())) throw ValidationError("contact body id out of range");
      const double mag = c.forces.block<1, 3>(f, 3 * s).cast<double>().norm();
      out.channel(f, static_cast<int>(bodies[body].digit)) += mag;
      out.peak_contact[f] = std::max(out.peak_contact[f], mag);
    }
  }
  out.max_series = out.channel.rowwise().maxCoeff();
  return out;
}

ContactStats::ContactStats(int joints) : joint_frames(joints, 0) {}

void ContactStats::add(const dataset::Trajectory& traj, std::span<const physics::HandBody> bodies) {
  const FingerForces ff = finger_forces(traj, bodies);
  const dataset::ContactBlock& c = *traj.contacts;
  std::vector<char> touched(joint_frames.size());
  for (int f = 0; f < traj.frames(); ++f) {
    std::fill(touched.begin(), touched.end(), 0);
    for (int s = 0; s < c.slots; ++s) {
      if (!c.valid(f, s)) continue;
      const int joint = bodies[static_cast<int>(c.bodies(f, s))].joint;
      if (joint < 0 || joint >= static_cast<int>(touched.size())) {
        throw ValidationError("contact joint out of range");
      }
      touched[joint] = 1;
    }
    for (std::size_t j = 0; j < touched.size(); ++j) joint_frames[j] += touched[j];
    for (int ch = 0; ch < kChannels; ++ch) {
      force_micro[ch] += std::llround(ff.channel(f, ch) * 1e6);
      channel_frames[ch] += ff.channel(f, ch) > 0.0;
    }
  }
  frames += traj.frames();
  ++trials;
}

ContactStats& ContactStats::merge(const ContactStats& other) {
  if (other.joint_frames.size() != joint_frames.size()) {
    throw ValidationError("contact statistics over different joint sets");
  }
  frames += other.frames;
  trials += other.trials;
  for (std::size_t j = 0; j < joint_frames.size(); ++j) joint_frames[j] += other.joint_frames[j];
  for (int ch = 0; ch < kChannels; ++ch) {
    force_micro[ch] += other.force_micro[ch];
    channel_frames[ch] += other.channel_frames[ch];
  }
  return *this;
}

Eigen::VectorXd ContactStats::joint_frequency() const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(joint_frames.size()));
  if (frames == 0) return out;
  for (std::size_t j = 0; j < joint_frames.size(); ++j) {
    out[j] = static_cast<double>(joint_frames[j]) / static_cast<double>(frames);
  }
  return out;
}

Eigen::VectorXd ContactStats::channel_frequency() const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(kChannels);
  if (frames == 0) return out;
  for (int ch = 0; ch < kChannels; ++ch) {
    out[ch] = static_cast<double>(channel_frames[ch]) / static_cast<double>(frames);
  }
  return out;
}

Eigen::VectorXd ContactStats::mean_force() const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(kChannels);
  if (frames == 0) return out;
  for (int ch = 0; ch < kChannels; ++ch) {
    out[ch] = static_cast<double>(force_micro[ch]) * 1e-6 / static_cast<double>(frames);
  }
  return out;
}

nlohmann::json ContactStats::to_json(const hand::HandSkeleton& skel) const {
  nlohmann::json joints = nlohmann::json::object();
  const Eigen::VectorXd jf = joint_frequency();
  for (int j = 0; j < static_cast<int>(joint_frames.size()); ++j) joints[skel.joints()[j].name] = jf[j];
  nlohmann::json channels = nlohmann::json::object();
  const Eigen::VectorXd cf = channel_frequency(), mf = mean_force();
  for (int ch = 0; ch < kChannels; ++ch) {
    channels[hand::digit_name(static_cast<hand::Digit>(ch))] = {{"frequency", cf[ch]},
                                                                 {"mean_force", mf[ch]}};
  }
  return {{"trials", trials}, {"frames", frames}, {"joint_frequency", joints}, {"channels", channels}};
}

ContactStats compute_contact_stats(std::span<const dataset::Trajectory> rollouts,
                                   std::span<const physics::HandBody> bodies) {
  if (rollouts.empty()) throw ValidationError("contact statistics need at least one rollout");
  ContactStats stats;
  for (const dataset::Trajectory& t : rollouts) stats.add(t, bodies);
  return stats;
}

Vec3 mean_wrench_force(const dataset::Trajectory& traj, int begin, int end) {
  if (!traj.contacts) throw ValidationError("trajectory has no contact block");
  if (begin < 0 || end > traj.frames() || begin >= end) throw RangeError("bad frame window");
  Vec3 sum = Vec3::Zero();
  for (int f = begin; f < end; ++f) sum += traj.contacts->wrench.block<1, 3>(f, 0).transpose().cast<double>();
  return sum / (end - begin);
}

}  // namespace dexforge::annotation
