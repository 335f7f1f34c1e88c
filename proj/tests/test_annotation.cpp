#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dexforge/annotation.hpp"
#include "dexforge/errors.hpp"
#include "dexforge/pipeline.hpp"
#include "dexforge/registration.hpp"
#include "support.hpp"

using namespace dexforge;
using namespace dexforge::annotation;

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

const std::vector<physics::HandBody>& bodies() {
  static const auto b = physics::hand_bodies(*skeleton(), {});
  return b;
}

std::shared_ptr<const dataset::Trajectory> demo_of(const pipeline::DemoScript& script) {
  return std::make_shared<const dataset::Trajectory>(
      pipeline::generate_demo(skeleton(), catalog().at(script.object), script));
}

std::shared_ptr<const dataset::Trajectory> cube_demo() {
  static const auto d = demo_of(pipeline::DemoScript::cube_tripod());
  return d;
}

int body_named(const std::string& name) {
  for (std::size_t i = 0; i < bodies().size(); ++i) {
    if (bodies()[i].name == name) return static_cast<int>(i);
  }
  FAIL("no body " << name);
  return -1;
}

physics::ContactRecord contact(int hand_body, const Vec3& point, const Vec3& force) {
  physics::ContactRecord c;
  c.body_a = physics::kFirstHandBody + hand_body;
  c.point = point;
  c.force = force;
  c.normal = force.normalized();
  return c;
}

// Trajectory whose contact block holds one contact per frame on `body`.
dataset::Trajectory single_contact(int frames, int body, double newtons) {
  dataset::Trajectory t(frames);
  t.meta.object = "cube2";
  t.meta.manipulation_type = "tip_pinch";
  t.meta.active_end = frames;
  dataset::ContactBlock block(frames, dataset::kContactSlots);
  for (int f = 0; f < frames; ++f) {
    const physics::ContactRecord c = contact(body, Vec3(0.01, 0, 0), Vec3(0, 0, newtons));
    fill_contact_slots(block, f, std::span(&c, 1), Vec3::Zero());
  }
  t.contacts = std::move(block);
  return t;
}

}  // namespace

TEST_CASE("overflow contacts merge at the force-weighted centroid") {
  std::vector<physics::ContactRecord> cs;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 40; ++i) {
    cs.push_back(contact(i % 20, testsupport::random_vec(rng, 0.05), Vec3(0, 0, 0.1 * (i + 1))));
  }
  physics::ContactRecord table;
  table.body_a = physics::kTableBody;
  table.force = Vec3(0, 0, 100.0);
  cs.push_back(table);
  dataset::ContactBlock block(1, dataset::kContactSlots);
  const Vec3 com(0.01, -0.02, 0.03);
  fill_contact_slots(block, 0, cs, com);
  CHECK(block.count(0) == dataset::kContactSlots);
  // Strongest 31 contacts kept as recorded, the 9 weakest merged.
  for (int s = 0; s < dataset::kContactSlots - 1; ++s) {
    CHECK(block.forces(0, 3 * s + 2) == doctest::Approx(0.1 * (40 - s)));
  }
  Vec3 f = Vec3::Zero(), p = Vec3::Zero();
  double w = 0.0;
  for (int i = 0; i < 9; ++i) {
    f += cs[i].force;
    p += cs[i].force.norm() * cs[i].point;
    w += cs[i].force.norm();
  }
  const int last = dataset::kContactSlots - 1;
  CHECK(block.forces(0, 3 * last + 2) == doctest::Approx(f.z()));
  for (int a = 0; a < 3; ++a) CHECK(block.points(0, 3 * last + a) == doctest::Approx(p[a] / w).epsilon(1e-6));
  CHECK(block.bodies(0, last) == static_cast<float>(8 % 20));
  // The wrench covers every hand contact and excludes the table.
  Vec3 force = Vec3::Zero(), torque = Vec3::Zero();
  for (int i = 0; i < 40; ++i) {
    force += cs[i].force;
    torque += (cs[i].point - com).cross(cs[i].force);
  }
  for (int a = 0; a < 3; ++a) {
    CHECK(block.wrench(0, a) == doctest::Approx(force[a]).epsilon(1e-6));
    CHECK(block.wrench(0, 3 + a) == doctest::Approx(torque[a]).epsilon(1e-5));
  }
}

TEST_CASE("a hand that never touches yields empty annotations") {
  pipeline::DemoScript script = pipeline::DemoScript::cube_tripod();
  script.wrist_offset.z() = 0.35;
  const auto demo = demo_of(script);
  rl::ResidualEnv env(skeleton(), demo, catalog().at("cube2"));
  const AnnotationResult r = annotate_rollout(env, rl::zero_actor(rl::kActionDim), 1);
  REQUIRE(r.success);
  const dataset::Trajectory& t = *r.trajectory;
  for (int f = 0; f < t.frames(); ++f) {
    CHECK(t.contacts->count(f) == 0);
    CHECK(t.contacts->wrench.row(f).cwiseAbs().maxCoeff() == 0.0f);
  }
}

TEST_CASE("static hold balances gravity and annotation is deterministic") {
  const auto demo = cube_demo();
  const physics::BodyDef& cube = catalog().at("cube2");
  rl::ResidualEnv env(skeleton(), demo, cube);
  const AnnotationResult a = annotate_rollout(env, rl::zero_actor(rl::kActionDim), 5);
  REQUIRE(a.success);
  const dataset::Trajectory& t = *a.trajectory;
  const int hold = pipeline::DemoScript::cube_tripod().hold_start();
  const Vec3 mean = mean_wrench_force(t, hold, t.frames());
  const double mg = cube.mass * 9.81;
  CHECK((mean - Vec3(0, 0, mg)).norm() <= 0.05 * mg);

  const AnnotationResult b = annotate_rollout(env, rl::zero_actor(rl::kActionDim), 5);
  REQUIRE(b.success);
  CHECK(*a.trajectory == *b.trajectory);
  CHECK(a.log.total_reward == b.log.total_reward);
}

TEST_CASE("annotations keep the 4x rate contract and round trip") {
  const auto demo = cube_demo();
  rl::ResidualEnv env(skeleton(), demo, catalog().at("cube2"));
  const AnnotationResult r = annotate_rollout(env, rl::zero_actor(rl::kActionDim), 2);
  REQUIRE(r.success);
  const dataset::Trajectory& t = *r.trajectory;
  const std::vector<int> aux = auxiliary_index(t.frames());
  CHECK(static_cast<int>(aux.size()) * 4 == t.frames());
  std::vector<double> kin(t.frames()), aux_t(aux.size());
  for (int f = 0; f < t.frames(); ++f) kin[f] = f / 120.0;
  for (std::size_t k = 0; k < aux.size(); ++k) aux_t[k] = k / 30.0;
  const registration::StreamAlignment al = registration::align_streams(kin, aux_t);
  for (std::size_t k = 0; k < aux.size(); ++k) CHECK(static_cast<int>(al.aux_to_kin[k]) == aux[k]);
  CHECK_THROWS_AS(auxiliary_index(7), ValidationError);

  const auto dir = std::filesystem::temp_directory_path() / "dexforge_annotation_rt";
  std::filesystem::remove_all(dir);
  dataset::write_trajectory(t, dir);
  CHECK(dataset::read_trajectory(dir) == t);
}

TEST_CASE("failed rollouts are reported and never annotated") {
  const auto demo = cube_demo();
  rl::ResidualEnv env(skeleton(), demo, catalog().at("cube2"));
  rl::Actor sideways = [](const Eigen::VectorXd&, rl::Rng&) {
    Eigen::VectorXd a = Eigen::VectorXd::Zero(rl::kActionDim);
    a[1] = 1.0;
    return a;
  };
  const AnnotationResult r = annotate_rollout(env, sideways, 1);
  CHECK_FALSE(r.success);
  CHECK_FALSE(r.trajectory.has_value());
  CHECK(r.cause == "object_lost");
  CHECK(r.termination_frame < demo->frames() - 1);

  const SynthesisResult s = synthesize_variations(skeleton(), demo, catalog().at("cube2"), {}, sideways,
                                                  {}, 3, 1);
  CHECK(s.accepted.empty());
  CHECK(s.acceptance_rate == 0.0);
  for (const AnnotationResult& rep : s.reports) CHECK_FALSE(rep.success);
}

TEST_CASE("zero variation bounds reproduce the plain annotation") {
  const auto demo = cube_demo();
  const rl::Actor zero = rl::zero_actor(rl::kActionDim);
  const SynthesisResult s = synthesize_variations(skeleton(), demo, catalog().at("cube2"), {}, zero,
                                                  {}, 3, 9);
  REQUIRE(s.accepted.size() == 3);
  CHECK(s.acceptance_rate == 1.0);
  rl::ResidualEnv env(skeleton(), demo, catalog().at("cube2"));
  for (int i = 0; i < 3; ++i) {
    const AnnotationResult plain = annotate_rollout(env, zero, rl::rollout_seed(9, i));
    REQUIRE(plain.success);
    CHECK(s.accepted[i] == *plain.trajectory);
  }
}

TEST_CASE("pose jitter keeps at least half the nominal acceptance") {
  const rl::Actor zero = rl::zero_actor(rl::kActionDim);
  for (const auto& script : {pipeline::DemoScript::cube_tripod(), pipeline::DemoScript::sphere_pinch()}) {
    const auto demo = demo_of(script);
    const physics::BodyDef& body = catalog().at(script.object);
    const SynthesisResult nominal = synthesize_variations(skeleton(), demo, body, {}, zero, {}, 10, 4);
    VariationSpec spec;
    spec.pose_jitter = 0.1;
    const SynthesisResult jittered = synthesize_variations(skeleton(), demo, body, {}, zero, spec, 10, 4);
    CHECK(nominal.acceptance_rate == 1.0);
    CHECK(jittered.acceptance_rate >= 0.5 * nominal.acceptance_rate);
  }
}

TEST_CASE("variation specs are validated") {
  VariationSpec s;
  s.pose_jitter = 0.25;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.pose_jitter = 0.1;
  s.size_scale = -0.1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.size_scale = 0.1;
  s.shape_jitter = 0.5;
  CHECK(VariationSpec::from_json(s.to_json()).to_json() == s.to_json());
}

TEST_CASE("contact statistics of constructed scenarios") {
  SUBCASE("no contacts") {
    const dataset::Trajectory t = single_contact(8, 0, 0.0);
    dataset::Trajectory empty = t;
    empty.contacts = dataset::ContactBlock(8, dataset::kContactSlots);
    const ContactStats s = compute_contact_stats(std::span(&empty, 1), bodies());
    CHECK(s.joint_frequency().isZero());
    CHECK(s.mean_force().isZero());
    const FingerForces ff = finger_forces(empty, bodies());
    CHECK(ff.channel.isZero());
    CHECK(ff.max_series.isZero());
  }
  SUBCASE("one fingertip at 1 N") {
    const int tip = body_named("index_dip_tip");
    const dataset::Trajectory t = single_contact(12, tip, 1.0);
    const FingerForces ff = finger_forces(t, bodies());
    const int index = static_cast<int>(hand::Digit::kIndex);
    for (int f = 0; f < 12; ++f) {
      for (int ch = 0; ch < kChannels; ++ch) CHECK(ff.channel(f, ch) == (ch == index ? 1.0 : 0.0));
    }
    const ContactStats s = compute_contact_stats(std::span(&t, 1), bodies());
    const Eigen::VectorXd jf = s.joint_frequency();
    for (int j = 0; j < hand::kJointCount; ++j) CHECK(jf[j] == (j == bodies()[tip].joint ? 1.0 : 0.0));
    CHECK(s.channel_frequency()[index] == 1.0);
    CHECK(s.mean_force()[index] == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(compute_contact_stats({}, bodies()), ValidationError);
}

TEST_CASE("a two-finger pinch touches exactly thumb and index") {
  const testsupport::Pinch p = testsupport::pinch_setup(*skeleton());
  physics::SimConfig cfg;
  cfg.gravity.setZero();
  const physics::BodyDef plate =
      physics::BodyDef::solid(physics::Shape::box(p.half_gap - 0.009, 0.02, 0.02), 0.01);
  std::vector<dataset::Trajectory> trials;
  for (int trial = 0; trial < 3; ++trial) {
    physics::World w(skeleton(), {}, plate, cfg);
    physics::RigidState s;
    s.pose = p.plate;
    s.pose.translation.y() += 0.001 * trial;
    w.set_object(s);
    w.set_hand(p.pose);
    physics::HandCommand cmd{p.pose.wrist, p.pose.finger_angles};
    for (int j = 1; j <= 6; ++j) cmd.fingers[hand::HandSkeleton::angle_index(j, 1)] += 0.1;
    const int frames = 120;
    dataset::Trajectory t(frames);
    t.meta.object = "plate";
    t.meta.manipulation_type = "tip_pinch";
    t.meta.active_end = frames;
    dataset::ContactBlock block(frames, dataset::kContactSlots);
    for (int f = 0; f < frames; ++f) {
      const physics::StepResult r = w.step(cmd);
      t.set_hand(f, w.hand_pose());
      t.set_object(f, w.object().pose);
      fill_contact_slots(block, f, r.contacts, w.object().pose.translation);
    }
    t.contacts = std::move(block);
    trials.push_back(std::move(t));
  }
  const Eigen::VectorXd freq = compute_contact_stats(trials, bodies()).channel_frequency();
  for (int ch = 0; ch < kChannels; ++ch) {
    const bool involved = ch == static_cast<int>(hand::Digit::kThumb) || ch == static_cast<int>(hand::Digit::kIndex);
    if (involved) {
      CHECK(freq[ch] > 0.5);
    } else {
      CHECK(freq[ch] < 0.05);
    }
  }
}

TEST_CASE("max series is the pointwise max of the finger series") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    dataset::Trajectory t = testsupport::random_trajectory(rng, 30, 2 + trial % 2);
    for (int f = 0; f < t.frames(); ++f) {
      for (int s = 0; s < t.contacts->slots; ++s) {
        if (t.contacts->valid(f, s)) t.contacts->bodies(f, s) = static_cast<float>(rng() % bodies().size());
      }
    }
    const FingerForces ff = finger_forces(t, bodies());
    for (int f = 0; f < t.frames(); ++f) {
      double m = 0.0;
      for (int ch = 0; ch < kChannels; ++ch) {
        m = std::max(m, ff.channel(f, ch));
        CHECK(ff.max_series[f] >= ff.channel(f, ch));
      }
      CHECK(ff.max_series[f] == m);
      CHECK(ff.peak_contact[f] <= ff.max_series[f]);
    }
  }
}

TEST_CASE("statistics reduction is order independent") {
  std::mt19937_64 rng(23);
  std::vector<dataset::Trajectory> set;
  for (int i = 0; i < 12; ++i) {
    dataset::Trajectory t = testsupport::random_trajectory(rng, 10 + i, 2);
    for (int f = 0; f < t.frames(); ++f) {
      for (int s = 0; s < t.contacts->slots; ++s) {
        if (t.contacts->valid(f, s)) t.contacts->bodies(f, s) = static_cast<float>(rng() % bodies().size());
      }
    }
    set.push_back(std::move(t));
  }
  const ContactStats forward = compute_contact_stats(set, bodies());
  for (int k = 0; k < 5; ++k) {
    std::shuffle(set.begin(), set.end(), rng);
    CHECK(compute_contact_stats(set, bodies()) == forward);
    const std::size_t cut = rng() % (set.size() - 1) + 1;
    ContactStats left = compute_contact_stats(std::span(set).first(cut), bodies());
    const ContactStats right = compute_contact_stats(std::span(set).subspan(cut), bodies());
    ContactStats swapped = right;
    CHECK(left.merge(right) == forward);
    CHECK(swapped.merge(compute_contact_stats(std::span(set).first(cut), bodies())) == forward);
  }
  const Eigen::VectorXd freq = forward.joint_frequency();
  CHECK((freq.array() >= 0.0).all());
  CHECK((freq.array() <= 1.0).all());
}
