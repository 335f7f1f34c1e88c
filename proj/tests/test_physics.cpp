#include <doctest.h>

#include <cmath>

#include "dexforge/errors.hpp"
#include "dexforge/physics.hpp"
#include "support.hpp"

using namespace dexforge;
using namespace dexforge::physics;

namespace {

std::shared_ptr<const hand::HandSkeleton> skeleton() {
  static const auto s = std::make_shared<const hand::HandSkeleton>(hand::HandSkeleton::right_hand());
  return s;
}

const ObjectCatalog& catalog() {
  static const ObjectCatalog c =
      ObjectCatalog::load(std::filesystem::path(DEXFORGE_SOURCE_DIR) / "data/objects.json");
  return c;
}

SimConfig no_hand() {
  SimConfig cfg;
  cfg.hand_enabled = false;
  return cfg;
}

// Unsigned distance to a densely sampled surface; independent of the SDF code.
double sampled_distance(const Shape& s, const Vec3& p) {
  constexpr int n = 120;
  double best = 1e9;
  auto visit = [&](const Vec3& q) { best = std::min(best, (q - p).norm()); };
  const double r = s.dims[0], h = s.dims[1];
  switch (s.type) {
    case ShapeType::kSphere:
      for (int i = 0; i <= n; ++i) {
        for (int j = 0; j < 2 * n; ++j) {
          const double th = M_PI * i / n, ph = M_PI * j / n;
          visit(r * Vec3(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th)));
        }
      }
      break;
    case ShapeType::kBox:
      for (int axis = 0; axis < 3; ++axis) {
        for (double sign : {-1.0, 1.0}) {
          for (int i = 0; i <= n; ++i) {
            for (int j = 0; j <= n; ++j) {
              Vec3 q;
              q[axis] = sign * s.dims[axis];
              q[(axis + 1) % 3] = s.dims[(axis + 1) % 3] * (2.0 * i / n - 1.0);
              q[(axis + 2) % 3] = s.dims[(axis + 2) % 3] * (2.0 * j / n - 1.0);
              visit(q);
            }
          }
        }
      }
      break;
    case ShapeType::kCapsule:
    case ShapeType::kCylinder:
      for (int i = 0; i <= n; ++i) {
        for (int j = 0; j < 2 * n; ++j) {
          const double ph = M_PI * j / n;
          const Vec3 radial(std::cos(ph), std::sin(ph), 0.0);
          visit(r * radial + Vec3(0.0, 0.0, h * (2.0 * i / n - 1.0)));
          if (s.type == ShapeType::kCylinder) {
            for (double sign : {-1.0, 1.0}) visit(r * i / n * radial + Vec3(0.0, 0.0, sign * h));
          } else {
            const double th = 0.5 * M_PI * i / n;
            for (double sign : {-1.0, 1.0}) {
              visit(r * std::cos(th) * radial + Vec3(0.0, 0.0, sign * (h + r * std::sin(th))));
            }
          }
        }
      }
      break;
  }
  return best;
}

bool inside(const Shape& s, const Vec3& p) {
  const double r = s.dims[0], h = s.dims[1];
  switch (s.type) {
    case ShapeType::kSphere: return p.norm() < r;
    case ShapeType::kBox: return (p.cwiseAbs().array() < s.dims.array()).all();
    case ShapeType::kCylinder: return std::hypot(p.x(), p.y()) < r && std::abs(p.z()) < h;
    case ShapeType::kCapsule:
      return (p - Vec3(0.0, 0.0, std::clamp(p.z(), -h, h))).norm() < r;
  }
  return false;
}

std::vector<Shape> sample_shapes() {
  return {Shape::sphere(0.03), Shape::box(0.04, 0.02, 0.03), Shape::capsule(0.015, 0.04),
          Shape::cylinder(0.02, 0.05)};
}

// Inertia about the center for unit mass by midpoint-rule voxel integration.
Mat3 voxel_inertia(const Shape& s) {
  const Vec3 ext = s.type == ShapeType::kBox ? s.dims
                   : s.type == ShapeType::kSphere
                       ? Vec3::Constant(s.dims[0])
                       : Vec3(s.dims[0], s.dims[0],
                              s.dims[1] + (s.type == ShapeType::kCapsule ? s.dims[0] : 0.0));
  constexpr int n = 140;
  Mat3 acc = Mat3::Zero();
  long count = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        const Vec3 p = ext.cwiseProduct(Vec3((2.0 * i + 1) / n - 1.0, (2.0 * j + 1) / n - 1.0,
                                             (2.0 * k + 1) / n - 1.0));
        if (!inside(s, p)) continue;
        acc += p.squaredNorm() * Mat3::Identity() - p * p.transpose();
        ++count;
      }
    }
  }
  return acc / static_cast<double>(count);
}

struct Rest {
  StepResult last;
  double normal_sum = 0.0;
};

Rest settle(World& w, int steps) {
  Rest out;
  for (int i = 0; i < steps; ++i) out.last = w.step();
  for (const ContactRecord& c : out.last.contacts) out.normal_sum += c.force.dot(c.normal);
  return out;
}

void check_cone(const StepResult& r) {
  for (const ContactRecord& c : r.contacts) {
    const double fn = c.force.dot(c.normal);
    const double ft = (c.force - fn * c.normal).norm();
    CHECK(std::abs(c.normal.norm() - 1.0) < 1e-9);
    CHECK(fn >= 0.0);
    CHECK(ft <= c.mu * fn + 1e-6);
  }
}

}  // namespace

TEST_CASE("signed distance matches a sampled surface") {
  std::mt19937_64 rng(51);
  for (const Shape& s : sample_shapes()) {
    for (int trial = 0; trial < 60; ++trial) {
      const Vec3 p = testsupport::random_vec(rng, 0.08);
      const Shape::Distance d = s.signed_distance(p);
      CHECK(std::abs(std::abs(d.value) - sampled_distance(s, p)) < 1e-3);
      CHECK((d.value < 0.0) == inside(s, p));
      CHECK(std::abs(d.normal.norm() - 1.0) < 1e-12);
      // Stepping along the normal changes the distance at unit rate when
      // the closest feature is locally smooth.
      const double e = 1e-6;
      const double rate = (s.signed_distance(p + e * d.normal).value - d.value) / e;
      CHECK(rate > 0.999 - 1e-6);
    }
  }
}

TEST_CASE("analytic inertia matches voxel integration") {
  for (const Shape& s : sample_shapes()) {
    const Mat3 ref = voxel_inertia(s);
    const Mat3 got = s.unit_inertia();
    CHECK((got - ref).norm() / ref.norm() < 0.01);
  }
  const Shape cube = Shape::box(0.025, 0.025, 0.025);
  CHECK(cube.unit_inertia()(0, 0) == doctest::Approx(0.05 * 0.05 / 6.0).epsilon(1e-12));
}

TEST_CASE("catalog mirrors the object table") {
  const auto& cat = catalog();
  CHECK(cat.ids().size() == 29);
  const BodyDef& cube = cat.at("cube2");
  CHECK(cube.mass == doctest::Approx(0.037));
  CHECK(cube.shape.type == ShapeType::kBox);
  CHECK(cube.shape.dims.isApprox(Vec3::Constant(0.025)));
  const BodyDef& cyl = cat.at("cylinder3");
  CHECK(cyl.shape.dims[0] == doctest::Approx(0.015));
  CHECK(cyl.shape.dims[1] == doctest::Approx(0.05));
  CHECK(cat.at("sphere1").shape.dims[0] == doctest::Approx(0.02));
  CHECK(cat.at("cylinder1H").mass == doctest::Approx(0.554));
  CHECK_THROWS_AS(cat.at("anvil"), ConfigError);
  CHECK_THROWS_AS(ObjectCatalog::load("/nonexistent/objects.json"), ConfigError);
}

TEST_CASE("body definition validation") {
  BodyDef b = BodyDef::solid(Shape::sphere(0.02), 0.01);
  b.mass = 0.0;
  CHECK_THROWS_AS(b.validate(), ValidationError);
  b = BodyDef::solid(Shape::sphere(0.02), 0.01);
  b.inertia(0, 1) = 1.0;
  CHECK_THROWS_AS(b.validate(), ValidationError);
  b = BodyDef::solid(Shape::sphere(0.02), 0.01);
  b.restitution = 1.5;
  CHECK_THROWS_AS(b.validate(), ValidationError);
  CHECK_THROWS_AS(BodyDef::solid(Shape::box(0.01, -0.01, 0.01), 0.01), ValidationError);
}

TEST_CASE("resting objects carry their weight") {
  for (const std::string id : {"cube2", "cylinder3", "sphere1", "cuboid1", "cylinder6H"}) {
    World w(skeleton(), {}, catalog().at(id), no_hand());
    w.place_object(0.1, -0.05, 0.4);
    const Rest r = settle(w, 240);
    const double weight = catalog().at(id).mass * 9.81;
    CHECK(std::abs(r.normal_sum - weight) <= 0.02 * weight);
    // Reported wrench plus gravity balances the settled acceleration.
    CHECK((r.last.wrench.force + catalog().at(id).mass * w.config().gravity).norm() <=
          0.05 * weight);
    check_cone(r.last);
    for (const ContactRecord& c : r.last.contacts) CHECK(c.body_a == kTableBody);
  }
  World w(skeleton(), {}, catalog().at("cube2"), no_hand());
  const Rest r = settle(w, 240);
  CHECK(r.normal_sum == doctest::Approx(0.363).epsilon(0.02));
}

TEST_CASE("free fall is ballistic") {
  World w(skeleton(), {}, catalog().at("cube2"), no_hand());
  RigidState s;
  s.pose.translation = Vec3(0.0, 0.0, 2.0);
  s.linear_velocity = Vec3(0.3, -0.1, 0.5);
  s.angular_velocity = Vec3(1.0, 2.0, -0.5);
  w.set_object(s);
  const double m = w.object_def().mass;
  for (int i = 0; i < 60; ++i) {
    const Vec3 p0 = m * w.object().linear_velocity;
    const StepResult r = w.step();
    CHECK(r.contacts.empty());
    CHECK(r.wrench.force.isZero(0.0));
    CHECK(r.wrench.torque.isZero(0.0));
    const Vec3 expected = m * w.config().gravity * kControlDt;
    CHECK((m * w.object().linear_velocity - p0 - expected).norm() <= 1e-9 * expected.norm());
  }
}

TEST_CASE("reported wrench sums the contact forces") {
  World w(skeleton(), {}, catalog().at("cube2"), no_hand());
  RigidState s;
  s.pose.translation = Vec3(0.0, 0.0, 0.04);
  s.pose.rotation = Quat(Eigen::AngleAxisd(0.5, Vec3(1.0, 1.0, 0.0).normalized()));
  s.angular_velocity = Vec3(0.0, 0.0, 3.0);
  w.set_object(s);
  for (int i = 0; i < 120; ++i) {
    const StepResult r = w.step();
    Wrench sum;
    for (const ContactRecord& c : r.contacts) {
      sum.force += c.force;
      sum.torque += (c.point - w.object().pose.translation).cross(c.force);
    }
    CHECK((sum.force - r.wrench.force).norm() < 1e-12);
    CHECK((sum.torque - r.wrench.torque).norm() < 1e-12);
    check_cone(r);
  }
}

TEST_CASE("sliding contacts stay inside the friction cone") {
  std::mt19937_64 rng(52);
  for (const std::string id : {"cube2", "cylinder3", "sphere1", "cuboid2"}) {
    World w(skeleton(), {}, catalog().at(id), no_hand());
    RigidState s;
    s.pose.translation = Vec3(0.0, 0.0, catalog().at(id).shape.rest_height() + 0.02);
    s.pose.rotation = testsupport::random_rotation(rng);
    s.linear_velocity = Vec3(1.5, -0.7, -0.3);
    s.angular_velocity = testsupport::random_vec(rng, 8.0);
    w.set_object(s);
    for (int i = 0; i < 240; ++i) check_cone(w.step());
  }
}

TEST_CASE("energy only grows by stored spring energy") {
  for (const std::string id : {"cube2", "sphere1", "cylinder1"}) {
    World w(skeleton(), {}, catalog().at(id), no_hand());
    RigidState s;
    s.pose.translation = Vec3(0.0, 0.0, 0.2);
    s.pose.rotation = Quat(Eigen::AngleAxisd(0.3, Vec3::UnitX()));
    s.linear_velocity = Vec3(0.4, 0.0, 0.0);
    w.set_object(s);
    const double start = w.object_energy();
    const double k = w.config().contact.k_n;
    for (int i = 0; i < 360; ++i) {
      const StepResult r = w.step();
      double stored = 0.0;
      for (const ContactRecord& c : r.contacts) stored += 0.5 * k * c.penetration * c.penetration;
      CHECK(w.object_energy() <= start + stored + 1e-12);
    }
  }
}

TEST_CASE("static squeeze balances the two digits") {
  const testsupport::Pinch p = testsupport::pinch_setup(*skeleton());
  SimConfig cfg;
  cfg.gravity.setZero();
  const BodyDef plate =
      BodyDef::solid(Shape::box(p.half_gap - 0.009, 0.02, 0.02), 0.01);
  World w(skeleton(), {}, plate, cfg);
  RigidState s;
  s.pose = p.plate;
  w.set_object(s);
  w.set_hand(p.pose);
  HandCommand cmd{p.pose.wrist, p.pose.finger_angles};
  for (int j = 1; j <= 6; ++j) cmd.fingers[hand::HandSkeleton::angle_index(j, 1)] += 0.1;
  StepResult r;
  for (int i = 0; i < 120; ++i) r = w.step(cmd);
  Vec3 thumb = Vec3::Zero(), index = Vec3::Zero();
  for (const ContactRecord& c : r.contacts) {
    REQUIRE(c.body_a >= kFirstHandBody);
    const hand::Digit d = w.bodies()[c.body_a - kFirstHandBody].digit;
    REQUIRE((d == hand::Digit::kThumb || d == hand::Digit::kIndex));
    (d == hand::Digit::kThumb ? thumb : index) += c.force;
  }
  const Vec3 axis = w.object().pose.rotation * Vec3::UnitX();
  REQUIRE(thumb.norm() > 0.1);
  CHECK(std::abs(thumb.norm() - index.norm()) <= 0.05 * thumb.norm());
  CHECK((thumb + index).norm() <= 0.05 * thumb.norm());
  CHECK(thumb.normalized().dot(axis) > 0.7);
  check_cone(r);
}

TEST_CASE("an unloaded hand holds its commanded pose") {
  std::mt19937_64 rng(53);
  World w(skeleton(), {}, catalog().at("cube2"));
  hand::HandPose pose = testsupport::random_pose(*skeleton(), rng);
  pose.wrist.translation = Vec3(0.0, 0.0, 0.5);
  w.set_hand(pose);
  for (int i = 0; i < 240; ++i) w.step();
  const hand::HandPose now = w.hand_pose();
  CHECK((now.wrist.translation - pose.wrist.translation).norm() < 1e-3);
  CHECK(geodesic_angle(now.wrist.rotation, pose.wrist.rotation) < 1e-3);
  CHECK((now.finger_angles - pose.finger_angles).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("object error") {
  World w(skeleton(), {}, catalog().at("cube2"), no_hand());
  w.place_object(0.1, 0.2);
  RigidTransform target = w.object().pose;
  ObjectError e = w.query_object_error(target);
  CHECK(e.goal_dist == 0.0);
  CHECK(e.rot_error == doctest::Approx(0.0).epsilon(1e-12));
  target.translation.x() += 0.05;
  e = w.query_object_error(target);
  CHECK(e.goal_dist == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(e.rot_error < 1e-7);
  target = w.object().pose;
  target.rotation = Quat(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ())) * target.rotation;
  e = w.query_object_error(target);
  CHECK(e.goal_dist == 0.0);
  CHECK(e.rot_error == doctest::Approx(M_PI / 2).epsilon(1e-12));
}

TEST_CASE("state snapshots restore exactly") {
  std::mt19937_64 rng(54);
  World w(skeleton(), {}, catalog().at("cube2"));
  hand::HandPose pose = testsupport::random_pose(*skeleton(), rng);
  pose.wrist.translation = Vec3(0.03, 0.0, 0.14);
  pose.wrist.rotation = Quat(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitY()));
  w.set_hand(pose);
  Eigen::VectorXd targets = command_vector({pose.wrist, pose.finger_angles}, *skeleton());
  for (int i = 0; i < 30; ++i) w.step(targets);
  const WorldState snap = w.get_state();
  std::vector<StepResult> first;
  for (int i = 0; i < 60; ++i) {
    targets[2] -= 2e-4;
    targets.tail(kHingeCount).array() += 0.005;
    first.push_back(w.step(targets));
  }
  const WorldState end = w.get_state();
  w.set_state(snap);
  CHECK(w.get_state() == snap);
  targets = command_vector({pose.wrist, pose.finger_angles}, *skeleton());
  for (int i = 0; i < 60; ++i) {
    targets[2] -= 2e-4;
    targets.tail(kHingeCount).array() += 0.005;
    const StepResult r = w.step(targets);
    REQUIRE(r.contacts.size() == first[i].contacts.size());
    CHECK(r.wrench.force == first[i].wrench.force);
  }
  CHECK(w.get_state() == end);

  World other(skeleton(), {}, catalog().at("sphere1"));
  CHECK_THROWS_AS(other.set_state(snap), ValidationError);
  World handless(skeleton(), {}, catalog().at("cube2"), no_hand());
  CHECK_THROWS_AS(handless.set_state(snap), ValidationError);
}

TEST_CASE("identical worlds evolve identically") {
  auto run = [] {
    World w(skeleton(), {}, catalog().at("cylinder3"));
    hand::HandPose pose;
    pose.wrist.translation = Vec3(0.03, -0.015, 0.16);
    pose.wrist.rotation = Quat(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitY()));
    w.set_hand(pose);
    HandCommand cmd{pose.wrist, pose.finger_angles};
    std::vector<WorldState> states;
    for (int i = 0; i < 1000; ++i) {
      cmd.base.translation.z() = 0.16 - 0.05 * std::sin(i * 0.01);
      for (int p : skeleton()->hinge_parameters()) cmd.fingers[p] = 0.8 * std::sin(i * 0.005);
      cmd.fingers = skeleton()->project_to_limits(cmd.fingers);
      w.step(cmd);
      states.push_back(w.get_state());
    }
    return states;
  };
  const auto a = run(), b = run();
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i] == b[i];
  CHECK(same);
}

TEST_CASE("step input validation") {
  World w(skeleton(), {}, catalog().at("cube2"));
  CHECK_THROWS_AS(w.step(Eigen::VectorXd::Zero(20)), ValidationError);
  Eigen::VectorXd t = command_vector({w.base().pose, w.hand_pose().finger_angles}, *skeleton());
  t[4] = std::nan("");
  CHECK_THROWS_AS(w.step(t), ValidationError);
  RigidState bad;
  bad.pose.translation = Vec3(0.0, 0.0, std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(w.set_object(bad), ValidationError);
}

TEST_CASE("divergence reports the frame") {
  SimConfig cfg = no_hand();
  cfg.contact.k_n = 1e12;
  cfg.contact.c_n = 0.0;
  cfg.substeps = 1;
  World w(skeleton(), {}, catalog().at("sphere1"), cfg);
  RigidState s;
  s.pose.translation = Vec3(0.0, 0.0, 0.0);
  s.linear_velocity = Vec3(0.0, 0.0, -1e200);
  w.set_object(s);
  try {
    for (int i = 0; i < 10; ++i) w.step();
    FAIL("expected divergence");
  } catch (const SimulationDiverged& e) {
    CHECK(e.frame() >= 0);
  }
}
