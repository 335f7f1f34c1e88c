#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <unistd.h>

#include "dexforge/dataset.hpp"
#include "dexforge/errors.hpp"
#include "support.hpp"

using namespace dexforge;
using namespace dexforge::dataset;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dexforge_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::shared_ptr<const Trajectory> shared(Trajectory t) {
  return std::make_shared<const Trajectory>(std::move(t));
}

// Straight-line model of the buffer: same sampler, one slot at a time.
struct ScalarBuffer {
  std::vector<int> lengths;
  std::vector<SlotState> slots;
  SplitMix64 rng;

  ScalarBuffer(std::vector<int> lens, int n, std::uint64_t seed)
      : lengths(std::move(lens)), rng(seed) {
    for (int i = 0; i < n; ++i) {
      SlotState s;
      s.trajectory_index = static_cast<int>(rng.below(lengths.size()));
      slots.push_back(s);
    }
  }
  void reset(const std::set<int>& which) {
    for (int i : which) {
      slots[i].trajectory_index = static_cast<int>(rng.below(lengths.size()));
      slots[i].timestep = 0;
      slots[i].needs_reset = false;
    }
  }
  void advance() {
    for (auto& s : slots) {
      if (s.timestep == lengths[s.trajectory_index] - 1) {
        s.needs_reset = true;
      } else {
        s.timestep += 1;
      }
    }
  }
};

}  // namespace

TEST_CASE("meta validation") {
  TrajectoryMeta m;
  m.manipulation_type = "tripod";
  m.active_end = 5;
  m.validate(5);
  CHECK_THROWS_AS(m.validate(4), ValidationError);
  m.active_start = 5;
  CHECK_THROWS_AS(m.validate(10), ValidationError);
  m.active_start = 0;
  m.manipulation_type = "grab";
  CHECK_THROWS_AS(m.validate(10), ValidationError);
  m.manipulation_type = "tripod";
  m.fps_auxiliary = 60;
  CHECK_THROWS_AS(m.validate(10), ValidationError);
  CHECK(kManipulationTypes.size() == 21);
  CHECK(std::set<std::string>(kManipulationTypes.begin(), kManipulationTypes.end()).size() == 21);
}

TEST_CASE("pose accessors store canonical axis-angle") {
  std::mt19937_64 rng(41);
  Trajectory t(1);
  RigidTransform obj;
  obj.rotation = so3::exp_quat(Vec3(0.0, 0.0, 3.0));
  obj.rotation.coeffs() *= -1.0;  // same rotation, other hemisphere
  t.set_object(0, obj);
  CHECK(t.object_rotation.row(0).norm() <= static_cast<float>(M_PI));
  CHECK(geodesic_angle(t.object(0).rotation, obj.rotation) < 1e-6);
  const hand::HandPose p = testsupport::random_pose(hand::HandSkeleton::right_hand(), rng);
  t.set_hand(0, p);
  CHECK((t.hand(0).wrist.translation - p.wrist.translation).norm() < 1e-6);
  CHECK(geodesic_angle(t.hand(0).wrist.rotation, p.wrist.rotation) < 1e-6);
}

TEST_CASE("write and read round trip bit-exactly") {
  TempDir dir("roundtrip");
  std::mt19937_64 rng(42);
  for (int kind : {0, 2, 3}) {
    const Trajectory t = testsupport::random_trajectory(rng, 17, kind);
    write_trajectory(t, dir.path / std::to_string(kind));
    CHECK(read_trajectory(dir.path / std::to_string(kind)) == t);
  }
  SUBCASE("zero-slot contact block reads back absent") {
    const Trajectory t = testsupport::random_trajectory(rng, 5, 1);
    REQUIRE(t.contacts.has_value());
    write_trajectory(t, dir.path / "empty");
    const Trajectory back = read_trajectory(dir.path / "empty");
    CHECK_FALSE(back.contacts.has_value());
    CHECK_FALSE(fs::exists(dir.path / "empty" / "force_vectors.f32"));
  }
}

TEST_CASE("corrupted containers are rejected with the file name") {
  TempDir dir("corrupt");
  std::mt19937_64 rng(43);
  const Trajectory t = testsupport::random_trajectory(rng, 9, 2);
  const fs::path d = dir.path / "t";

  SUBCASE("truncated column") {
    write_trajectory(t, d);
    fs::resize_file(d / "finger_pose.f32", fs::file_size(d / "finger_pose.f32") - 4);
    try {
      read_trajectory(d);
      FAIL("expected corruption");
    } catch (const CorruptionError& e) {
      CHECK(std::string(e.what()).find("finger_pose.f32") != std::string::npos);
    }
  }
  SUBCASE("flipped byte") {
    write_trajectory(t, d);
    std::fstream f(d / "object_position.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x7f');
    f.close();
    try {
      read_trajectory(d);
      FAIL("expected corruption");
    } catch (const CorruptionError& e) {
      CHECK(std::string(e.what()).find("object_position.f32") != std::string::npos);
    }
  }
  SUBCASE("missing column") {
    write_trajectory(t, d);
    fs::remove(d / "contact_bodies.f32");
    CHECK_THROWS_AS(read_trajectory(d), CorruptionError);
  }
  SUBCASE("schema version") {
    write_trajectory(t, d);
    std::ifstream in(d / "manifest.json");
    nlohmann::json m = nlohmann::json::parse(in);
    in.close();
    m["version"] = kSchemaVersion + 1;
    std::ofstream(d / "manifest.json") << m.dump();
    CHECK_THROWS_AS(read_trajectory(d), VersionError);
  }
}

TEST_CASE("invalid trajectories are not written") {
  TempDir dir("invalid");
  std::mt19937_64 rng(44);
  Trajectory t = testsupport::random_trajectory(rng, 4, 0);
  t.object_rotation(1, 0) = 4.0f;
  CHECK_THROWS_AS(write_trajectory(t, dir.path / "a"), ValidationError);
  t = testsupport::random_trajectory(rng, 4, 0);
  t.finger_pose(2, 7) = std::nanf("");
  CHECK_THROWS_AS(write_trajectory(t, dir.path / "b"), ValidationError);
  t = testsupport::random_trajectory(rng, 4, 0);
  t.object_position.conservativeResize(3, 3);
  CHECK_THROWS_AS(write_trajectory(t, dir.path / "c"), ValidationError);
}

TEST_CASE("store index and filtering") {
  TempDir dir("store");
  std::mt19937_64 rng(45);
  TrajectoryStore store(dir.path);
  std::vector<std::string> all;
  for (int i = 0; i < 24; ++i) {
    const std::string id = "traj_" + std::to_string(1000 - 7 * i);
    store.write(id, testsupport::random_trajectory(rng, 3, i % 3));
    all.push_back(id);
  }
  std::sort(all.begin(), all.end());
  CHECK(store.ids() == all);
  CHECK(store.filter([](const TrajectoryMeta&) { return true; }) == all);

  // The index survives reopening.
  TrajectoryStore reopened(dir.path);
  CHECK(reopened.ids() == all);

  auto is_tripod = [](const TrajectoryMeta& m) { return m.manipulation_type == "tripod"; };
  auto on_cube = [](const TrajectoryMeta& m) { return m.object == "cube2"; };
  const auto tripod = reopened.filter(is_tripod);
  for (const auto& id : all) {
    const bool expect = reopened.meta(id).manipulation_type == "tripod";
    CHECK(std::binary_search(tripod.begin(), tripod.end(), id) == expect);
  }
  const auto both = reopened.filter([&](const TrajectoryMeta& m) { return is_tripod(m) && on_cube(m); });
  const auto cube = reopened.filter(on_cube);
  std::vector<std::string> inter;
  std::set_intersection(tripod.begin(), tripod.end(), cube.begin(), cube.end(),
                        std::back_inserter(inter));
  CHECK(both == inter);
  CHECK(std::is_sorted(cube.begin(), cube.end()));

  CHECK_THROWS_AS(store.write("../escape", testsupport::random_trajectory(rng, 2, 0)),
                  ValidationError);
  CHECK_THROWS_AS(store.read("nope"), RangeError);
}

TEST_CASE("data root resolution") {
  CHECK(resolve_data_root(std::string("/tmp/x")) == fs::path("/tmp/x"));
  ::setenv("DEXFORGE_DATA", "/tmp/from_env", 1);
  CHECK(resolve_data_root(std::nullopt) == fs::path("/tmp/from_env"));
  ::unsetenv("DEXFORGE_DATA");
  CHECK_THROWS_AS(resolve_data_root(std::nullopt), ConfigError);
}

TEST_CASE("splitmix64 reference values") {
  // First outputs for seed 0 of the published splitmix64 generator.
  SplitMix64 r(0);
  CHECK(r.next() == 0xe220a8397b1dcdafull);
  CHECK(r.next() == 0x6e789e6aa1b965f4ull);
  CHECK(r.next() == 0x06c45d188009454full);
}

TEST_CASE("buffer basics") {
  std::mt19937_64 rng(46);
  std::vector<std::shared_ptr<const Trajectory>> pool;
  for (int len : {3, 5, 8}) pool.push_back(shared(testsupport::random_trajectory(rng, len, 2)));
  TrajectoryBuffer buf(pool, 8, 7);

  for (const auto& v : buf.get_observations()) CHECK(v.timestep == 0);
  for (int k = 0; k < 2; ++k) buf.advance_timesteps();
  for (const auto& v : buf.get_observations()) {
    CHECK(v.timestep == 2);
    CHECK_FALSE(buf.slot(0).needs_reset);
  }

  SUBCASE("views alias resident storage") {
    for (int i = 0; i < buf.num_envs(); ++i) {
      const FrameView v = buf.observation(i);
      const Trajectory& t = *pool[v.trajectory_index];
      CHECK(v.trajectory == &t);
      CHECK(v.finger_pose().data() == &t.finger_pose(v.timestep, 0));
      CHECK(v.forces() == &t.contacts->forces(v.timestep, 0));
      CHECK(v.wrist_position() == t.wrist_position.row(v.timestep).transpose());
    }
  }
  SUBCASE("saturation raises the reset flag") {
    for (int k = 0; k < 10; ++k) buf.advance_timesteps();
    for (const auto& s : buf.state()) {
      CHECK(s.timestep == pool[s.trajectory_index]->frames() - 1);
      CHECK(s.needs_reset);
    }
  }
  SUBCASE("reset touches exactly the listed slots") {
    const auto before = buf.state();
    buf.reset_envs(std::vector<int>{});
    CHECK(buf.state() == before);
    const std::vector<int> three = {3};
    buf.reset_envs(three);
    for (int i = 0; i < 8; ++i) {
      if (i == 3) {
        CHECK(buf.slot(i).timestep == 0);
      } else {
        CHECK(buf.slot(i) == before[i]);
      }
    }
  }
  SUBCASE("out-of-range reset mutates nothing") {
    const auto before = buf.state();
    const std::vector<int> bad = {1, 8};
    CHECK_THROWS_AS(buf.reset_envs(bad), RangeError);
    CHECK(buf.state() == before);
  }
  SUBCASE("same seed gives the same assignment") {
    TrajectoryBuffer a(pool, 8, 99), b(pool, 8, 99);
    CHECK(a.state() == b.state());
    std::vector<int> all(8);
    std::iota(all.begin(), all.end(), 0);
    a.reset_envs(all);
    b.reset_envs(all);
    CHECK(a.state() == b.state());
  }
}

TEST_CASE("buffer matches a scalar replay of a random script") {
  std::mt19937_64 rng(47);
  std::vector<std::shared_ptr<const Trajectory>> pool;
  std::vector<int> lengths;
  for (int i = 0; i < 6; ++i) {
    lengths.push_back(2 + static_cast<int>(rng() % 30));
    pool.push_back(shared(testsupport::random_trajectory(rng, lengths.back(), 0)));
  }
  TrajectoryBuffer buf(pool, 16, 1234);
  ScalarBuffer ref(lengths, 16, 1234);
  for (int step = 0; step < 2000; ++step) {
    if (rng() % 3 == 0) {
      std::vector<int> which;
      for (int i = 0; i < 16; ++i) {
        if (rng() % 5 == 0) which.push_back(i);
      }
      const auto before = buf.state();
      buf.reset_envs(which);
      ref.reset(std::set<int>(which.begin(), which.end()));
      for (int i = 0; i < 16; ++i) {
        if (std::find(which.begin(), which.end(), i) == which.end()) {
          CHECK(buf.slot(i) == before[i]);
        }
      }
    } else {
      buf.advance_timesteps();
      ref.advance();
    }
    REQUIRE(buf.state() == ref.slots);
  }
}
