#include "dexforge/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>

#include "dexforge/errors.hpp"

namespace dexforge::dataset {

namespace fs = std::filesystem;
using nlohmann::json;

bool is_manipulation_type(const std::string& label) {
  return std::find(kManipulationTypes.begin(), kManipulationTypes.end(), label) !=
         kManipulationTypes.end();
}

void TrajectoryMeta::validate(int frames) const {
  if (!(0 <= active_start && active_start < active_end && active_end <= frames)) {
    throw ValidationError("active frames [" + std::to_string(active_start) + ", " +
                          std::to_string(active_end) + ") invalid for " +
                          std::to_string(frames) + " frames");
  }
  if (!is_manipulation_type(manipulation_type)) {
    throw ValidationError("unknown manipulation type '" + manipulation_type + "'");
  }
  if (fps_kinematics != kKinematicsFps || fps_auxiliary != kAuxiliaryFps) {
    throw ValidationError("frame rates must be 120/30");
  }
  if (!mano_shape.allFinite()) throw ValidationError("non-finite shape");
}

json TrajectoryMeta::to_json() const {
  return {{"operator", operator_id},
          {"object", object},
          {"manipulation_type", manipulation_type},
          {"mano_shape", std::vector<double>(mano_shape.data(), mano_shape.data() + hand::kShapeDim)},
          {"active_frames", {active_start, active_end}},
          {"fps", {{"kinematics", fps_kinematics}, {"auxiliary", fps_auxiliary}}}};
}

TrajectoryMeta TrajectoryMeta::from_json(const json& doc) {
  try {
    TrajectoryMeta m;
    m.operator_id = doc.at("operator").get<std::string>();
    m.object = doc.at("object").get<std::string>();
    m.manipulation_type = doc.at("manipulation_type").get<std::string>();
    const auto shape = doc.at("mano_shape").get<std::vector<double>>();
    if (shape.size() != hand::kShapeDim) throw ValidationError("mano_shape needs 10 values");
    for (int k = 0; k < hand::kShapeDim; ++k) m.mano_shape[k] = shape[k];
    m.active_start = doc.at("active_frames").at(0).get<int>();
    m.active_end = doc.at("active_frames").at(1).get<int>();
    m.fps_kinematics = doc.at("fps").at("kinematics").get<int>();
    m.fps_auxiliary = doc.at("fps").at("auxiliary").get<int>();
    return m;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("trajectory meta: ") + e.what());
  }
}

ContactBlock::ContactBlock(int frames, int n)
    : slots(n),
      points(Columns::Zero(frames, 3 * n)),
      forces(Columns::Zero(frames, 3 * n)),
      bodies(Columns::Constant(frames, n, -1.0f)),
      wrench(Columns::Zero(frames, 6)) {}

int ContactBlock::count(int t) const {
  int c = 0;
  for (int s = 0; s < slots; ++s) c += valid(t, s);
  return c;
}

namespace {

bool bit_equal(const Columns& a, const Columns& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(a.data()[i]) != std::bit_cast<std::uint32_t>(b.data()[i])) {
      return false;
    }
  }
  return true;
}

}  // namespace

bool ContactBlock::operator==(const ContactBlock& o) const {
  return slots == o.slots && bit_equal(points, o.points) && bit_equal(forces, o.forces) &&
         bit_equal(bodies, o.bodies) && bit_equal(wrench, o.wrench);
}

Trajectory::Trajectory(int frames)
    : wrist_position(Columns::Zero(frames, 3)),
      wrist_rotation(Columns::Zero(frames, 3)),
      finger_pose(Columns::Zero(frames, kFingerPoseDim)),
      object_position(Columns::Zero(frames, 3)),
      object_rotation(Columns::Zero(frames, 3)) {
  meta.active_end = frames;
}

void Trajectory::set_hand(int t, const hand::HandPose& pose) {
  wrist_position.row(t) = pose.wrist.translation.cast<float>().transpose();
  wrist_rotation.row(t) = so3::log(pose.wrist.rotation).cast<float>().transpose();
  finger_pose.row(t) = pose.finger_angles.cast<float>().transpose();
}

void Trajectory::set_object(int t, const RigidTransform& pose) {
  object_position.row(t) = pose.translation.cast<float>().transpose();
  object_rotation.row(t) = so3::log(pose.rotation).cast<float>().transpose();
}

hand::HandPose Trajectory::hand(int t) const {
  hand::HandPose p;
  p.wrist.translation = wrist_position.row(t).transpose().cast<double>();
  p.wrist.rotation = so3::exp_quat(wrist_rotation.row(t).transpose().cast<double>());
  p.finger_angles = finger_pose.row(t).transpose().cast<double>();
  return p;
}

RigidTransform Trajectory::object(int t) const {
  RigidTransform p;
  p.translation = object_position.row(t).transpose().cast<double>();
  p.rotation = so3::exp_quat(object_rotation.row(t).transpose().cast<double>());
  return p;
}

void Trajectory::validate() const {
  const int t = frames();
  auto check = [t](const Columns& c, Eigen::Index cols, const char* name) {
    if (c.rows() != t || c.cols() != cols) {
      throw ValidationError(std::string(name) + " has shape " + std::to_string(c.rows()) +
                            "x" + std::to_string(c.cols()) + ", expected " +
                            std::to_string(t) + "x" + std::to_string(cols));
    }
    if (!c.allFinite()) throw ValidationError(std::string(name) + " is not finite");
  };
  check(wrist_position, 3, "wrist_position");
  check(wrist_rotation, 3, "wrist_rotation");
  check(finger_pose, kFingerPoseDim, "finger_pose");
  check(object_position, 3, "object_position");
  check(object_rotation, 3, "object_rotation");
  // float32 rounding may lift a canonical angle of exactly pi by one ulp.
  const float max_angle = static_cast<float>(M_PI) * (1.0f + 1e-6f);
  for (const Columns* c : {&wrist_rotation, &object_rotation}) {
    if (t > 0 && c->rowwise().norm().maxCoeff() > max_angle) {
      throw ValidationError("axis-angle magnitude exceeds pi");
    }
  }
  for (int r = 0; r < t; ++r) {
    for (int j = 0; j < hand::kArticulatedJoints; ++j) {
      if (finger_pose.block<1, 3>(r, 3 * j).norm() > max_angle) {
        throw ValidationError("finger axis-angle magnitude exceeds pi");
      }
    }
  }
  if (contacts) {
    const ContactBlock& c = *contacts;
    if (c.slots < 0) throw ValidationError("negative contact slot count");
    check(c.points, 3 * c.slots, "contact_points");
    check(c.forces, 3 * c.slots, "force_vectors");
    check(c.bodies, c.slots, "contact_bodies");
    check(c.wrench, 6, "object_wrench");
    for (int r = 0; r < t; ++r) {
      for (int s = 0; s < c.slots; ++s) {
        if (c.valid(r, s)) continue;
        if (!c.points.block<1, 3>(r, 3 * s).isZero(0.0f) ||
            !c.forces.block<1, 3>(r, 3 * s).isZero(0.0f)) {
          throw ValidationError("empty contact slot carries data");
        }
      }
    }
  }
  meta.validate(t);
}

bool Trajectory::operator==(const Trajectory& o) const {
  return meta == o.meta && bit_equal(wrist_position, o.wrist_position) &&
         bit_equal(wrist_rotation, o.wrist_rotation) && bit_equal(finger_pose, o.finger_pose) &&
         bit_equal(object_position, o.object_position) &&
         bit_equal(object_rotation, o.object_rotation) && contacts == o.contacts;
}

namespace {

std::string encode(const Columns& c) {
  std::string out(static_cast<std::size_t>(c.size()) * 4, '\0');
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(c.data()[i]);
    for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  return out;
}

Columns decode(const std::string& bytes, Eigen::Index rows, Eigen::Index cols) {
  Columns c(rows, cols);
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    }
    c.data()[i] = std::bit_cast<float>(bits);
  }
  return c;
}

std::uint32_t checksum(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptionError("missing file " + path.filename().string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct ColumnSpec {
  const char* name;
  Eigen::Index cols;
};

}  // namespace

void write_trajectory(const Trajectory& traj, const fs::path& dir) {
  traj.validate();
  fs::create_directories(dir);
  const bool with_contacts = traj.contacts && traj.contacts->slots > 0;
  json manifest = {{"version", kSchemaVersion}, {"files", json::object()}};
  auto put = [&](const std::string& name, const std::string& bytes) {
    write_file(dir / name, bytes);
    manifest["files"][name] = {{"bytes", bytes.size()}, {"crc32", checksum(bytes)}};
  };

  json meta = {{"version", kSchemaVersion},
               {"frames", traj.frames()},
               {"contact_slots", with_contacts ? json(traj.contacts->slots) : json(nullptr)},
               {"meta", traj.meta.to_json()}};
  put("meta.json", meta.dump(2) + "\n");
  put("wrist_position.f32", encode(traj.wrist_position));
  put("wrist_rotation.f32", encode(traj.wrist_rotation));
  put("finger_pose.f32", encode(traj.finger_pose));
  put("object_position.f32", encode(traj.object_position));
  put("object_rotation.f32", encode(traj.object_rotation));
  if (with_contacts) {
    put("contact_points.f32", encode(traj.contacts->points));
    put("force_vectors.f32", encode(traj.contacts->forces));
    put("contact_bodies.f32", encode(traj.contacts->bodies));
    put("object_wrench.f32", encode(traj.contacts->wrench));
  }
  // The manifest goes last so an interrupted write never looks complete.
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Trajectory read_trajectory(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("manifest.json: ") + e.what());
  }
  if (manifest.value("version", -1) != kSchemaVersion) {
    throw VersionError("manifest.json: schema version " + manifest.value("version", json(-1)).dump() +
                       ", expected " + std::to_string(kSchemaVersion));
  }
  auto load = [&](const std::string& name, std::size_t expected_bytes) {
    if (!manifest["files"].contains(name)) throw CorruptionError(name + ": not in manifest");
    const std::string bytes = read_file(dir / name);
    const json& entry = manifest["files"][name];
    if (bytes.size() != entry.at("bytes").get<std::size_t>() ||
        (expected_bytes > 0 && bytes.size() != expected_bytes)) {
      throw CorruptionError(name + ": truncated or resized (" + std::to_string(bytes.size()) +
                            " bytes)");
    }
    if (checksum(bytes) != entry.at("crc32").get<std::uint32_t>()) {
      throw CorruptionError(name + ": checksum mismatch");
    }
    return bytes;
  };

  json meta;
  try {
    meta = json::parse(load("meta.json", 0));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("meta.json: ") + e.what());
  }
  if (meta.value("version", -1) != kSchemaVersion) {
    throw VersionError("meta.json: schema version mismatch");
  }
  const int frames = meta.at("frames").get<int>();
  Trajectory traj(frames);
  traj.meta = TrajectoryMeta::from_json(meta.at("meta"));
  auto column = [&](const std::string& name, Eigen::Index cols) {
    return decode(load(name, static_cast<std::size_t>(frames * cols * 4)), frames, cols);
  };
  traj.wrist_position = column("wrist_position.f32", 3);
  traj.wrist_rotation = column("wrist_rotation.f32", 3);
  traj.finger_pose = column("finger_pose.f32", kFingerPoseDim);
  traj.object_position = column("object_position.f32", 3);
  traj.object_rotation = column("object_rotation.f32", 3);
  if (!meta.at("contact_slots").is_null()) {
    ContactBlock c;
    c.slots = meta.at("contact_slots").get<int>();
    c.points = column("contact_points.f32", 3 * c.slots);
    c.forces = column("force_vectors.f32", 3 * c.slots);
    c.bodies = column("contact_bodies.f32", c.slots);
    c.wrench = column("object_wrench.f32", 6);
    traj.contacts = std::move(c);
  }
  traj.validate();
  return traj;
}

namespace {

void check_id(const std::string& id) {
  if (id.empty() || id.front() == '.' ||
      !std::all_of(id.begin(), id.end(), [](char ch) {
        return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' ||
               ch == '.';
      })) {
    throw ValidationError("invalid trajectory id '" + id + "'");
  }
}

}  // namespace

TrajectoryStore::TrajectoryStore(fs::path root) : root_(std::move(root)) {
  const fs::path index = root_ / "index.json";
  if (!fs::exists(index)) return;
  json doc;
  try {
    doc = json::parse(read_file(index));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("index.json: ") + e.what());
  }
  if (doc.value("version", -1) != kSchemaVersion) {
    throw VersionError("index.json: schema version mismatch");
  }
  for (const auto& [id, meta] : doc.at("trajectories").items()) {
    index_.emplace(id, TrajectoryMeta::from_json(meta));
  }
}

void TrajectoryStore::write(const std::string& id, const Trajectory& traj) {
  check_id(id);
  write_trajectory(traj, root_ / id);
  index_[id] = traj.meta;
  save_index();
}

Trajectory TrajectoryStore::read(const std::string& id) const {
  if (!contains(id)) throw RangeError("no trajectory '" + id + "' in " + root_.string());
  return read_trajectory(root_ / id);
}

bool TrajectoryStore::contains(const std::string& id) const { return index_.count(id) > 0; }

std::vector<std::string> TrajectoryStore::ids() const {
  std::vector<std::string> out;
  for (const auto& kv : index_) out.push_back(kv.first);
  return out;
}

const TrajectoryMeta& TrajectoryStore::meta(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw RangeError("no trajectory '" + id + "'");
  return it->second;
}

std::vector<std::string> TrajectoryStore::filter(
    const std::function<bool(const TrajectoryMeta&)>& predicate) const {
  std::vector<std::string> out;
  for (const auto& [id, meta] : index_) {
    if (predicate(meta)) out.push_back(id);
  }
  return out;
}

void TrajectoryStore::save_index() const {
  json doc = {{"version", kSchemaVersion}, {"trajectories", json::object()}};
  for (const auto& [id, meta] : index_) doc["trajectories"][id] = meta.to_json();
  fs::create_directories(root_);
  write_file(root_ / "index.json", doc.dump(2) + "\n");
}

fs::path resolve_data_root(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("DEXFORGE_DATA"); env && *env) return env;
  throw ConfigError("no data root: pass --data-root or set DEXFORGE_DATA");
}

std::uint64_t SplitMix64::next() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t SplitMix64::below(std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next();
  } while (v >= limit);
  return v % n;
}

Eigen::Map<const Eigen::Vector3f> FrameView::wrist_position() const {
  return Eigen::Map<const Eigen::Vector3f>(&trajectory->wrist_position(timestep, 0));
}
Eigen::Map<const Eigen::Vector3f> FrameView::wrist_rotation() const {
  return Eigen::Map<const Eigen::Vector3f>(&trajectory->wrist_rotation(timestep, 0));
}
Eigen::Map<const Eigen::Matrix<float, kFingerPoseDim, 1>> FrameView::finger_pose() const {
  return Eigen::Map<const Eigen::Matrix<float, kFingerPoseDim, 1>>(
      &trajectory->finger_pose(timestep, 0));
}
Eigen::Map<const Eigen::Vector3f> FrameView::object_position() const {
  return Eigen::Map<const Eigen::Vector3f>(&trajectory->object_position(timestep, 0));
}
Eigen::Map<const Eigen::Vector3f> FrameView::object_rotation() const {
  return Eigen::Map<const Eigen::Vector3f>(&trajectory->object_rotation(timestep, 0));
}
const float* FrameView::forces() const {
  if (!trajectory->contacts || trajectory->contacts->slots == 0) return nullptr;
  return &trajectory->contacts->forces(timestep, 0);
}

TrajectoryBuffer::TrajectoryBuffer(std::vector<std::shared_ptr<const Trajectory>> pool,
                                   int num_envs, std::uint64_t seed)
    : pool_(std::move(pool)), rng_(seed) {
  if (pool_.empty()) throw ValidationError("trajectory buffer needs a non-empty pool");
  if (num_envs <= 0) throw ValidationError("trajectory buffer needs at least one slot");
  for (const auto& t : pool_) {
    if (!t || t->frames() == 0) throw ValidationError("empty trajectory in buffer pool");
  }
  slots_.resize(num_envs);
  for (auto& s : slots_) s.trajectory_index = sample();
}

int TrajectoryBuffer::sample() { return static_cast<int>(rng_.below(pool_.size())); }

FrameView TrajectoryBuffer::observation(int slot) const {
  const SlotState& s = slots_.at(slot);
  return {pool_[s.trajectory_index].get(), s.trajectory_index, s.timestep};
}

std::vector<FrameView> TrajectoryBuffer::get_observations() const {
  std::vector<FrameView> out;
  out.reserve(slots_.size());
  for (int i = 0; i < num_envs(); ++i) out.push_back(observation(i));
  return out;
}

void TrajectoryBuffer::reset_envs(std::span<const int> slots) {
  std::vector<int> order(slots.begin(), slots.end());
  for (int i : order) {
    if (i < 0 || i >= num_envs()) {
      throw RangeError("slot " + std::to_string(i) + " outside [0, " +
                       std::to_string(num_envs()) + ")");
    }
  }
  std::sort(order.begin(), order.end());
  order.erase(std::unique(order.begin(), order.end()), order.end());
  for (int i : order) slots_[i] = {sample(), 0, false};
}

void TrajectoryBuffer::advance_timesteps() {
  for (auto& s : slots_) {
    if (s.timestep + 1 < pool_[s.trajectory_index]->frames()) {
      ++s.timestep;
    } else {
      s.needs_reset = true;
    }
  }
}

}  // namespace dexforge::dataset
