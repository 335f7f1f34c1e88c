#include "dexforge/registration.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <Eigen/SVD>

#include "dexforge/errors.hpp"

namespace dexforge::registration {

const MarkerObservation* MarkerFrame::visible_marker(int id) const {
  for (const auto& p : points) {
    if (p.id == id && p.visible) return &p;
  }
  return nullptr;
}

int MarkerFrame::visible_count() const {
  return static_cast<int>(std::count_if(points.begin(), points.end(),
                                        [](const auto& p) { return p.visible; }));
}

const char* quality_tag_name(QualityTag tag) {
  switch (tag) {
    case QualityTag::kClean: return "clean";
    case QualityTag::kInterpolated: return "interpolated";
    case QualityTag::kOccluded: return "occluded";
    case QualityTag::kBrokenConstellation: return "broken-constellation";
  }
  return "?";
}

QualityTag quality_tag_from_name(const std::string& name) {
  for (auto t : {QualityTag::kClean, QualityTag::kInterpolated,
                 QualityTag::kOccluded, QualityTag::kBrokenConstellation}) {
    if (name == quality_tag_name(t)) return t;
  }
  throw ValidationError("unknown quality tag '" + name + "'");
}

QualityTag worst(QualityTag a, QualityTag b) { return std::max(a, b); }

bool usable_for_training(QualityTag tag) {
  return tag == QualityTag::kClean || tag == QualityTag::kInterpolated;
}

Registration register_rigid_body(std::span<const Vec3> template_points,
                                 std::span<const Vec3> observed) {
  const std::size_t n = template_points.size();
  if (n < 3 || observed.size() != n) {
    throw ArityError("rigid registration needs at least 3 corresponding points");
  }
  Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    ca += template_points[i];
    cb += observed[i];
  }
  ca /= static_cast<double>(n);
  cb /= static_cast<double>(n);

  Eigen::MatrixXd a(3, n);
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    a.col(i) = template_points[i] - ca;
    h += a.col(i) * (observed[i] - cb).transpose();
  }
  // Collinear (or coincident) templates leave a rotation about the line free.
  Eigen::JacobiSVD<Eigen::MatrixXd> spread(a);
  const auto s = spread.singularValues();
  if (s[0] <= 1e-12 || s[1] <= 1e-9 * s[0]) {
    throw DegeneracyError("template points are collinear");
  }

  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3 r = v * d * u.transpose();

  Registration out;
  out.transform.rotation = Quat(r).normalized();
  out.transform.translation = cb - r * ca;
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ss += (out.transform * template_points[i] - observed[i]).squaredNorm();
  }
  out.rms_residual = std::sqrt(ss / static_cast<double>(n));
  return out;
}

RigidTransform to_model_frame(const RigidTransform& pose_w,
                              const FrameTransform& t_mw) {
  return t_mw.model_from_mocap * pose_w;
}

std::vector<RigidTransform> to_model_frame(std::span<const RigidTransform> traj_w,
                                           const FrameTransform& t_mw) {
  std::vector<RigidTransform> out;
  out.reserve(traj_w.size());
  for (const auto& p : traj_w) out.push_back(to_model_frame(p, t_mw));
  return out;
}

Quat to_model_frame(const Quat& joint_rotation_w, const FrameTransform& t_mw) {
  return (t_mw.model_from_mocap.rotation * joint_rotation_w).normalized();
}

namespace {

void check_sorted(std::span<const MarkerFrame> frames) {
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (!(frames[i].timestamp > frames[i - 1].timestamp)) {
      throw ValidationError("marker frames must have strictly increasing timestamps");
    }
  }
}

}  // namespace

GapFill interpolate_gaps(std::span<const MarkerFrame> frames, int max_gap) {
  if (frames.empty()) throw ArityError("cannot interpolate an empty sequence");
  check_sorted(frames);

  std::vector<int> ids;
  for (const auto& f : frames) {
    for (const auto& p : f.points) ids.push_back(p.id);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  GapFill out;
  out.frames.assign(frames.begin(), frames.end());
  const int n = static_cast<int>(frames.size());

  for (int id : ids) {
    int last_visible = -1;
    int i = 0;
    while (i < n) {
      if (frames[i].visible_marker(id)) {
        last_visible = i;
        ++i;
        continue;
      }
      int end = i;
      while (end < n && !frames[end].visible_marker(id)) ++end;
      const int run = end - i;
      if (last_visible >= 0 && end < n && run <= max_gap) {
        const auto& a = *frames[last_visible].visible_marker(id);
        const auto& b = *frames[end].visible_marker(id);
        const double t0 = frames[last_visible].timestamp;
        const double t1 = frames[end].timestamp;
        for (int k = i; k < end; ++k) {
          const double s = (frames[k].timestamp - t0) / (t1 - t0);
          MarkerObservation filled{id, a.position + s * (b.position - a.position), true};
          auto& pts = out.frames[k].points;
          auto it = std::find_if(pts.begin(), pts.end(),
                                 [id](const auto& p) { return p.id == id; });
          if (it != pts.end()) {
            *it = filled;
          } else {
            pts.insert(std::upper_bound(pts.begin(), pts.end(), id,
                                        [](int v, const auto& p) { return v < p.id; }),
                       filled);
          }
          ++out.filled;
        }
      } else {
        out.remaining += run;
      }
      i = end;
    }
  }
  if (out.remaining > 0) {
    out.tag = QualityTag::kOccluded;
  } else if (out.filled > 0) {
    out.tag = QualityTag::kInterpolated;
  }
  return out;
}

int interpolate_pose_gaps(std::vector<RigidTransform>& poses,
                          std::vector<bool>& valid) {
  const int n = static_cast<int>(poses.size());
  if (static_cast<int>(valid.size()) != n) {
    throw ArityError("pose and validity sequences differ in length");
  }
  int first = -1, last = -1;
  for (int i = 0; i < n; ++i) {
    if (valid[i]) {
      if (first < 0) first = i;
      last = i;
    }
  }
  if (first < 0) throw ArityError("no valid pose to interpolate from");
  int filled = 0;
  for (int i = 0; i < first; ++i, ++filled) poses[i] = poses[first];
  for (int i = last + 1; i < n; ++i, ++filled) poses[i] = poses[last];
  int prev = first;
  for (int i = first + 1; i <= last; ++i) {
    if (!valid[i]) continue;
    for (int k = prev + 1; k < i; ++k, ++filled) {
      const double s = static_cast<double>(k - prev) / (i - prev);
      poses[k] = interpolate(poses[prev], poses[i], s);
    }
    prev = i;
  }
  std::fill(valid.begin(), valid.end(), true);
  return filled;
}

QualityTag check_constellation(std::span<const MarkerFrame> frames,
                               std::span<const int> marker_ids,
                               std::span<const Vec3> template_points,
                               double tolerance) {
  std::vector<Vec3> tmpl, obs;
  for (const auto& f : frames) {
    tmpl.clear();
    obs.clear();
    for (std::size_t k = 0; k < marker_ids.size(); ++k) {
      if (const auto* m = f.visible_marker(marker_ids[k])) {
        tmpl.push_back(template_points[k]);
        obs.push_back(m->position);
      }
    }
    if (tmpl.size() < 3) return QualityTag::kBrokenConstellation;
    try {
      if (register_rigid_body(tmpl, obs).rms_residual > tolerance) {
        return QualityTag::kBrokenConstellation;
      }
    } catch (const DegeneracyError&) {
      return QualityTag::kBrokenConstellation;
    }
  }
  return QualityTag::kClean;
}

StreamAlignment align_streams(std::span<const double> kin, std::span<const double> aux,
                              double kin_rate, double aux_rate) {
  if (kin.empty()) throw ArityError("kinematic stream is empty");
  for (auto s : {kin, aux}) {
    for (std::size_t i = 1; i < s.size(); ++i) {
      if (!(s[i] > s[i - 1])) {
        throw ValidationError("stream timestamps must be strictly increasing");
      }
    }
  }
  const double ratio = kin_rate / aux_rate;
  const double half_period = 0.5 / aux_rate;
  StreamAlignment out;
  out.aux_to_kin.reserve(aux.size());
  for (std::size_t k = 0; k < aux.size(); ++k) {
    const double t = aux[k];
    auto it = std::lower_bound(kin.begin(), kin.end(), t);
    std::size_t idx = static_cast<std::size_t>(it - kin.begin());
    if (idx == kin.size()) {
      idx = kin.size() - 1;
    } else if (idx > 0 && t - kin[idx - 1] <= kin[idx] - t) {
      --idx;
    }
    out.aux_to_kin.push_back(idx);

    const std::size_t nominal = std::min<std::size_t>(
        static_cast<std::size_t>(std::llround(static_cast<double>(k) * ratio)),
        kin.size() - 1);
    const double drift = std::abs(t - kin[nominal]);
    out.max_drift = std::max(out.max_drift, drift);
    if (drift > half_period) {
      std::ostringstream msg;
      msg << "auxiliary frame " << k << " drifted " << drift * 1e3
          << " ms from kinematic frame " << nominal << " (limit "
          << half_period * 1e3 << " ms)";
      throw AlignmentError(msg.str());
    }
  }
  return out;
}

std::vector<MarkerFrame> read_marker_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("marker CSV is empty");
  std::vector<MarkerFrame> frames;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) {
      throw ValidationError("marker CSV line " + std::to_string(lineno) +
                            " needs 6 columns");
    }
    double t;
    MarkerObservation obs;
    try {
      t = std::stod(cells[0]);
      obs.id = std::stoi(cells[1]);
      obs.position = {std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4])};
      obs.visible = std::stoi(cells[5]) != 0;
    } catch (const std::exception&) {
      throw ValidationError("marker CSV line " + std::to_string(lineno) +
                            " is malformed");
    }
    if (obs.visible && !obs.position.allFinite()) {
      throw ValidationError("visible marker with non-finite position on line " +
                            std::to_string(lineno));
    }
    if (frames.empty() || frames.back().timestamp != t) {
      frames.push_back({t, {}});
    }
    frames.back().points.push_back(obs);
  }
  check_sorted(frames);
  return frames;
}

void write_marker_csv(std::ostream& out, std::span<const MarkerFrame> frames) {
  out << "timestamp,marker_id,x,y,z,visible\n";
  out << std::setprecision(17);
  for (const auto& f : frames) {
    for (const auto& p : f.points) {
      out << f.timestamp << ',' << p.id << ',' << p.position.x() << ','
          << p.position.y() << ',' << p.position.z() << ','
          << (p.visible ? 1 : 0) << '\n';
    }
  }
}

}  // namespace dexforge::registration
