#include "dexforge/app.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dexforge/registration.hpp"

namespace dexforge::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

pipeline::DemoScript preset(const std::string& name) {
  if (name == "cube_tripod") return pipeline::DemoScript::cube_tripod();
  if (name == "cylinder_tripod") return pipeline::DemoScript::cylinder_tripod();
  if (name == "sphere_pinch") return pipeline::DemoScript::sphere_pinch();
  throw ConfigError("unknown demo preset " + name);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <class F>
auto run_stage(const std::string& name, const Logger& log, F&& body) {
  if (log) log("stage " + name);
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

rl::EnvFactory env_factory(const Resources& res, std::shared_ptr<const dataset::Trajectory> demo,
                           const physics::BodyDef& object, const rl::EnvConfig& config,
                           rl::Perturbation perturbation = {}) {
  return [skel = res.skeleton, demo, object, config, perturbation]() -> std::unique_ptr<rl::Env> {
    return std::make_unique<rl::ResidualEnv>(skel, demo, object, config, perturbation);
  };
}

Check make_check(std::string name, bool pass, double value, double threshold) {
  return Check{std::move(name), pass, value, threshold};
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig c;
  c.skeleton_path = fs::path(DEXFORGE_DEFAULT_DATA_DIR) / "right_hand.json";
  c.catalog_path = fs::path(DEXFORGE_DEFAULT_DATA_DIR) / "objects.json";
  c.demos = {pipeline::DemoScript::cube_tripod(), pipeline::DemoScript::cylinder_tripod(),
             pipeline::DemoScript::sphere_pinch()};
  return c;
}

PipelineConfig PipelineConfig::from_json(const json& doc, const fs::path& base_dir) {
  PipelineConfig c = defaults();
  try {
    if (doc.contains("skeleton")) c.skeleton_path = resolve(base_dir, doc.at("skeleton").get<std::string>());
    if (doc.contains("catalog")) c.catalog_path = resolve(base_dir, doc.at("catalog").get<std::string>());
    if (doc.contains("data_root") && !doc.at("data_root").is_null()) {
      c.data_root = resolve(base_dir, doc.at("data_root").get<std::string>());
    }
    if (doc.contains("demos")) {
      c.demos.clear();
      for (const json& d : doc.at("demos")) {
        c.demos.push_back(d.is_string() ? preset(d.get<std::string>()) : pipeline::DemoScript::from_json(d));
      }
    }
    c.marker_sigma = doc.value("marker_sigma", c.marker_sigma);
    if (doc.contains("env")) c.env = rl::EnvConfig::from_json(doc.at("env"));
    if (doc.contains("ppo")) c.ppo = rl::PpoConfig::from_json(doc.at("ppo"));
    c.eval_pose_offset = doc.value("eval_pose_offset", c.eval_pose_offset);
    c.stochastic_eval = doc.value("stochastic_eval", c.stochastic_eval);
    c.rollouts = doc.value("rollouts", c.rollouts);
    c.annotate_rollouts = doc.value("annotate_rollouts", c.annotate_rollouts);
    if (doc.contains("variation")) c.variation = annotation::VariationSpec::from_json(doc.at("variation"));
    c.synth_count = doc.value("synth_count", c.synth_count);
    c.seed = doc.value("seed", c.seed);
    c.jobs = doc.value("jobs", c.jobs);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(doc, path.parent_path());
}

json PipelineConfig::to_json() const {
  json demos = json::array();
  for (const auto& d : this->demos) demos.push_back(d.to_json());
  return {{"skeleton", skeleton_path.string()},
          {"catalog", catalog_path.string()},
          {"data_root", data_root ? json(data_root->string()) : json(nullptr)},
          {"demos", demos},
          {"marker_sigma", marker_sigma},
          {"env", env.to_json()},
          {"ppo", ppo.to_json()},
          {"eval_pose_offset", eval_pose_offset},
          {"stochastic_eval", stochastic_eval},
          {"rollouts", rollouts},
          {"annotate_rollouts", annotate_rollouts},
          {"variation", variation.to_json()},
          {"synth_count", synth_count},
          {"seed", seed},
          {"jobs", jobs}};
}

void PipelineConfig::validate() const {
  if (!fs::is_regular_file(skeleton_path)) throw ConfigError("skeleton file not found: " + skeleton_path.string());
  if (!fs::is_regular_file(catalog_path)) throw ConfigError("object catalog not found: " + catalog_path.string());
  if (data_root && !fs::is_directory(*data_root)) {
    throw ConfigError("data root not found: " + data_root->string());
  }
  if (demos.empty()) throw ConfigError("no demos configured");
  for (const auto& d : demos) d.validate();
  if (!(marker_sigma >= 0.0)) throw ConfigError("marker_sigma must be nonnegative");
  if (!(eval_pose_offset >= 0.0 && eval_pose_offset <= 0.2)) {
    throw ConfigError("eval_pose_offset must lie in [0, 0.2]");
  }
  if (rollouts < 1) throw ConfigError("rollouts must be positive");
  if (annotate_rollouts < 0 || synth_count < 0) throw ConfigError("counts must be nonnegative");
  if (jobs < 1) throw ConfigError("jobs must be positive");
  variation.validate();
}

std::uint64_t stream_seed(std::uint64_t seed, Stream s) {
  return rl::rollout_seed(seed, 1000 + static_cast<std::uint64_t>(s));
}

Resources Resources::load(const PipelineConfig& config) {
  config.validate();
  Resources r;
  r.skeleton = std::make_shared<const hand::HandSkeleton>(hand::HandSkeleton::load(config.skeleton_path));
  r.catalog = physics::ObjectCatalog::load(config.catalog_path);
  for (const auto& d : config.demos) {
    if (!r.catalog.contains(d.object)) {
      throw ConfigError("object " + d.object + " not in catalog " + config.catalog_path.string());
    }
  }
  return r;
}

json Check::to_json() const {
  return {{"name", name}, {"pass", pass}, {"value", value}, {"threshold", threshold}};
}

bool CaseReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

json CaseReport::to_json() const {
  json cs = json::array();
  for (const Check& c : checks) cs.push_back(c.to_json());
  return {{"object", object}, {"stages", stages}, {"checks", cs}, {"passed", passed()}};
}

rl::Actor load_actor(const std::optional<fs::path>& policy, bool deterministic) {
  if (!policy) return rl::zero_actor(rl::kActionDim);
  return rl::policy_actor(rl::Policy::load(*policy), deterministic);
}

CaseReport run_demo_case(const PipelineConfig& config, const Resources& res,
                         const pipeline::DemoScript& script, const DemoOptions& options,
                         const Logger& log) {
  CaseReport report;
  report.object = script.object;
  const physics::BodyDef& object = res.catalog.at(script.object);
  const std::string tag = script.object;

  const auto clean = run_stage("generate", log, [&] {
    return std::make_shared<const dataset::Trajectory>(
        pipeline::generate_demo(res.skeleton, object, script, config.env.sim));
  });
  report.stages["generate"] = {{"frames", clean->frames()},
                               {"lift", clean->object(clean->frames() - 1).translation.z() -
                                            clean->object(0).translation.z()}};

  run_stage("replay", log, [&] {
    rl::ResidualEnv env(res.skeleton, clean, object, config.env);
    const rl::RolloutLog r =
        rl::run_episode(env, rl::zero_actor(rl::kActionDim), stream_seed(config.seed, Stream::kEval));
    report.stages["replay"] = {{"success", r.success}, {"steps", r.steps}, {"total_reward", r.total_reward}};
    report.checks.push_back(make_check("zero_policy_replay", r.success, r.success ? 1.0 : 0.0, 1.0));
    return 0;
  });

  const pipeline::NoisyDemo noisy = run_stage("fit", log, [&] {
    return pipeline::add_fitting_noise(*res.skeleton, object, *clean,
                                       {config.marker_sigma, stream_seed(config.seed, Stream::kNoise)});
  });
  const auto demo = std::make_shared<const dataset::Trajectory>(noisy.trajectory);
  report.stages["fit"] = {{"marker_sigma", config.marker_sigma},
                          {"hand_marker_rms", noisy.hand_marker_rms},
                          {"wrist_error", noisy.wrist_error},
                          {"finger_error", noisy.finger_error},
                          {"object_error", noisy.object_error}};

  const bool deterministic = !config.stochastic_eval;
  const rl::Actor actor = run_stage("train", log, [&]() -> rl::Actor {
    if (options.skip_train) {
      if (!options.zero_policy && !options.policy) {
        throw ConfigError("training skipped without a policy; pass --zero-policy or --policy");
      }
      report.stages["train"] = {{"skipped", true}, {"zero_policy", options.zero_policy}};
      return load_actor(options.zero_policy ? std::nullopt : options.policy, deterministic);
    }
    rl::PpoConfig ppo = config.ppo;
    ppo.seed = stream_seed(config.seed, Stream::kTrain);
    ppo.jobs = config.jobs;
    std::optional<fs::path> checkpoint;
    if (config.data_root) {
      fs::create_directories(*config.data_root / "policies");
      checkpoint = *config.data_root / "policies" / (tag + ".ckpt");
    }
    const rl::TrainResult trained =
        rl::train_ppo(env_factory(res, demo, object, config.env), ppo, checkpoint, [&](const rl::CurvePoint& p) {
          if (log) {
            std::ostringstream s;
            s << "  step " << p.step << " reward " << p.mean_reward << " success " << p.success_rate;
            log(s.str());
          }
        });
    if (checkpoint) {
      trained.policy.save(*checkpoint, rl::config_hash(ppo.to_json()));
      rl::write_curves_csv(trained.curves, *config.data_root / "policies" / (tag + "_curves.csv"));
    }
    json last = nullptr;
    if (!trained.curves.empty()) {
      last = {{"step", trained.curves.back().step},
              {"mean_reward", trained.curves.back().mean_reward},
              {"success_rate", trained.curves.back().success_rate}};
    }
    report.stages["train"] = {{"skipped", false}, {"steps", trained.steps}, {"final", last}};
    return rl::policy_actor(trained.policy, deterministic);
  });

  run_stage("evaluate", log, [&] {
    const rl::EvalResult nominal = rl::evaluate_success(env_factory(res, demo, object, config.env), actor,
                                                        config.rollouts, stream_seed(config.seed, Stream::kEval),
                                                        config.jobs);
    rl::Perturbation p;
    p.pose_offset = config.eval_pose_offset;
    const rl::EvalResult perturbed =
        rl::evaluate_success(env_factory(res, demo, object, config.env, p), actor, config.rollouts,
                             stream_seed(config.seed, Stream::kPerturbed), config.jobs);
    report.nominal_success = nominal.success_rate;
    report.perturbed_success = perturbed.success_rate;
    const double drop = nominal.success_rate - perturbed.success_rate;
    report.stages["evaluate"] = {{"rollouts", config.rollouts},
                                 {"stochastic", config.stochastic_eval},
                                 {"nominal_success", nominal.success_rate},
                                 {"nominal_reward", nominal.mean_reward},
                                 {"perturbed_pose_offset", config.eval_pose_offset},
                                 {"perturbed_success", perturbed.success_rate},
                                 {"perturbed_reward", perturbed.mean_reward},
                                 {"success_drop", drop}};
    report.checks.push_back(make_check("nominal_success", nominal.success_rate >= 0.7, nominal.success_rate, 0.7));
    report.checks.push_back(make_check("perturbed_drop", drop <= 0.3, drop, 0.3));
    return 0;
  });

  run_stage("annotate", log, [&] {
    if (config.annotate_rollouts == 0) return 0;
    rl::ResidualEnv env(res.skeleton, demo, object, config.env);
    const double mg = object.mass * 9.81;
    double worst_hold = 0.0;
    bool max_exact = true, rate_ok = true;
    json rollouts = json::array();
    for (int i = 0; i < config.annotate_rollouts; ++i) {
      annotation::AnnotationResult r = annotation::annotate_rollout(
          env, actor, rl::rollout_seed(stream_seed(config.seed, Stream::kAnnotate), i));
      json entry = {{"success", r.success}, {"cause", r.cause}, {"termination_frame", r.termination_frame}};
      if (r.success) {
        const dataset::Trajectory& t = *r.trajectory;
        rate_ok = rate_ok && t.frames() % annotation::kRateRatio == 0 &&
                  static_cast<int>(annotation::auxiliary_index(t.frames()).size()) * annotation::kRateRatio ==
                      t.frames();
        const int begin = std::min(script.hold_start(), t.frames());
        if (begin < t.frames()) {
          const Vec3 f = annotation::mean_wrench_force(t, begin, t.frames());
          const double err = (f - Vec3(0, 0, mg)).norm() / mg;
          worst_hold = std::max(worst_hold, err);
          entry["hold_force"] = {f.x(), f.y(), f.z()};
          entry["hold_error"] = err;
        }
        const annotation::FingerForces ff = annotation::finger_forces(t, env.world().bodies());
        for (int k = 0; k < t.frames(); ++k) {
          max_exact = max_exact && ff.max_series[k] == ff.channel.row(k).maxCoeff();
        }
        report.annotated.push_back(std::move(*r.trajectory));
      }
      rollouts.push_back(entry);
    }
    const int ok = static_cast<int>(report.annotated.size());
    report.stages["annotate"] = {{"rollouts", rollouts}, {"annotated", ok}, {"mass", object.mass}};
    report.checks.push_back(make_check("annotated_rollouts", ok > 0, ok, 1));
    report.checks.push_back(make_check("hold_wrench_balance", ok > 0 && worst_hold <= 0.05, worst_hold, 0.05));
    report.checks.push_back(make_check("max_series_exact", max_exact, max_exact ? 1.0 : 0.0, 1.0));
    report.checks.push_back(make_check("rate_contract", rate_ok, rate_ok ? 1.0 : 0.0, 1.0));
    return 0;
  });

  std::vector<dataset::Trajectory> synthesized;
  run_stage("synth", log, [&] {
    if (config.synth_count == 0) return 0;
    annotation::SynthesisResult s =
        annotation::synthesize_variations(res.skeleton, demo, object, config.env, actor, config.variation,
                                          config.synth_count, stream_seed(config.seed, Stream::kSynth),
                                          config.jobs);
    report.stages["synth"] = {{"count", config.synth_count},
                              {"variation", config.variation.to_json()},
                              {"accepted", s.accepted.size()},
                              {"acceptance_rate", s.acceptance_rate}};
    const double floor = 0.5 * report.nominal_success;
    report.checks.push_back(make_check("synthesis_acceptance", s.acceptance_rate >= floor, s.acceptance_rate, floor));
    synthesized = std::move(s.accepted);
    return 0;
  });

  run_stage("stats", log, [&] {
    std::vector<dataset::Trajectory> all = report.annotated;
    all.insert(all.end(), synthesized.begin(), synthesized.end());
    if (all.empty()) return 0;
    const auto bodies = physics::hand_bodies(*res.skeleton, hand::ShapeVector{demo->meta.mano_shape});
    const annotation::ContactStats stats = annotation::compute_contact_stats(all, bodies);
    std::reverse(all.begin(), all.end());
    const bool order_free = annotation::compute_contact_stats(all, bodies) == stats;
    const Eigen::VectorXd jf = stats.joint_frequency();
    const bool bounded = (jf.array() >= 0.0).all() && (jf.array() <= 1.0).all();
    report.stages["stats"] = stats.to_json(*res.skeleton);
    report.checks.push_back(make_check("stats_order_independent", order_free, order_free ? 1.0 : 0.0, 1.0));
    report.checks.push_back(make_check("stats_frequency_bounds", bounded, bounded ? 1.0 : 0.0, 1.0));
    return 0;
  });

  run_stage("store", log, [&] {
    if (!config.data_root) return 0;
    dataset::TrajectoryStore store(*config.data_root);
    std::vector<std::pair<std::string, const dataset::Trajectory*>> items = {{"demo_" + tag, clean.get()},
                                                                             {"noisy_" + tag, demo.get()}};
    for (std::size_t i = 0; i < report.annotated.size(); ++i) {
      items.emplace_back("annotated_" + tag + "_" + std::to_string(i), &report.annotated[i]);
    }
    for (std::size_t i = 0; i < synthesized.size(); ++i) {
      items.emplace_back("synth_" + tag + "_" + std::to_string(i), &synthesized[i]);
    }
    for (const auto& [id, t] : items) store.write(id, *t);
    bool exact = true;
    for (const auto& [id, t] : items) exact = exact && store.read(id) == *t;
    std::ofstream csv(*config.data_root / ("markers_" + tag + ".csv"));
    registration::write_marker_csv(csv, noisy.markers);
    if (!csv) throw ValidationError("cannot write marker csv");
    report.stages["store"] = {{"written", items.size()}};
    report.checks.push_back(make_check("store_round_trip", exact, exact ? 1.0 : 0.0, 1.0));
    return 0;
  });
  return report;
}

json run_demo(const PipelineConfig& config, const DemoOptions& options, const Logger& log) {
  const Resources res = Resources::load(config);
  json cases = json::array(), invariants = json::array();
  bool passed = true;
  for (const auto& script : config.demos) {
    if (log) log("demo " + script.object + " (" + script.manipulation_type + ")");
    const CaseReport r = run_demo_case(config, res, script, options, log);
    for (const Check& c : r.checks) {
      json j = c.to_json();
      j["name"] = script.object + "/" + c.name;
      invariants.push_back(j);
    }
    passed = passed && r.passed();
    cases.push_back(r.to_json());
  }
  return {{"command", "demo"},
          {"seed", config.seed},
          {"skip_train", options.skip_train},
          {"zero_policy", options.zero_policy},
          {"config", config.to_json()},
          {"cases", cases},
          {"invariants", invariants},
          {"passed", passed}};
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Series {
  std::string label;
  std::string color;
  std::vector<double> y;
  bool dashed = false;
};

std::string line_chart(const std::string& title, const std::vector<double>& x, const std::vector<Series>& series,
                       const std::string& x_label, const std::string& y_label) {
  constexpr double kW = 800, kH = 360, kL = 60, kR = 140, kT = 30, kB = 40;
  double x0 = x.empty() ? 0.0 : x.front(), x1 = x.empty() ? 1.0 : x.back();
  if (x1 <= x0) x1 = x0 + 1.0;
  double y1 = 0.0;
  for (const Series& s : series) {
    for (double v : s.y) y1 = std::max(y1, v);
  }
  if (y1 <= 0.0) y1 = 1.0;
  auto px = [&](double v) { return kL + (v - x0) / (x1 - x0) * (kW - kL - kR); };
  auto py = [&](double v) { return kH - kB - v / y1 * (kH - kT - kB); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kL << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << kL << "\" y1=\"" << fmt(py(0)) << "\" x2=\"" << fmt(px(x1)) << "\" y2=\"" << fmt(py(0))
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << kL << "\" y1=\"" << fmt(py(0)) << "\" x2=\"" << kL << "\" y2=\"" << kT
    << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << kL - 5 << "\" y=\"" << kT + 4 << "\" font-family=\"sans-serif\" font-size=\"11\" "
    << "text-anchor=\"end\">" << fmt(y1) << "</text>\n";
  o << "<text x=\"" << fmt(px(x1)) << "\" y=\"" << kH - kB + 16 << "\" font-family=\"sans-serif\" "
    << "font-size=\"11\" text-anchor=\"end\">" << fmt(x1) << "</text>\n";
  o << "<text x=\"" << (kW - kR + kL) / 2 << "\" y=\"" << kH - 8 << "\" font-family=\"sans-serif\" "
    << "font-size=\"12\" text-anchor=\"middle\">" << x_label << "</text>\n";
  o << "<text x=\"14\" y=\"" << (kH - kB + kT) / 2 << "\" font-family=\"sans-serif\" font-size=\"12\" "
    << "transform=\"rotate(-90 14 " << (kH - kB + kT) / 2 << ")\" text-anchor=\"middle\">" << y_label
    << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"";
    if (s.dashed) o << " stroke-dasharray=\"5,3\"";
    o << " points=\"";
    for (std::size_t i = 0; i < s.y.size() && i < x.size(); ++i) o << fmt(px(x[i])) << "," << fmt(py(s.y[i])) << " ";
    o << "\"/>\n";
    const double ly = kT + 16.0 * k;
    o << "<line x1=\"" << kW - kR + 10 << "\" y1=\"" << ly << "\" x2=\"" << kW - kR + 30 << "\" y2=\"" << ly
      << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << kW - kR + 35 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << s.label << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace

std::string finger_force_svg(const annotation::FingerForces& forces, const std::string& title) {
  static const std::array<const char*, annotation::kChannels> colors = {"#d62728", "#1f77b4", "#2ca02c",
                                                                         "#ff7f0e", "#9467bd", "#8c564b"};
  const int n = static_cast<int>(forces.channel.rows());
  std::vector<double> x(n);
  for (int f = 0; f < n; ++f) x[f] = static_cast<double>(f) / dataset::kKinematicsFps;
  std::vector<Series> series;
  for (int ch = 0; ch < annotation::kChannels; ++ch) {
    Series s{hand::digit_name(static_cast<hand::Digit>(ch)), colors[ch], {}};
    s.y.assign(forces.channel.col(ch).data(), forces.channel.col(ch).data() + n);
    series.push_back(std::move(s));
  }
  Series m{"max", "black", {}, true};
  m.y.assign(forces.max_series.data(), forces.max_series.data() + n);
  series.push_back(std::move(m));
  return line_chart(title, x, series, "time (s)", "force (N)");
}

std::string curves_svg(const std::vector<rl::CurvePoint>& curves, const std::string& title) {
  std::vector<double> x;
  Series reward{"mean reward", "#1f77b4", {}}, success{"success x max", "#2ca02c", {}, true};
  double peak = 0.0;
  for (const auto& c : curves) peak = std::max(peak, c.mean_reward);
  if (peak <= 0.0) peak = 1.0;
  for (const auto& c : curves) {
    x.push_back(static_cast<double>(c.step));
    reward.y.push_back(std::max(0.0, c.mean_reward));
    success.y.push_back(c.success_rate * peak);
  }
  return line_chart(title, x, {reward, success}, "environment steps", "episode return");
}

}  // namespace dexforge::app
