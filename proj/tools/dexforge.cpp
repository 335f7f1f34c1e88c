// Pipeline CLI. Every command prints one JSON document on stdout; logs go
// to stderr. Exit 0 iff the command's invariants hold, 2 on configuration
// errors, 1 otherwise.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "dexforge/app.hpp"
#include "dexforge/registration.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dexforge;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data_root;
  std::optional<std::string> object;
  std::optional<std::string> manipulation;
  std::optional<int> rollouts;
  std::optional<int> jobs;
};

struct PolicyFlags {
  std::optional<std::string> policy;
  bool deterministic = false;
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

app::PipelineConfig load_config(const Common& c, bool need_root) {
  app::PipelineConfig cfg = c.config.empty() ? app::PipelineConfig::defaults() : app::PipelineConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.rollouts) cfg.rollouts = *c.rollouts;
  if (c.jobs) cfg.jobs = *c.jobs;
  // Flag, then environment, then config file.
  if (c.data_root || std::getenv("DEXFORGE_DATA")) cfg.data_root = dataset::resolve_data_root(c.data_root);
  if (need_root && !cfg.data_root) cfg.data_root = dataset::resolve_data_root(std::nullopt);
  if (c.object) {
    std::vector<pipeline::DemoScript> kept;
    for (const auto& d : cfg.demos) {
      if (d.object == *c.object) kept.push_back(d);
    }
    if (kept.empty()) {
      pipeline::DemoScript d = pipeline::DemoScript::cube_tripod();
      d.object = *c.object;
      kept.push_back(d);
    }
    cfg.demos = kept;
  }
  if (c.manipulation) {
    for (auto& d : cfg.demos) d.manipulation_type = *c.manipulation;
  }
  cfg.validate();
  return cfg;
}

struct Loaded {
  app::PipelineConfig config;
  app::Resources resources;
  std::shared_ptr<const dataset::Trajectory> demo;
  physics::BodyDef object;
};

Loaded load_demo(const Common& c, const std::string& demo_id) {
  Loaded l{load_config(c, true), {}, {}, {}};
  l.resources = app::Resources::load(l.config);
  dataset::TrajectoryStore store(*l.config.data_root);
  if (!store.contains(demo_id)) throw ConfigError("no trajectory " + demo_id + " under " + store.root().string());
  l.demo = std::make_shared<const dataset::Trajectory>(store.read(demo_id));
  l.object = l.resources.catalog.at(l.demo->meta.object);
  return l;
}

rl::EnvFactory factory(const Loaded& l, rl::Perturbation p = {}) {
  return [skel = l.resources.skeleton, demo = l.demo, object = l.object, cfg = l.config.env, p]() -> std::unique_ptr<rl::Env> {
    return std::make_unique<rl::ResidualEnv>(skel, demo, object, cfg, p);
  };
}

rl::Actor actor_of(const PolicyFlags& p, const app::PipelineConfig& cfg) {
  std::optional<fs::path> path;
  if (p.policy) path = *p.policy;
  return app::load_actor(path, p.deterministic || !cfg.stochastic_eval);
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "pipeline config JSON");
  cmd->add_option("--seed", c.seed, "base seed");
  cmd->add_option("--data-root", c.data_root, "trajectory store root (default $DEXFORGE_DATA)");
  cmd->add_option("--object", c.object, "object id");
  cmd->add_option("--manipulation", c.manipulation, "manipulation label");
  cmd->add_option("--rollouts", c.rollouts, "rollout count");
  cmd->add_option("--jobs", c.jobs, "worker cap");
}

void add_policy(CLI::App* cmd, PolicyFlags& p) {
  cmd->add_option("--policy", p.policy, "policy checkpoint (zero residual when omitted)");
  cmd->add_flag("--deterministic", p.deterministic, "act with the policy mean");
}

json rollout_json(const rl::RolloutLog& r) {
  return {{"seed", r.seed}, {"success", r.success}, {"steps", r.steps}, {"total_reward", r.total_reward},
          {"cause", r.cause}};
}

std::vector<registration::MarkerFrame> read_markers(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open marker file " + path);
  return registration::read_marker_csv(in);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Physics-based force annotation of kinematic hand demonstrations"};
  cli.require_subcommand(1);
  Common common;
  PolicyFlags policy;
  json out;
  bool ok = true;
  std::function<void()> action;

  auto* fit = cli.add_subcommand("fit", "fit hand and object poses to a marker CSV and store the trajectory");
  std::string markers, id, operator_id = "mocap";
  add_common(fit, common);
  fit->add_option("--markers", markers, "marker CSV")->required();
  fit->add_option("--id", id, "trajectory id")->required();
  fit->add_option("--operator", operator_id, "operator id");
  fit->callback([&] {
    action = [&] {
      const app::PipelineConfig cfg = load_config(common, true);
      const app::Resources res = app::Resources::load(cfg);
      const std::string object = common.object.value_or(cfg.demos.front().object);
      if (!res.catalog.contains(object)) throw ConfigError("object " + object + " not in catalog");
      const auto frames = read_markers(markers);
      dataset::TrajectoryMeta meta;
      meta.operator_id = operator_id;
      meta.object = object;
      meta.manipulation_type = common.manipulation.value_or(cfg.demos.front().manipulation_type);
      meta.active_end = static_cast<int>(frames.size());
      const pipeline::Reconstruction r = pipeline::reconstruct(*res.skeleton, res.catalog.at(object), frames, meta);
      dataset::TrajectoryStore store(*cfg.data_root);
      store.write(id, r.trajectory);
      out = {{"command", "fit"}, {"id", id}, {"frames", r.trajectory.frames()},
             {"hand_marker_rms", r.hand_marker_rms}, {"object_filled", r.object_filled},
             {"quality", registration::quality_tag_name(r.tag)}};
      ok = registration::usable_for_training(r.tag);
    };
  });

  auto* pre = cli.add_subcommand("preprocess", "fill short marker gaps and tag the trial quality");
  std::string pre_out;
  int max_gap = registration::kDefaultMaxGap;
  add_common(pre, common);
  pre->add_option("--markers", markers, "marker CSV")->required();
  pre->add_option("--out", pre_out, "filled marker CSV")->required();
  pre->add_option("--max-gap", max_gap, "longest gap filled, frames");
  pre->callback([&] {
    action = [&] {
      const auto frames = read_markers(markers);
      const registration::GapFill g = registration::interpolate_gaps(frames, max_gap);
      std::ofstream o(pre_out);
      registration::write_marker_csv(o, g.frames);
      if (!o) throw ValidationError("cannot write " + pre_out);
      out = {{"command", "preprocess"}, {"frames", g.frames.size()}, {"filled", g.filled},
             {"remaining", g.remaining}, {"quality", registration::quality_tag_name(g.tag)}};
      ok = registration::usable_for_training(g.tag);
    };
  });

  auto* train = cli.add_subcommand("train", "train a residual policy on a stored demo");
  std::string demo_id, checkpoint;
  std::optional<long> steps;
  add_common(train, common);
  train->add_option("--demo", demo_id, "demo trajectory id")->required();
  train->add_option("--out", checkpoint, "checkpoint path")->required();
  train->add_option("--steps", steps, "environment steps");
  train->callback([&] {
    action = [&] {
      const Loaded l = load_demo(common, demo_id);
      rl::PpoConfig ppo = l.config.ppo;
      if (steps) ppo.total_steps = *steps;
      ppo.seed = app::stream_seed(l.config.seed, app::Stream::kTrain);
      ppo.jobs = l.config.jobs;
      const rl::TrainResult r = rl::train_ppo(factory(l), ppo, fs::path(checkpoint), [](const rl::CurvePoint& p) {
        log_line("step " + std::to_string(p.step) + " reward " + std::to_string(p.mean_reward) + " success " +
                 std::to_string(p.success_rate));
      });
      const std::uint32_t hash = rl::config_hash(ppo.to_json());
      r.policy.save(checkpoint, hash);
      const fs::path curves = fs::path(checkpoint).replace_extension(".csv");
      rl::write_curves_csv(r.curves, curves);
      json last = nullptr;
      if (!r.curves.empty()) last = {{"step", r.curves.back().step}, {"success_rate", r.curves.back().success_rate}};
      out = {{"command", "train"}, {"demo", demo_id}, {"steps", r.steps}, {"checkpoint", checkpoint},
             {"curves", curves.string()}, {"config_hash", hash}, {"final", last}};
    };
  });

  auto* rollout = cli.add_subcommand("rollout", "roll a policy out on a stored demo");
  add_common(rollout, common);
  add_policy(rollout, policy);
  rollout->add_option("--demo", demo_id, "demo trajectory id")->required();
  rollout->callback([&] {
    action = [&] {
      const Loaded l = load_demo(common, demo_id);
      const rl::EvalResult r = rl::evaluate_success(factory(l), actor_of(policy, l.config), l.config.rollouts,
                                                    app::stream_seed(l.config.seed, app::Stream::kEval),
                                                    l.config.jobs);
      json logs = json::array();
      for (const auto& x : r.rollouts) logs.push_back(rollout_json(x));
      out = {{"command", "rollout"}, {"demo", demo_id}, {"rollouts", logs}};
    };
  });

  auto* eval = cli.add_subcommand("eval", "success rate of a policy on a stored demo");
  double perturb = 0.0;
  add_common(eval, common);
  add_policy(eval, policy);
  eval->add_option("--demo", demo_id, "demo trajectory id")->required();
  eval->add_option("--pose-offset", perturb, "initial pose perturbation, fraction of object size");
  eval->callback([&] {
    action = [&] {
      const Loaded l = load_demo(common, demo_id);
      rl::Perturbation p;
      p.pose_offset = perturb;
      p.validate();
      const auto stream = perturb > 0.0 ? app::Stream::kPerturbed : app::Stream::kEval;
      const rl::EvalResult r = rl::evaluate_success(factory(l, p), actor_of(policy, l.config), l.config.rollouts,
                                                    app::stream_seed(l.config.seed, stream), l.config.jobs);
      out = {{"command", "eval"}, {"demo", demo_id}, {"rollouts", l.config.rollouts}, {"pose_offset", perturb},
             {"success_rate", r.success_rate}, {"mean_reward", r.mean_reward}};
    };
  });

  auto* annotate = cli.add_subcommand("annotate", "annotate successful rollouts with contact forces");
  std::string prefix = "annotated";
  add_common(annotate, common);
  add_policy(annotate, policy);
  annotate->add_option("--demo", demo_id, "demo trajectory id")->required();
  annotate->add_option("--prefix", prefix, "id prefix of stored annotations");
  annotate->callback([&] {
    action = [&] {
      const Loaded l = load_demo(common, demo_id);
      rl::ResidualEnv env(l.resources.skeleton, l.demo, l.object, l.config.env);
      const rl::Actor actor = actor_of(policy, l.config);
      dataset::TrajectoryStore store(*l.config.data_root);
      json items = json::array();
      int kept = 0;
      for (int i = 0; i < l.config.rollouts; ++i) {
        const auto r = annotation::annotate_rollout(
            env, actor, rl::rollout_seed(app::stream_seed(l.config.seed, app::Stream::kAnnotate), i));
        json e = {{"success", r.success}, {"cause", r.cause}, {"termination_frame", r.termination_frame}};
        if (r.success) {
          const std::string tid = prefix + "_" + std::to_string(i);
          store.write(tid, *r.trajectory);
          e["id"] = tid;
          ++kept;
        }
        items.push_back(e);
      }
      out = {{"command", "annotate"}, {"demo", demo_id}, {"annotated", kept}, {"rollouts", items}};
    };
  });

  auto* synth = cli.add_subcommand("synth", "perturbation-based synthesis of annotated variations");
  annotation::VariationSpec spec;
  std::string synth_prefix = "synth";
  add_common(synth, common);
  add_policy(synth, policy);
  synth->add_option("--demo", demo_id, "demo trajectory id")->required();
  synth->add_option("--pose-jitter", spec.pose_jitter, "fraction of object size");
  synth->add_option("--size-scale", spec.size_scale, "relative size range");
  synth->add_option("--mass-scale", spec.mass_scale, "relative mass range");
  synth->add_option("--shape-jitter", spec.shape_jitter, "hand shape coefficient jitter");
  synth->add_option("--prefix", synth_prefix, "id prefix of stored variations");
  synth->callback([&] {
    action = [&] {
      spec.validate();
      const Loaded l = load_demo(common, demo_id);
      const auto s = annotation::synthesize_variations(
          l.resources.skeleton, l.demo, l.object, l.config.env, actor_of(policy, l.config), spec, l.config.rollouts,
          app::stream_seed(l.config.seed, app::Stream::kSynth), l.config.jobs);
      dataset::TrajectoryStore store(*l.config.data_root);
      json ids = json::array();
      for (std::size_t i = 0; i < s.accepted.size(); ++i) {
        const std::string tid = synth_prefix + "_" + std::to_string(i);
        store.write(tid, s.accepted[i]);
        ids.push_back(tid);
      }
      out = {{"command", "synth"}, {"demo", demo_id}, {"variation", spec.to_json()},
             {"attempts", l.config.rollouts}, {"acceptance_rate", s.acceptance_rate}, {"ids", ids}};
    };
  });

  auto* plot = cli.add_subcommand("plot", "write SVG charts");
  std::string style = "finger-forces", plot_out = ".", curves_csv;
  std::vector<std::string> ids;
  add_common(plot, common);
  plot->add_option("--style", style, "finger-forces or curves")->check(CLI::IsMember({"finger-forces", "curves"}));
  plot->add_option("--ids", ids, "annotated trajectory ids (default: every annotated one)")->delimiter(',');
  plot->add_option("--curves", curves_csv, "training curves CSV for --style curves");
  plot->add_option("--out", plot_out, "output directory");
  plot->callback([&] {
    action = [&] {
      fs::create_directories(plot_out);
      json files = json::array();
      if (style == "curves") {
        std::ifstream in(curves_csv);
        if (!in) throw ConfigError("cannot open curves file " + curves_csv);
        std::vector<rl::CurvePoint> curves;
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
          std::istringstream row(line);
          rl::CurvePoint p;
          char comma;
          if (row >> p.step >> comma >> p.mean_reward >> comma >> p.success_rate) curves.push_back(p);
        }
        const fs::path f = fs::path(plot_out) / "curves.svg";
        std::ofstream(f) << app::curves_svg(curves, "training curves");
        files.push_back(f.string());
      } else {
        const app::PipelineConfig cfg = load_config(common, true);
        const app::Resources res = app::Resources::load(cfg);
        dataset::TrajectoryStore store(*cfg.data_root);
        if (ids.empty()) {
          for (const auto& tid : store.ids()) {
            if (store.read(tid).contacts) ids.push_back(tid);
          }
        }
        for (const auto& tid : ids) {
          const dataset::Trajectory t = store.read(tid);
          if (!t.contacts) throw ValidationError(tid + " carries no contact annotation");
          const auto bodies = physics::hand_bodies(*res.skeleton, hand::ShapeVector{t.meta.mano_shape});
          const fs::path f = fs::path(plot_out) / (tid + ".svg");
          std::ofstream(f) << app::finger_force_svg(annotation::finger_forces(t, bodies), tid);
          files.push_back(f.string());
        }
      }
      out = {{"command", "plot"}, {"style", style}, {"files", files}};
    };
  });

  auto* demo = cli.add_subcommand("demo", "end-to-end loop on scripted synthetic demonstrations");
  app::DemoOptions opts;
  std::optional<double> noise_sigma;
  std::optional<long> demo_steps;
  add_common(demo, common);
  demo->add_flag("--skip-train", opts.skip_train, "skip residual training");
  demo->add_flag("--zero-policy", opts.zero_policy, "evaluate the zero residual");
  demo->add_option("--policy", policy.policy, "checkpoint used when training is skipped");
  demo->add_option("--noise-sigma", noise_sigma, "marker jitter, m");
  demo->add_option("--steps", demo_steps, "training steps per demo");
  demo->callback([&] {
    action = [&] {
      if (opts.zero_policy) opts.skip_train = true;
      if (policy.policy) opts.policy = *policy.policy;
      app::PipelineConfig cfg = load_config(common, false);
      if (noise_sigma) cfg.marker_sigma = *noise_sigma;
      if (demo_steps) cfg.ppo.total_steps = *demo_steps;
      cfg.validate();
      out = app::run_demo(cfg, opts, log_line);
      ok = out.at("passed").get<bool>();
    };
  });

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e);
  }

  int code = 0;
  try {
    action();
    if (!ok) code = 1;
  } catch (const app::StageError& e) {
    out = {{"error", e.what()}, {"stage", e.stage()}};
    code = 1;
  } catch (const ConfigError& e) {
    out = {{"error", e.what()}, {"kind", "config"}};
    code = 2;
  } catch (const std::exception& e) {
    out = {{"error", e.what()}};
    code = 1;
  }
  if (code != 0 && out.contains("error")) log_line(std::string("error: ") + out["error"].get<std::string>());
  std::cout << out.dump(2) << std::endl;
  return code;
}
