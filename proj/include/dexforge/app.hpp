#pragma once

// Pipeline configuration and the end-to-end demo loop shared by the CLI
// and the acceptance suite: scripted demo, marker noise and fitting,
// residual training, evaluation, annotation, synthesis and statistics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dexforge/annotation.hpp"
#include "dexforge/errors.hpp"
#include "dexforge/pipeline.hpp"
#include "dexforge/rl.hpp"

namespace dexforge::app {

// Failure of one pipeline stage, carrying the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PipelineConfig {
  std::filesystem::path skeleton_path;
  std::filesystem::path catalog_path;
  std::optional<std::filesystem::path> data_root;
  std::vector<pipeline::DemoScript> demos;
  double marker_sigma = 0.002;  // m
  rl::EnvConfig env;
  rl::PpoConfig ppo;
  // Initial-pose perturbation of the robustness evaluation, fraction of
  // object size.
  double eval_pose_offset = 0.1;
  bool stochastic_eval = true;
  int rollouts = 100;
  int annotate_rollouts = 10;
  annotation::VariationSpec variation{0.1, 0.0, 0.0, 0.0};
  int synth_count = 20;
  std::uint64_t seed = 1;
  int jobs = 1;

  // Paths resolve against `base_dir`; missing keys keep the defaults.
  static PipelineConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);
  // Shipped data files, the three scripted demos and default training.
  static PipelineConfig defaults();
  nlohmann::json to_json() const;
  // ConfigError naming the path when a referenced file is missing.
  void validate() const;
};

// Seed of a named pipeline stream derived from the configured seed.
enum class Stream : std::uint64_t { kNoise = 1, kTrain, kEval, kPerturbed, kAnnotate, kSynth };
std::uint64_t stream_seed(std::uint64_t seed, Stream s);

struct Resources {
  std::shared_ptr<const hand::HandSkeleton> skeleton;
  physics::ObjectCatalog catalog;
  static Resources load(const PipelineConfig& config);
};

struct Check {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double threshold = 0.0;
  nlohmann::json to_json() const;
};

struct DemoOptions {
  bool skip_train = false;
  bool zero_policy = false;
  // Policy used when training is skipped without the zero policy.
  std::optional<std::filesystem::path> policy;
};

struct CaseReport {
  std::string object;
  nlohmann::json stages;
  std::vector<Check> checks;
  double nominal_success = 0.0;
  double perturbed_success = 0.0;
  std::vector<dataset::Trajectory> annotated;
  bool passed() const;
  nlohmann::json to_json() const;
};

using Logger = std::function<void(const std::string&)>;

// Runs one scripted demo through every stage; StageError on failure.
CaseReport run_demo_case(const PipelineConfig& config, const Resources& resources,
                         const pipeline::DemoScript& script, const DemoOptions& options,
                         const Logger& log = {});

// Every configured demo; the report lists per-case stages and checks plus
// the overall verdict under "passed".
nlohmann::json run_demo(const PipelineConfig& config, const DemoOptions& options, const Logger& log = {});

// Policy actor from a checkpoint, or the zero residual when no path is given.
rl::Actor load_actor(const std::optional<std::filesystem::path>& policy, bool deterministic);

// Finger-force series of an annotated trajectory as an SVG line chart.
std::string finger_force_svg(const annotation::FingerForces& forces, const std::string& title);
// Reward and success curves as an SVG line chart.
std::string curves_svg(const std::vector<rl::CurvePoint>& curves, const std::string& title);

}  // namespace dexforge::app
