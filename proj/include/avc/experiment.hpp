#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "avc/agents.hpp"

namespace avc {

/// A registered experiment and the claim it reproduces.
struct ExperimentInfo {
  std::string name;
  std::string anchor;
  std::string description;
};

const std::vector<ExperimentInfo>& experiment_registry();
const ExperimentInfo& find_experiment(const std::string& name);

struct ExperimentSpec {
  std::string name;
  std::string env;
  std::vector<WeightingScheme> schemes;
  std::vector<double> gammas;
  std::vector<std::uint64_t> seeds;
  /// Updates for counterexample, environment steps otherwise.
  std::size_t steps = 0;
  /// Agent hyperparameter overrides by AgentConfig field name.
  std::map<std::string, std::string> overrides;
  std::filesystem::path out = "out";

  /// Throws UsageError on an unknown name, empty seeds or schemes.
  void validate() const;
};

/// Registered defaults for `name`.
ExperimentSpec default_spec(const std::string& name);

/// Applies one key=value setting. Keys env, schemes, gammas, seeds, steps and
/// out address the spec; anything else is an agent override.
void apply_setting(ExperimentSpec& spec, const std::string& key, const std::string& value);

/// Flat key=value lines, '#' starts a comment.
void apply_config(ExperimentSpec& spec, std::istream& in);

/// Sets the AgentConfig field named `key`; ConfigError if there is none.
void apply_override(AgentConfig& cfg, const std::string& key, const std::string& value);

/// FNV-1a over the canonical spec text (output path excluded).
std::string config_hash(const ExperimentSpec& spec);
std::string canonical_text(const ExperimentSpec& spec);

/// AVC_WORKERS, else the hardware concurrency, at least 1.
std::size_t worker_count();

/// Runs fn(0..n-1) on up to `workers` threads; results land in index order.
template <class T>
std::vector<T> parallel_map(std::size_t n, std::size_t workers, const std::function<T(std::size_t)>& fn);

/// Agent settings used by an experiment before overrides.
AgentConfig experiment_agent_config(const ExperimentSpec& spec, WeightingScheme scheme, double gamma,
                                    std::uint64_t seed);

// ---- studies shared by run() and the acceptance suite ----

struct CounterexampleRun {
  WeightingScheme scheme{};
  double gamma = 0.0;
  std::uint64_t seed = 0;
  TrainResult result;
  double initial_top = 0.0;
  double final_top = 0.0;
  /// First update with pi(top) >= 0.95; 0 when never reached.
  std::size_t first_hit = 0;
};

CounterexampleRun counterexample_run(const AgentConfig& cfg, std::size_t updates);

struct RatioPoint {
  std::size_t step = 0;
  double mean_ratio = 0.0;  // mean of per-buffer ratios
  double pooled_ratio = 0.0;
};

struct EmphasisStudy {
  OrderingConfidence ordering;  // a = averaging (trained net), b = gamma_t
  Vector target;
  Vector mean_averaging;
  Vector mean_gamma_t;
};

struct BiasStudyOptions {
  bool one_hot = true;
  std::size_t train_steps = 40000;
  std::size_t checkpoints = 8;
  std::size_t ratio_buffers = 10;
  std::size_t emphasis_buffers = 30;
  std::size_t buffer_size = 2000;
  std::size_t episode_length = 500;
  std::size_t fit_buffers = 100;
  std::size_t resamples = 2000;
};

struct BiasStudy {
  std::vector<RatioPoint> ratios;
  EmphasisStudy emphasis;
  TrainResult training;
};

/// Trains an averaging_net BAC agent on discrete Reacher, measures the bias
/// ratio of its correction at each checkpoint, then freezes the policy and
/// compares averaging and gamma_t emphases over fresh buffers.
BiasStudy bias_study(const AgentConfig& cfg, const BiasStudyOptions& options);

struct CartpoleRun {
  WeightingScheme scheme{};
  std::uint64_t seed = 0;
  TrainResult result;
  double final_return = 0.0;
};

CartpoleRun cartpole_run(const AgentConfig& cfg, std::size_t steps, std::size_t eval_interval);

struct NonInferiority {
  double mean_corrected = 0.0;
  double mean_baseline = 0.0;
  double pooled_se = 0.0;
  bool passed = false;
};

/// mean(corrected) >= mean(baseline) - sqrt(s_c^2 / n_c + s_b^2 / n_b).
NonInferiority non_inferiority(const std::vector<double>& corrected, const std::vector<double>& baseline);

struct CheckResult {
  std::string id;
  int criterion = 0;  // acceptance id, 0 when none
  bool passed = false;
  double metric = 0.0;
  double threshold = 0.0;
  std::string detail;
};

/// Exact identities on the two-state env and random MDPs.
std::vector<CheckResult> oracle_checks(std::uint64_t seed);

// ---- harness ----

struct RunStatus {
  bool ok = true;
  std::string error;
  std::vector<std::string> artifacts;
};

/// Writes CSV artifacts and manifest.json under spec.out.
RunStatus run(const ExperimentSpec& spec);

/// Report keyed by acceptance-criterion id; UsageError if artifacts are missing.
nlohmann::json verify(const std::string& name, const std::filesystem::path& dir);

std::string code_version();

}  // namespace avc

#include "avc/detail/parallel_map.hpp"
