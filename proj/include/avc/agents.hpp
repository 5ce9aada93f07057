#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "avc/neural.hpp"

namespace avc {

/// How each sample's policy-gradient term is weighted.
///   uncorrected      1
///   gamma_t          T (1 - gamma) gamma^{t_i}
///   averaging_net    f_sigma(S_i), the learned correction
///   averaging_oracle c_pi(S_i) from the exact oracle (tabular envs only)
enum class WeightingScheme { uncorrected, gamma_t, averaging_net, averaging_oracle };

std::string_view to_string(WeightingScheme scheme);
WeightingScheme parse_scheme(std::string_view name);

enum class Algorithm { bac, ppo };

struct AgentConfig {
  WeightingScheme scheme = WeightingScheme::uncorrected;
  Algorithm algorithm = Algorithm::bac;
  double gamma = 0.995;
  std::size_t buffer_size = 64;
  double correction_lr = 1e-3;  // alpha_1
  double policy_lr = 8e-4;      // alpha_2
  double value_lr = 8e-4;       // alpha_3
  std::size_t correction_steps = 10;  // M
  std::size_t value_steps = 1;
  double scale = 10.0;
  /// T in the gamma_t weight and in rescaling f_sigma; 0 uses the env horizon.
  std::size_t horizon = 0;
  std::size_t policy_hidden = 32;
  std::size_t critic_hidden = 64;
  bool shared_correction = true;
  OptimizerKind optimizer = OptimizerKind::adam;
  AdvantageConfig advantage{AdvantageMode::td, 0.97};
  bool normalize_advantages = false;
  // PPO only.
  double clip = 0.2;
  double target_kl = 0.01;
  std::size_t policy_epochs = 80;
  std::size_t value_epochs = 80;
  std::uint64_t seed = 0;

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  /// Default hyperparameters for batch actor-critic and PPO.
  static AgentConfig bac_defaults(WeightingScheme scheme);
  static AgentConfig ppo_defaults(WeightingScheme scheme);
};

/// Policy, critic and (optionally separate) correction networks with their
/// optimizers. With a shared correction the critic has two outputs: value
/// (head 0) and correction (head 1) on top of common hidden layers.
class ActorCritic {
 public:
  ActorCritic(std::size_t observation_dim, std::size_t n_actions, const AgentConfig& cfg);

  Mlp policy;
  Mlp critic;
  std::optional<Mlp> correction;  // set only when not shared

  Optimizer policy_opt;
  Optimizer value_opt;
  Optimizer correction_opt;

  Vector action_probs(const Vector& observation) const;
  Sampler sampler() const;

  /// Raw f_sigma on a batch of observations.
  Vector correction_output(const Matrix& observations) const;
  LossGrad correction_loss(const Buffer& buffer, double gamma, double scale) const;
  void correction_step(const Vector& grad);

  static constexpr Eigen::Index kValueHead = 0;
  static constexpr Eigen::Index kCorrectionHead = 1;
};

struct UpdateStats {
  double correction_loss = std::numeric_limits<double>::quiet_NaN();
  double value_loss = 0.0;
  double policy_objective = 0.0;
  std::size_t policy_iterations = 0;
  double kl = 0.0;
  double first_epoch_max_ratio_error = 0.0;  // PPO: |e - 1| at epoch start
};

/// Per-sample policy-gradient weights under `cfg.scheme`. For averaging_oracle,
/// `oracle_correction` holds c_pi by state id.
Vector sample_weights(const ActorCritic& agent, const Buffer& buffer, const AgentConfig& cfg,
                      double horizon, const Vector* oracle_correction = nullptr);

/// One batch actor-critic update: M correction steps, one policy ascent step
/// on (1/|D|) sum_i w_i grad log pi(A_i|S_i) H_i, then value descent. Clears
/// the buffer.
UpdateStats bac_update(ActorCritic& agent, Buffer& buffer, const AgentConfig& cfg, double horizon,
                       const Vector* oracle_correction = nullptr);

/// One PPO update on the weighted clipped surrogate with KL early stopping,
/// then value regression on bootstrapped returns. Clears the buffer.
UpdateStats ppo_update(ActorCritic& agent, Buffer& buffer, const AgentConfig& cfg, double horizon,
                       const Vector* oracle_correction = nullptr);

/// Tabular actor with exact action values ("true Q-values"). The gradient
/// uses the all-actions form (1/|D|) sum_i w_i sum_a grad pi(a|S_i) q(S_i, a).
struct TabularActor {
  SoftmaxPolicy policy;
  std::optional<Mlp> correction;  // input: one-hot state
  std::optional<Optimizer> correction_opt;
};

TabularActor make_tabular_actor(const SoftmaxPolicy& initial, const AgentConfig& cfg, Rng& rng);

/// Gradient estimate used by the tabular update (before the step is taken).
Vector tabular_gradient(const TabularActor& actor, const TabularMdp& mdp, const Buffer& buffer,
                        const AgentConfig& cfg, double horizon);

UpdateStats tabular_bac_update(TabularActor& actor, const TabularMdp& mdp, Buffer& buffer,
                               const AgentConfig& cfg, double horizon);

/// The exact tabular policy induced by a policy network on a tabular env.
SoftmaxPolicy tabularize(const Env& env, const Mlp& policy);

/// Per-state correction estimate from f_sigma: f(s) (1 - gamma) T / scale.
Vector model_correction(const ActorCritic& agent, const Env& env, const AgentConfig& cfg,
                        double horizon);

struct CurvePoint {
  std::size_t step = 0;
  double undiscounted_return = 0.0;
  double discounted_return = 0.0;
  double emphasis_bias = std::numeric_limits<double>::quiet_NaN();
  double correction_loss = std::numeric_limits<double>::quiet_NaN();
  double top_probability = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<CurvePoint> curve;
  bool diverged = false;
  std::string error;
};

struct TrainOptions {
  std::size_t total_steps = 100000;
  std::size_t eval_interval = 5000;
  std::size_t eval_episodes = 10;
  /// Called at every evaluation point with the current agent.
  std::function<void(std::size_t step, const ActorCritic& agent)> on_checkpoint;
};

/// Runs the on-policy loop for cfg.algorithm; evaluation uses a separate env
/// instance and frozen stochastic policy. Deterministic given cfg.seed.
TrainResult train(Env& env, Env& eval_env, const AgentConfig& cfg, const TrainOptions& options,
                  ActorCritic* agent_out = nullptr);

/// The two-state experiment with exact action values: records pi(top) after
/// every update.
TrainResult train_tabular(TabularEnv& env, const SoftmaxPolicy& initial, const AgentConfig& cfg,
                          std::size_t n_updates);

struct EpisodeReturns {
  double undiscounted = 0.0;
  double discounted = 0.0;
};

/// Mean returns over `episodes` rollouts of `sampler`.
EpisodeReturns evaluate(Env& env, const Sampler& sampler, std::size_t episodes, double gamma,
                        Rng& rng);

}  // namespace avc
