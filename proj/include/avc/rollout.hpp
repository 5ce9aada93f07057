#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "avc/envs.hpp"
#include "avc/exact_oracle.hpp"

namespace avc {

/// One on-policy step (S_t, A_t, R_{t+1}, S_{t+1}) with its in-episode index t.
struct Transition {
  std::size_t episode = 0;
  std::size_t t = 0;
  int state = -1;
  Vector observation;
  std::size_t action = 0;
  double reward = 0.0;
  int next_state = -1;
  Vector next_observation;
  bool terminal = false;
  bool timeout = false;

  bool ends_episode() const { return terminal || timeout; }
};

/// Ordered on-policy transitions with episode segment boundaries.
class Buffer {
 public:
  explicit Buffer(std::size_t capacity) : capacity_(capacity) { items_.reserve(capacity); }

  /// Throws InputError when full or when t does not increase within an episode.
  void push(Transition transition);
  void clear();

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  bool full() const { return items_.size() == capacity_; }

  const Transition& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  /// Index of the first transition of every episode segment in the buffer.
  const std::vector<std::size_t>& episode_starts() const { return starts_; }
  std::size_t n_trajectories() const { return starts_.size(); }
  /// Bumped by clear(); lets callers assert a buffer is never reused.
  std::uint64_t generation() const { return generation_; }

 private:
  std::size_t capacity_;
  std::vector<Transition> items_;
  std::vector<std::size_t> starts_;
  std::uint64_t generation_ = 0;
};

/// Chooses an action from the current observation / tabular state.
using Sampler = std::function<std::size_t(const Vector& observation, int state, Rng& rng)>;

Sampler softmax_sampler(const SoftmaxPolicy& policy);
std::size_t sample_categorical(const Eigen::Ref<const Vector>& probs, Rng& rng);

/// Runs an env continuously across buffer fills, restarting episodes on
/// terminal or timeout, as the batch actor-critic loop does.
class Collector {
 public:
  Collector(Env& env, std::uint64_t seed);

  /// Exactly n transitions under `sampler`.
  Buffer collect(const Sampler& sampler, std::size_t n);
  /// Appends to `buffer` until it is full.
  void fill(const Sampler& sampler, Buffer& buffer);

  std::size_t episodes_finished() const { return finished_; }
  std::vector<double> take_finished_returns();
  Rng& rng() { return rng_; }

 private:
  Env& env_;
  Rng rng_;
  EnvStep current_;
  bool started_ = false;
  std::size_t episode_ = 0;
  std::size_t finished_ = 0;
  double running_return_ = 0.0;
  std::vector<double> finished_returns_;
};

/// n transitions from a fresh reset of `env`.
Buffer collect(Env& env, const Sampler& sampler, std::size_t n, Rng& rng);

/// k trajectories, each started from reset and cut after `length` steps (or
/// earlier on terminal/timeout).
Buffer collect_trajectories(Env& env, const Sampler& sampler, std::size_t k, std::size_t length,
                            Rng& rng);

/// Empirical state frequencies d_D(s) over all n_states (unvisited states are 0).
StateWeighting sampling_distribution(const Buffer& buffer, std::size_t n_states);

/// |D| / k, the common trajectory length of an equal-length buffer.
double nominal_horizon(const Buffer& buffer);

struct CorrectionEstimate {
  StateWeighting correction;   // 0 on unvisited states
  std::vector<bool> visited;
  double horizon = 0.0;        // the T used in the (1 - gamma) T prefactor
};

/// c_D(s) = (1 - gamma) T sum_i gamma^{t_i} 1[S_i = s] / sum_i 1[S_i = s].
/// T defaults to the nominal horizon |D| / k.
CorrectionEstimate buffer_correction(const Buffer& buffer, double gamma, std::size_t n_states,
                                     std::optional<double> horizon = std::nullopt);

/// Per-transition weight T (1 - gamma) gamma^{t_i}.
std::vector<double> kt_weighting(const Buffer& buffer, double gamma,
                                 std::optional<double> horizon = std::nullopt);

/// Mean of per-transition `weights` grouped by state; 0 on unvisited states.
Vector per_state_mean(const Buffer& buffer, std::span<const double> weights, std::size_t n_states);

struct SampleSize {
  std::size_t trajectories;  // k
  std::size_t length;        // T
};

/// Smallest k >= (2 / eps^2) log(|S| / delta) and T >= log(eps / 2) / log(gamma), T >= 1.
SampleSize sample_size_bound(double epsilon, double delta, std::size_t n_states, double gamma);

enum class EmphasisScheme { uncorrected, gamma_t, averaging_buffer, averaging_model };

/// State emphasis d_D(s) times the scheme's correction. `model_correction`
/// supplies c(s) for averaging_model.
Vector emphasis(const Buffer& buffer, std::size_t n_states, double gamma, EmphasisScheme scheme,
                const Vector* model_correction = nullptr,
                std::optional<double> horizon = std::nullopt);

struct BiasVariance {
  double squared_bias = 0.0;  // sum_s (mean emphasis(s) - target(s))^2
  double variance = 0.0;      // mean over states of the across-buffer variance
};

BiasVariance bias_variance(std::span<const Vector> emphases, const Vector& target);

struct BufferSpec {
  std::size_t size = 2000;
  /// 0: one continuous run from reset; otherwise size / trajectories steps per
  /// freshly reset trajectory.
  std::size_t trajectories = 0;
};

/// Collects `n_buffers` buffers on a tabular env under `sampler` and measures
/// the emphasis of `scheme` against the oracle d_{pi,gamma}.
BiasVariance emphasis_bias_variance(TabularEnv& env, const SoftmaxPolicy& policy,
                                    EmphasisScheme scheme, std::size_t n_buffers,
                                    const BufferSpec& spec, Rng& rng,
                                    const Vector* model_correction = nullptr);

/// Paired bootstrap over buffers: the fraction of resamples where scheme A has
/// strictly smaller squared bias (resp. variance) than scheme B.
struct OrderingConfidence {
  BiasVariance a;
  BiasVariance b;
  double bias_confidence = 0.0;
  double variance_confidence = 0.0;
};

OrderingConfidence paired_ordering(std::span<const Vector> emphases_a,
                                   std::span<const Vector> emphases_b, const Vector& target,
                                   std::size_t resamples, Rng& rng);

struct BiasRatio {
  double ratio = 0.0;
  bool exact_match = false;  // denominator was zero
};

/// sum_i |c(s_i) d_D(s_i) - d_gamma(s_i)| / sum_i |d_D(s_i) - d_gamma(s_i)|,
/// summed over every transition of every buffer. `corrections[b]` is the
/// per-state correction used with buffers[b].
BiasRatio bias_ratio(std::span<const Buffer> buffers, std::span<const Vector> corrections,
                     const Vector& discounted_dist);

/// CSV columns: episode,t,state,action,reward,terminal,timeout.
void write_buffer_csv(std::ostream& out, const Buffer& buffer);
/// Observations are not stored; loaded transitions carry state ids only and
/// next_state is inferred from the following row of the same episode.
Buffer read_buffer_csv(std::istream& in);

}  // namespace avc
