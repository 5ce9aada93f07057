#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "avc/tabular_mdp.hpp"

namespace avc {

using Rng = std::mt19937_64;

/// Result of one environment step. `t` counts steps since the last reset,
/// including this one. A timeout cuts the episode without terminal semantics.
struct EnvStep {
  Vector observation;
  int state = -1;  // tabular state id, -1 for continuous envs
  double reward = 0.0;
  bool terminal = false;
  bool timeout = false;
  std::size_t t = 0;
};

/// Episodic simulator. Each instance owns its mutable state and RNG; create
/// one per worker.
class Env {
 public:
  virtual ~Env() = default;

  virtual std::string name() const = 0;
  virtual std::size_t observation_dim() const = 0;
  virtual std::size_t n_actions() const = 0;
  /// Steps after which an episode is cut with `timeout`; 0 means never.
  virtual std::size_t horizon() const = 0;

  /// Starts a new episode and returns the initial observation.
  EnvStep reset();
  EnvStep step(std::size_t action);

  void seed(std::uint64_t seed) { rng_.seed(seed); }

  /// Tabular view when the dynamics are finite; nullptr otherwise.
  virtual const TabularMdp* tabular() const { return nullptr; }
  /// Observation for a tabular state id.
  virtual Vector observe(int state) const;

  int state() const { return state_; }
  std::size_t t() const { return t_; }

 protected:
  explicit Env(std::uint64_t seed) : rng_(seed) {}

  /// Draws the start state (tabular id or -1) and fills the continuous state.
  virtual int sample_initial() = 0;
  /// Advances the dynamics; returns (next state, reward, terminal).
  struct Outcome {
    int next_state;
    double reward;
    bool terminal;
  };
  virtual Outcome advance(std::size_t action) = 0;

  Rng rng_;
  int state_ = -1;
  std::size_t t_ = 0;
  bool needs_reset_ = true;
};

/// Tabular env driven directly by a TabularMdp: samples rho, then P[s][a].
class TabularEnv : public Env {
 public:
  TabularEnv(std::string name, TabularMdp mdp, std::size_t horizon, std::uint64_t seed = 0);

  std::string name() const override { return name_; }
  std::size_t observation_dim() const override { return mdp_.n_states(); }
  std::size_t n_actions() const override { return mdp_.n_actions(); }
  std::size_t horizon() const override { return horizon_; }
  const TabularMdp* tabular() const override { return &mdp_; }
  /// One-hot encoding of the state id.
  Vector observe(int state) const override;

 protected:
  int sample_initial() override;
  Outcome advance(std::size_t action) override;

 private:
  std::string name_;
  TabularMdp mdp_;
  std::size_t horizon_;
};

/// Deterministic two-state loop: both actions move to the other state; the
/// agent always starts in state 0 ("state 1"). Rewards r(0,top)=+1,
/// r(0,bottom)=-1, r(1,top)=-1, r(1,bottom)=+1. Action 0 is "top".
std::unique_ptr<TabularEnv> two_state_env(double gamma = 0.9, std::size_t horizon = 100,
                                          std::uint64_t seed = 0);
TabularMdp two_state_mdp(double gamma = 0.9);
/// The aliased policy of the two-state loop: one scalar theta shared by both
/// states, pi(top) = e^theta / (1 + e^theta).
SoftmaxPolicy two_state_policy(double theta);

inline constexpr std::size_t kReacherSide = 9;
inline constexpr std::size_t kReacherCenter = 4 * kReacherSide + 4;

/// 9x9 grid, eight king moves clamped at the walls, -1 per step except 0 at
/// the center; the center relocates the agent uniformly over all cells.
/// Observation is the normalized (row, col) in [-1, 1]^2, or a one-hot id.
class DiscreteReacher : public TabularEnv {
 public:
  DiscreteReacher(double gamma, bool one_hot, std::uint64_t seed = 0);
  std::size_t observation_dim() const override { return one_hot_ ? kReacherSide * kReacherSide : 2; }
  Vector observe(int state) const override;

 private:
  bool one_hot_;
};

TabularMdp discrete_reacher_mdp(double gamma = 0.99);
std::unique_ptr<DiscreteReacher> discrete_reacher_env(double gamma = 0.99, bool one_hot = false,
                                                      std::uint64_t seed = 0);

/// Classic cart-pole balance task (Barto, Sutton & Anderson dynamics, Euler
/// integration at 0.02 s). +1 reward per step, terminal when |x| > 2.4 or
/// |angle| > 12 degrees, timeout after 500 steps.
class CartPole : public Env {
 public:
  explicit CartPole(std::uint64_t seed = 0);

  std::string name() const override { return "cartpole"; }
  std::size_t observation_dim() const override { return 4; }
  std::size_t n_actions() const override { return 2; }
  std::size_t horizon() const override { return 500; }
  Vector observe(int state) const override;

  /// Overrides the physical state (x, x_dot, angle, angle_dot).
  void set_physical_state(const Eigen::Vector4d& state) { physical_ = state; }
  const Eigen::Vector4d& physical_state() const { return physical_; }
  /// One Euler step with an explicit force; exposed for dynamics tests.
  static Eigen::Vector4d integrate(const Eigen::Vector4d& state, double force);

 protected:
  int sample_initial() override;
  Outcome advance(std::size_t action) override;

 private:
  Eigen::Vector4d physical_ = Eigen::Vector4d::Zero();
};

std::unique_ptr<CartPole> cartpole_env(std::uint64_t seed = 0);

/// Builds an env by CLI name: two_state, discrete_reacher, cartpole.
std::unique_ptr<Env> make_env(std::string_view name, double gamma, std::uint64_t seed);

}  // namespace avc
