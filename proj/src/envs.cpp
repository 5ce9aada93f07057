#include "avc/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "avc/errors.hpp"

namespace avc {

EnvStep Env::reset() {
  t_ = 0;
  needs_reset_ = false;
  state_ = sample_initial();
  EnvStep out;
  out.observation = observe(state_);
  out.state = state_;
  return out;
}

EnvStep Env::step(std::size_t action) {
  if (needs_reset_) throw InputError("step() called on a finished episode; call reset()");
  if (action >= n_actions()) throw InputError("action out of range");
  const Outcome outcome = advance(action);
  state_ = outcome.next_state;
  ++t_;
  EnvStep out;
  out.observation = observe(state_);
  out.state = state_;
  out.reward = outcome.reward;
  out.terminal = outcome.terminal;
  out.timeout = !outcome.terminal && horizon() > 0 && t_ >= horizon();
  out.t = t_;
  needs_reset_ = out.terminal || out.timeout;
  return out;
}

Vector Env::observe(int) const { return Vector(); }

namespace {

std::size_t sample_index(const Eigen::Ref<const Vector>& probs, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  const auto n = probs.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    u -= probs(i);
    if (u < 0.0) return static_cast<std::size_t>(i);
  }
  // Round-off: fall back to the last state with positive mass.
  for (Eigen::Index i = n - 1; i >= 0; --i)
    if (probs(i) > 0.0) return static_cast<std::size_t>(i);
  return static_cast<std::size_t>(n - 1);
}

}  // namespace

TabularEnv::TabularEnv(std::string name, TabularMdp mdp, std::size_t horizon, std::uint64_t seed)
    : Env(seed), name_(std::move(name)), mdp_(std::move(mdp)), horizon_(horizon) {}

Vector TabularEnv::observe(int state) const {
  Vector obs = Vector::Zero(static_cast<Eigen::Index>(mdp_.n_states()));
  if (state >= 0) obs(state) = 1.0;
  return obs;
}

int TabularEnv::sample_initial() { return static_cast<int>(sample_index(mdp_.initial(), rng_)); }

TabularEnv::Outcome TabularEnv::advance(std::size_t action) {
  const auto s = static_cast<std::size_t>(state_);
  const auto row = mdp_.transition().row(mdp_.row(s, action)).transpose();
  const auto next = sample_index(row, rng_);
  return {static_cast<int>(next), mdp_.reward(s, action), false};
}

TabularMdp two_state_mdp(double gamma) {
  Matrix transition(4, 2);
  transition << 0, 1,  // state 0, top
      0, 1,            // state 0, bottom
      1, 0,            // state 1, top
      1, 0;            // state 1, bottom
  Matrix reward(2, 2);
  reward << 1, -1, -1, 1;
  Vector initial(2);
  initial << 1, 0;
  return TabularMdp(transition, reward, gamma, initial);
}

std::unique_ptr<TabularEnv> two_state_env(double gamma, std::size_t horizon, std::uint64_t seed) {
  return std::make_unique<TabularEnv>("two_state", two_state_mdp(gamma), horizon, seed);
}

SoftmaxPolicy two_state_policy(double theta) {
  Matrix features(4, 1);
  features << 1, 0, 1, 0;
  return SoftmaxPolicy(2, 2, features, Vector::Constant(1, theta));
}

namespace {

constexpr int kMoves[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1},
                              {0, 1},   {1, -1}, {1, 0},  {1, 1}};

}  // namespace

TabularMdp discrete_reacher_mdp(double gamma) {
  constexpr auto side = static_cast<int>(kReacherSide);
  constexpr Eigen::Index S = side * side;
  constexpr Eigen::Index A = 8;
  Matrix transition = Matrix::Zero(S * A, S);
  Matrix reward = Matrix::Constant(S, A, -1.0);
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const Eigen::Index s = r * side + c;
      for (Eigen::Index a = 0; a < A; ++a) {
        if (static_cast<std::size_t>(s) == kReacherCenter) {
          transition.row(s * A + a).setConstant(1.0 / static_cast<double>(S));
          reward(s, a) = 0.0;
          continue;
        }
        const int nr = std::clamp(r + kMoves[a][0], 0, side - 1);
        const int nc = std::clamp(c + kMoves[a][1], 0, side - 1);
        transition(s * A + a, nr * side + nc) = 1.0;
      }
    }
  }
  Vector initial = Vector::Constant(S, 1.0 / static_cast<double>(S));
  return TabularMdp(transition, reward, gamma, initial);
}

DiscreteReacher::DiscreteReacher(double gamma, bool one_hot, std::uint64_t seed)
    : TabularEnv("discrete_reacher", discrete_reacher_mdp(gamma), 500, seed), one_hot_(one_hot) {}

Vector DiscreteReacher::observe(int state) const {
  if (one_hot_) return TabularEnv::observe(state);
  Vector obs(2);
  const double half = (static_cast<double>(kReacherSide) - 1.0) / 2.0;
  obs(0) = (state / static_cast<int>(kReacherSide)) / half - 1.0;
  obs(1) = (state % static_cast<int>(kReacherSide)) / half - 1.0;
  return obs;
}

std::unique_ptr<DiscreteReacher> discrete_reacher_env(double gamma, bool one_hot,
                                                      std::uint64_t seed) {
  return std::make_unique<DiscreteReacher>(gamma, one_hot, seed);
}

namespace {

constexpr double kGravity = 9.8;
constexpr double kCartMass = 1.0;
constexpr double kPoleMass = 0.1;
constexpr double kTotalMass = kCartMass + kPoleMass;
constexpr double kHalfLength = 0.5;
constexpr double kPoleMassLength = kPoleMass * kHalfLength;
constexpr double kForceMag = 10.0;
constexpr double kTau = 0.02;
constexpr double kAngleLimit = 12.0 * 2.0 * std::numbers::pi / 360.0;
constexpr double kPositionLimit = 2.4;

}  // namespace

CartPole::CartPole(std::uint64_t seed) : Env(seed) {}

Vector CartPole::observe(int) const { return physical_; }

Eigen::Vector4d CartPole::integrate(const Eigen::Vector4d& state, double force) {
  const double x_dot = state(1);
  const double angle = state(2);
  const double angle_dot = state(3);
  const double cos_a = std::cos(angle);
  const double sin_a = std::sin(angle);
  const double temp = (force + kPoleMassLength * angle_dot * angle_dot * sin_a) / kTotalMass;
  const double angle_acc =
      (kGravity * sin_a - cos_a * temp) /
      (kHalfLength * (4.0 / 3.0 - kPoleMass * cos_a * cos_a / kTotalMass));
  const double x_acc = temp - kPoleMassLength * angle_acc * cos_a / kTotalMass;
  Eigen::Vector4d next;
  next << state(0) + kTau * x_dot, x_dot + kTau * x_acc, angle + kTau * angle_dot,
      angle_dot + kTau * angle_acc;
  return next;
}

int CartPole::sample_initial() {
  std::uniform_real_distribution<double> unit(-0.05, 0.05);
  for (int i = 0; i < 4; ++i) physical_(i) = unit(rng_);
  return -1;
}

CartPole::Outcome CartPole::advance(std::size_t action) {
  physical_ = integrate(physical_, action == 1 ? kForceMag : -kForceMag);
  const bool terminal = std::abs(physical_(0)) > kPositionLimit || std::abs(physical_(2)) > kAngleLimit;
  return {-1, 1.0, terminal};
}

std::unique_ptr<CartPole> cartpole_env(std::uint64_t seed) { return std::make_unique<CartPole>(seed); }

std::unique_ptr<Env> make_env(std::string_view name, double gamma, std::uint64_t seed) {
  if (name == "two_state") return two_state_env(gamma, 100, seed);
  if (name == "discrete_reacher") return discrete_reacher_env(gamma, false, seed);
  if (name == "cartpole") return cartpole_env(seed);
  throw InputError("unknown environment '" + std::string(name) + "'");
}

}  // namespace avc
