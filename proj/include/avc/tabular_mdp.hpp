#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include <Eigen/Dense>

namespace avc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kConstructionTol = 1e-12;
inline constexpr double kArithmeticTol = 1e-10;

/// Finite MDP with dense transition tensor P[s][a][s'], rewards r[s][a],
/// discount and initial distribution. Immutable after construction.
class TabularMdp {
 public:
  /// `transition` has n_states * n_actions rows (row index s * n_actions + a)
  /// and n_states columns. Throws InputError when any invariant fails.
  TabularMdp(Matrix transition, Matrix reward, double gamma, Vector initial);

  std::size_t n_states() const { return static_cast<std::size_t>(reward_.rows()); }
  std::size_t n_actions() const { return static_cast<std::size_t>(reward_.cols()); }
  double gamma() const { return gamma_; }

  double prob(std::size_t s, std::size_t a, std::size_t next) const {
    return transition_(row(s, a), next);
  }
  double reward(std::size_t s, std::size_t a) const { return reward_(s, a); }
  const Matrix& transition() const { return transition_; }
  const Matrix& rewards() const { return reward_; }
  const Vector& initial() const { return initial_; }

  Eigen::Index row(std::size_t s, std::size_t a) const {
    return static_cast<Eigen::Index>(s * n_actions() + a);
  }

  TabularMdp with_gamma(double gamma) const;
  TabularMdp with_initial(Vector initial) const;

 private:
  Matrix transition_;
  Matrix reward_;
  double gamma_;
  Vector initial_;
};

/// Plain-text table format:
///   n_states n_actions gamma
///   rho[0] ... rho[S-1]
///   S lines of A rewards
///   S*A lines of S transition probabilities (row s*A+a)
/// Lines starting with '#' are comments.
TabularMdp read_mdp(std::istream& in);
void write_mdp(std::ostream& out, const TabularMdp& mdp);

/// Softmax policy over linear features: logits(s, a) = theta . phi(s, a).
class SoftmaxPolicy {
 public:
  /// `features` has n_states * n_actions rows and one column per parameter.
  SoftmaxPolicy(std::size_t n_states, std::size_t n_actions, Matrix features, Vector theta);

  /// One-hot feature per (state, action); theta defaults to zero.
  static SoftmaxPolicy tabular(std::size_t n_states, std::size_t n_actions);
  static SoftmaxPolicy tabular(std::size_t n_states, std::size_t n_actions, Vector theta);

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  std::size_t n_params() const { return static_cast<std::size_t>(theta_.size()); }
  const Vector& theta() const { return theta_; }
  const Matrix& features() const { return features_; }

  SoftmaxPolicy with_theta(Vector theta) const;

  Vector probs(std::size_t state) const;
  /// Gradient of log pi(action | state) with respect to theta.
  Vector log_prob_grad(std::size_t state, std::size_t action) const;
  /// S x A table of action probabilities.
  Matrix prob_table() const;

 private:
  void check_state(std::size_t state) const;

  std::size_t n_states_;
  std::size_t n_actions_;
  Matrix features_;
  Vector theta_;
};

/// p_pi(s'|s) = sum_a pi(a|s) P(s'|s,a).
Matrix transition_under_policy(const TabularMdp& mdp, const SoftmaxPolicy& policy);
/// r_pi(s) = sum_a pi(a|s) r(s,a).
Vector reward_under_policy(const TabularMdp& mdp, const SoftmaxPolicy& policy);

/// Random MDP with strictly positive transitions (hence irreducible under any
/// softmax policy). Used by tests and the oracle experiment.
template <class Rng>
TabularMdp random_mdp(std::size_t n_states, std::size_t n_actions, double gamma, Rng& rng);

}  // namespace avc

#include "avc/detail/random_mdp.hpp"
