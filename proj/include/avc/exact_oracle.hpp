#pragma once

// Dynamic-programming ground truth for finite MDPs: stationary distributions,
// action values, recurrence times, the exact averaging correction and the
// policy gradients it is compared against. Every learned quantity in the
// project is checked against something in this header.

#include <string_view>

#include "avc/tabular_mdp.hpp"

namespace avc {

enum class WeightKind { distribution, correction, emphasis };

/// Nonnegative weights over states.
struct StateWeighting {
  Vector values;
  WeightKind kind = WeightKind::distribution;

  double operator()(Eigen::Index s) const { return values(s); }
  Eigen::Index size() const { return values.size(); }
};

enum class GradientScheme { true_discounted, mismatched, averaging_corrected, gamma_t_corrected };

std::string_view to_string(GradientScheme scheme);

struct GradientEstimate {
  Vector values;
  GradientScheme scheme = GradientScheme::true_discounted;
};

/// Throws ModelError unless the positive-entry graph of `p` is strongly connected.
void require_irreducible(const Matrix& p);
bool is_irreducible(const Matrix& p);

/// d_pi: solves d (P - I) = 0 with sum(d) = 1.
StateWeighting undiscounted_stationary(const Matrix& p_pi);

/// d_{pi,gamma} = (1 - gamma) sum_t gamma^t rho P^t, via (I - gamma P^T) x = (1 - gamma) rho.
StateWeighting discounted_stationary(const Matrix& p_pi, const Vector& initial, double gamma);

/// (1 - gamma) sum_{t < horizon} gamma^t rho P^t. Does not renormalize.
Vector truncated_discounted_distribution(const Matrix& p_pi, const Vector& initial, double gamma,
                                         std::size_t horizon);

/// v_{pi,gamma}(s).
Vector state_values(const TabularMdp& mdp, const SoftmaxPolicy& policy);
/// q_{pi,gamma}(s, a) as an S x A table.
Matrix action_values(const TabularMdp& mdp, const SoftmaxPolicy& policy);

/// E[tau+_s(s)] from mean first-passage times; does not go through d_pi.
Vector expected_recurrence_time(const Matrix& p_pi);

/// c_pi(s) = d_{pi,gamma}(s) / d_pi(s).
StateWeighting averaging_correction_exact(const TabularMdp& mdp, const SoftmaxPolicy& policy);

/// J(pi) = (1 - gamma) rho^T v_{pi,gamma}.
double discounted_objective(const TabularMdp& mdp, const SoftmaxPolicy& policy);

/// sum_s d_{pi,gamma}(s) sum_a grad pi(a|s) q(s, a).
GradientEstimate true_policy_gradient(const TabularMdp& mdp, const SoftmaxPolicy& policy);

/// sum_s d_pi(s) c_pi(s) sum_a grad pi(a|s) q(s, a); the corrected
/// undiscounted-sampling route, which must agree with true_policy_gradient.
GradientEstimate corrected_expectation_gradient(const TabularMdp& mdp, const SoftmaxPolicy& policy);

/// sum_s d_pi(s) sum_a pi(a|s) grad log pi(a|s) q(s, a); biased, not a gradient of J.
GradientEstimate mismatched_gradient(const TabularMdp& mdp, const SoftmaxPolicy& policy);

/// Per-state sum_a grad pi(a|s) q(s, a), one column per state (n_params x S).
Matrix per_state_gradient(const SoftmaxPolicy& policy, const Matrix& q);

double tv_distance(const Vector& p, const Vector& q);
double max_norm_distance(const Vector& p, const Vector& q);

}  // namespace avc
