#include "avc/exact_oracle.hpp"

#include <cmath>
#include <deque>
#include <string>

#include "avc/errors.hpp"

namespace avc {

std::string_view to_string(GradientScheme scheme) {
  switch (scheme) {
    case GradientScheme::true_discounted: return "true_discounted";
    case GradientScheme::mismatched: return "mismatched";
    case GradientScheme::averaging_corrected: return "averaging_corrected";
    case GradientScheme::gamma_t_corrected: return "gamma_t_corrected";
  }
  return "unknown";
}

namespace {

void check_square_stochastic(const Matrix& p) {
  if (p.rows() == 0 || p.rows() != p.cols()) throw InputError("transition matrix must be square");
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    if (std::abs(p.row(i).sum() - 1.0) > kArithmeticTol || (p.row(i).array() < 0.0).any())
      throw InputError("transition matrix row " + std::to_string(i) + " is not stochastic");
}

// Breadth-first closure from state 0 along edges (or reversed edges).
bool reaches_all(const Matrix& p, bool reversed) {
  const auto n = p.rows();
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  std::deque<Eigen::Index> frontier{0};
  seen[0] = true;
  Eigen::Index count = 1;
  while (!frontier.empty()) {
    const auto i = frontier.front();
    frontier.pop_front();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double w = reversed ? p(j, i) : p(i, j);
      if (w > 0.0 && !seen[static_cast<std::size_t>(j)]) {
        seen[static_cast<std::size_t>(j)] = true;
        ++count;
        frontier.push_back(j);
      }
    }
  }
  return count == n;
}

}  // namespace

bool is_irreducible(const Matrix& p) {
  check_square_stochastic(p);
  return reaches_all(p, false) && reaches_all(p, true);
}

void require_irreducible(const Matrix& p) {
  if (!is_irreducible(p)) throw ModelError("Markov chain is reducible");
}

StateWeighting undiscounted_stationary(const Matrix& p_pi) {
  require_irreducible(p_pi);
  const auto n = p_pi.rows();
  Matrix system = p_pi.transpose() - Matrix::Identity(n, n);
  system.row(n - 1).setOnes();
  Vector rhs = Vector::Zero(n);
  rhs(n - 1) = 1.0;
  Eigen::FullPivLU<Matrix> lu(system);
  if (lu.rank() < n) throw ModelError("stationary system is rank deficient");
  Vector d = lu.solve(rhs);
  // Round-off can leave tiny negatives on near-zero entries.
  d = d.cwiseMax(0.0);
  d /= d.sum();
  return {std::move(d), WeightKind::distribution};
}

StateWeighting discounted_stationary(const Matrix& p_pi, const Vector& initial, double gamma) {
  check_square_stochastic(p_pi);
  if (initial.size() != p_pi.rows()) throw InputError("initial distribution has wrong length");
  if (!(gamma > 0.0 && gamma < 1.0)) throw InputError("gamma must lie strictly inside (0, 1)");
  const auto n = p_pi.rows();
  Matrix system = Matrix::Identity(n, n) - gamma * p_pi.transpose();
  Eigen::PartialPivLU<Matrix> lu(system);
  Vector d = lu.solve((1.0 - gamma) * initial);
  if (!d.allFinite()) throw std::logic_error("discounted stationary system is singular");
  d = d.cwiseMax(0.0);
  d /= d.sum();
  return {std::move(d), WeightKind::distribution};
}

Vector truncated_discounted_distribution(const Matrix& p_pi, const Vector& initial, double gamma,
                                         std::size_t horizon) {
  check_square_stochastic(p_pi);
  Vector marginal = initial;
  Vector acc = Vector::Zero(initial.size());
  double weight = 1.0 - gamma;
  for (std::size_t t = 0; t < horizon; ++t) {
    acc += weight * marginal;
    marginal = p_pi.transpose() * marginal;
    weight *= gamma;
  }
  return acc;
}

Vector state_values(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  const Matrix p_pi = transition_under_policy(mdp, policy);
  const Vector r_pi = reward_under_policy(mdp, policy);
  const auto n = p_pi.rows();
  return (Matrix::Identity(n, n) - mdp.gamma() * p_pi).partialPivLu().solve(r_pi);
}

Matrix action_values(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  const Vector v = state_values(mdp, policy);
  const Vector next = mdp.transition() * v;
  Matrix q = mdp.rewards();
  for (std::size_t s = 0; s < mdp.n_states(); ++s)
    for (std::size_t a = 0; a < mdp.n_actions(); ++a)
      q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) += mdp.gamma() * next(mdp.row(s, a));
  return q;
}

Vector expected_recurrence_time(const Matrix& p_pi) {
  require_irreducible(p_pi);
  const auto n = p_pi.rows();
  Vector result(n);
  if (n == 1) {
    result(0) = 1.0;
    return result;
  }
  for (Eigen::Index target = 0; target < n; ++target) {
    // m_i = 1 + sum_{j != target} P_ij m_j for i != target.
    std::vector<Eigen::Index> others;
    for (Eigen::Index i = 0; i < n; ++i)
      if (i != target) others.push_back(i);
    const auto m = static_cast<Eigen::Index>(others.size());
    Matrix system(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        system(i, j) = (i == j ? 1.0 : 0.0) - p_pi(others[i], others[j]);
    Vector hitting = system.partialPivLu().solve(Vector::Ones(m));
    double ret = 1.0;
    for (Eigen::Index j = 0; j < m; ++j) ret += p_pi(target, others[j]) * hitting(j);
    result(target) = ret;
  }
  return result;
}

StateWeighting averaging_correction_exact(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  const Matrix p_pi = transition_under_policy(mdp, policy);
  const Vector d = undiscounted_stationary(p_pi).values;
  const Vector d_gamma = discounted_stationary(p_pi, mdp.initial(), mdp.gamma()).values;
  return {d_gamma.cwiseQuotient(d), WeightKind::correction};
}

double discounted_objective(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  return (1.0 - mdp.gamma()) * mdp.initial().dot(state_values(mdp, policy));
}

Matrix per_state_gradient(const SoftmaxPolicy& policy, const Matrix& q) {
  const auto S = static_cast<Eigen::Index>(policy.n_states());
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(policy.n_params()), S);
  for (std::size_t s = 0; s < policy.n_states(); ++s) {
    const Vector pi = policy.probs(s);
    for (std::size_t a = 0; a < policy.n_actions(); ++a) {
      const auto ai = static_cast<Eigen::Index>(a);
      out.col(static_cast<Eigen::Index>(s)) +=
          pi(ai) * q(static_cast<Eigen::Index>(s), ai) * policy.log_prob_grad(s, a);
    }
  }
  return out;
}

GradientEstimate true_policy_gradient(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  const Matrix p_pi = transition_under_policy(mdp, policy);
  const Vector d_gamma = discounted_stationary(p_pi, mdp.initial(), mdp.gamma()).values;
  return {per_state_gradient(policy, action_values(mdp, policy)) * d_gamma,
          GradientScheme::true_discounted};
}

GradientEstimate corrected_expectation_gradient(const TabularMdp& mdp,
                                                const SoftmaxPolicy& policy) {
  const Matrix p_pi = transition_under_policy(mdp, policy);
  const Vector d = undiscounted_stationary(p_pi).values;
  const Vector c = averaging_correction_exact(mdp, policy).values;
  return {per_state_gradient(policy, action_values(mdp, policy)) * d.cwiseProduct(c),
          GradientScheme::averaging_corrected};
}

GradientEstimate mismatched_gradient(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  const Matrix p_pi = transition_under_policy(mdp, policy);
  const Vector d = undiscounted_stationary(p_pi).values;
  return {per_state_gradient(policy, action_values(mdp, policy)) * d, GradientScheme::mismatched};
}

double tv_distance(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw InputError("distributions have different lengths");
  return 0.5 * (p - q).cwiseAbs().sum();
}

double max_norm_distance(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw InputError("distributions have different lengths");
  return (p - q).cwiseAbs().maxCoeff();
}

}  // namespace avc
