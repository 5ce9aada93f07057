#include "avc/tabular_mdp.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "avc/errors.hpp"

namespace avc {

namespace {

void check_distribution(const Eigen::Ref<const Vector>& p, const std::string& what) {
  if ((p.array() < 0.0).any() || !p.allFinite())
    throw InputError(what + " has negative or non-finite entries");
  if (std::abs(p.sum() - 1.0) > kConstructionTol)
    throw InputError(what + " does not sum to 1");
}

}  // namespace

TabularMdp::TabularMdp(Matrix transition, Matrix reward, double gamma, Vector initial)
    : transition_(std::move(transition)),
      reward_(std::move(reward)),
      gamma_(gamma),
      initial_(std::move(initial)) {
  const auto S = reward_.rows();
  const auto A = reward_.cols();
  if (S == 0 || A == 0) throw InputError("MDP needs at least one state and one action");
  if (transition_.rows() != S * A || transition_.cols() != S)
    throw InputError("transition tensor shape does not match reward table");
  if (initial_.size() != S) throw InputError("initial distribution has wrong length");
  if (!(gamma_ > 0.0 && gamma_ < 1.0)) throw InputError("gamma must lie strictly inside (0, 1)");
  if (!reward_.allFinite()) throw InputError("reward table has non-finite entries");
  for (Eigen::Index i = 0; i < transition_.rows(); ++i) {
    Vector row = transition_.row(i).transpose();
    check_distribution(row, "transition row " + std::to_string(i));
  }
  check_distribution(initial_, "initial distribution");
}

TabularMdp TabularMdp::with_gamma(double gamma) const {
  return TabularMdp(transition_, reward_, gamma, initial_);
}

TabularMdp TabularMdp::with_initial(Vector initial) const {
  return TabularMdp(transition_, reward_, gamma_, std::move(initial));
}

namespace {

// Reads the next non-comment token.
double next_number(std::istream& in) {
  std::string token;
  while (in >> token) {
    if (token[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    try {
      std::size_t used = 0;
      double value = std::stod(token, &used);
      if (used != token.size()) throw InputError("malformed number '" + token + "'");
      return value;
    } catch (const std::logic_error&) {
      throw InputError("malformed number '" + token + "'");
    }
  }
  throw InputError("unexpected end of MDP table");
}

std::size_t next_count(std::istream& in) {
  double v = next_number(in);
  if (v < 1 || v != std::floor(v)) throw InputError("expected a positive integer count");
  return static_cast<std::size_t>(v);
}

}  // namespace

TabularMdp read_mdp(std::istream& in) {
  const std::size_t S = next_count(in);
  const std::size_t A = next_count(in);
  const double gamma = next_number(in);
  const auto s = static_cast<Eigen::Index>(S);
  const auto a = static_cast<Eigen::Index>(A);
  Vector initial(s);
  for (Eigen::Index i = 0; i < s; ++i) initial(i) = next_number(in);
  Matrix reward(s, a);
  for (Eigen::Index i = 0; i < s; ++i)
    for (Eigen::Index j = 0; j < a; ++j) reward(i, j) = next_number(in);
  Matrix transition(s * a, s);
  for (Eigen::Index i = 0; i < s * a; ++i)
    for (Eigen::Index j = 0; j < s; ++j) transition(i, j) = next_number(in);
  return TabularMdp(std::move(transition), std::move(reward), gamma, std::move(initial));
}

void write_mdp(std::ostream& out, const TabularMdp& mdp) {
  const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
  out << "# n_states n_actions gamma\n"
      << mdp.n_states() << ' ' << mdp.n_actions() << ' ' << mdp.gamma() << '\n';
  out << "# initial distribution\n";
  for (Eigen::Index i = 0; i < mdp.initial().size(); ++i)
    out << (i ? " " : "") << mdp.initial()(i);
  out << "\n# rewards r[s][a]\n";
  for (Eigen::Index i = 0; i < mdp.rewards().rows(); ++i) {
    for (Eigen::Index j = 0; j < mdp.rewards().cols(); ++j)
      out << (j ? " " : "") << mdp.rewards()(i, j);
    out << '\n';
  }
  out << "# transitions P[s][a][s'], row s*A+a\n";
  for (Eigen::Index i = 0; i < mdp.transition().rows(); ++i) {
    for (Eigen::Index j = 0; j < mdp.transition().cols(); ++j)
      out << (j ? " " : "") << mdp.transition()(i, j);
    out << '\n';
  }
  out.precision(old_precision);
}

SoftmaxPolicy::SoftmaxPolicy(std::size_t n_states, std::size_t n_actions, Matrix features,
                             Vector theta)
    : n_states_(n_states),
      n_actions_(n_actions),
      features_(std::move(features)),
      theta_(std::move(theta)) {
  if (n_states_ == 0 || n_actions_ == 0) throw InputError("policy needs states and actions");
  if (static_cast<std::size_t>(features_.rows()) != n_states_ * n_actions_)
    throw InputError("feature table must have n_states * n_actions rows");
  if (features_.cols() != theta_.size())
    throw InputError("feature width does not match parameter count");
  if (!theta_.allFinite()) throw InputError("policy parameters are not finite");
}

SoftmaxPolicy SoftmaxPolicy::tabular(std::size_t n_states, std::size_t n_actions) {
  return tabular(n_states, n_actions, Vector::Zero(static_cast<Eigen::Index>(n_states * n_actions)));
}

SoftmaxPolicy SoftmaxPolicy::tabular(std::size_t n_states, std::size_t n_actions, Vector theta) {
  const auto n = static_cast<Eigen::Index>(n_states * n_actions);
  return SoftmaxPolicy(n_states, n_actions, Matrix::Identity(n, n), std::move(theta));
}

SoftmaxPolicy SoftmaxPolicy::with_theta(Vector theta) const {
  return SoftmaxPolicy(n_states_, n_actions_, features_, std::move(theta));
}

void SoftmaxPolicy::check_state(std::size_t state) const {
  if (state >= n_states_)
    throw InputError("state " + std::to_string(state) + " out of range");
}

Vector SoftmaxPolicy::probs(std::size_t state) const {
  check_state(state);
  const auto A = static_cast<Eigen::Index>(n_actions_);
  Vector logits = features_.middleRows(static_cast<Eigen::Index>(state) * A, A) * theta_;
  logits.array() -= logits.maxCoeff();
  Vector p = logits.array().exp();
  return p / p.sum();
}

Vector SoftmaxPolicy::log_prob_grad(std::size_t state, std::size_t action) const {
  check_state(state);
  if (action >= n_actions_) throw InputError("action " + std::to_string(action) + " out of range");
  const auto A = static_cast<Eigen::Index>(n_actions_);
  auto block = features_.middleRows(static_cast<Eigen::Index>(state) * A, A);
  Vector p = probs(state);
  return block.row(static_cast<Eigen::Index>(action)).transpose() - block.transpose() * p;
}

Matrix SoftmaxPolicy::prob_table() const {
  Matrix table(static_cast<Eigen::Index>(n_states_), static_cast<Eigen::Index>(n_actions_));
  for (std::size_t s = 0; s < n_states_; ++s)
    table.row(static_cast<Eigen::Index>(s)) = probs(s).transpose();
  return table;
}

namespace {

void check_compatible(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  if (mdp.n_states() != policy.n_states() || mdp.n_actions() != policy.n_actions())
    throw InputError("policy dimensions do not match the MDP");
}

}  // namespace

Matrix transition_under_policy(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  check_compatible(mdp, policy);
  const auto S = static_cast<Eigen::Index>(mdp.n_states());
  Matrix p_pi = Matrix::Zero(S, S);
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    Vector pi = policy.probs(s);
    for (std::size_t a = 0; a < mdp.n_actions(); ++a)
      p_pi.row(static_cast<Eigen::Index>(s)) +=
          pi(static_cast<Eigen::Index>(a)) * mdp.transition().row(mdp.row(s, a));
  }
  return p_pi;
}

Vector reward_under_policy(const TabularMdp& mdp, const SoftmaxPolicy& policy) {
  check_compatible(mdp, policy);
  return (policy.prob_table().array() * mdp.rewards().array()).rowwise().sum();
}

}  // namespace avc
