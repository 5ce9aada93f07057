#pragma once

#include <random>

namespace avc {

template <class Rng>
TabularMdp random_mdp(std::size_t n_states, std::size_t n_actions, double gamma, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.05, 1.0);
  std::uniform_real_distribution<double> rew(-1.0, 1.0);
  const auto S = static_cast<Eigen::Index>(n_states);
  const auto A = static_cast<Eigen::Index>(n_actions);
  Matrix transition(S * A, S);
  for (Eigen::Index i = 0; i < transition.rows(); ++i) {
    for (Eigen::Index j = 0; j < S; ++j) transition(i, j) = unit(rng);
    transition.row(i) /= transition.row(i).sum();
  }
  Matrix reward(S, A);
  for (Eigen::Index s = 0; s < S; ++s)
    for (Eigen::Index a = 0; a < A; ++a) reward(s, a) = rew(rng);
  Vector initial(S);
  for (Eigen::Index s = 0; s < S; ++s) initial(s) = unit(rng);
  initial /= initial.sum();
  return TabularMdp(std::move(transition), std::move(reward), gamma, std::move(initial));
}

}  // namespace avc
