#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "avc/envs.hpp"
#include "avc/errors.hpp"
#include "avc/exact_oracle.hpp"

using namespace avc;

namespace {

Vector random_theta(std::size_t n, std::mt19937_64& rng, double range = 3.0) {
  std::uniform_real_distribution<double> unit(-range, range);
  Vector theta(static_cast<Eigen::Index>(n));
  for (auto& x : theta) x = unit(rng);
  return theta;
}

Matrix random_chain(Eigen::Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.05, 1.0);
  Matrix p(n, n);
  for (auto& x : p.reshaped()) x = unit(rng);
  for (Eigen::Index i = 0; i < n; ++i) p.row(i) /= p.row(i).sum();
  return p;
}

// Independent oracle: direct summation (1 - gamma) sum_{t<T} gamma^t rho P^t.
Vector series_discounted(const Matrix& p, const Vector& rho, double gamma, int T) {
  Vector acc = Vector::Zero(rho.size());
  Vector marginal = rho;
  for (int t = 0; t < T; ++t) {
    acc += (1.0 - gamma) * std::pow(gamma, t) * marginal;
    marginal = (marginal.transpose() * p).transpose();
  }
  return acc;
}

double objective_by_value_iteration(const TabularMdp& mdp, const SoftmaxPolicy& pi) {
  // Policy evaluation by fixed-point iteration, independent of the LU route.
  const Matrix probs = pi.prob_table();
  Vector v = Vector::Zero(static_cast<Eigen::Index>(mdp.n_states()));
  for (int it = 0; it < 5000; ++it) {
    Vector next = Vector::Zero(v.size());
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
      for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
        const auto si = static_cast<Eigen::Index>(s);
        const auto ai = static_cast<Eigen::Index>(a);
        next(si) += probs(si, ai) * (mdp.reward(s, a) +
                                     mdp.gamma() * mdp.transition().row(mdp.row(s, a)).dot(v));
      }
    v = next;
  }
  return (1.0 - mdp.gamma()) * mdp.initial().dot(v);
}

}  // namespace

TEST(UndiscountedStationary, TwoStateIsUniform) {
  const Matrix p = transition_under_policy(two_state_mdp(), two_state_policy(1.3));
  const StateWeighting d = undiscounted_stationary(p);
  EXPECT_NEAR(d(0), 0.5, 1e-15);
  EXPECT_NEAR(d(1), 0.5, 1e-15);
  EXPECT_EQ(d.kind, WeightKind::distribution);
}

TEST(UndiscountedStationary, SingleStateChain) {
  const StateWeighting d = undiscounted_stationary(Matrix::Identity(1, 1));
  EXPECT_DOUBLE_EQ(d(0), 1.0);
}

TEST(UndiscountedStationary, MatchesCesaroAverage) {
  std::mt19937_64 rng(21);
  const Matrix p = random_chain(5, rng);
  Vector marginal = Vector::Zero(5);
  marginal(0) = 1.0;
  Vector avg = Vector::Zero(5);
  const int T = 100000;
  for (int t = 0; t < T; ++t) {
    avg += marginal;
    marginal = (marginal.transpose() * p).transpose();
  }
  avg /= T;
  const Vector d = undiscounted_stationary(p).values;
  EXPECT_LT((d - avg).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_LT((d.transpose() * p - d.transpose()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(UndiscountedStationary, ReducibleChainRejected) {
  Matrix p(3, 3);
  p << 1, 0, 0, 0.5, 0.5, 0, 0, 0.5, 0.5;
  EXPECT_THROW(undiscounted_stationary(p), ModelError);
  EXPECT_THROW(expected_recurrence_time(p), ModelError);
  EXPECT_FALSE(is_irreducible(p));
}

TEST(DiscountedStationary, TwoStateGeometricSeries) {
  const Matrix p = transition_under_policy(two_state_mdp(), two_state_policy(0.0));
  Vector rho(2);
  rho << 1, 0;
  const StateWeighting d = discounted_stationary(p, rho, 0.9);
  EXPECT_NEAR(d(0), 1.0 / 1.9, 1e-14);
  EXPECT_NEAR(d(1), 0.9 / 1.9, 1e-14);
}

TEST(DiscountedStationary, StationaryStartIsFixed) {
  std::mt19937_64 rng(23);
  const Matrix p = random_chain(6, rng);
  const Vector d = undiscounted_stationary(p).values;
  EXPECT_LT((discounted_stationary(p, d, 0.7).values - d).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DiscountedStationary, MatchesTruncatedSeriesAndFixedPoint) {
  std::mt19937_64 rng(25);
  const Matrix p = random_chain(5, rng);
  Vector rho = Vector::Constant(5, 0.2);
  rho(0) = 0.4;
  rho(4) = 0.0;
  const double gamma = 0.7;
  const Vector d = discounted_stationary(p, rho, gamma).values;
  EXPECT_LT((d - series_discounted(p, rho, gamma, 200)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_NEAR(d.sum(), 1.0, 1e-10);
  const Vector fixed = (gamma * d.transpose() * p).transpose() + (1 - gamma) * rho;
  EXPECT_LT((fixed - d).cwiseAbs().maxCoeff(), 1e-10);
  // Library truncation agrees with the independent series.
  EXPECT_LT((truncated_discounted_distribution(p, rho, gamma, 50) - series_discounted(p, rho, gamma, 50))
                .cwiseAbs()
                .maxCoeff(),
            1e-14);
}

TEST(ActionValues, ZeroRewardsGiveZero) {
  std::mt19937_64 rng(27);
  const TabularMdp base = random_mdp(4, 2, 0.9, rng);
  const TabularMdp mdp(base.transition(), Matrix::Zero(4, 2), 0.9, base.initial());
  EXPECT_EQ(action_values(mdp, SoftmaxPolicy::tabular(4, 2)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ActionValues, TwoStateAntisymmetry) {
  for (double theta : {-3.0, 0.0, 0.7}) {
    const Matrix q = action_values(two_state_mdp(0.9), two_state_policy(theta));
    EXPECT_NEAR(q(0, 0), -q(1, 0), 1e-12);
    EXPECT_NEAR(q(0, 1), -q(1, 1), 1e-12);
  }
}

TEST(ActionValues, SingleStateGeometric) {
  const TabularMdp mdp(Matrix::Ones(1, 1), Matrix::Ones(1, 1), 0.9, Vector::Ones(1));
  EXPECT_NEAR(action_values(mdp, SoftmaxPolicy::tabular(1, 1))(0, 0), 10.0, 1e-12);
}

TEST(ActionValues, SatisfiesBellmanEquation) {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    const TabularMdp mdp = random_mdp(5, 3, 0.95, rng);
    const SoftmaxPolicy pi = SoftmaxPolicy::tabular(5, 3, random_theta(15, rng));
    const Matrix q = action_values(mdp, pi);
    const Vector v = (pi.prob_table().array() * q.array()).rowwise().sum();
    for (std::size_t s = 0; s < 5; ++s)
      for (std::size_t a = 0; a < 3; ++a) {
        const double rhs = mdp.reward(s, a) + mdp.gamma() * mdp.transition().row(mdp.row(s, a)).dot(v);
        EXPECT_NEAR(q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)), rhs, 1e-10);
      }
  }
}

TEST(RecurrenceTime, TwoStateCycle) {
  const Matrix p = transition_under_policy(two_state_mdp(), two_state_policy(0.0));
  const Vector tau = expected_recurrence_time(p);
  EXPECT_NEAR(tau(0), 2.0, 1e-12);
  EXPECT_NEAR(tau(1), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(expected_recurrence_time(Matrix::Identity(1, 1))(0), 1.0);
}

TEST(RecurrenceTime, MatchesMonteCarloExcursions) {
  std::mt19937_64 rng(31);
  const Matrix p = random_chain(4, rng);
  const Vector tau = expected_recurrence_time(p);
  for (Eigen::Index target = 0; target < 4; ++target) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double total = 0.0;
    const int excursions = 100000;
    Eigen::Index state = target;
    for (int e = 0; e < excursions; ++e) {
      int steps = 0;
      do {
        double u = unit(rng);
        Eigen::Index next = 0;
        while (next < 3 && (u -= p(state, next)) >= 0.0) ++next;
        state = next;
        ++steps;
      } while (state != target);
      total += steps;
    }
    EXPECT_NEAR(total / excursions, tau(target), 0.02 * tau(target));
  }
}

TEST(RecurrenceTime, InverseOfStationaryDistribution) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix p = random_chain(2 + trial % 7, rng);
    const Vector prod = undiscounted_stationary(p).values.cwiseProduct(expected_recurrence_time(p));
    EXPECT_LT((prod.array() - 1.0).abs().maxCoeff(), 1e-8);
  }
}

TEST(AveragingCorrection, TwoStateClosedForm) {
  const double gamma = 0.9;
  const StateWeighting c = averaging_correction_exact(two_state_mdp(gamma), two_state_policy(0.4));
  EXPECT_NEAR(c(0), 2.0 / (1.0 + gamma), 1e-12);
  EXPECT_NEAR(c(1), 2.0 * gamma / (1.0 + gamma), 1e-12);
  EXPECT_EQ(c.kind, WeightKind::correction);
}

TEST(AveragingCorrection, StationaryStartGivesOnes) {
  std::mt19937_64 rng(35);
  const TabularMdp base = random_mdp(5, 2, 0.8, rng);
  const SoftmaxPolicy pi = SoftmaxPolicy::tabular(5, 2, random_theta(10, rng));
  const Vector d = undiscounted_stationary(transition_under_policy(base, pi)).values;
  const Vector c = averaging_correction_exact(base.with_initial(d), pi).values;
  EXPECT_LT((c.array() - 1.0).abs().maxCoeff(), 1e-10);
}

TEST(AveragingCorrection, UnitMeanUnderStationaryAndRecurrenceBound) {
  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t S = 2 + trial % 7;
    const std::size_t A = 2 + trial % 3;
    const TabularMdp mdp = random_mdp(S, A, 0.5 + 0.49 * (trial % 5) / 4.0, rng);
    const SoftmaxPolicy pi = SoftmaxPolicy::tabular(S, A, random_theta(S * A, rng));
    const Matrix p = transition_under_policy(mdp, pi);
    const Vector c = averaging_correction_exact(mdp, pi).values;
    EXPECT_NEAR(undiscounted_stationary(p).values.dot(c), 1.0, 1e-10);
    const Vector tau = expected_recurrence_time(p);
    EXPECT_TRUE((c.array() <= tau.array() + 1e-12).all());
    EXPECT_TRUE((c.array() >= 0.0).all());
  }
}

TEST(TruePolicyGradient, ZeroRewardGivesZero) {
  std::mt19937_64 rng(39);
  const TabularMdp base = random_mdp(4, 3, 0.9, rng);
  const TabularMdp mdp(base.transition(), Matrix::Zero(4, 3), 0.9, base.initial());
  const GradientEstimate g = true_policy_gradient(mdp, SoftmaxPolicy::tabular(4, 3, random_theta(12, rng)));
  EXPECT_EQ(g.values.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.scheme, GradientScheme::true_discounted);
}

TEST(TruePolicyGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(41);
  const double h = 1e-5;
  for (int trial = 0; trial < 10; ++trial) {
    const TabularMdp mdp = random_mdp(4, 3, 0.9, rng);
    const SoftmaxPolicy pi = SoftmaxPolicy::tabular(4, 3, random_theta(12, rng));
    const Vector g = true_policy_gradient(mdp, pi).values;
    for (Eigen::Index k = 0; k < 12; ++k) {
      Vector plus = pi.theta(), minus = pi.theta();
      plus(k) += h;
      minus(k) -= h;
      const double fd = (discounted_objective(mdp, pi.with_theta(plus)) -
                         discounted_objective(mdp, pi.with_theta(minus))) / (2 * h);
      EXPECT_NEAR(g(k), fd, 1e-6);
    }
  }
}

TEST(TruePolicyGradient, ObjectiveAgreesWithIterativeEvaluation) {
  std::mt19937_64 rng(43);
  const TabularMdp mdp = random_mdp(4, 2, 0.9, rng);
  const SoftmaxPolicy pi = SoftmaxPolicy::tabular(4, 2, random_theta(8, rng));
  EXPECT_NEAR(discounted_objective(mdp, pi), objective_by_value_iteration(mdp, pi), 1e-10);
}

TEST(TruePolicyGradient, SaturatesOnTwoStateLoop) {
  double previous = std::numeric_limits<double>::infinity();
  for (double theta : {2.0, 4.0, 8.0, 16.0}) {
    const double g = std::abs(true_policy_gradient(two_state_mdp(0.9), two_state_policy(theta)).values(0));
    EXPECT_LT(g, previous);
    previous = g;
  }
  EXPECT_LT(previous, 1e-6);
  // Closed form: 2 p (1 - p) (1 - gamma) / (1 + gamma).
  const double p = 1.0 / (1.0 + std::exp(-0.5));
  EXPECT_NEAR(true_policy_gradient(two_state_mdp(0.9), two_state_policy(0.5)).values(0),
              2 * p * (1 - p) * 0.1 / 1.9, 1e-12);
}

TEST(MismatchedGradient, ZeroOnTwoStateLoop) {
  for (double gamma : {0.3, 0.5, 0.7, 0.9})
    for (double theta = -5.0; theta <= 5.0; theta += 0.25)
      EXPECT_LT(std::abs(mismatched_gradient(two_state_mdp(gamma), two_state_policy(theta)).values(0)), 1e-10);
}

TEST(MismatchedGradient, EqualsTrueGradientWhenStartIsStationary) {
  std::mt19937_64 rng(45);
  const TabularMdp base = random_mdp(5, 3, 0.85, rng);
  const SoftmaxPolicy pi = SoftmaxPolicy::tabular(5, 3, random_theta(15, rng));
  const Vector d = undiscounted_stationary(transition_under_policy(base, pi)).values;
  const TabularMdp mdp = base.with_initial(d);
  EXPECT_LT((mismatched_gradient(mdp, pi).values - true_policy_gradient(mdp, pi).values).cwiseAbs().maxCoeff(),
            1e-10);
}

TEST(ExtendedGradient, CorrectedExpectationEqualsTrueGradient) {
  std::mt19937_64 rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t S = 2 + trial % 7;
    const std::size_t A = 2 + trial % 3;
    const TabularMdp mdp = random_mdp(S, A, 0.3 + 0.65 * (trial % 10) / 9.0, rng);
    const SoftmaxPolicy pi = SoftmaxPolicy::tabular(S, A, random_theta(S * A, rng));
    const Vector a = corrected_expectation_gradient(mdp, pi).values;
    const Vector b = true_policy_gradient(mdp, pi).values;
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Distances, TotalVariationExamples) {
  Vector p(2), q(2);
  p << 1, 0;
  q << 0, 1;
  EXPECT_DOUBLE_EQ(tv_distance(p, p), 0.0);
  EXPECT_DOUBLE_EQ(tv_distance(p, q), 1.0);
  Vector dg(2), d(2);
  dg << 1 / 1.9, 0.9 / 1.9;
  d << 0.5, 0.5;
  EXPECT_NEAR(tv_distance(dg, d), 0.5 / 19.0, 1e-15);  // = 0.0263...
  EXPECT_DOUBLE_EQ(tv_distance(p, q), tv_distance(q, p));
}

TEST(Distances, MaxNormExamples) {
  Vector p(2), q(2);
  p << 1, 0;
  q << 0.5, 0.5;
  EXPECT_DOUBLE_EQ(max_norm_distance(p, p), 0.0);
  EXPECT_DOUBLE_EQ(max_norm_distance(p, q), 0.5);
  EXPECT_THROW(max_norm_distance(p, Vector::Ones(3)), InputError);
}

TEST(Distances, DiscountedCloserToStationaryThanStart) {
  std::mt19937_64 rng(49);
  std::uniform_real_distribution<double> g(0.01, 0.99);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t S = 2 + trial % 7;
    const TabularMdp mdp = random_mdp(S, 2, g(rng), rng);
    const SoftmaxPolicy pi = SoftmaxPolicy::tabular(S, 2, random_theta(2 * S, rng));
    const Matrix p = transition_under_policy(mdp, pi);
    const Vector d = undiscounted_stationary(p).values;
    const Vector dg = discounted_stationary(p, mdp.initial(), mdp.gamma()).values;
    EXPECT_LE(tv_distance(dg, d), tv_distance(mdp.initial(), d) + 1e-12);
  }
}
