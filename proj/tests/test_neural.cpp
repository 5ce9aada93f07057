#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "avc/errors.hpp"
#include "avc/neural.hpp"

using namespace avc;

namespace {

Vector one_hot(int s, int n) {
  Vector v = Vector::Zero(n);
  if (s >= 0) v(s) = 1.0;
  return v;
}

struct Step {
  int state;
  int next;
  double reward;
  bool terminal = false;
  bool timeout = false;
};

// One episode per inner vector; observations are one-hot over n states.
Buffer make_buffer(const std::vector<std::vector<Step>>& episodes, int n) {
  std::size_t size = 0;
  for (const auto& e : episodes) size += e.size();
  Buffer buffer(size);
  for (std::size_t j = 0; j < episodes.size(); ++j)
    for (std::size_t t = 0; t < episodes[j].size(); ++t) {
      const Step& st = episodes[j][t];
      Transition tr;
      tr.episode = j;
      tr.t = t;
      tr.state = st.state;
      tr.next_state = st.next;
      tr.observation = one_hot(st.state, n);
      tr.next_observation = one_hot(st.next, n);
      tr.reward = st.reward;
      tr.terminal = st.terminal;
      tr.timeout = st.timeout;
      buffer.push(tr);
    }
  return buffer;
}

// Buffer of the states (0, 1, 0) at t = 0, 1, 2.
Buffer aba() {
  return make_buffer({{{0, 1, 0.0}, {1, 0, 0.0}, {0, 1, 0.0, false, true}}}, 2);
}

Mlp constant_net(std::size_t in, double value) {
  Vector p = Vector::Zero(static_cast<Eigen::Index>(in + 1));
  p(static_cast<Eigen::Index>(in)) = value;
  return Mlp({in, 1}, p);
}

template <class F>
Vector numeric_gradient(const Vector& x, F f, double h = 1e-6) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector up = x, down = x;
    up(i) += h;
    down(i) -= h;
    g(i) = (f(up) - f(down)) / (2 * h);
  }
  return g;
}

double relative_error(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max(1.0, std::max(a.norm(), b.norm()));
}

}  // namespace

TEST(Mlp, RejectsBadShapes) {
  Rng rng(1);
  EXPECT_THROW(Mlp({3}, rng), InputError);
  EXPECT_THROW(Mlp({3, 0, 1}, rng), InputError);
  EXPECT_THROW(Mlp({2, 1}, Vector::Zero(2)), InputError);
  const Mlp net({2, 1}, Vector::Zero(3));
  EXPECT_THROW(net.forward(Vector(Vector::Zero(3))), InputError);
}

TEST(Mlp, ZeroWeightsReturnBias) {
  Vector p = Vector::Zero(2 * 4 + 4 + 4 * 2 + 2);
  p.tail(2) << 0.3, -1.2;
  const Mlp net({2, 4, 2}, p);
  const Vector out = net.forward(Vector(Vector::Constant(2, 7.0)));
  EXPECT_DOUBLE_EQ(out(0), 0.3);
  EXPECT_DOUBLE_EQ(out(1), -1.2);
}

TEST(Mlp, IdentityLinearLayer) {
  Vector p = Vector::Zero(12);
  Eigen::Map<Matrix>(p.data(), 3, 3) = Matrix::Identity(3, 3);
  const Mlp net({3, 3}, p);
  const Vector x(Vector::LinSpaced(3, -1.0, 2.0));
  EXPECT_EQ(net.forward(x), x);
  EXPECT_EQ(net.weight(0), Matrix::Identity(3, 3));
}

TEST(Mlp, BatchForwardMatchesSingle) {
  Rng rng(2);
  const Mlp net({3, 5, 4, 2}, rng);
  const Matrix x = Matrix::Random(3, 6);
  const Matrix out = net.forward(x);
  for (Eigen::Index j = 0; j < 6; ++j) EXPECT_LT((out.col(j) - net.forward(Vector(x.col(j)))).norm(), 1e-14);
}

TEST(Mlp, OutputGainScalesLastLayer) {
  Rng a(3), b(3);
  const Mlp full({4, 8, 3}, a);
  const Mlp small({4, 8, 3}, b, 0.01);
  EXPECT_LT((small.weight(1) - 0.01 * full.weight(1)).norm(), 1e-15);
  EXPECT_EQ(small.weight(0), full.weight(0));
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  Rng rng(4);
  for (const auto& sizes : std::vector<std::vector<std::size_t>>{{3, 1}, {3, 7, 2}, {2, 5, 4, 3}}) {
    const Mlp net(sizes, rng);
    const Matrix x = Matrix::Random(static_cast<Eigen::Index>(sizes.front()), 5);
    const Matrix g = Matrix::Random(static_cast<Eigen::Index>(sizes.back()), 5);
    Mlp::Tape tape;
    net.forward(x, &tape);
    Matrix grad_input;
    const Vector analytic = net.backward(tape, g, &grad_input);
    const auto objective = [&](const Vector& p) {
      return Mlp(sizes, p).forward(x).cwiseProduct(g).sum();
    };
    EXPECT_LT(relative_error(analytic, numeric_gradient(net.params(), objective)), 1e-5);
    const Eigen::Map<const Vector> xflat(x.data(), x.size());
    const auto by_input = [&](const Vector& flat) {
      const Matrix xi = Eigen::Map<const Matrix>(flat.data(), x.rows(), x.cols());
      return net.forward(xi).cwiseProduct(g).sum();
    };
    const Eigen::Map<const Vector> gi(grad_input.data(), grad_input.size());
    EXPECT_LT(relative_error(gi, numeric_gradient(Vector(xflat), by_input)), 1e-5);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng(5);
  const Mlp net({4, 6, 2}, rng);
  std::stringstream ss;
  write_checkpoint(ss, net);
  const Mlp back = read_checkpoint(ss);
  EXPECT_EQ(back.sizes(), net.sizes());
  EXPECT_EQ(back.params(), net.params());
}

TEST(Checkpoint, RejectsMalformedInput) {
  std::stringstream bad_header("net,2,1\n0\n0\n0\n");
  EXPECT_THROW(read_checkpoint(bad_header), InputError);
  std::stringstream too_short("mlp,2,1\n0\n0\n");
  EXPECT_THROW(read_checkpoint(too_short), InputError);
}

TEST(Optimizer, SgdAndAdamFirstStep) {
  Vector p = Vector::Ones(3);
  const Vector g(Vector::LinSpaced(3, -2.0, 2.0));
  Optimizer sgd(OptimizerKind::sgd, 3, 0.1);
  sgd.descend(p, g);
  EXPECT_LT((p - (Vector::Ones(3) - 0.1 * g)).norm(), 1e-15);
  Vector q = Vector::Ones(3);
  Optimizer adam(OptimizerKind::adam, 3, 0.01);
  adam.descend(q, g);
  EXPECT_NEAR(q(0), 1.01, 1e-8);
  EXPECT_NEAR(q(1), 1.0, 1e-12);
  EXPECT_NEAR(q(2), 0.99, 1e-8);
  EXPECT_THROW(adam.descend(q, Vector::Zero(2)), InputError);
  EXPECT_THROW(Optimizer(OptimizerKind::sgd, 3, 0.0), ConfigError);
}

TEST(CorrectionLoss, OptimumIsPerStateMeanOfDiscount) {
  // Targets gamma^t at t = 0, 1, 2: A -> (1 + 0.25) / 2, B -> 0.5.
  const Buffer buffer = aba();
  Vector p(3);
  p << 0.625, 0.5, 0.0;
  const Mlp net({2, 1}, p);
  const LossGrad at_opt = correction_loss(net, buffer, 0.5, 1.0);
  EXPECT_LT(at_opt.grad.norm(), 1e-15);
  EXPECT_NEAR(at_opt.loss, (0.375 * 0.375 + 0.375 * 0.375) / 3, 1e-15);

  Rng rng(6);
  Mlp trained({2, 1}, rng);
  Optimizer opt(OptimizerKind::sgd, trained.n_params(), 0.3);
  for (int i = 0; i < 5000; ++i) opt.descend(trained, correction_loss(trained, buffer, 0.5, 1.0).grad);
  EXPECT_NEAR(trained.forward(one_hot(0, 2))(0), 0.625, 1e-9);
  EXPECT_NEAR(trained.forward(one_hot(1, 2))(0), 0.5, 1e-9);
  // Rescaled by (1 - gamma) T the optimum is the averaging correction.
  const CorrectionEstimate c = buffer_correction(buffer, 0.5, 2);
  EXPECT_NEAR(trained.forward(one_hot(0, 2))(0) * 0.5 * 3, c.correction(0), 1e-8);
  EXPECT_NEAR(trained.forward(one_hot(1, 2))(0) * 0.5 * 3, c.correction(1), 1e-8);
}

TEST(CorrectionLoss, ScaleMultipliesTargetsAndMatchesFiniteDifferences) {
  const Buffer buffer = aba();
  Rng rng(7);
  const Mlp net({2, 6, 2}, rng);
  for (Eigen::Index head : {0, 1}) {
    const LossGrad lg = correction_loss(net, buffer, 0.5, 10.0, head);
    const auto f = [&](const Vector& p) { return correction_loss(Mlp(net.sizes(), p), buffer, 0.5, 10.0, head).loss; };
    EXPECT_LT(relative_error(lg.grad, numeric_gradient(net.params(), f)), 1e-5);
  }
  const Mlp zero = constant_net(2, 0.0);
  EXPECT_NEAR(correction_loss(zero, buffer, 0.5, 10.0).loss, (100 + 25 + 6.25) / 3, 1e-12);
  EXPECT_THROW(correction_loss(zero, buffer, 0.5, 10.0, 1), InputError);
}

TEST(ValueLoss, HandExamples) {
  const Buffer one = make_buffer({{{0, 1, 1.0, true}}}, 2);
  EXPECT_DOUBLE_EQ(value_loss(constant_net(2, 0.0), one, 0.9).loss, 1.0);
  EXPECT_DOUBLE_EQ(value_loss(constant_net(2, 1.0), one, 0.9).loss, 0.0);
  // A timeout bootstraps: V = 10 with r = 1, gamma = 0.9 is a fixed point.
  const Buffer cut = make_buffer({{{0, 1, 1.0, false, true}}}, 2);
  EXPECT_NEAR(value_loss(constant_net(2, 10.0), cut, 0.9).loss, 0.0, 1e-24);
}

TEST(ValueLoss, SemiGradientIgnoresTarget) {
  const Buffer buffer = make_buffer({{{0, 1, 0.5}, {1, 0, -0.25}, {0, 1, 1.0, false, true}}}, 2);
  Rng rng(8);
  const Mlp net({2, 4, 1}, rng);
  const LossGrad lg = value_loss(net, buffer, 0.9);
  const Vector next_values = net.forward(observation_matrix(buffer, true)).row(0).transpose();
  Vector targets(3);
  for (Eigen::Index i = 0; i < 3; ++i) targets(i) = buffer[i].reward + 0.9 * next_values(i);
  const Matrix obs = observation_matrix(buffer);
  const LossGrad fixed = regression_loss(net, obs, targets);
  EXPECT_NEAR(lg.loss, fixed.loss, 1e-14);
  EXPECT_LT((lg.grad - fixed.grad).norm(), 1e-14);
  const auto f = [&](const Vector& p) { return regression_loss(Mlp(net.sizes(), p), obs, targets).loss; };
  EXPECT_LT(relative_error(fixed.grad, numeric_gradient(net.params(), f)), 1e-5);
}

TEST(ValueLoss, TabularTdConvergesToOracleValues) {
  const double gamma = 0.9;
  const TabularMdp mdp = two_state_mdp(gamma);
  const SoftmaxPolicy pi = two_state_policy(0.4);
  const Vector r = reward_under_policy(mdp, pi);
  const Vector v = state_values(mdp, pi);
  const Buffer buffer = make_buffer({{{0, 1, r(0), false, true}}, {{1, 0, r(1), false, true}}}, 2);
  Rng rng(9);
  Mlp net({2, 1}, rng);
  Optimizer opt(OptimizerKind::sgd, net.n_params(), 0.5);
  for (int i = 0; i < 20000; ++i) opt.descend(net, value_loss(net, buffer, gamma).grad);
  EXPECT_NEAR(net.forward(one_hot(0, 2))(0), v(0), 1e-3);
  EXPECT_NEAR(net.forward(one_hot(1, 2))(0), v(1), 1e-3);
}

TEST(Advantages, MonteCarloAndTdLimits) {
  const Buffer buffer = make_buffer({{{0, 1, 1.0}, {1, 0, 1.0}, {0, 1, 1.0, true}}}, 2);
  const Mlp zero = constant_net(2, 0.0);
  const Vector mc = advantages(zero, buffer, 0.5, {AdvantageMode::gae, 1.0});
  EXPECT_DOUBLE_EQ(mc(0), 1.75);
  EXPECT_DOUBLE_EQ(mc(1), 1.5);
  EXPECT_DOUBLE_EQ(mc(2), 1.0);
  EXPECT_EQ(bootstrapped_returns(zero, buffer, 0.5), mc);

  Rng rng(10);
  const Mlp net({2, 3, 1}, rng);
  const Vector td = advantages(net, buffer, 0.5, {AdvantageMode::td, 0.0});
  EXPECT_LT((advantages(net, buffer, 0.5, {AdvantageMode::gae, 0.0}) - td).norm(), 1e-15);
  const Vector v = net.forward(observation_matrix(buffer)).row(0).transpose();
  const Vector vn = net.forward(observation_matrix(buffer, true)).row(0).transpose();
  EXPECT_NEAR(td(0), 1.0 + 0.5 * vn(0) - v(0), 1e-15);
  EXPECT_NEAR(td(2), 1.0 - v(2), 1e-15);
}

TEST(Advantages, DoNotLeakAcrossEpisodes) {
  const Mlp zero = constant_net(2, 0.0);
  const Buffer base = make_buffer({{{0, 1, 1.0}, {1, 0, 1.0, true}}, {{0, 1, 0.0}}}, 2);
  const Buffer sentinel = make_buffer({{{0, 1, 1.0}, {1, 0, 1.0, true}}, {{0, 1, 1000.0}}}, 2);
  const Vector a = advantages(zero, base, 0.9, {AdvantageMode::gae, 1.0});
  const Vector b = advantages(zero, sentinel, 0.9, {AdvantageMode::gae, 1.0});
  EXPECT_EQ(a.head(2), b.head(2));
  EXPECT_DOUBLE_EQ(b(2), 1000.0);
  // A timeout cut also stops the trace, and bootstraps from V(S').
  const Mlp five = constant_net(2, 5.0);
  const Buffer cut = make_buffer({{{0, 1, 1.0, false, true}}, {{1, 0, 1000.0}}}, 2);
  const Vector ret = bootstrapped_returns(five, cut, 0.5);
  EXPECT_DOUBLE_EQ(ret(0), 1.0 + 0.5 * 5.0);
  EXPECT_DOUBLE_EQ(ret(1), 1000.0 + 0.5 * 5.0);
}

TEST(PolicyTerms, LogSoftmaxNormalizes) {
  Matrix logits(3, 2);
  logits << 1000, 0, 1001, 0, 999, 0;
  const Matrix lp = log_softmax(logits);
  for (Eigen::Index j = 0; j < 2; ++j) EXPECT_NEAR(lp.col(j).array().exp().sum(), 1.0, 1e-12);
  EXPECT_NEAR(lp(0, 1), -std::log(3.0), 1e-15);
}

TEST(PolicyTerms, WeightedLogLikelihoodGradient) {
  Rng rng(11);
  const Mlp policy({3, 5, 4}, rng);
  const Matrix obs = Matrix::Random(3, 6);
  const std::vector<std::size_t> actions{0, 3, 1, 1, 2, 0};
  const Vector coeffs = Vector::Random(6);
  const LossGrad lg = weighted_log_likelihood(policy, obs, actions, coeffs);
  const auto f = [&](const Vector& p) {
    return weighted_log_likelihood(Mlp(policy.sizes(), p), obs, actions, coeffs).loss;
  };
  EXPECT_LT(relative_error(lg.grad, numeric_gradient(policy.params(), f)), 1e-5);
  EXPECT_THROW(weighted_log_likelihood(policy, obs, std::vector<std::size_t>{0, 4, 1, 1, 2, 0}, coeffs),
               InputError);
}

TEST(PolicyTerms, SurrogateAtOldPolicyIsTheWeightedPolicyGradient) {
  Rng rng(12);
  const Mlp policy({3, 5, 2}, rng);
  const Matrix obs = Matrix::Random(3, 8);
  const std::vector<std::size_t> actions{0, 1, 1, 0, 1, 0, 0, 1};
  const Matrix lp = log_softmax(policy.forward(obs));
  Vector old(8);
  for (Eigen::Index i = 0; i < 8; ++i) old(i) = lp(static_cast<Eigen::Index>(actions[i]), i);
  const Vector adv = Vector::Random(8);
  const Vector w = Vector::Random(8).cwiseAbs();
  const LossGrad sur = clipped_surrogate(policy, obs, actions, old, adv, w, 0.2);
  const LossGrad ll = weighted_log_likelihood(policy, obs, actions, w.cwiseProduct(adv));
  EXPECT_NEAR(sur.loss, w.cwiseProduct(adv).mean(), 1e-14);
  EXPECT_LT((sur.grad - ll.grad).norm(), 1e-12);
  EXPECT_NEAR(mean_kl(policy, obs, lp), 0.0, 1e-15);
}

TEST(PolicyTerms, SurrogateClipsOnlyTheImprovingSide) {
  // One state, two actions, logits given directly by the bias.
  const auto net = [](double l0, double l1) {
    Vector p(4);
    p << 0.0, 0.0, l0, l1;
    return Mlp({1, 2}, p);
  };
  const Matrix obs = Matrix::Ones(1, 1);
  const std::vector<std::size_t> a{0};
  const Vector old = Vector::Constant(1, std::log(0.5));
  const Vector w = Vector::Ones(1);
  const Mlp pushed = net(1.0, 0.0);  // ratio 2 e / (1 + e) ~ 1.46
  const double ratio = 2 * std::exp(1.0) / (1 + std::exp(1.0));
  // Positive advantage beyond 1 + clip: flat.
  const LossGrad pos = clipped_surrogate(pushed, obs, a, old, Vector::Ones(1), w, 0.2);
  EXPECT_NEAR(pos.loss, 1.2, 1e-15);
  EXPECT_EQ(pos.grad.norm(), 0.0);
  // Negative advantage at the same ratio: unclipped, gradient alive.
  const LossGrad neg = clipped_surrogate(pushed, obs, a, old, -Vector::Ones(1), w, 0.2);
  EXPECT_NEAR(neg.loss, -ratio, 1e-15);
  EXPECT_GT(neg.grad.norm(), 0.0);
  const auto f = [&](const Vector& p) {
    return clipped_surrogate(Mlp({1, 2}, p), obs, a, old, -Vector::Ones(1), w, 0.2).loss;
  };
  EXPECT_LT(relative_error(neg.grad, numeric_gradient(pushed.params(), f)), 1e-5);
  // KL(old || new) by hand.
  Matrix old_all = Matrix::Constant(2, 1, std::log(0.5));
  const double p0 = std::exp(1.0) / (1 + std::exp(1.0));
  const double kl = 0.5 * std::log(0.5 / p0) + 0.5 * std::log(0.5 / (1 - p0));
  EXPECT_NEAR(mean_kl(pushed, obs, old_all), kl, 1e-15);
}
