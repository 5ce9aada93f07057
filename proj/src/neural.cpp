#include "avc/neural.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include "avc/errors.hpp"

namespace avc {

namespace {

std::vector<std::size_t> layer_offsets(const std::vector<std::size_t>& sizes) {
  if (sizes.size() < 2) throw InputError("an MLP needs an input and an output size");
  if (std::any_of(sizes.begin(), sizes.end(), [](std::size_t s) { return s == 0; }))
    throw InputError("layer sizes must be positive");
  std::vector<std::size_t> offsets{0};
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
    offsets.push_back(offsets.back() + sizes[l + 1] * sizes[l] + sizes[l + 1]);
  return offsets;
}

}  // namespace

Mlp::Mlp(std::vector<std::size_t> sizes, Rng& rng, double output_gain)
    : sizes_(std::move(sizes)), offsets_(layer_offsets(sizes_)) {
  params_ = Vector::Zero(static_cast<Eigen::Index>(offsets_.back()));
  for (std::size_t l = 0; l < n_layers(); ++l) {
    const double fan = static_cast<double>(sizes_[l] + sizes_[l + 1]);
    double limit = std::sqrt(6.0 / fan);
    if (l + 1 == n_layers()) limit *= output_gain;
    std::uniform_real_distribution<double> unit(-limit, limit);
    const std::size_t n_weights = sizes_[l] * sizes_[l + 1];
    for (std::size_t i = 0; i < n_weights; ++i)
      params_(static_cast<Eigen::Index>(offsets_[l] + i)) = unit(rng);
  }
}

Mlp::Mlp(std::vector<std::size_t> sizes, Vector params)
    : sizes_(std::move(sizes)), offsets_(layer_offsets(sizes_)) {
  set_params(params);
}

void Mlp::set_params(const Vector& params) {
  if (static_cast<std::size_t>(params.size()) != offsets_.back())
    throw InputError("parameter vector has the wrong length for this architecture");
  params_ = params;
}

Eigen::Map<const Matrix> Mlp::weight(std::size_t layer) const {
  return {params_.data() + offset(layer), static_cast<Eigen::Index>(sizes_[layer + 1]),
          static_cast<Eigen::Index>(sizes_[layer])};
}

Eigen::Map<const Vector> Mlp::bias(std::size_t layer) const {
  return {params_.data() + offset(layer) + sizes_[layer + 1] * sizes_[layer],
          static_cast<Eigen::Index>(sizes_[layer + 1])};
}

Vector Mlp::forward(const Vector& input) const {
  Matrix batch = input;
  return forward(batch, nullptr).col(0);
}

Matrix Mlp::forward(const Matrix& input, Tape* tape) const {
  if (static_cast<std::size_t>(input.rows()) != input_dim())
    throw InputError("input dimension does not match the network");
  if (tape) {
    tape->activations.clear();
    tape->activations.push_back(input);
  }
  Matrix x = input;
  for (std::size_t l = 0; l < n_layers(); ++l) {
    Matrix z = weight(l) * x;
    z.colwise() += bias(l);
    if (l + 1 < n_layers()) z = z.array().tanh();
    x = std::move(z);
    if (tape) tape->activations.push_back(x);
  }
  return x;
}

Vector Mlp::backward(const Tape& tape, const Matrix& grad_output, Matrix* grad_input) const {
  if (tape.activations.size() != sizes_.size()) throw InputError("tape does not match network");
  Vector grad = Vector::Zero(params_.size());
  Matrix delta = grad_output;
  for (std::size_t l = n_layers(); l-- > 0;) {
    const Matrix& in = tape.activations[l];
    const auto rows = static_cast<Eigen::Index>(sizes_[l + 1]);
    const auto cols = static_cast<Eigen::Index>(sizes_[l]);
    Eigen::Map<Matrix>(grad.data() + offset(l), rows, cols).noalias() = delta * in.transpose();
    Eigen::Map<Vector>(grad.data() + offset(l) + sizes_[l + 1] * sizes_[l], rows) =
        delta.rowwise().sum();
    if (l > 0 || grad_input) {
      Matrix prev = weight(l).transpose() * delta;
      if (l > 0) prev.array() *= 1.0 - in.array().square();
      delta = std::move(prev);
    }
  }
  if (grad_input) *grad_input = std::move(delta);
  return grad;
}

void write_checkpoint(std::ostream& out, const Mlp& net) {
  const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
  out << "mlp";
  for (auto s : net.sizes()) out << ',' << s;
  out << '\n';
  for (Eigen::Index i = 0; i < net.params().size(); ++i) out << net.params()(i) << '\n';
  out.precision(old_precision);
}

Mlp read_checkpoint(std::istream& in) {
  std::string header;
  if (!std::getline(in, header) || header.rfind("mlp,", 0) != 0)
    throw InputError("checkpoint is missing its layer-shape header");
  std::vector<std::size_t> sizes;
  std::stringstream ss(header.substr(4));
  std::string field;
  while (std::getline(ss, field, ',')) {
    try {
      sizes.push_back(std::stoull(field));
    } catch (const std::logic_error&) {
      throw InputError("malformed layer size '" + field + "'");
    }
  }
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      values.push_back(std::stod(line));
    } catch (const std::logic_error&) {
      throw InputError("malformed parameter '" + line + "'");
    }
  }
  return Mlp(std::move(sizes), Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size())));
}

Optimizer::Optimizer(OptimizerKind kind, std::size_t n_params, double learning_rate)
    : kind_(kind), lr_(learning_rate) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (kind_ == OptimizerKind::adam) {
    m_ = Vector::Zero(static_cast<Eigen::Index>(n_params));
    v_ = Vector::Zero(static_cast<Eigen::Index>(n_params));
  }
}

void Optimizer::descend(Vector& params, const Vector& grad) {
  if (grad.size() != params.size()) throw InputError("gradient length does not match parameters");
  if (kind_ == OptimizerKind::sgd) {
    params -= lr_ * grad;
    return;
  }
  ++steps_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

void Optimizer::descend(Mlp& net, const Vector& grad) {
  Vector params = net.params();
  descend(params, grad);
  net.set_params(params);
}

Matrix observation_matrix(const Buffer& buffer, bool next) {
  if (buffer.empty()) throw InputError("empty buffer");
  const Vector& first = next ? buffer[0].next_observation : buffer[0].observation;
  Matrix out(first.size(), static_cast<Eigen::Index>(buffer.size()));
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const Vector& obs = next ? buffer[i].next_observation : buffer[i].observation;
    if (obs.size() != first.size()) throw InputError("buffer observations differ in size");
    out.col(static_cast<Eigen::Index>(i)) = obs;
  }
  return out;
}

namespace {

void check_head(const Mlp& net, Eigen::Index head) {
  if (head < 0 || static_cast<std::size_t>(head) >= net.output_dim())
    throw InputError("network has no output " + std::to_string(head));
}

}  // namespace

LossGrad regression_loss(const Mlp& net, const Matrix& observations, const Vector& targets,
                         Eigen::Index head) {
  check_head(net, head);
  if (targets.size() != observations.cols()) throw InputError("one target per observation required");
  Mlp::Tape tape;
  const Matrix out = net.forward(observations, &tape);
  const double n = static_cast<double>(targets.size());
  const Vector residual = out.row(head).transpose() - targets;
  Matrix grad_out = Matrix::Zero(out.rows(), out.cols());
  grad_out.row(head) = (2.0 / n) * residual.transpose();
  return {residual.squaredNorm() / n, net.backward(tape, grad_out)};
}

LossGrad correction_loss(const Mlp& net, const Buffer& buffer, double gamma, double scale,
                         Eigen::Index head) {
  Vector targets(static_cast<Eigen::Index>(buffer.size()));
  for (std::size_t i = 0; i < buffer.size(); ++i)
    targets(static_cast<Eigen::Index>(i)) = scale * std::pow(gamma, static_cast<double>(buffer[i].t));
  return regression_loss(net, observation_matrix(buffer), targets, head);
}

namespace {

// r + gamma V(S') (1 - terminal) - V(S) for every transition.
Vector td_errors(const Mlp& net, const Buffer& buffer, double gamma, Eigen::Index head,
                 Vector* values = nullptr) {
  check_head(net, head);
  const Vector v = net.forward(observation_matrix(buffer)).row(head).transpose();
  const Vector v_next = net.forward(observation_matrix(buffer, true)).row(head).transpose();
  Vector delta(v.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    const double bootstrap = buffer[i].terminal ? 0.0 : v_next(k);
    delta(k) = buffer[i].reward + gamma * bootstrap - v(k);
  }
  if (values) *values = v;
  return delta;
}

bool continues(const Buffer& buffer, std::size_t i) {
  return i + 1 < buffer.size() && !buffer[i].ends_episode() &&
         buffer[i + 1].episode == buffer[i].episode;
}

}  // namespace

LossGrad value_loss(const Mlp& net, const Buffer& buffer, double gamma, Eigen::Index head) {
  Vector v;
  const Vector delta = td_errors(net, buffer, gamma, head, &v);
  // Semi-gradient: the bootstrapped target is a constant.
  return regression_loss(net, observation_matrix(buffer), v + delta, head);
}

Vector advantages(const Mlp& value_net, const Buffer& buffer, double gamma,
                  const AdvantageConfig& cfg, Eigen::Index head) {
  if (cfg.lambda < 0.0 || cfg.lambda > 1.0) throw ConfigError("GAE lambda must lie in [0, 1]");
  const Vector delta = td_errors(value_net, buffer, gamma, head);
  if (cfg.mode == AdvantageMode::td) return delta;
  Vector adv(delta.size());
  double running = 0.0;
  for (std::size_t i = buffer.size(); i-- > 0;) {
    const auto k = static_cast<Eigen::Index>(i);
    running = delta(k) + (continues(buffer, i) ? gamma * cfg.lambda * running : 0.0);
    adv(k) = running;
  }
  return adv;
}

Vector bootstrapped_returns(const Mlp& value_net, const Buffer& buffer, double gamma,
                            Eigen::Index head) {
  check_head(value_net, head);
  const Vector v_next = value_net.forward(observation_matrix(buffer, true)).row(head).transpose();
  Vector ret(static_cast<Eigen::Index>(buffer.size()));
  double running = 0.0;
  for (std::size_t i = buffer.size(); i-- > 0;) {
    const auto k = static_cast<Eigen::Index>(i);
    double tail;
    if (buffer[i].terminal) tail = 0.0;
    else if (continues(buffer, i)) tail = running;
    else tail = v_next(k);
    running = buffer[i].reward + gamma * tail;
    ret(k) = running;
  }
  return ret;
}

Matrix log_softmax(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double m = out.col(j).maxCoeff();
    const double lse = m + std::log((out.col(j).array() - m).exp().sum());
    out.col(j).array() -= lse;
  }
  return out;
}

namespace {

void check_actions(const Mlp& policy, const Matrix& observations, std::span<const std::size_t> actions) {
  if (static_cast<Eigen::Index>(actions.size()) != observations.cols())
    throw InputError("one action per observation required");
  for (auto a : actions)
    if (a >= policy.output_dim()) throw InputError("action out of range for the policy network");
}

}  // namespace

LossGrad weighted_log_likelihood(const Mlp& policy, const Matrix& observations,
                                 std::span<const std::size_t> actions, const Vector& coeffs) {
  check_actions(policy, observations, actions);
  if (coeffs.size() != observations.cols()) throw InputError("one coefficient per sample required");
  Mlp::Tape tape;
  const Matrix logp = log_softmax(policy.forward(observations, &tape));
  const double n = static_cast<double>(observations.cols());
  // d/dlogits of log pi(a) = e_a - pi.
  Matrix grad_out = -logp.array().exp().matrix();
  double objective = 0.0;
  for (Eigen::Index j = 0; j < observations.cols(); ++j) {
    const auto a = static_cast<Eigen::Index>(actions[static_cast<std::size_t>(j)]);
    grad_out(a, j) += 1.0;
    grad_out.col(j) *= coeffs(j) / n;
    objective += coeffs(j) * logp(a, j) / n;
  }
  return {objective, policy.backward(tape, grad_out)};
}

LossGrad clipped_surrogate(const Mlp& policy, const Matrix& observations,
                           std::span<const std::size_t> actions, const Vector& old_log_probs,
                           const Vector& advantages, const Vector& weights, double clip) {
  check_actions(policy, observations, actions);
  const Eigen::Index n = observations.cols();
  if (old_log_probs.size() != n || advantages.size() != n || weights.size() != n)
    throw InputError("surrogate inputs differ in length");
  Mlp::Tape tape;
  const Matrix logp = log_softmax(policy.forward(observations, &tape));
  Matrix grad_out = Matrix::Zero(logp.rows(), n);
  double objective = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto a = static_cast<Eigen::Index>(actions[static_cast<std::size_t>(j)]);
    const double ratio = std::exp(logp(a, j) - old_log_probs(j));
    const double h = advantages(j);
    const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
    const double unclipped_term = ratio * h;
    const double clipped_term = clipped * h;
    objective += weights(j) * std::min(unclipped_term, clipped_term) * inv_n;
    // The min picks the clipped constant exactly when it is strictly smaller.
    if (clipped_term < unclipped_term) continue;
    const double scale = weights(j) * h * ratio * inv_n;  // d(ratio)/dlogp = ratio
    grad_out.col(j) = -scale * logp.col(j).array().exp().matrix();
    grad_out(a, j) += scale;
  }
  return {objective, policy.backward(tape, grad_out)};
}

double mean_kl(const Mlp& policy, const Matrix& observations, const Matrix& old_log_probs_all) {
  const Matrix logp = log_softmax(policy.forward(observations));
  if (logp.rows() != old_log_probs_all.rows() || logp.cols() != old_log_probs_all.cols())
    throw InputError("old log-probabilities have the wrong shape");
  const Matrix p_old = old_log_probs_all.array().exp();
  return (p_old.array() * (old_log_probs_all - logp).array()).sum() /
         static_cast<double>(observations.cols());
}

}  // namespace avc
