#pragma once

#include <iosfwd>
#include <vector>

#include "avc/rollout.hpp"

namespace avc {

/// Feed-forward network: tanh hidden layers, linear output. All weights and
/// biases live in one flat parameter vector (layer by layer, column-major W
/// then b), so optimizers and checkpoints work on a single Vector.
class Mlp {
 public:
  /// Glorot-uniform weights, zero biases; the last layer is multiplied by
  /// `output_gain`.
  Mlp(std::vector<std::size_t> sizes, Rng& rng, double output_gain = 1.0);
  /// Wraps existing parameters; throws InputError on a size mismatch.
  Mlp(std::vector<std::size_t> sizes, Vector params);

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }
  std::size_t n_layers() const { return sizes_.size() - 1; }
  std::size_t n_params() const { return static_cast<std::size_t>(params_.size()); }

  const Vector& params() const { return params_; }
  void set_params(const Vector& params);

  /// Layer views into the parameter vector.
  Eigen::Map<const Matrix> weight(std::size_t layer) const;
  Eigen::Map<const Vector> bias(std::size_t layer) const;

  /// Post-activation of every layer; activations[0] is the input batch.
  struct Tape {
    std::vector<Matrix> activations;
  };

  Vector forward(const Vector& input) const;
  /// Batch forward; `input` is input_dim x N. Records a tape when given one.
  Matrix forward(const Matrix& input, Tape* tape = nullptr) const;
  /// Gradient of sum(grad_output .* output) with respect to the parameters.
  /// Optionally returns the gradient with respect to the input batch.
  Vector backward(const Tape& tape, const Matrix& grad_output, Matrix* grad_input = nullptr) const;

 private:
  std::size_t offset(std::size_t layer) const { return offsets_[layer]; }

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  Vector params_;
};

/// Header line "mlp,<size0>,<size1>,..." then one parameter per line.
void write_checkpoint(std::ostream& out, const Mlp& net);
Mlp read_checkpoint(std::istream& in);

enum class OptimizerKind { sgd, adam };

/// First-order descent on a flat parameter vector.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::size_t n_params, double learning_rate);

  /// params -= step(grad).
  void descend(Vector& params, const Vector& grad);
  void descend(Mlp& net, const Vector& grad);
  double learning_rate() const { return lr_; }

 private:
  OptimizerKind kind_;
  double lr_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  Vector m_;
  Vector v_;
  long steps_ = 0;
};

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

/// Stacks observations (or next observations) column-wise.
Matrix observation_matrix(const Buffer& buffer, bool next = false);

/// Mean of (f(S_i) - scale * gamma^{t_i})^2 through output `head` of `net`.
LossGrad correction_loss(const Mlp& net, const Buffer& buffer, double gamma, double scale,
                         Eigen::Index head = 0);

/// Semi-gradient mean squared TD error, targets r + gamma V(S') (1 - terminal).
/// Timeouts bootstrap from V(S').
LossGrad value_loss(const Mlp& net, const Buffer& buffer, double gamma, Eigen::Index head = 0);

/// Mean of (V(s_i) - target_i)^2 on a fixed observation batch.
LossGrad regression_loss(const Mlp& net, const Matrix& observations, const Vector& targets,
                         Eigen::Index head = 0);

enum class AdvantageMode { td, gae };

struct AdvantageConfig {
  AdvantageMode mode = AdvantageMode::td;
  double lambda = 0.95;
};

/// td: r + gamma V(S') (1 - terminal) - V(S). gae: sum_k (gamma lambda)^k
/// delta_{i+k}, truncated at episode and buffer boundaries.
Vector advantages(const Mlp& value_net, const Buffer& buffer, double gamma,
                  const AdvantageConfig& cfg, Eigen::Index head = 0);

/// Discounted reward-to-go, bootstrapped from V(S') at timeouts and at the
/// buffer end.
Vector bootstrapped_returns(const Mlp& value_net, const Buffer& buffer, double gamma,
                            Eigen::Index head = 0);

/// Column-wise log-softmax.
Matrix log_softmax(const Matrix& logits);

/// Objective (1/N) sum_i coeff_i log pi(a_i | s_i) and its parameter gradient.
LossGrad weighted_log_likelihood(const Mlp& policy, const Matrix& observations,
                                 std::span<const std::size_t> actions, const Vector& coeffs);

/// Objective (1/N) sum_i w_i min(e_i H_i, clip(e_i, 1 - eps, 1 + eps) H_i) with
/// e_i = pi(a_i|s_i) / pi_old(a_i|s_i), and its parameter gradient.
LossGrad clipped_surrogate(const Mlp& policy, const Matrix& observations,
                           std::span<const std::size_t> actions, const Vector& old_log_probs,
                           const Vector& advantages, const Vector& weights, double clip);

/// Mean over the batch of KL(pi_old(.|s) || pi(.|s)); `old_log_probs_all` is A x N.
double mean_kl(const Mlp& policy, const Matrix& observations, const Matrix& old_log_probs_all);

}  // namespace avc
