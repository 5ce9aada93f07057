#include "avc/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "avc/errors.hpp"

namespace avc {

void Buffer::push(Transition transition) {
  if (full()) throw InputError("buffer is full");
  if (!items_.empty() && items_.back().episode == transition.episode) {
    if (transition.t <= items_.back().t)
      throw InputError("in-episode index must increase within an episode");
    if (items_.back().ends_episode())
      throw InputError("transition follows the end of its episode");
  } else {
    starts_.push_back(items_.size());
  }
  items_.push_back(std::move(transition));
}

void Buffer::clear() {
  items_.clear();
  starts_.clear();
  ++generation_;
}

std::size_t sample_categorical(const Eigen::Ref<const Vector>& probs, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  const auto n = probs.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    u -= probs(i);
    if (u < 0.0) return static_cast<std::size_t>(i);
  }
  for (Eigen::Index i = n - 1; i >= 0; --i)
    if (probs(i) > 0.0) return static_cast<std::size_t>(i);
  return static_cast<std::size_t>(n - 1);
}

Sampler softmax_sampler(const SoftmaxPolicy& policy) {
  Matrix table = policy.prob_table();
  return [table = std::move(table)](const Vector&, int state, Rng& rng) {
    if (state < 0 || state >= table.rows()) throw InputError("softmax sampler needs a tabular state");
    return sample_categorical(table.row(state).transpose(), rng);
  };
}

Collector::Collector(Env& env, std::uint64_t seed) : env_(env), rng_(seed) {}

void Collector::fill(const Sampler& sampler, Buffer& buffer) {
  while (!buffer.full()) {
    if (!started_) {
      current_ = env_.reset();
      started_ = true;
      running_return_ = 0.0;
    }
    const std::size_t action = sampler(current_.observation, current_.state, rng_);
    EnvStep next = env_.step(action);
    Transition tr;
    tr.episode = episode_;
    tr.t = current_.t;
    tr.state = current_.state;
    tr.observation = current_.observation;
    tr.action = action;
    tr.reward = next.reward;
    tr.next_state = next.state;
    tr.next_observation = next.observation;
    tr.terminal = next.terminal;
    tr.timeout = next.timeout;
    running_return_ += next.reward;
    buffer.push(std::move(tr));
    if (next.terminal || next.timeout) {
      ++episode_;
      ++finished_;
      finished_returns_.push_back(running_return_);
      started_ = false;
    } else {
      current_ = std::move(next);
    }
  }
}

Buffer Collector::collect(const Sampler& sampler, std::size_t n) {
  if (n == 0) throw InputError("collect needs n >= 1");
  Buffer buffer(n);
  fill(sampler, buffer);
  return buffer;
}

std::vector<double> Collector::take_finished_returns() {
  return std::exchange(finished_returns_, {});
}

Buffer collect(Env& env, const Sampler& sampler, std::size_t n, Rng& rng) {
  Collector collector(env, rng());
  return collector.collect(sampler, n);
}

Buffer collect_trajectories(Env& env, const Sampler& sampler, std::size_t k, std::size_t length,
                            Rng& rng) {
  if (k == 0 || length == 0) throw InputError("need at least one trajectory of length >= 1");
  Buffer buffer(k * length);
  for (std::size_t j = 0; j < k; ++j) {
    EnvStep current = env.reset();
    for (std::size_t step = 0; step < length; ++step) {
      const std::size_t action = sampler(current.observation, current.state, rng);
      EnvStep next = env.step(action);
      Transition tr;
      tr.episode = j;
      tr.t = current.t;
      tr.state = current.state;
      tr.observation = current.observation;
      tr.action = action;
      tr.reward = next.reward;
      tr.next_state = next.state;
      tr.next_observation = next.observation;
      tr.terminal = next.terminal;
      // A cut at the requested length bootstraps like any other timeout.
      tr.timeout = next.timeout || (!next.terminal && step + 1 == length);
      const bool done = tr.ends_episode();
      buffer.push(std::move(tr));
      if (done) break;
      current = std::move(next);
    }
  }
  return buffer;
}

namespace {

std::size_t checked_state(const Transition& tr, std::size_t n_states) {
  if (tr.state < 0 || static_cast<std::size_t>(tr.state) >= n_states)
    throw InputError("transition has no valid tabular state");
  return static_cast<std::size_t>(tr.state);
}

}  // namespace

StateWeighting sampling_distribution(const Buffer& buffer, std::size_t n_states) {
  if (buffer.empty()) throw InputError("sampling distribution of an empty buffer");
  Vector counts = Vector::Zero(static_cast<Eigen::Index>(n_states));
  for (const auto& tr : buffer) counts(static_cast<Eigen::Index>(checked_state(tr, n_states))) += 1.0;
  return {counts / static_cast<double>(buffer.size()), WeightKind::distribution};
}

double nominal_horizon(const Buffer& buffer) {
  if (buffer.empty()) throw InputError("nominal horizon of an empty buffer");
  return static_cast<double>(buffer.size()) / static_cast<double>(buffer.n_trajectories());
}

std::vector<double> kt_weighting(const Buffer& buffer, double gamma, std::optional<double> horizon) {
  const double T = horizon.value_or(nominal_horizon(buffer));
  std::vector<double> weights;
  weights.reserve(buffer.size());
  for (const auto& tr : buffer)
    weights.push_back(T * (1.0 - gamma) * std::pow(gamma, static_cast<double>(tr.t)));
  return weights;
}

Vector per_state_mean(const Buffer& buffer, std::span<const double> weights, std::size_t n_states) {
  if (weights.size() != buffer.size()) throw InputError("one weight per transition required");
  const auto S = static_cast<Eigen::Index>(n_states);
  Vector sums = Vector::Zero(S);
  Vector counts = Vector::Zero(S);
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const auto s = static_cast<Eigen::Index>(checked_state(buffer[i], n_states));
    sums(s) += weights[i];
    counts(s) += 1.0;
  }
  for (Eigen::Index s = 0; s < S; ++s)
    if (counts(s) > 0.0) sums(s) /= counts(s);
  return sums;
}

CorrectionEstimate buffer_correction(const Buffer& buffer, double gamma, std::size_t n_states,
                                     std::optional<double> horizon) {
  if (buffer.empty()) throw InputError("correction of an empty buffer");
  const double T = horizon.value_or(nominal_horizon(buffer));
  const auto S = static_cast<Eigen::Index>(n_states);
  Vector powers = Vector::Zero(S);
  Vector counts = Vector::Zero(S);
  for (const auto& tr : buffer) {
    const auto s = static_cast<Eigen::Index>(checked_state(tr, n_states));
    powers(s) += std::pow(gamma, static_cast<double>(tr.t));
    counts(s) += 1.0;
  }
  CorrectionEstimate out;
  out.correction = {Vector::Zero(S), WeightKind::correction};
  out.visited.assign(n_states, false);
  out.horizon = T;
  for (Eigen::Index s = 0; s < S; ++s) {
    if (counts(s) == 0.0) continue;
    out.visited[static_cast<std::size_t>(s)] = true;
    out.correction.values(s) = (1.0 - gamma) * T * powers(s) / counts(s);
  }
  return out;
}

SampleSize sample_size_bound(double epsilon, double delta, std::size_t n_states, double gamma) {
  if (!(epsilon > 0.0 && delta > 0.0 && delta < 1.0))
    throw InputError("epsilon must be positive and delta in (0, 1)");
  if (!(gamma > 0.0 && gamma < 1.0)) throw InputError("gamma must lie strictly inside (0, 1)");
  if (n_states == 0) throw InputError("need at least one state");
  const double k = 2.0 / (epsilon * epsilon) * std::log(static_cast<double>(n_states) / delta);
  const double T = std::log(epsilon / 2.0) / std::log(gamma);
  // Guard against 599.0000000001-style round-off pushing ceil up a step.
  auto ceil_tight = [](double x) {
    const double r = std::round(x);
    return std::abs(x - r) < 1e-9 ? r : std::ceil(x);
  };
  SampleSize out;
  out.trajectories = static_cast<std::size_t>(std::max(1.0, ceil_tight(k)));
  out.length = static_cast<std::size_t>(std::max(1.0, ceil_tight(T)));
  return out;
}

Vector emphasis(const Buffer& buffer, std::size_t n_states, double gamma, EmphasisScheme scheme,
                const Vector* model_correction, std::optional<double> horizon) {
  const Vector d = sampling_distribution(buffer, n_states).values;
  switch (scheme) {
    case EmphasisScheme::uncorrected:
      return d;
    case EmphasisScheme::gamma_t: {
      const auto weights = kt_weighting(buffer, gamma, horizon);
      return d.cwiseProduct(per_state_mean(buffer, weights, n_states));
    }
    case EmphasisScheme::averaging_buffer:
      return d.cwiseProduct(buffer_correction(buffer, gamma, n_states, horizon).correction.values);
    case EmphasisScheme::averaging_model:
      if (model_correction == nullptr || model_correction->size() != d.size())
        throw InputError("averaging_model emphasis needs a per-state correction");
      return d.cwiseProduct(*model_correction);
  }
  throw InputError("unknown emphasis scheme");
}

BiasVariance bias_variance(std::span<const Vector> emphases, const Vector& target) {
  if (emphases.size() < 2) throw InputError("bias/variance needs at least two buffers");
  const auto n = static_cast<double>(emphases.size());
  Vector mean = Vector::Zero(target.size());
  for (const auto& e : emphases) mean += e;
  mean /= n;
  Vector var = Vector::Zero(target.size());
  for (const auto& e : emphases) var += (e - mean).cwiseAbs2();
  var /= (n - 1.0);
  return {(mean - target).squaredNorm(), var.mean()};
}

BiasVariance emphasis_bias_variance(TabularEnv& env, const SoftmaxPolicy& policy,
                                    EmphasisScheme scheme, std::size_t n_buffers,
                                    const BufferSpec& spec, Rng& rng,
                                    const Vector* model_correction) {
  const TabularMdp& mdp = *env.tabular();
  const Matrix p_pi = transition_under_policy(mdp, policy);
  const Vector target = discounted_stationary(p_pi, mdp.initial(), mdp.gamma()).values;
  const Sampler sampler = softmax_sampler(policy);
  std::vector<Vector> emphases;
  for (std::size_t b = 0; b < n_buffers; ++b) {
    Buffer buffer = spec.trajectories == 0
                        ? collect(env, sampler, spec.size, rng)
                        : collect_trajectories(env, sampler, spec.trajectories,
                                               spec.size / spec.trajectories, rng);
    const std::optional<double> horizon =
        spec.trajectories == 0 ? std::optional<double>(static_cast<double>(env.horizon()))
                               : std::nullopt;
    emphases.push_back(emphasis(buffer, mdp.n_states(), mdp.gamma(), scheme, model_correction,
                                horizon));
  }
  return bias_variance(emphases, target);
}

OrderingConfidence paired_ordering(std::span<const Vector> emphases_a,
                                   std::span<const Vector> emphases_b, const Vector& target,
                                   std::size_t resamples, Rng& rng) {
  if (emphases_a.size() != emphases_b.size()) throw InputError("paired samples differ in size");
  const std::size_t n = emphases_a.size();
  OrderingConfidence out;
  out.a = bias_variance(emphases_a, target);
  out.b = bias_variance(emphases_b, target);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<Vector> ra(n), rb(n);
  std::size_t bias_wins = 0, var_wins = 0;
  for (std::size_t r = 0; r < resamples; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = pick(rng);
      ra[i] = emphases_a[j];
      rb[i] = emphases_b[j];
    }
    const auto ba = bias_variance(ra, target);
    const auto bb = bias_variance(rb, target);
    bias_wins += ba.squared_bias < bb.squared_bias;
    var_wins += ba.variance < bb.variance;
  }
  out.bias_confidence = static_cast<double>(bias_wins) / static_cast<double>(resamples);
  out.variance_confidence = static_cast<double>(var_wins) / static_cast<double>(resamples);
  return out;
}

BiasRatio bias_ratio(std::span<const Buffer> buffers, std::span<const Vector> corrections,
                     const Vector& discounted_dist) {
  if (buffers.size() != corrections.size()) throw InputError("one correction per buffer required");
  const auto n_states = static_cast<std::size_t>(discounted_dist.size());
  double num = 0.0;
  double den = 0.0;
  for (std::size_t b = 0; b < buffers.size(); ++b) {
    const Vector d = sampling_distribution(buffers[b], n_states).values;
    for (const auto& tr : buffers[b]) {
      const auto s = static_cast<Eigen::Index>(checked_state(tr, n_states));
      num += std::abs(corrections[b](s) * d(s) - discounted_dist(s));
      den += std::abs(d(s) - discounted_dist(s));
    }
  }
  if (den == 0.0) return {0.0, true};
  return {num / den, false};
}

void write_buffer_csv(std::ostream& out, const Buffer& buffer) {
  const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
  out << "episode,t,state,action,reward,terminal,timeout\n";
  for (const auto& tr : buffer)
    out << tr.episode << ',' << tr.t << ',' << tr.state << ',' << tr.action << ',' << tr.reward
        << ',' << tr.terminal << ',' << tr.timeout << '\n';
  out.precision(old_precision);
}

Buffer read_buffer_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("episode,t,state", 0) != 0)
    throw InputError("buffer CSV is missing its header");
  std::vector<Transition> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7) throw InputError("buffer CSV row needs 7 columns: " + line);
    Transition tr;
    try {
      tr.episode = std::stoull(fields[0]);
      tr.t = std::stoull(fields[1]);
      tr.state = std::stoi(fields[2]);
      tr.action = std::stoull(fields[3]);
      tr.reward = std::stod(fields[4]);
      tr.terminal = std::stoi(fields[5]) != 0;
      tr.timeout = std::stoi(fields[6]) != 0;
    } catch (const std::logic_error&) {
      throw InputError("malformed buffer CSV row: " + line);
    }
    rows.push_back(std::move(tr));
  }
  Buffer buffer(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i + 1 < rows.size() && rows[i + 1].episode == rows[i].episode)
      rows[i].next_state = rows[i + 1].state;
    buffer.push(std::move(rows[i]));
  }
  return buffer;
}

}  // namespace avc
