#include "avc/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "avc/detail/random_mdp.hpp"
#include "avc/errors.hpp"

#ifndef AVC_VERSION
#define AVC_VERSION "unknown"
#endif

namespace avc {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string code_version() { return AVC_VERSION; }

const std::vector<ExperimentInfo>& experiment_registry() {
  static const std::vector<ExperimentInfo> registry{
      {"counterexample", "Fig. 1, Fig. 7",
       "two-state loop with exact action values; pi(top) per scheme and gamma"},
      {"bias_variance", "Fig. 2, Fig. 8",
       "discrete Reacher emphasis bias/variance and correction bias ratio"},
      {"oracle_checks", "Theorem 1, Lemma 1, Lemma 2, Corollary 1, Proposition 1, Appendix G.4",
       "exact identities on random MDPs"},
      {"cartpole", "Fig. 3", "batch actor-critic learning curves on CartPole"},
  };
  return registry;
}

const ExperimentInfo& find_experiment(const std::string& name) {
  for (const auto& info : experiment_registry())
    if (info.name == name) return info;
  throw UsageError("unknown experiment '" + name + "'");
}

void ExperimentSpec::validate() const {
  find_experiment(name);
  if (seeds.empty()) throw UsageError("seed list is empty");
  if (schemes.empty() && name != "oracle_checks") throw UsageError("scheme list is empty");
  if (gammas.empty() && name != "oracle_checks") throw UsageError("gamma list is empty");
  for (double g : gammas)
    if (!(g > 0.0 && g < 1.0)) throw UsageError("gamma must lie strictly inside (0, 1)");
  if (name == "counterexample" && env != "two_state") throw UsageError("counterexample runs on two_state");
  if (name == "bias_variance" && env != "discrete_reacher")
    throw UsageError("bias_variance runs on discrete_reacher");
  if (name == "bias_variance" &&
      std::any_of(schemes.begin(), schemes.end(), [](auto s) { return s != WeightingScheme::averaging_net; }))
    throw UsageError("bias_variance trains averaging_net agents only");
}

namespace {

std::vector<std::uint64_t> seed_range(std::uint64_t n) {
  std::vector<std::uint64_t> seeds(n);
  std::iota(seeds.begin(), seeds.end(), 0);
  return seeds;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream in(text);
  while (std::getline(in, part, sep)) parts.push_back(part);
  if (!text.empty() && text.back() == sep) parts.emplace_back();
  return parts;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + value + "'");
  }
}

std::uint64_t parse_count(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    if (value.empty() || value[0] == '-') throw std::invalid_argument(value);
    const auto v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + value + "'");
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ExperimentSpec default_spec(const std::string& name) {
  find_experiment(name);
  ExperimentSpec spec;
  spec.name = name;
  spec.seeds = seed_range(10);
  if (name == "counterexample") {
    spec.env = "two_state";
    spec.schemes = {WeightingScheme::uncorrected, WeightingScheme::gamma_t, WeightingScheme::averaging_net};
    spec.gammas = {0.3, 0.5, 0.7, 0.9};
    spec.steps = 5000;
  } else if (name == "bias_variance") {
    spec.env = "discrete_reacher";
    spec.schemes = {WeightingScheme::averaging_net};
    spec.gammas = {0.99};
    spec.seeds = {0};
    spec.steps = 40000;
  } else if (name == "oracle_checks") {
    spec.seeds = {0};
  } else {
    spec.env = "cartpole";
    spec.schemes = {WeightingScheme::uncorrected, WeightingScheme::averaging_net};
    spec.gammas = {0.995};
    spec.steps = 100000;
  }
  return spec;
}

void apply_setting(ExperimentSpec& spec, const std::string& key, const std::string& value) {
  if (key == "env") {
    if (value != "two_state" && value != "discrete_reacher" && value != "cartpole")
      throw UsageError("unknown env '" + value + "'");
    spec.env = value;
  } else if (key == "scheme" || key == "schemes") {
    spec.schemes.clear();
    for (const auto& s : split(value, ',')) spec.schemes.push_back(parse_scheme(trim(s)));
  } else if (key == "gamma" || key == "gammas") {
    spec.gammas.clear();
    for (const auto& g : split(value, ',')) spec.gammas.push_back(parse_double(key, trim(g)));
  } else if (key == "seed" || key == "seeds") {
    spec.seeds.clear();
    for (const auto& part : split(value, ',')) {
      const std::string p = trim(part);
      const auto dash = p.find('-', 1);
      if (dash == std::string::npos) {
        spec.seeds.push_back(parse_count(key, p));
      } else {
        const auto lo = parse_count(key, p.substr(0, dash));
        const auto hi = parse_count(key, p.substr(dash + 1));
        if (hi < lo) throw ConfigError("empty seed range '" + p + "'");
        for (auto s = lo; s <= hi; ++s) spec.seeds.push_back(s);
      }
    }
  } else if (key == "steps") {
    spec.steps = parse_count(key, value);
  } else if (key == "out") {
    spec.out = value;
  } else {
    AgentConfig probe;
    apply_override(probe, key, value);
    spec.overrides[key] = value;
  }
}

void apply_config(ExperimentSpec& spec, std::istream& in) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(number) + " is not key=value");
    apply_setting(spec, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void apply_override(AgentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "buffer_size") cfg.buffer_size = parse_count(key, value);
  else if (key == "correction_lr") cfg.correction_lr = parse_double(key, value);
  else if (key == "policy_lr") cfg.policy_lr = parse_double(key, value);
  else if (key == "value_lr") cfg.value_lr = parse_double(key, value);
  else if (key == "correction_steps") cfg.correction_steps = parse_count(key, value);
  else if (key == "value_steps") cfg.value_steps = parse_count(key, value);
  else if (key == "scale") cfg.scale = parse_double(key, value);
  else if (key == "horizon") cfg.horizon = parse_count(key, value);
  else if (key == "policy_hidden") cfg.policy_hidden = parse_count(key, value);
  else if (key == "critic_hidden") cfg.critic_hidden = parse_count(key, value);
  else if (key == "shared_correction") cfg.shared_correction = parse_bool(key, value);
  else if (key == "normalize_advantages") cfg.normalize_advantages = parse_bool(key, value);
  else if (key == "lambda") cfg.advantage.lambda = parse_double(key, value);
  else if (key == "clip") cfg.clip = parse_double(key, value);
  else if (key == "target_kl") cfg.target_kl = parse_double(key, value);
  else if (key == "policy_epochs") cfg.policy_epochs = parse_count(key, value);
  else if (key == "value_epochs") cfg.value_epochs = parse_count(key, value);
  else if (key == "optimizer") {
    if (value == "adam") cfg.optimizer = OptimizerKind::adam;
    else if (value == "sgd") cfg.optimizer = OptimizerKind::sgd;
    else throw ConfigError("optimizer must be adam or sgd");
  } else if (key == "advantage") {
    if (value == "td") cfg.advantage.mode = AdvantageMode::td;
    else if (value == "gae") cfg.advantage.mode = AdvantageMode::gae;
    else throw ConfigError("advantage must be td or gae");
  } else if (key == "algorithm") {
    if (value == "bac") cfg.algorithm = Algorithm::bac;
    else if (value == "ppo") cfg.algorithm = Algorithm::ppo;
    else throw ConfigError("algorithm must be bac or ppo");
  } else {
    throw ConfigError("unknown setting '" + key + "'");
  }
}

std::string canonical_text(const ExperimentSpec& spec) {
  std::ostringstream out;
  out << "name=" << spec.name << "\nenv=" << spec.env << "\nschemes=";
  for (std::size_t i = 0; i < spec.schemes.size(); ++i) out << (i ? "," : "") << to_string(spec.schemes[i]);
  out << "\ngammas=";
  for (std::size_t i = 0; i < spec.gammas.size(); ++i) out << (i ? "," : "") << num(spec.gammas[i]);
  out << "\nseeds=";
  for (std::size_t i = 0; i < spec.seeds.size(); ++i) out << (i ? "," : "") << spec.seeds[i];
  out << "\nsteps=" << spec.steps << '\n';
  for (const auto& [k, v] : spec.overrides) out << k << '=' << v << '\n';
  return out.str();
}

std::string config_hash(const ExperimentSpec& spec) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : canonical_text(spec)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::size_t worker_count() {
  if (const char* env = std::getenv("AVC_WORKERS")) {
    const auto n = parse_count("AVC_WORKERS", env);
    if (n == 0) throw UsageError("AVC_WORKERS must be positive");
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

AgentConfig experiment_agent_config(const ExperimentSpec& spec, WeightingScheme scheme, double gamma,
                                    std::uint64_t seed) {
  AgentConfig cfg;
  const auto algo = spec.overrides.find("algorithm");
  const bool ppo = algo != spec.overrides.end() && algo->second == "ppo";
  if (spec.name == "counterexample") {
    cfg.scheme = scheme;
    cfg.buffer_size = 8;
    cfg.policy_lr = 0.95;
    cfg.correction_lr = 0.01;
    cfg.correction_steps = 1;
    cfg.critic_hidden = 16;
    cfg.scale = 10.0;
  } else {
    cfg = ppo ? AgentConfig::ppo_defaults(scheme) : AgentConfig::bac_defaults(scheme);
  }
  for (const auto& [k, v] : spec.overrides) apply_override(cfg, k, v);
  cfg.scheme = scheme;
  cfg.gamma = gamma;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

// ---- studies ----

CounterexampleRun counterexample_run(const AgentConfig& cfg, std::size_t updates) {
  auto env = two_state_env(cfg.gamma, 100, cfg.seed);
  CounterexampleRun run;
  run.scheme = cfg.scheme;
  run.gamma = cfg.gamma;
  run.seed = cfg.seed;
  run.result = train_tabular(*env, two_state_policy(0.0), cfg, updates);
  run.initial_top = run.result.curve.front().top_probability;
  run.final_top = run.result.curve.back().top_probability;
  for (const auto& p : run.result.curve)
    if (p.top_probability >= 0.95) {
      run.first_hit = p.step;
      break;
    }
  return run;
}

BiasStudy bias_study(const AgentConfig& cfg, const BiasStudyOptions& options) {
  if (cfg.scheme != WeightingScheme::averaging_net) throw ConfigError("bias study needs averaging_net");
  if (options.episode_length == 0 || options.buffer_size % options.episode_length != 0)
    throw ConfigError("buffer size must be a multiple of the episode length");
  const std::uint64_t base = cfg.seed * 4;
  auto env = discrete_reacher_env(cfg.gamma, options.one_hot, base + 1);
  auto eval = discrete_reacher_env(cfg.gamma, options.one_hot, base + 2);
  auto probe = discrete_reacher_env(cfg.gamma, options.one_hot, base + 3);
  const TabularMdp& mdp = *env->tabular();
  const std::size_t k = options.buffer_size / options.episode_length;
  const double horizon = static_cast<double>(options.episode_length);
  Rng rng(base + 4);

  auto target_of = [&](const SoftmaxPolicy& pi) {
    return discounted_stationary(transition_under_policy(mdp, pi), mdp.initial(), cfg.gamma).values;
  };

  BiasStudy study;
  TrainOptions train_options{options.train_steps,
                             std::max<std::size_t>(1, options.train_steps / std::max<std::size_t>(1, options.checkpoints)),
                             5, {}};
  train_options.on_checkpoint = [&](std::size_t step, const ActorCritic& agent) {
    const SoftmaxPolicy pi = tabularize(*env, agent.policy);
    const Vector target = target_of(pi);
    const Vector c = model_correction(agent, *env, cfg, horizon);
    std::vector<Buffer> buffers;
    double mean = 0.0;
    for (std::size_t b = 0; b < options.ratio_buffers; ++b) {
      buffers.push_back(collect_trajectories(*probe, softmax_sampler(pi), k, options.episode_length, rng));
      const Vector cs[] = {c};
      mean += bias_ratio(std::span(&buffers.back(), 1), cs, target).ratio;
    }
    const std::vector<Vector> corrections(buffers.size(), c);
    study.ratios.push_back({step, mean / static_cast<double>(options.ratio_buffers),
                            bias_ratio(buffers, corrections, target).ratio});
  };
  ActorCritic agent(env->observation_dim(), env->n_actions(), cfg);
  study.training = train(*env, *eval, cfg, train_options, &agent);

  // Freeze the policy and let the correction head settle on its data.
  const SoftmaxPolicy pi = tabularize(*env, agent.policy);
  const Sampler sampler = softmax_sampler(pi);
  for (std::size_t b = 0; b < options.fit_buffers; ++b) {
    const Buffer buffer = collect_trajectories(*probe, sampler, k, options.episode_length, rng);
    for (std::size_t m = 0; m < cfg.correction_steps; ++m)
      agent.correction_step(agent.correction_loss(buffer, cfg.gamma, cfg.scale).grad);
  }
  const Vector c = model_correction(agent, *env, cfg, horizon);
  std::vector<Vector> averaging, gamma_t;
  for (std::size_t b = 0; b < options.emphasis_buffers; ++b) {
    const Buffer buffer = collect_trajectories(*probe, sampler, k, options.episode_length, rng);
    averaging.push_back(emphasis(buffer, mdp.n_states(), cfg.gamma, EmphasisScheme::averaging_model, &c));
    gamma_t.push_back(emphasis(buffer, mdp.n_states(), cfg.gamma, EmphasisScheme::gamma_t, nullptr, horizon));
  }
  study.emphasis.target = target_of(pi);
  study.emphasis.ordering = paired_ordering(averaging, gamma_t, study.emphasis.target, options.resamples, rng);
  study.emphasis.mean_averaging = Vector::Zero(study.emphasis.target.size());
  study.emphasis.mean_gamma_t = Vector::Zero(study.emphasis.target.size());
  for (std::size_t b = 0; b < averaging.size(); ++b) {
    study.emphasis.mean_averaging += averaging[b] / static_cast<double>(averaging.size());
    study.emphasis.mean_gamma_t += gamma_t[b] / static_cast<double>(gamma_t.size());
  }
  return study;
}

CartpoleRun cartpole_run(const AgentConfig& cfg, std::size_t steps, std::size_t eval_interval) {
  auto env = make_env("cartpole", cfg.gamma, cfg.seed * 2);
  auto eval = make_env("cartpole", cfg.gamma, cfg.seed * 2 + 1);
  CartpoleRun run;
  run.scheme = cfg.scheme;
  run.seed = cfg.seed;
  run.result = train(*env, *eval, cfg, TrainOptions{steps, eval_interval, 10, {}});
  run.final_return = run.result.curve.empty() ? 0.0 : run.result.curve.back().undiscounted_return;
  return run;
}

NonInferiority non_inferiority(const std::vector<double>& corrected, const std::vector<double>& baseline) {
  if (corrected.size() < 2 || baseline.size() < 2) throw InputError("non-inferiority needs two runs per arm");
  auto stats = [](const std::vector<double>& x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / (n - 1.0) / n};
  };
  const auto [mc, vc] = stats(corrected);
  const auto [mb, vb] = stats(baseline);
  NonInferiority out{mc, mb, std::sqrt(vc + vb), false};
  out.passed = out.mean_corrected >= out.mean_baseline - out.pooled_se;
  return out;
}

// ---- oracle checks ----

namespace {

struct RandomInstance {
  TabularMdp mdp;
  SoftmaxPolicy policy;
};

RandomInstance random_instance(std::mt19937_64& rng, std::size_t max_states) {
  std::uniform_int_distribution<std::size_t> states(2, max_states), actions(2, 4);
  std::uniform_real_distribution<double> gammas(0.05, 0.99);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t S = states(rng), A = actions(rng);
  TabularMdp mdp = random_mdp(S, A, gammas(rng), rng);
  Vector theta(static_cast<Eigen::Index>(S * A));
  for (auto& v : theta) v = normal(rng);
  return {std::move(mdp), SoftmaxPolicy::tabular(S, A, theta)};
}

CheckResult make_check(std::string id, int criterion, double metric, double threshold, bool below,
                       std::string detail) {
  const bool passed = below ? metric <= threshold : metric >= threshold;
  return {std::move(id), criterion, passed, metric, threshold, std::move(detail)};
}

template <class F>
Vector central_difference(const Vector& x, F f, double h) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector up = x, down = x;
    up(i) += h;
    down(i) -= h;
    g(i) = (f(up) - f(down)) / (2.0 * h);
  }
  return g;
}

double relative_error(const Vector& analytic, const Vector& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-8});
  return (analytic - numeric).norm() / scale;
}

Buffer random_one_hot_buffer(std::mt19937_64& rng, std::size_t n_states, std::size_t k, std::size_t T) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(n_states) - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> actions(0, 2);
  Buffer buffer(k * T);
  for (std::size_t j = 0; j < k; ++j) {
    int s = pick(rng);
    for (std::size_t t = 0; t < T; ++t) {
      Transition tr;
      tr.episode = j;
      tr.t = t;
      tr.state = s;
      tr.observation = Vector::Zero(static_cast<Eigen::Index>(n_states));
      tr.observation(s) = 1.0;
      tr.action = actions(rng);
      tr.reward = normal(rng);
      tr.next_state = pick(rng);
      tr.next_observation = Vector::Zero(static_cast<Eigen::Index>(n_states));
      tr.next_observation(tr.next_state) = 1.0;
      tr.timeout = t + 1 == T;
      buffer.push(tr);
      s = tr.next_state;
    }
  }
  return buffer;
}

double worst_gradient_error(std::mt19937_64& rng, std::size_t instances) {
  double worst = 0.0;
  const double h = 1e-6;
  std::uniform_int_distribution<std::size_t> width(1, 6);
  for (std::size_t i = 0; i < instances; ++i) {
    Rng net_rng(rng());
    const std::size_t S = 2 + i % 4;
    const Buffer buffer = random_one_hot_buffer(rng, S, 2, 4);
    const Matrix obs = observation_matrix(buffer);
    const std::size_t n = buffer.size();

    // Raw network: gradient of sum(G .* f(X)).
    const std::vector<std::size_t> sizes{S, width(rng), width(rng), 3};
    const Mlp net(sizes, net_rng);
    const Matrix g = Matrix::Random(3, static_cast<Eigen::Index>(n));
    Mlp::Tape tape;
    net.forward(obs, &tape);
    worst = std::max(worst, relative_error(net.backward(tape, g), central_difference(net.params(), [&](const Vector& p) {
                                             return Mlp(sizes, p).forward(obs).cwiseProduct(g).sum();
                                           }, h)));

    // Correction and regression losses on two heads.
    for (Eigen::Index head : {0, 1}) {
      const auto lg = correction_loss(net, buffer, 0.9, 10.0, head);
      worst = std::max(worst, relative_error(lg.grad, central_difference(net.params(), [&](const Vector& p) {
                                               return correction_loss(Mlp(sizes, p), buffer, 0.9, 10.0, head).loss;
                                             }, h)));
    }
    // Semi-gradient value loss equals the regression gradient with frozen targets.
    const Vector next = net.forward(observation_matrix(buffer, true)).row(0).transpose();
    Vector targets(static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j)
      targets(static_cast<Eigen::Index>(j)) = buffer[j].reward + 0.9 * next(static_cast<Eigen::Index>(j));
    const auto vl = value_loss(net, buffer, 0.9);
    worst = std::max(worst, relative_error(vl.grad, central_difference(net.params(), [&](const Vector& p) {
                                             return regression_loss(Mlp(sizes, p), obs, targets).loss;
                                           }, h)));

    // Policy terms.
    std::vector<std::size_t> actions;
    for (const auto& tr : buffer) actions.push_back(tr.action);
    const Vector coeffs = Vector::Random(static_cast<Eigen::Index>(n));
    const auto ll = weighted_log_likelihood(net, obs, actions, coeffs);
    worst = std::max(worst, relative_error(ll.grad, central_difference(net.params(), [&](const Vector& p) {
                                             return weighted_log_likelihood(Mlp(sizes, p), obs, actions, coeffs).loss;
                                           }, h)));
    const Matrix logp = log_softmax(net.forward(obs));
    Vector old(static_cast<Eigen::Index>(n));
    std::uniform_real_distribution<double> shift(-0.4, 0.4);
    for (std::size_t j = 0; j < n; ++j) {
      // Keep every ratio clear of the clip kinks so the difference quotient is smooth.
      double d = shift(rng);
      while (std::abs(std::exp(d) - 0.8) < 1e-3 || std::abs(std::exp(d) - 1.2) < 1e-3) d = shift(rng);
      old(static_cast<Eigen::Index>(j)) = logp(static_cast<Eigen::Index>(actions[j]), static_cast<Eigen::Index>(j)) - d;
    }
    const Vector adv = Vector::Random(static_cast<Eigen::Index>(n));
    const Vector w = Vector::Random(static_cast<Eigen::Index>(n)).cwiseAbs();
    const auto sur = clipped_surrogate(net, obs, actions, old, adv, w, 0.2);
    worst = std::max(worst, relative_error(sur.grad, central_difference(net.params(), [&](const Vector& p) {
                                             return clipped_surrogate(Mlp(sizes, p), obs, actions, old, adv, w, 0.2).loss;
                                           }, h)));
  }
  return worst;
}

}  // namespace

std::vector<CheckResult> oracle_checks(std::uint64_t seed) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(seed);

  {
    double worst = 0.0;
    for (double gamma : {0.3, 0.5, 0.7, 0.9})
      for (int theta = -5; theta <= 5; ++theta)
        worst = std::max(worst, mismatched_gradient(two_state_mdp(gamma), two_state_policy(theta)).values.cwiseAbs().maxCoeff());
    out.push_back(make_check("zero_gradient", 1, worst, 1e-10, true, "max |mismatched gradient| on the two-state loop"));
  }
  {
    double worst_corrected = 0.0, worst_fd = 0.0;
    for (int i = 0; i < 100; ++i) {
      const auto inst = random_instance(rng, 8);
      const Vector truth = true_policy_gradient(inst.mdp, inst.policy).values;
      worst_corrected = std::max(worst_corrected,
                                 (corrected_expectation_gradient(inst.mdp, inst.policy).values - truth).cwiseAbs().maxCoeff());
      const Vector fd = central_difference(inst.policy.theta(), [&](const Vector& th) {
        return discounted_objective(inst.mdp, inst.policy.with_theta(th));
      }, 1e-5);
      worst_fd = std::max(worst_fd, (fd - truth).cwiseAbs().maxCoeff());
    }
    out.push_back(make_check("corrected_gradient", 3, worst_corrected, 1e-8, true,
                             "max-norm corrected expectation vs true gradient, 100 MDPs"));
    out.push_back(make_check("finite_difference_gradient", 3, worst_fd, 1e-6, true,
                             "max-norm true gradient vs finite differences of the objective"));
  }
  {
    double worst_l1 = 0.0, worst_l2 = -1e300, worst_mean = 0.0;
    for (int i = 0; i < 100; ++i) {
      const auto inst = random_instance(rng, 8);
      const Matrix p = transition_under_policy(inst.mdp, inst.policy);
      const Vector d = undiscounted_stationary(p).values;
      const Vector tau = expected_recurrence_time(p);
      const Vector c = averaging_correction_exact(inst.mdp, inst.policy).values;
      worst_l1 = std::max(worst_l1, (d.cwiseProduct(tau).array() - 1.0).abs().maxCoeff());
      worst_l2 = std::max(worst_l2, (c - tau).maxCoeff());
      worst_mean = std::max(worst_mean, std::abs(d.dot(c) - 1.0));
    }
    out.push_back(make_check("stationary_recurrence", 0, worst_l1, 1e-8, true, "max |d_pi * E[tau] - 1|"));
    out.push_back(make_check("recurrence_bound", 0, worst_l2, 1e-12, true, "max c_pi - E[tau]"));
    out.push_back(make_check("correction_mean", 0, worst_mean, 1e-10, true, "max |sum d_pi c_pi - 1|"));
  }
  {
    double worst_kt = 0.0;
    for (int i = 0; i < 200; ++i) {
      const std::size_t S = 2 + i % 6;
      const Buffer buffer = random_one_hot_buffer(rng, S, 1 + i % 5, 1 + i % 37);
      const double gamma = 0.05 + 0.94 * static_cast<double>(i % 20) / 19.0;
      const auto w = kt_weighting(buffer, gamma);
      worst_kt = std::max(worst_kt, (per_state_mean(buffer, w, S) - buffer_correction(buffer, gamma, S).correction.values)
                                        .cwiseAbs()
                                        .maxCoeff());
    }
    out.push_back(make_check("two_corrections", 4, worst_kt, 1e-12, true,
                             "per-state mean of kt weights vs averaging correction"));
    double worst_limit = 0.0;
    for (double gamma : {0.3, 0.5, 0.7, 0.9}) {
      auto env = two_state_env(gamma, 0, seed);
      Rng roll(seed);
      const Buffer buffer = collect_trajectories(*env, softmax_sampler(two_state_policy(0.0)), 1, 1000, roll);
      const Vector c = per_state_mean(buffer, kt_weighting(buffer, gamma), 2);
      worst_limit = std::max(worst_limit, std::abs(c(0) - 2.0 / (1.0 + gamma)));
    }
    out.push_back(make_check("correction_limit", 4, worst_limit, 1e-3, true,
                             "|c_T(first state) - 2/(1+gamma)| at T = 1000"));
  }
  {
    const double gamma = 0.9, eps = 0.1;
    const SampleSize size = sample_size_bound(eps, 0.1, 2, gamma);
    auto env = two_state_env(gamma, 0, seed);
    const TabularMdp& mdp = *env->tabular();
    const SoftmaxPolicy pi = two_state_policy(0.0);
    const Vector target = discounted_stationary(transition_under_policy(mdp, pi), mdp.initial(), gamma).values;
    Rng roll(seed + 1);
    int within = 0;
    for (int rep = 0; rep < 100; ++rep) {
      const Buffer buffer = collect_trajectories(*env, softmax_sampler(pi), size.trajectories, size.length, roll);
      within += max_norm_distance(emphasis(buffer, 2, gamma, EmphasisScheme::averaging_buffer), target) <= eps;
    }
    out.push_back(make_check("sample_size_bound", 5, within, 90, false,
                             "repetitions within eps at k=" + std::to_string(size.trajectories) +
                                 ", T=" + std::to_string(size.length)));
  }
  {
    double worst = 0.0;
    std::uniform_real_distribution<double> gammas(0.05, 0.995);
    for (int i = 0; i < 1000; ++i) {
      const std::size_t k = 1 + static_cast<std::size_t>(i % 9), T = 1 + static_cast<std::size_t>((i * 7) % 40);
      const std::size_t S = 1 + static_cast<std::size_t>(i % 12);
      const double gamma = gammas(rng);
      const Buffer buffer = random_one_hot_buffer(rng, S, k, T);
      const Vector d = sampling_distribution(buffer, S).values;
      const Vector c = buffer_correction(buffer, gamma, S).correction.values;
      worst = std::max(worst, std::abs(d.dot(c) - (1.0 - std::pow(gamma, static_cast<double>(T)))));
    }
    out.push_back(make_check("normalization", 6, worst, 1e-12, true, "max |sum d_D c_D - (1 - gamma^T)|, 1000 buffers"));
  }
  {
    double worst = -1e300;
    for (int i = 0; i < 1000; ++i) {
      const auto inst = random_instance(rng, 8);
      const Matrix p = transition_under_policy(inst.mdp, inst.policy);
      const Vector d = undiscounted_stationary(p).values;
      const Vector dg = discounted_stationary(p, inst.mdp.initial(), inst.mdp.gamma()).values;
      worst = std::max(worst, tv_distance(dg, d) - tv_distance(inst.mdp.initial(), d));
    }
    out.push_back(make_check("tv_contraction", 7, worst, 1e-12, true, "max TV(d_gamma, d_pi) - TV(rho, d_pi), 1000 triples"));
  }
  out.push_back(make_check("gradient_checks", 10, worst_gradient_error(rng, 50), 1e-5, true,
                           "worst relative error over network and loss gradients, 50 instances"));
  return out;
}

// ---- harness ----

namespace {

const char* kCurveHeader =
    "step,seed,scheme,env,gamma,undiscounted_return,discounted_return,emphasis_bias,correction_loss,"
    "top_probability\n";

void write_curve(std::ostream& out, const TrainResult& r, std::uint64_t seed, WeightingScheme scheme,
                 const std::string& env, double gamma, std::size_t stride) {
  for (std::size_t i = 0; i < r.curve.size(); ++i) {
    if (stride > 1 && i % stride != 0 && i + 1 != r.curve.size()) continue;
    const auto& p = r.curve[i];
    out << p.step << ',' << seed << ',' << to_string(scheme) << ',' << env << ',' << num(gamma) << ','
        << num(p.undiscounted_return) << ',' << num(p.discounted_return) << ',' << num(p.emphasis_bias) << ','
        << num(p.correction_loss) << ',' << num(p.top_probability) << '\n';
  }
}

std::ofstream open_artifact(const fs::path& dir, const std::string& file, RunStatus& status) {
  std::ofstream out(dir / file);
  if (!out) throw UsageError("cannot write " + (dir / file).string());
  status.artifacts.push_back(file);
  return out;
}

std::string csv_text(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  return s;
}

struct Job {
  WeightingScheme scheme;
  double gamma;
  std::uint64_t seed;
};

std::vector<Job> jobs_of(const ExperimentSpec& spec) {
  std::vector<Job> jobs;
  for (auto scheme : spec.schemes)
    for (double gamma : spec.gammas)
      for (auto seed : spec.seeds) jobs.push_back({scheme, gamma, seed});
  return jobs;
}

void run_counterexample(const ExperimentSpec& spec, RunStatus& status) {
  const auto jobs = jobs_of(spec);
  for (const auto& j : jobs) experiment_agent_config(spec, j.scheme, j.gamma, j.seed);
  const auto runs = parallel_map<CounterexampleRun>(jobs.size(), worker_count(), [&](std::size_t i) {
    return counterexample_run(experiment_agent_config(spec, jobs[i].scheme, jobs[i].gamma, jobs[i].seed), spec.steps);
  });
  auto curves = open_artifact(spec.out, "curves.csv", status);
  auto summary = open_artifact(spec.out, "summary.csv", status);
  curves << kCurveHeader;
  summary << "scheme,gamma,seed,initial_top,final_top,first_hit,diverged\n";
  const std::size_t stride = std::max<std::size_t>(1, spec.steps / 500);
  for (const auto& r : runs) {
    write_curve(curves, r.result, r.seed, r.scheme, spec.env, r.gamma, stride);
    summary << to_string(r.scheme) << ',' << num(r.gamma) << ',' << r.seed << ',' << num(r.initial_top) << ','
            << num(r.final_top) << ',' << r.first_hit << ',' << r.result.diverged << '\n';
  }
}

void run_bias_variance(const ExperimentSpec& spec, RunStatus& status) {
  const auto jobs = jobs_of(spec);
  for (const auto& j : jobs) experiment_agent_config(spec, j.scheme, j.gamma, j.seed);
  BiasStudyOptions options;
  options.train_steps = spec.steps;
  const auto studies = parallel_map<BiasStudy>(jobs.size(), worker_count(), [&](std::size_t i) {
    return bias_study(experiment_agent_config(spec, jobs[i].scheme, jobs[i].gamma, jobs[i].seed), options);
  });
  auto ratio = open_artifact(spec.out, "bias_ratio.csv", status);
  auto bv = open_artifact(spec.out, "bias_variance.csv", status);
  auto emph = open_artifact(spec.out, "emphasis.csv", status);
  auto curves = open_artifact(spec.out, "curves.csv", status);
  ratio << "seed,gamma,step,mean_ratio,pooled_ratio\n";
  bv << "seed,gamma,scheme,squared_bias,variance,bias_confidence,variance_confidence\n";
  emph << "seed,gamma,state,target,averaging,gamma_t\n";
  curves << kCurveHeader;
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const auto& s = studies[i];
    const auto& j = jobs[i];
    for (const auto& p : s.ratios)
      ratio << j.seed << ',' << num(j.gamma) << ',' << p.step << ',' << num(p.mean_ratio) << ','
            << num(p.pooled_ratio) << '\n';
    const auto& o = s.emphasis.ordering;
    bv << j.seed << ',' << num(j.gamma) << ",averaging," << num(o.a.squared_bias) << ',' << num(o.a.variance) << ','
       << num(o.bias_confidence) << ',' << num(o.variance_confidence) << '\n';
    bv << j.seed << ',' << num(j.gamma) << ",gamma_t," << num(o.b.squared_bias) << ',' << num(o.b.variance) << ','
       << num(1.0 - o.bias_confidence) << ',' << num(1.0 - o.variance_confidence) << '\n';
    for (Eigen::Index st = 0; st < s.emphasis.target.size(); ++st)
      emph << j.seed << ',' << num(j.gamma) << ',' << st << ',' << num(s.emphasis.target(st)) << ','
           << num(s.emphasis.mean_averaging(st)) << ',' << num(s.emphasis.mean_gamma_t(st)) << '\n';
    write_curve(curves, s.training, j.seed, j.scheme, spec.env, j.gamma, 1);
  }
}

void run_oracle_checks(const ExperimentSpec& spec, RunStatus& status) {
  auto out = open_artifact(spec.out, "oracle_checks.csv", status);
  out << "seed,id,criterion,passed,metric,threshold,detail\n";
  for (auto seed : spec.seeds)
    for (const auto& c : oracle_checks(seed))
      out << seed << ',' << c.id << ',' << c.criterion << ',' << c.passed << ',' << num(c.metric) << ','
          << num(c.threshold) << ',' << csv_text(c.detail) << '\n';
}

void run_cartpole(const ExperimentSpec& spec, RunStatus& status) {
  const auto jobs = jobs_of(spec);
  for (const auto& j : jobs) experiment_agent_config(spec, j.scheme, j.gamma, j.seed);
  const std::size_t interval = std::max<std::size_t>(1, spec.steps / 20);
  const auto runs = parallel_map<CartpoleRun>(jobs.size(), worker_count(), [&](std::size_t i) {
    const AgentConfig cfg = experiment_agent_config(spec, jobs[i].scheme, jobs[i].gamma, jobs[i].seed);
    if (spec.env == "cartpole") return cartpole_run(cfg, spec.steps, interval);
    auto env = make_env(spec.env, cfg.gamma, cfg.seed * 2);
    auto eval = make_env(spec.env, cfg.gamma, cfg.seed * 2 + 1);
    CartpoleRun run{cfg.scheme, cfg.seed, train(*env, *eval, cfg, TrainOptions{spec.steps, interval, 10, {}}), 0.0};
    run.final_return = run.result.curve.back().undiscounted_return;
    return run;
  });
  auto curves = open_artifact(spec.out, "curves.csv", status);
  auto summary = open_artifact(spec.out, "summary.csv", status);
  curves << kCurveHeader;
  summary << "scheme,gamma,seed,final_return,diverged\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    write_curve(curves, runs[i].result, runs[i].seed, runs[i].scheme, spec.env, jobs[i].gamma, 1);
    summary << to_string(runs[i].scheme) << ',' << num(jobs[i].gamma) << ',' << runs[i].seed << ','
            << num(runs[i].final_return) << ',' << runs[i].result.diverged << '\n';
  }
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

}  // namespace

RunStatus run(const ExperimentSpec& spec) {
  spec.validate();
  fs::create_directories(spec.out);
  const ExperimentInfo& info = find_experiment(spec.name);
  RunStatus status;
  try {
    if (spec.name == "counterexample") run_counterexample(spec, status);
    else if (spec.name == "bias_variance") run_bias_variance(spec, status);
    else if (spec.name == "oracle_checks") run_oracle_checks(spec, status);
    else run_cartpole(spec, status);
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    status.ok = false;
    status.error = e.what();
  }
  json manifest;
  manifest["experiment"] = spec.name;
  manifest["anchor"] = info.anchor;
  manifest["description"] = info.description;
  manifest["config_hash"] = config_hash(spec);
  manifest["config"] = canonical_text(spec);
  manifest["seeds"] = spec.seeds;
  manifest["code_version"] = code_version();
  manifest["status"] = status.ok ? "ok" : "error";
  if (!status.ok) manifest["error"] = status.error;
  manifest["artifacts"] = status.artifacts;
  manifest["created"] = timestamp();
  std::ofstream(spec.out / "manifest.json") << manifest.dump(2) << '\n';
  return status;
}

// ---- verify ----

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw UsageError("artifact is missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
  double number(std::size_t row, const std::string& name) const { return std::stod(rows[row][column(name)]); }
  const std::string& text(std::size_t row, const std::string& name) const { return rows[row][column(name)]; }
};

Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("missing artifact " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw UsageError("empty artifact " + path.string());
  t.header = split(line, ',');
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() < t.header.size()) throw UsageError("short row in " + path.string());
    t.rows.push_back(std::move(cells));
  }
  return t;
}

json criterion(bool passed, json detail) { return json{{"passed", passed}, {"detail", std::move(detail)}}; }

json verify_counterexample(const Table& t) {
  const std::set<double> required{0.3, 0.5, 0.7, 0.9};
  json detail = json::object();
  bool passed = true;
  std::map<std::pair<std::string, double>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < t.rows.size(); ++i) groups[{t.text(i, "scheme"), t.number(i, "gamma")}].push_back(i);
  for (const std::string scheme : {"uncorrected", "gamma_t", "averaging_net"})
    for (double g : required) {
      const auto it = groups.find({scheme, g});
      const std::string key = scheme + "@" + num(g);
      if (it == groups.end() || it->second.size() < 10) {
        passed = false;
        detail[key] = "fewer than 10 seeds";
        continue;
      }
      std::size_t good = 0;
      double worst = 0.0;
      for (auto i : it->second) {
        if (scheme == "uncorrected") {
          const double drift = std::abs(t.number(i, "final_top") - t.number(i, "initial_top"));
          worst = std::max(worst, drift);
          good += drift < 0.05;
        } else {
          const double hit = t.number(i, "first_hit");
          worst = std::max(worst, hit);
          good += hit >= 1 && hit <= 5000;
        }
      }
      passed = passed && good == it->second.size();
      detail[key] = json{{"runs", it->second.size()}, {"passing", good},
                         {scheme == "uncorrected" ? "max_drift" : "max_first_hit", worst}};
    }
  return json{{"2", criterion(passed, detail)}};
}

json verify_bias(const Table& ratio, const Table& bv) {
  json out;
  bool ordering = !bv.rows.empty();
  json od = json::array();
  for (std::size_t i = 0; i + 1 < bv.rows.size(); i += 2) {
    const bool ok = bv.text(i, "scheme") == "averaging" && bv.text(i + 1, "scheme") == "gamma_t" &&
                    bv.number(i, "squared_bias") < bv.number(i + 1, "squared_bias") &&
                    bv.number(i, "variance") < bv.number(i + 1, "variance") &&
                    bv.number(i, "bias_confidence") >= 0.95 && bv.number(i, "variance_confidence") >= 0.95;
    ordering = ordering && ok;
    od.push_back(json{{"seed", bv.text(i, "seed")},
                      {"averaging_bias", bv.number(i, "squared_bias")},
                      {"gamma_t_bias", bv.number(i + 1, "squared_bias")},
                      {"averaging_variance", bv.number(i, "variance")},
                      {"gamma_t_variance", bv.number(i + 1, "variance")},
                      {"bias_confidence", bv.number(i, "bias_confidence")},
                      {"variance_confidence", bv.number(i, "variance_confidence")}});
  }
  out["8"] = criterion(ordering, od);
  std::map<std::string, std::pair<std::size_t, std::size_t>> below;
  for (std::size_t i = 0; i < ratio.rows.size(); ++i) {
    auto& [n, k] = below[ratio.text(i, "seed")];
    ++n;
    k += ratio.number(i, "mean_ratio") < 1.0;
  }
  bool ratios = !below.empty();
  json rd = json::object();
  for (const auto& [seed, nk] : below) {
    ratios = ratios && nk.second >= 3;
    rd[seed] = json{{"checkpoints", nk.first}, {"below_one", nk.second}};
  }
  out["9"] = criterion(ratios, rd);
  return out;
}

json verify_oracle(const Table& t) {
  std::map<std::string, std::pair<bool, json>> by_criterion;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::string c = t.text(i, "criterion");
    if (c == "0") continue;
    auto& [ok, detail] = by_criterion.try_emplace(c, true, json::object()).first->second;
    ok = ok && t.text(i, "passed") == "1";
    detail[t.text(i, "id")] = json{{"metric", t.number(i, "metric")}, {"threshold", t.number(i, "threshold")}};
  }
  json out = json::object();
  for (auto& [c, v] : by_criterion) out[c] = criterion(v.first, v.second);
  return out;
}

json verify_cartpole(const Table& t) {
  std::vector<double> corrected, baseline;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (t.text(i, "scheme") == "averaging_net") corrected.push_back(t.number(i, "final_return"));
    if (t.text(i, "scheme") == "uncorrected") baseline.push_back(t.number(i, "final_return"));
  }
  if (corrected.size() < 10 || baseline.size() < 10)
    return json{{"11", criterion(false, "fewer than 10 seeds per scheme")}};
  const NonInferiority ni = non_inferiority(corrected, baseline);
  return json{{"11", criterion(ni.passed, json{{"mean_averaging", ni.mean_corrected},
                                                {"mean_uncorrected", ni.mean_baseline},
                                                {"pooled_se", ni.pooled_se}})}};
}

}  // namespace

json verify(const std::string& name, const fs::path& dir) {
  find_experiment(name);
  std::ifstream manifest_in(dir / "manifest.json");
  if (!manifest_in) throw UsageError("missing " + (dir / "manifest.json").string());
  const json manifest = json::parse(manifest_in);
  if (manifest.value("experiment", "") != name)
    throw UsageError("artifacts in " + dir.string() + " belong to '" + manifest.value("experiment", "") + "'");
  json report;
  report["experiment"] = name;
  report["config_hash"] = manifest.value("config_hash", "");
  if (manifest.value("status", "") != "ok") {
    report["criteria"] = json::object();
    report["passed"] = false;
    report["error"] = manifest.value("error", "run failed");
    return report;
  }
  json criteria;
  if (name == "counterexample") criteria = verify_counterexample(read_table(dir / "summary.csv"));
  else if (name == "bias_variance")
    criteria = verify_bias(read_table(dir / "bias_ratio.csv"), read_table(dir / "bias_variance.csv"));
  else if (name == "oracle_checks") criteria = verify_oracle(read_table(dir / "oracle_checks.csv"));
  else criteria = verify_cartpole(read_table(dir / "summary.csv"));
  bool all = true;
  for (const auto& [id, c] : criteria.items()) all = all && c.at("passed").get<bool>();
  report["criteria"] = criteria;
  report["passed"] = all;
  return report;
}

}  // namespace avc
