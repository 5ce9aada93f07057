#include "avc/agents.hpp"

#include <cmath>
#include <string>

#include "avc/errors.hpp"

namespace avc {

std::string_view to_string(WeightingScheme scheme) {
  switch (scheme) {
    case WeightingScheme::uncorrected: return "uncorrected";
    case WeightingScheme::gamma_t: return "gamma_t";
    case WeightingScheme::averaging_net: return "averaging_net";
    case WeightingScheme::averaging_oracle: return "averaging_oracle";
  }
  return "unknown";
}

WeightingScheme parse_scheme(std::string_view name) {
  for (auto s : {WeightingScheme::uncorrected, WeightingScheme::gamma_t,
                 WeightingScheme::averaging_net, WeightingScheme::averaging_oracle})
    if (to_string(s) == name) return s;
  throw InputError("unknown weighting scheme '" + std::string(name) + "'");
}

void AgentConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie strictly inside (0, 1)");
  if (!(correction_lr > 0.0 && policy_lr > 0.0 && value_lr > 0.0))
    throw ConfigError("learning rates must be positive");
  if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("clip epsilon must lie in (0, 1)");
  if (buffer_size == 0) throw ConfigError("buffer size must be positive");
  if (!(scale > 0.0)) throw ConfigError("correction scale must be positive");
  if (advantage.lambda < 0.0 || advantage.lambda > 1.0) throw ConfigError("lambda must lie in [0, 1]");
  if (!(target_kl > 0.0)) throw ConfigError("target KL must be positive");
}

AgentConfig AgentConfig::bac_defaults(WeightingScheme scheme) {
  AgentConfig cfg;
  cfg.scheme = scheme;
  cfg.algorithm = Algorithm::bac;
  cfg.gamma = 0.995;
  cfg.policy_hidden = 32;
  if (scheme == WeightingScheme::averaging_net || scheme == WeightingScheme::averaging_oracle) {
    cfg.buffer_size = 128;
    cfg.policy_lr = 3e-4;
    cfg.value_lr = 9e-3;
    cfg.scale = 29.0;
    cfg.critic_hidden = 64;
  } else {
    cfg.buffer_size = 64;
    cfg.policy_lr = 8e-4;
    cfg.value_lr = 8e-4;
    cfg.critic_hidden = 128;
  }
  return cfg;
}

AgentConfig AgentConfig::ppo_defaults(WeightingScheme scheme) {
  AgentConfig cfg;
  cfg.scheme = scheme;
  cfg.algorithm = Algorithm::ppo;
  cfg.gamma = 0.99;
  cfg.buffer_size = 4000;
  cfg.policy_lr = 3e-4;
  cfg.value_lr = 1e-3;
  cfg.correction_lr = 1e-3;
  cfg.correction_steps = 80;
  cfg.scale = 10.0;
  cfg.policy_hidden = 64;
  cfg.critic_hidden = 64;
  cfg.advantage = {AdvantageMode::gae, 0.97};
  cfg.normalize_advantages = true;
  cfg.clip = 0.2;
  cfg.target_kl = 0.01;
  return cfg;
}

namespace {

Rng seeded(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return Rng(seq);
}

Mlp make_net(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, double gain) {
  return Mlp({in, hidden, hidden, out}, rng, gain);
}

bool uses_net_correction(const AgentConfig& cfg) {
  return cfg.scheme == WeightingScheme::averaging_net;
}

}  // namespace

ActorCritic::ActorCritic(std::size_t observation_dim, std::size_t n_actions, const AgentConfig& cfg)
    : policy([&] {
        Rng rng = seeded(cfg.seed, 1);
        return make_net(observation_dim, cfg.policy_hidden, n_actions, rng, 0.01);
      }()),
      critic([&] {
        Rng rng = seeded(cfg.seed, 2);
        return make_net(observation_dim, cfg.critic_hidden, cfg.shared_correction ? 2 : 1, rng, 1.0);
      }()),
      correction([&]() -> std::optional<Mlp> {
        if (cfg.shared_correction) return std::nullopt;
        Rng rng = seeded(cfg.seed, 3);
        return make_net(observation_dim, cfg.critic_hidden, 1, rng, 1.0);
      }()),
      policy_opt(cfg.optimizer, policy.n_params(), cfg.policy_lr),
      value_opt(cfg.optimizer, critic.n_params(), cfg.value_lr),
      correction_opt(cfg.optimizer, correction ? correction->n_params() : critic.n_params(),
                     cfg.correction_lr) {
  cfg.validate();
}

Vector ActorCritic::action_probs(const Vector& observation) const {
  Matrix logits = policy.forward(Matrix(observation));
  return log_softmax(logits).col(0).array().exp();
}

Sampler ActorCritic::sampler() const {
  // Snapshot the policy so the sampler stays valid and frozen.
  return [net = policy](const Vector& obs, int, Rng& rng) {
    const Vector p = log_softmax(net.forward(Matrix(obs))).col(0).array().exp();
    return sample_categorical(p, rng);
  };
}

Vector ActorCritic::correction_output(const Matrix& observations) const {
  if (correction) return correction->forward(observations).row(0).transpose();
  return critic.forward(observations).row(kCorrectionHead).transpose();
}

LossGrad ActorCritic::correction_loss(const Buffer& buffer, double gamma, double scale) const {
  if (correction) return avc::correction_loss(*correction, buffer, gamma, scale, 0);
  return avc::correction_loss(critic, buffer, gamma, scale, kCorrectionHead);
}

void ActorCritic::correction_step(const Vector& grad) {
  if (correction) correction_opt.descend(*correction, grad);
  else correction_opt.descend(critic, grad);
}

Vector sample_weights(const ActorCritic& agent, const Buffer& buffer, const AgentConfig& cfg,
                      double horizon, const Vector* oracle_correction) {
  const auto n = static_cast<Eigen::Index>(buffer.size());
  switch (cfg.scheme) {
    case WeightingScheme::uncorrected:
      return Vector::Ones(n);
    case WeightingScheme::gamma_t: {
      const auto w = kt_weighting(buffer, cfg.gamma, horizon);
      return Eigen::Map<const Vector>(w.data(), n);
    }
    case WeightingScheme::averaging_net:
      return agent.correction_output(observation_matrix(buffer));
    case WeightingScheme::averaging_oracle: {
      if (oracle_correction == nullptr)
        throw ConfigError("averaging_oracle needs a tabular env with an exact correction");
      Vector w(n);
      for (std::size_t i = 0; i < buffer.size(); ++i) {
        const int s = buffer[i].state;
        if (s < 0 || s >= oracle_correction->size())
          throw ConfigError("averaging_oracle needs tabular state ids");
        w(static_cast<Eigen::Index>(i)) = (*oracle_correction)(s);
      }
      return w;
    }
  }
  throw ConfigError("unknown scheme");
}

namespace {

void require_finite(const Vector& params, const char* what) {
  if (!params.allFinite()) throw DivergenceError(std::string(what) + " parameters are not finite");
}

double train_correction(ActorCritic& agent, const Buffer& buffer, const AgentConfig& cfg) {
  double loss = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t m = 0; m < cfg.correction_steps; ++m) {
    const LossGrad lg = agent.correction_loss(buffer, cfg.gamma, cfg.scale);
    if (m == 0) loss = lg.loss;
    agent.correction_step(lg.grad);
  }
  return loss;
}

std::vector<std::size_t> actions_of(const Buffer& buffer) {
  std::vector<std::size_t> actions;
  actions.reserve(buffer.size());
  for (const auto& tr : buffer) actions.push_back(tr.action);
  return actions;
}

void normalize(Vector& v) {
  if (v.size() < 2) return;
  const double mean = v.mean();
  const double sd = std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size()));
  v.array() -= mean;
  if (sd > 1e-8) v /= sd;
}

}  // namespace

UpdateStats bac_update(ActorCritic& agent, Buffer& buffer, const AgentConfig& cfg, double horizon,
                       const Vector* oracle_correction) {
  if (buffer.empty()) throw InputError("bac_update on an empty buffer");
  UpdateStats stats;
  if (uses_net_correction(cfg)) stats.correction_loss = train_correction(agent, buffer, cfg);

  const Vector weights = sample_weights(agent, buffer, cfg, horizon, oracle_correction);
  Vector adv = advantages(agent.critic, buffer, cfg.gamma, cfg.advantage, ActorCritic::kValueHead);
  if (cfg.normalize_advantages) normalize(adv);
  const Matrix obs = observation_matrix(buffer);
  const auto actions = actions_of(buffer);
  const LossGrad pg = weighted_log_likelihood(agent.policy, obs, actions, weights.cwiseProduct(adv));
  agent.policy_opt.descend(agent.policy, -pg.grad);
  stats.policy_objective = pg.loss;
  stats.policy_iterations = 1;

  for (std::size_t k = 0; k < cfg.value_steps; ++k) {
    const LossGrad vl = value_loss(agent.critic, buffer, cfg.gamma, ActorCritic::kValueHead);
    if (k == 0) stats.value_loss = vl.loss;
    agent.value_opt.descend(agent.critic, vl.grad);
  }
  require_finite(agent.policy.params(), "policy");
  require_finite(agent.critic.params(), "critic");
  buffer.clear();
  return stats;
}

UpdateStats ppo_update(ActorCritic& agent, Buffer& buffer, const AgentConfig& cfg, double horizon,
                       const Vector* oracle_correction) {
  if (buffer.empty()) throw InputError("ppo_update on an empty buffer");
  UpdateStats stats;
  if (uses_net_correction(cfg)) stats.correction_loss = train_correction(agent, buffer, cfg);

  const Vector weights = sample_weights(agent, buffer, cfg, horizon, oracle_correction);
  Vector adv = advantages(agent.critic, buffer, cfg.gamma, cfg.advantage, ActorCritic::kValueHead);
  if (cfg.normalize_advantages) normalize(adv);
  const Vector returns = bootstrapped_returns(agent.critic, buffer, cfg.gamma, ActorCritic::kValueHead);

  const Matrix obs = observation_matrix(buffer);
  const auto actions = actions_of(buffer);
  const Matrix old_logp_all = log_softmax(agent.policy.forward(obs));
  Vector old_logp(obs.cols());
  for (Eigen::Index j = 0; j < obs.cols(); ++j)
    old_logp(j) = old_logp_all(static_cast<Eigen::Index>(actions[static_cast<std::size_t>(j)]), j);

  for (std::size_t epoch = 0; epoch < cfg.policy_epochs; ++epoch) {
    if (epoch == 0) {
      const Matrix logp = log_softmax(agent.policy.forward(obs));
      for (Eigen::Index j = 0; j < obs.cols(); ++j) {
        const auto a = static_cast<Eigen::Index>(actions[static_cast<std::size_t>(j)]);
        stats.first_epoch_max_ratio_error =
            std::max(stats.first_epoch_max_ratio_error, std::abs(std::exp(logp(a, j) - old_logp(j)) - 1.0));
      }
    } else {
      stats.kl = mean_kl(agent.policy, obs, old_logp_all);
      if (stats.kl > cfg.target_kl) break;
    }
    const LossGrad sur =
        clipped_surrogate(agent.policy, obs, actions, old_logp, adv, weights, cfg.clip);
    if (epoch == 0) stats.policy_objective = sur.loss;
    agent.policy_opt.descend(agent.policy, -sur.grad);
    ++stats.policy_iterations;
  }

  for (std::size_t k = 0; k < cfg.value_epochs; ++k) {
    const LossGrad vl = regression_loss(agent.critic, obs, returns, ActorCritic::kValueHead);
    if (k == 0) stats.value_loss = vl.loss;
    agent.value_opt.descend(agent.critic, vl.grad);
  }
  require_finite(agent.policy.params(), "policy");
  require_finite(agent.critic.params(), "critic");
  buffer.clear();
  return stats;
}

TabularActor make_tabular_actor(const SoftmaxPolicy& initial, const AgentConfig& cfg, Rng& rng) {
  cfg.validate();
  TabularActor actor{initial, std::nullopt, std::nullopt};
  if (uses_net_correction(cfg)) {
    actor.correction = make_net(initial.n_states(), cfg.critic_hidden, 1, rng, 1.0);
    actor.correction_opt.emplace(cfg.optimizer, actor.correction->n_params(), cfg.correction_lr);
  }
  return actor;
}

Vector tabular_gradient(const TabularActor& actor, const TabularMdp& mdp, const Buffer& buffer,
                        const AgentConfig& cfg, double horizon) {
  const Matrix q = action_values(mdp, actor.policy);
  const Matrix per_state = per_state_gradient(actor.policy, q);
  const auto n = static_cast<Eigen::Index>(buffer.size());
  Vector w;
  switch (cfg.scheme) {
    case WeightingScheme::uncorrected:
      w = Vector::Ones(n);
      break;
    case WeightingScheme::gamma_t: {
      const auto kt = kt_weighting(buffer, cfg.gamma, horizon);
      w = Eigen::Map<const Vector>(kt.data(), n);
      break;
    }
    case WeightingScheme::averaging_net:
      w = actor.correction->forward(observation_matrix(buffer)).row(0).transpose();
      break;
    case WeightingScheme::averaging_oracle: {
      const Vector c = averaging_correction_exact(mdp, actor.policy).values;
      w.resize(n);
      for (std::size_t i = 0; i < buffer.size(); ++i) w(static_cast<Eigen::Index>(i)) = c(buffer[i].state);
      break;
    }
  }
  Vector grad = Vector::Zero(static_cast<Eigen::Index>(actor.policy.n_params()));
  for (std::size_t i = 0; i < buffer.size(); ++i)
    grad += w(static_cast<Eigen::Index>(i)) * per_state.col(buffer[i].state);
  return grad / static_cast<double>(n);
}

UpdateStats tabular_bac_update(TabularActor& actor, const TabularMdp& mdp, Buffer& buffer,
                               const AgentConfig& cfg, double horizon) {
  if (buffer.empty()) throw InputError("tabular update on an empty buffer");
  UpdateStats stats;
  if (actor.correction) {
    for (std::size_t m = 0; m < cfg.correction_steps; ++m) {
      const LossGrad lg = avc::correction_loss(*actor.correction, buffer, cfg.gamma, cfg.scale);
      if (m == 0) stats.correction_loss = lg.loss;
      actor.correction_opt->descend(*actor.correction, lg.grad);
    }
  }
  const Vector grad = tabular_gradient(actor, mdp, buffer, cfg, horizon);
  actor.policy = actor.policy.with_theta(actor.policy.theta() + cfg.policy_lr * grad);
  stats.policy_iterations = 1;
  require_finite(actor.policy.theta(), "policy");
  buffer.clear();
  return stats;
}

SoftmaxPolicy tabularize(const Env& env, const Mlp& policy) {
  const TabularMdp* mdp = env.tabular();
  if (mdp == nullptr) throw ConfigError("env has no tabular view");
  const auto S = mdp->n_states();
  const auto A = mdp->n_actions();
  Matrix obs(static_cast<Eigen::Index>(env.observation_dim()), static_cast<Eigen::Index>(S));
  for (std::size_t s = 0; s < S; ++s) obs.col(static_cast<Eigen::Index>(s)) = env.observe(static_cast<int>(s));
  const Matrix logp = log_softmax(policy.forward(obs));
  Vector theta(static_cast<Eigen::Index>(S * A));
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t a = 0; a < A; ++a)
      theta(static_cast<Eigen::Index>(s * A + a)) = logp(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s));
  return SoftmaxPolicy::tabular(S, A, theta);
}

Vector model_correction(const ActorCritic& agent, const Env& env, const AgentConfig& cfg,
                        double horizon) {
  const TabularMdp* mdp = env.tabular();
  if (mdp == nullptr) throw ConfigError("env has no tabular view");
  Matrix obs(static_cast<Eigen::Index>(env.observation_dim()), static_cast<Eigen::Index>(mdp->n_states()));
  for (std::size_t s = 0; s < mdp->n_states(); ++s)
    obs.col(static_cast<Eigen::Index>(s)) = env.observe(static_cast<int>(s));
  return agent.correction_output(obs) * ((1.0 - cfg.gamma) * horizon / cfg.scale);
}

EpisodeReturns evaluate(Env& env, const Sampler& sampler, std::size_t episodes, double gamma,
                        Rng& rng) {
  EpisodeReturns total;
  for (std::size_t e = 0; e < episodes; ++e) {
    EnvStep step = env.reset();
    double discount = 1.0;
    for (;;) {
      const std::size_t action = sampler(step.observation, step.state, rng);
      step = env.step(action);
      total.undiscounted += step.reward;
      total.discounted += discount * step.reward;
      discount *= gamma;
      if (step.terminal || step.timeout) break;
    }
  }
  total.undiscounted /= static_cast<double>(episodes);
  total.discounted /= static_cast<double>(episodes);
  return total;
}

TrainResult train(Env& env, Env& eval_env, const AgentConfig& cfg, const TrainOptions& options,
                  ActorCritic* agent_out) {
  cfg.validate();
  const TabularMdp* mdp = env.tabular();
  if (cfg.scheme == WeightingScheme::averaging_oracle && mdp == nullptr)
    throw ConfigError("averaging_oracle requires a tabular environment");

  env.seed(cfg.seed * 2 + 11);
  eval_env.seed(cfg.seed * 2 + 12);
  Rng eval_rng = seeded(cfg.seed, 4);
  ActorCritic agent(env.observation_dim(), env.n_actions(), cfg);
  const double horizon = static_cast<double>(cfg.horizon ? cfg.horizon : env.horizon());
  if (cfg.scheme == WeightingScheme::gamma_t && horizon == 0.0)
    throw ConfigError("gamma_t weighting needs a horizon");

  Collector collector(env, cfg.seed * 2 + 13);
  TrainResult result;
  std::size_t steps = 0;
  std::size_t next_eval = 0;
  double last_correction_loss = std::numeric_limits<double>::quiet_NaN();
  Buffer buffer(cfg.buffer_size);
  Buffer last_buffer(cfg.buffer_size);

  auto record = [&](std::size_t step) {
    CurvePoint point;
    point.step = step;
    const auto ret = evaluate(eval_env, agent.sampler(), options.eval_episodes, cfg.gamma, eval_rng);
    point.undiscounted_return = ret.undiscounted;
    point.discounted_return = ret.discounted;
    point.correction_loss = last_correction_loss;
    if (mdp != nullptr && !last_buffer.empty()) {
      const SoftmaxPolicy tab = tabularize(env, agent.policy);
      const Vector target =
          discounted_stationary(transition_under_policy(*mdp, tab), mdp->initial(), cfg.gamma).values;
      Vector emph;
      switch (cfg.scheme) {
        case WeightingScheme::uncorrected:
          emph = emphasis(last_buffer, mdp->n_states(), cfg.gamma, EmphasisScheme::uncorrected);
          break;
        case WeightingScheme::gamma_t:
          emph = emphasis(last_buffer, mdp->n_states(), cfg.gamma, EmphasisScheme::gamma_t, nullptr, horizon);
          break;
        case WeightingScheme::averaging_net: {
          const Vector c = model_correction(agent, env, cfg, horizon);
          emph = emphasis(last_buffer, mdp->n_states(), cfg.gamma, EmphasisScheme::averaging_model, &c);
          break;
        }
        case WeightingScheme::averaging_oracle: {
          const Vector c = averaging_correction_exact(mdp->with_gamma(cfg.gamma), tab).values;
          emph = emphasis(last_buffer, mdp->n_states(), cfg.gamma, EmphasisScheme::averaging_model, &c);
          break;
        }
      }
      point.emphasis_bias = (emph - target).squaredNorm();
    }
    result.curve.push_back(point);
    if (options.on_checkpoint) options.on_checkpoint(step, agent);
  };

  try {
    while (steps < options.total_steps) {
      if (steps >= next_eval) {
        record(steps);
        next_eval += options.eval_interval;
      }
      collector.fill(agent.sampler(), buffer);
      steps += buffer.size();
      last_buffer = buffer;
      Vector oracle;
      if (cfg.scheme == WeightingScheme::averaging_oracle)
        oracle = averaging_correction_exact(mdp->with_gamma(cfg.gamma), tabularize(env, agent.policy)).values;
      const Vector* oracle_ptr = oracle.size() ? &oracle : nullptr;
      const UpdateStats stats = cfg.algorithm == Algorithm::bac
                                    ? bac_update(agent, buffer, cfg, horizon, oracle_ptr)
                                    : ppo_update(agent, buffer, cfg, horizon, oracle_ptr);
      last_correction_loss = stats.correction_loss;
    }
    record(steps);
  } catch (const DivergenceError& e) {
    result.diverged = true;
    result.error = e.what();
  }
  if (agent_out) *agent_out = std::move(agent);
  return result;
}

TrainResult train_tabular(TabularEnv& env, const SoftmaxPolicy& initial, const AgentConfig& cfg,
                          std::size_t n_updates) {
  cfg.validate();
  const TabularMdp mdp = env.tabular()->with_gamma(cfg.gamma);
  env.seed(cfg.seed * 2 + 11);
  Rng rng = seeded(cfg.seed, 5);
  TabularActor actor = make_tabular_actor(initial, cfg, rng);
  const double horizon = static_cast<double>(cfg.horizon ? cfg.horizon : env.horizon());
  Collector collector(env, cfg.seed * 2 + 13);
  Buffer buffer(cfg.buffer_size);
  TrainResult result;
  auto record = [&](std::size_t update, double correction_loss) {
    CurvePoint point;
    point.step = update;
    point.top_probability = actor.policy.probs(0)(0);
    const double v = mdp.initial().dot(state_values(mdp, actor.policy));
    point.discounted_return = v;
    point.correction_loss = correction_loss;
    result.curve.push_back(point);
  };
  record(0, std::numeric_limits<double>::quiet_NaN());
  try {
    for (std::size_t k = 1; k <= n_updates; ++k) {
      collector.fill(softmax_sampler(actor.policy), buffer);
      const UpdateStats stats = tabular_bac_update(actor, mdp, buffer, cfg, horizon);
      record(k, stats.correction_loss);
    }
  } catch (const DivergenceError& e) {
    result.diverged = true;
    result.error = e.what();
  }
  return result;
}

}  // namespace avc
