// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/env.hpp"
#include "mturn/policy.hpp"
#include "mturn/preference.hpp"
#include "mturn/sampling.hpp"

namespace mturn {

struct TrainerConfig {
  double eta = 0.1;            // KL coefficient inside the implicit reward
  double learning_rate = 1.0;  // zero leaves the policy unchanged
  int steps = 200;
  int batch_size = 0;          // 0: full batch (the only schedule implemented)
  double lambda_plus = 1.0;
  double lambda_minus = 1.0;
  double nll_weight = 0.0;
  bool mask_observations = true;
  bool outer_eta_in_kto = true;
  int z0_samples = 64;

  void validate() const {
    if (!(eta > 0.0)) throw DomainError("trainer eta must be positive");
    if (!(learning_rate >= 0.0)) throw DomainError("learning rate must be non-negative");
    if (steps < 1) throw ConfigError("training needs at least one step");
    if (batch_size != 0) throw ConfigError("only full-batch training (batch_size = 0) is implemented");
    if (!(lambda_plus > 0.0) || !(lambda_minus > 0.0))
      throw DomainError("KTO weights must be positive");
    if (!(nll_weight >= 0.0)) throw DomainError("NLL weight must be non-negative");
    if (z0_samples < 1) throw ConfigError("z0 estimation needs at least one sample");
  }
};

// Loss value with a logit-shaped gradient. The winner/loser log-probability
// means are the masked action log-likelihoods, NaN when not applicable.
struct LossGrad {
  double loss = 0.0;
  Policy grad;
  double mean_logp_winner = std::nan("");
  double mean_logp_loser = std::nan("");
};

// Pairs and branches visited by a trajectory, for repeated evaluation.
struct CompiledPath {
  std::vector<int> pairs;
  std::vector<int> branches;
  auto operator<=>(const CompiledPath&) const = default;
};

inline CompiledPath compile_path(const TreeIndex& tree, const Trajectory& traj) {
  TrajectoryPath p = resolve_path(tree, traj);
  return {std::move(p.pairs), std::move(p.branches)};
}

// Preference pairs oriented winner-first; identical pairs are merged with a
// multiplicity weight.
struct CompiledPairs {
  std::vector<CompiledPath> winners;
  std::vector<CompiledPath> losers;
  std::vector<double> weight;
  double total_weight = 0.0;
};

inline CompiledPairs compile_pairs(const TreeIndex& tree, std::span<const PreferenceRecord> records) {
  std::map<std::pair<CompiledPath, CompiledPath>, double> merged;
  std::vector<std::pair<CompiledPath, CompiledPath>> order;
  for (const PreferenceRecord& r : records) {
    if (r.traj_1.prompt != r.traj_2.prompt || r.traj_1.prompt != r.prompt)
      throw StructuralError("preference record trajectories do not share the prompt");
    auto key = std::make_pair(compile_path(tree, r.winner()), compile_path(tree, r.loser()));
    auto [it, fresh] = merged.emplace(key, 0.0);
    if (fresh) order.push_back(std::move(key));
    it->second += 1.0;
  }
  CompiledPairs out;
  for (auto& key : order) {
    out.weight.push_back(merged[key]);
    out.total_weight += out.weight.back();
    out.winners.push_back(std::move(key.first));
    out.losers.push_back(std::move(key.second));
  }
  return out;
}

namespace detail {

// Accumulates d/dlogits of sum_i c_i log pi(a_i|s_i) lazily: the indicator
// part goes straight into the gradient and the -pi(.|s) part is folded in by
// finish().
class SoftmaxGradAccumulator {
 public:
  SoftmaxGradAccumulator(const TreeIndex& tree, bool with_obs)
      : tree_(tree),
        action_(tree.num_state_actions(), 0.0),
        state_weight_(tree.num_states(), 0.0) {
    if (with_obs) {
      obs_.assign(tree.num_branches(), 0.0);
      pair_weight_.assign(tree.num_state_actions(), 0.0);
    }
  }

  void add_action(int sa, double c) {
    action_[sa] += c;
    state_weight_[tree_.sa_state(sa)] += c;
  }

  void add_obs(int sa, int branch, double c) {
    obs_[branch] += c;
    pair_weight_[sa] += c;
  }

  Policy finish(std::span<const double> probs, std::span<const double> q_probs) && {
    for (int sa = 0; sa < tree_.num_state_actions(); ++sa)
      action_[sa] -= state_weight_[tree_.sa_state(sa)] * probs[sa];
    if (!obs_.empty()) {
      for (int sa = 0; sa < tree_.num_state_actions(); ++sa) {
        if (pair_weight_[sa] == 0.0) continue;
        const int b0 = tree_.branch_begin(sa);
        for (int o = 0; o < tree_.num_obs(sa); ++o) obs_[b0 + o] -= pair_weight_[sa] * q_probs[b0 + o];
      }
    }
    return Policy{std::move(action_), std::move(obs_)};
  }

 private:
  const TreeIndex& tree_;
  std::vector<double> action_;
  std::vector<double> state_weight_;
  std::vector<double> obs_;
  std::vector<double> pair_weight_;
};

// Log-probability tables for the implicit reward eta * sum log(pi / ref),
// optionally including observation-predictor terms.
struct RatioTables {
  std::vector<double> logp, probs, logref;
  std::vector<double> logq, qprobs, logqref;
  bool with_obs = false;

  RatioTables(const TreeIndex& tree, const Policy& policy, const Policy& ref, bool unmasked)
      : logp(action_log_probs(tree, policy)), logref(checked_ref_log_probs(tree, ref)) {
    probs.resize(logp.size());
    for (std::size_t i = 0; i < logp.size(); ++i) probs[i] = std::exp(logp[i]);
    if (unmasked) {
      if (!policy.has_obs_model() || !ref.has_obs_model())
        throw ConfigError("unmasked training needs observation predictors on both policies");
      with_obs = true;
      logq = obs_log_probs(tree, policy);
      logqref = obs_log_probs(tree, ref);
      qprobs.resize(logq.size());
      for (std::size_t i = 0; i < logq.size(); ++i) qprobs[i] = std::exp(logq[i]);
    }
  }

  double log_ratio(const CompiledPath& p) const {
    double r = 0.0;
    for (int sa : p.pairs) r += logp[sa] - logref[sa];
    if (with_obs)
      for (int b : p.branches) r += logq[b] - logqref[b];
    return r;
  }

  double action_log_prob(const CompiledPath& p) const {
    double r = 0.0;
    for (int sa : p.pairs) r += logp[sa];
    return r;
  }

  void add_ratio_grad(SoftmaxGradAccumulator& acc, const TreeIndex& tree, const CompiledPath& p,
                      double c) const {
    for (int sa : p.pairs) acc.add_action(sa, c);
    if (with_obs)
      for (std::size_t h = 0; h < p.branches.size(); ++h) acc.add_obs(p.pairs[h], p.branches[h], c);
    (void)tree;
  }
};

}  // namespace detail

// Direct preference loss over compiled pairs:
//   mean_i -log sigma(eta * [ratio(winner_i) - ratio(loser_i)])
//        + nll_weight * mean_i (-sum_h log pi(a_h^w | s_h^w))
// `config.mask_observations` selects the multi-turn form (action terms only)
// or the single-turn form (observation-predictor terms included).
inline LossGrad dpo_loss_and_grad(const TreeIndex& tree, const Policy& policy, const Policy& ref,
                                  const CompiledPairs& data, const TrainerConfig& config) {
  if (data.winners.empty()) throw ConfigError("preference dataset is empty");
  const detail::RatioTables t(tree, policy, ref, !config.mask_observations);
  detail::SoftmaxGradAccumulator acc(tree, t.with_obs);
  LossGrad out;
  double loss = 0.0, nll = 0.0, lw = 0.0, ll = 0.0;
  for (std::size_t i = 0; i < data.winners.size(); ++i) {
    const double w = data.weight[i] / data.total_weight;
    const double margin = config.eta * (t.log_ratio(data.winners[i]) - t.log_ratio(data.losers[i]));
    loss += w * softplus(-margin);
    const double c = -w * sigmoid(-margin) * config.eta;
    t.add_ratio_grad(acc, tree, data.winners[i], c);
    t.add_ratio_grad(acc, tree, data.losers[i], -c);
    const double logp_w = t.action_log_prob(data.winners[i]);
    lw += w * logp_w;
    ll += w * t.action_log_prob(data.losers[i]);
    if (config.nll_weight > 0.0) {
      nll -= w * logp_w;
      for (int sa : data.winners[i].pairs) acc.add_action(sa, -w * config.nll_weight);
    }
  }
  out.loss = config.nll_weight > 0.0 ? loss + config.nll_weight * nll : loss;
  out.grad = std::move(acc).finish(t.probs, t.qprobs);
  if (!t.with_obs && policy.has_obs_model()) out.grad.obs_logits.assign(policy.obs_logits.size(), 0.0);
  out.mean_logp_winner = lw;
  out.mean_logp_loser = ll;
  return out;
}

inline LossGrad m_dpo_loss_and_grad(const TreeIndex& tree, const Policy& policy, const Policy& ref,
                                    std::span<const PreferenceRecord> data, TrainerConfig config) {
  config.mask_observations = true;
  config.nll_weight = 0.0;
  return dpo_loss_and_grad(tree, policy, ref, compile_pairs(tree, data), config);
}

inline LossGrad single_turn_dpo_loss_and_grad(const TreeIndex& tree, const Policy& policy,
                                              const Policy& ref,
                                              std::span<const PreferenceRecord> data,
                                              TrainerConfig config) {
  if (!policy.has_obs_model() || !ref.has_obs_model())
    throw ConfigError("single-turn DPO needs observation predictors on both policies");
  config.mask_observations = false;
  config.nll_weight = 0.0;
  return dpo_loss_and_grad(tree, policy, ref, compile_pairs(tree, data), config);
}

inline LossGrad nll_augmented_m_dpo(const TreeIndex& tree, const Policy& policy, const Policy& ref,
                                    std::span<const PreferenceRecord> data, TrainerConfig config) {
  config.mask_observations = true;
  return dpo_loss_and_grad(tree, policy, ref, compile_pairs(tree, data), config);
}

// Unpaired example for KTO-style training.
struct KtoExample {
  Trajectory traj;
  bool desirable = true;
};

inline std::vector<KtoExample> kto_examples_from_pairs(std::span<const PreferenceRecord> pairs) {
  std::vector<KtoExample> out;
  out.reserve(2 * pairs.size());
  for (const PreferenceRecord& r : pairs) {
    out.push_back({r.winner(), true});
    out.push_back({r.loser(), false});
  }
  return out;
}

struct CompiledKto {
  std::vector<CompiledPath> paths;
  std::vector<char> desirable;
  std::vector<int> prompts;  // prompt of each example, for z0 sampling
};

inline CompiledKto compile_kto(const TreeIndex& tree, std::span<const KtoExample> data) {
  CompiledKto out;
  for (const KtoExample& e : data) {
    out.paths.push_back(compile_path(tree, e.traj));
    out.desirable.push_back(e.desirable);
    out.prompts.push_back(e.traj.prompt);
  }
  return out;
}

// z0 = E_{x ~ D, tau ~ pi}[sum_h KL(pi(.|s_h) || ref(.|s_h))], estimated from
// `samples` trajectories with exact per-state KL. When observations are not
// masked the predictor KL at each visited pair is added.
inline double estimate_kto_reference_point(const TabularMdp& mdp, const Policy& policy,
                                           const Policy& ref, std::span<const int> prompts,
                                           int samples, bool mask_observations, Rng& rng) {
  if (prompts.empty()) throw ConfigError("KTO dataset is empty");
  const TreeIndex& tree = mdp.tree();
  const std::vector<double> logp = action_log_probs(tree, policy);
  const std::vector<double> logref = action_log_probs(tree, ref);
  std::vector<double> logq, logqref;
  if (!mask_observations) {
    logq = obs_log_probs(tree, policy);
    logqref = obs_log_probs(tree, ref);
  }
  const TrajectorySampler sampler(mdp, policy);
  double total = 0.0;
  for (int i = 0; i < samples; ++i) {
    const int prompt = prompts[rng.index(prompts.size())];
    const TrajectoryPath path = resolve_path(tree, sampler.sample_from(prompt, rng));
    for (std::size_t h = 0; h < path.states.size(); ++h) {
      total += state_kl(tree.state(path.states[h]), logp, logref);
      if (!mask_observations && h + 1 < path.states.size()) {
        const int sa = path.pairs[h];
        const int b0 = tree.branch_begin(sa);
        for (int o = 0; o < tree.num_obs(sa); ++o)
          total += std::exp(logq[b0 + o]) * (logq[b0 + o] - logqref[b0 + o]);
      }
    }
  }
  return total / samples;
}

// KTO loss with a frozen reference point z0:
//   u_theta = eta * ratio(tau)
//   v = lambda_+ sigma(k (u_theta - z0))   desirable
//       lambda_- sigma(k (z0 - u_theta))   undesirable
//   loss = mean(lambda_y - v),  k = eta (or 1 without the outer factor)
inline LossGrad kto_loss_and_grad(const TreeIndex& tree, const Policy& policy, const Policy& ref,
                                  const CompiledKto& data, double z0, const TrainerConfig& config) {
  if (data.paths.empty()) throw ConfigError("KTO dataset is empty");
  const detail::RatioTables t(tree, policy, ref, !config.mask_observations);
  detail::SoftmaxGradAccumulator acc(tree, t.with_obs);
  const double k = config.outer_eta_in_kto ? config.eta : 1.0;
  const double inv_n = 1.0 / static_cast<double>(data.paths.size());
  double loss = 0.0, lw = 0.0, ll = 0.0, nw = 0.0, nl = 0.0;
  for (std::size_t i = 0; i < data.paths.size(); ++i) {
    const double u = config.eta * t.log_ratio(data.paths[i]);
    const double x = k * (u - z0);
    const double slope = sigmoid(x) * sigmoid(-x);
    double dloss_du;
    if (data.desirable[i]) {
      loss += inv_n * (config.lambda_plus - config.lambda_plus * sigmoid(x));
      dloss_du = -config.lambda_plus * slope * k;
      lw += t.action_log_prob(data.paths[i]);
      nw += 1.0;
    } else {
      loss += inv_n * (config.lambda_minus - config.lambda_minus * sigmoid(-x));
      dloss_du = config.lambda_minus * slope * k;
      ll += t.action_log_prob(data.paths[i]);
      nl += 1.0;
    }
    t.add_ratio_grad(acc, tree, data.paths[i], inv_n * dloss_du * config.eta);
  }
  LossGrad out;
  out.loss = loss;
  out.grad = std::move(acc).finish(t.probs, t.qprobs);
  if (!t.with_obs && policy.has_obs_model()) out.grad.obs_logits.assign(policy.obs_logits.size(), 0.0);
  if (nw > 0) out.mean_logp_winner = lw / nw;
  if (nl > 0) out.mean_logp_loser = ll / nl;
  return out;
}

// Full M-KTO evaluation: z0 is sampled from the current policy and then held
// fixed for the gradient. Returns the loss/gradient and the z0 used.
inline std::pair<LossGrad, double> m_kto_loss_and_grad(const TabularMdp& mdp, const Policy& policy,
                                                       const Policy& ref,
                                                       std::span<const KtoExample> data,
                                                       const TrainerConfig& config, Rng& rng) {
  if (data.empty()) throw ConfigError("KTO dataset is empty");
  const CompiledKto compiled = compile_kto(mdp.tree(), data);
  const double z0 = estimate_kto_reference_point(mdp, policy, ref, compiled.prompts,
                                                 config.z0_samples, config.mask_observations, rng);
  return {kto_loss_and_grad(mdp.tree(), policy, ref, compiled, z0, config), z0};
}

// RAFT objective: mean over kept trajectories of -sum_h log pi(a_h|s_h).
inline LossGrad raft_loss_and_grad(const TreeIndex& tree, const Policy& policy,
                                   std::span<const CompiledPath> winners) {
  if (winners.empty()) throw ConfigError("RAFT needs at least one winning trajectory");
  const std::vector<double> logp = action_log_probs(tree, policy);
  std::vector<double> probs(logp.size());
  for (std::size_t i = 0; i < logp.size(); ++i) probs[i] = std::exp(logp[i]);
  detail::SoftmaxGradAccumulator acc(tree, false);
  const double inv_n = 1.0 / static_cast<double>(winners.size());
  double loss = 0.0;
  for (const CompiledPath& p : winners) {
    for (int sa : p.pairs) {
      loss -= inv_n * logp[sa];
      acc.add_action(sa, -inv_n);
    }
  }
  LossGrad out;
  out.loss = loss;
  out.grad = std::move(acc).finish(probs, {});
  if (policy.has_obs_model()) out.grad.obs_logits.assign(policy.obs_logits.size(), 0.0);
  out.mean_logp_winner = -loss;
  return out;
}

struct TraceRow {
  int step = 0;
  double loss = 0.0;
  double mean_logp_winner = 0.0;
  double mean_logp_loser = 0.0;
};

struct TrainingResult {
  Policy policy;
  std::vector<TraceRow> trace;
};

using LossFunction = std::function<LossGrad(const Policy&, int step)>;

// Full-batch gradient descent with a fixed step size. The loss is recorded
// before each update.
inline TrainingResult gradient_descent(const LossFunction& loss_fn, Policy policy,
                                       const TrainerConfig& config) {
  if (config.steps < 1) throw ConfigError("training needs at least one step");
  if (!(config.learning_rate >= 0.0)) throw DomainError("learning rate must be non-negative");
  TrainingResult out;
  out.trace.reserve(config.steps);
  for (int step = 0; step < config.steps; ++step) {
    const LossGrad lg = loss_fn(policy, step);
    if (!std::isfinite(lg.loss))
      throw NumericalError("loss became non-finite at step " + std::to_string(step));
    out.trace.push_back({step, lg.loss, lg.mean_logp_winner, lg.mean_logp_loser});
    if (config.learning_rate == 0.0) continue;
    for (std::size_t i = 0; i < policy.action_logits.size(); ++i) {
      policy.action_logits[i] -= config.learning_rate * lg.grad.action_logits[i];
      if (!std::isfinite(policy.action_logits[i]))
        throw NumericalError("logits became non-finite at step " + std::to_string(step));
    }
    if (!lg.grad.obs_logits.empty())
      for (std::size_t i = 0; i < policy.obs_logits.size(); ++i)
        policy.obs_logits[i] -= config.learning_rate * lg.grad.obs_logits[i];
  }
  out.policy = std::move(policy);
  return out;
}

inline TrainingResult raft_update(const TreeIndex& tree, const Policy& policy,
                                  std::span<const Trajectory> winners, const TrainerConfig& config) {
  if (winners.empty()) throw ConfigError("RAFT needs at least one winning trajectory");
  std::vector<CompiledPath> paths;
  for (const Trajectory& t : winners) paths.push_back(compile_path(tree, t));
  return gradient_descent(
      [&](const Policy& p, int) { return raft_loss_and_grad(tree, p, paths); }, policy, config);
}

enum class TrainerKind { m_dpo, m_kto, single_turn_dpo, single_turn_kto, raft };

inline TrainerKind parse_trainer(const std::string& name) {
  if (name == "m_dpo") return TrainerKind::m_dpo;
  if (name == "m_kto") return TrainerKind::m_kto;
  if (name == "single_turn_dpo") return TrainerKind::single_turn_dpo;
  if (name == "single_turn_kto") return TrainerKind::single_turn_kto;
  if (name == "raft") return TrainerKind::raft;
  throw ConfigError("unknown trainer '" + name + "'");
}

inline const char* to_string(TrainerKind k) {
  switch (k) {
    case TrainerKind::m_dpo: return "m_dpo";
    case TrainerKind::m_kto: return "m_kto";
    case TrainerKind::single_turn_dpo: return "single_turn_dpo";
    case TrainerKind::single_turn_kto: return "single_turn_kto";
    case TrainerKind::raft: return "raft";
  }
  return "?";
}

inline bool uses_observation_model(TrainerKind k) {
  return k == TrainerKind::single_turn_dpo || k == TrainerKind::single_turn_kto;
}

// Trains `policy` on preference pairs with the chosen objective. RAFT keeps
// only the winners. The KTO reference point is resampled every step from a
// stream derived from `seed`.
inline TrainingResult train_on_pairs(const TabularMdp& mdp, TrainerKind kind, const Policy& policy,
                                     const Policy& ref, std::span<const PreferenceRecord> pairs,
                                     TrainerConfig config, std::uint64_t seed) {
  config.validate();
  const TreeIndex& tree = mdp.tree();
  switch (kind) {
    case TrainerKind::m_dpo:
    case TrainerKind::single_turn_dpo: {
      config.mask_observations = kind == TrainerKind::m_dpo;
      if (kind == TrainerKind::single_turn_dpo) config.nll_weight = 0.0;
      const CompiledPairs data = compile_pairs(tree, pairs);
      return gradient_descent(
          [&](const Policy& p, int) { return dpo_loss_and_grad(tree, p, ref, data, config); },
          policy, config);
    }
    case TrainerKind::m_kto:
    case TrainerKind::single_turn_kto: {
      config.mask_observations = kind == TrainerKind::m_kto;
      const std::vector<KtoExample> examples = kto_examples_from_pairs(pairs);
      const CompiledKto data = compile_kto(tree, examples);
      Rng rng(seed);
      return gradient_descent(
          [&](const Policy& p, int) {
            const double z0 = estimate_kto_reference_point(mdp, p, ref, data.prompts,
                                                           config.z0_samples,
                                                           config.mask_observations, rng);
            return kto_loss_and_grad(tree, p, ref, data, z0, config);
          },
          policy, config);
    }
    case TrainerKind::raft: {
      std::vector<Trajectory> winners;
      for (const PreferenceRecord& r : pairs) winners.push_back(r.winner());
      return raft_update(tree, policy, winners, config);
    }
  }
  throw ConfigError("unknown trainer");
}

inline void write_trace_csv(std::ostream& os, std::span<const TraceRow> trace);

}  // namespace mturn

#include "mturn/io.hpp"

namespace mturn {

inline void write_trace_csv(std::ostream& os, std::span<const TraceRow> trace) {
  CsvWriter csv(os, {"step", "loss", "mean_logp_winner", "mean_logp_loser"});
  for (const TraceRow& r : trace) csv.row(r.step, r.loss, r.mean_logp_winner, r.mean_logp_loser);
}

}  // namespace mturn
