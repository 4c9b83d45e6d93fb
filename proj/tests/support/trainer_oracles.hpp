// SPDX-License-Identifier: Apache-2.0
// Loss references for the preference trainers, written directly against the
// logits, plus a finite-difference gradient probe.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mturn/sampling.hpp"
#include "mturn/trainers.hpp"
#include "support/oracles.hpp"

namespace oracle {

using namespace mturn;

// Log-softmax of every action row and every observation-predictor row,
// computed straight from the logits.
struct LogTables {
  std::vector<double> action;
  std::vector<double> obs;
};

inline LogTables log_tables(const TreeIndex& tree, const Policy& p) {
  LogTables t;
  const std::vector<double> probs = oracle::softmax_rows(tree, p.action_logits);
  for (double x : probs) t.action.push_back(std::log(x));
  if (p.has_obs_model()) {
    t.obs.resize(p.obs_logits.size());
    for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
      const int b0 = tree.branch_begin(sa);
      double z = 0.0;
      for (int o = 0; o < tree.num_obs(sa); ++o) z += std::exp(p.obs_logits[b0 + o]);
      for (int o = 0; o < tree.num_obs(sa); ++o) t.obs[b0 + o] = p.obs_logits[b0 + o] - std::log(z);
    }
  }
  return t;
}

inline double path_log_ratio(const TreeIndex& tree, const LogTables& pol, const LogTables& ref,
                      const Trajectory& traj, bool with_obs) {
  const TrajectoryPath path = resolve_path(tree, traj);
  double r = 0.0;
  for (int sa : path.pairs) r += pol.action[sa] - ref.action[sa];
  if (with_obs)
    for (int b : path.branches) r += pol.obs[b] - ref.obs[b];
  return r;
}

inline double path_log_prob(const TreeIndex& tree, const LogTables& pol, const Trajectory& traj) {
  double r = 0.0;
  for (int sa : resolve_path(tree, traj).pairs) r += pol.action[sa];
  return r;
}

inline double softplus_ref(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double dpo_oracle(const TreeIndex& tree, const Policy& p, const Policy& ref,
                  const std::vector<PreferenceRecord>& data, double eta, bool with_obs,
                  double nll_weight = 0.0) {
  const LogTables a = log_tables(tree, p), b = log_tables(tree, ref);
  double loss = 0.0, nll = 0.0;
  for (const auto& r : data) {
    const double m = eta * (path_log_ratio(tree, a, b, r.winner(), with_obs) -
                            path_log_ratio(tree, a, b, r.loser(), with_obs));
    loss += softplus_ref(-m);
    nll -= path_log_prob(tree, a, r.winner());
  }
  return (loss + nll_weight * nll) / data.size();
}

inline double kto_oracle(const TreeIndex& tree, const Policy& p, const Policy& ref,
                  const std::vector<KtoExample>& data, double z0, const TrainerConfig& c,
                  bool with_obs) {
  const LogTables a = log_tables(tree, p), b = log_tables(tree, ref);
  const double k = c.outer_eta_in_kto ? c.eta : 1.0;
  double loss = 0.0;
  for (const auto& e : data) {
    const double u = c.eta * path_log_ratio(tree, a, b, e.traj, with_obs);
    loss += e.desirable ? c.lambda_plus * (1 - sig(k * (u - z0)))
                        : c.lambda_minus * (1 - sig(k * (z0 - u)));
  }
  return loss / data.size();
}

inline double raft_oracle(const TreeIndex& tree, const Policy& p, const std::vector<Trajectory>& winners) {
  const LogTables a = log_tables(tree, p);
  double loss = 0.0;
  for (const auto& t : winners) loss -= path_log_prob(tree, a, t);
  return loss / winners.size();
}

inline Policy random_policy(const TreeIndex& tree, std::uint64_t seed, bool obs, double scale = 1.0) {
  Policy p = uniform_policy(tree, obs);
  Rng rng(seed);
  for (double& l : p.action_logits) l = scale * rng.normal();
  for (double& l : p.obs_logits) l = scale * rng.normal();
  return p;
}

inline std::vector<PreferenceRecord> random_pairs(const TabularMdp& mdp, const Policy& p, int n,
                                           std::uint64_t seed) {
  const TrajectorySampler sampler(mdp, p);
  Rng rng(seed);
  std::vector<PreferenceRecord> out;
  for (int i = 0; i < n; ++i) {
    const int prompt = static_cast<int>(rng.index(mdp.tree().num_prompts()));
    PreferenceRecord r{prompt, sampler.sample_from(prompt, rng), sampler.sample_from(prompt, rng),
                       static_cast<int>(rng.index(2))};
    out.push_back(std::move(r));
  }
  return out;
}

// Worst error of the analytic gradient against central differences of `f`
// over 20 random coordinates drawn from the action logits and, when present,
// the observation logits. The error is |g - fd| / max(1, |fd|).
inline double gradient_error(const Policy& at, const Policy& grad,
                             const std::function<double(const Policy&)>& f, std::uint64_t seed = 1) {
  Rng rng(seed);
  const std::size_t na = at.action_logits.size(), nb = at.obs_logits.size();
  const std::size_t total = na + nb;
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t idx = rng.index(total);
    const bool is_obs = idx >= na;
    const std::size_t i = is_obs ? idx - na : idx;
    const std::vector<double> x = is_obs ? at.obs_logits : at.action_logits;
    const double fd = central_difference(
        [&](const std::vector<double>& v) {
          Policy q = at;
          (is_obs ? q.obs_logits : q.action_logits) = v;
          return f(q);
        },
        x, i);
    const double an = is_obs ? grad.obs_logits[i] : grad.action_logits[i];
    worst = std::max(worst, std::abs(an - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace oracle
