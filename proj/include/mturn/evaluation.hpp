// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/env.hpp"
#include "mturn/policy.hpp"

namespace mturn {

// Probability of reaching each state when prompts follow `prompt_probs`,
// actions follow the flat table `probs` and observations follow `kernel`.
inline std::vector<double> state_occupancy(const TreeIndex& tree,
                                           std::span<const double> prompt_probs,
                                           std::span<const double> kernel,
                                           std::span<const double> probs) {
  std::vector<double> reach(tree.num_states(), 0.0);
  for (int p = 0; p < tree.num_prompts(); ++p) reach[tree.root(p)] = prompt_probs[p];
  for (int s = 0; s < tree.num_states(); ++s) {
    const StateNode& n = tree.state(s);
    if (n.step == tree.horizon() || reach[s] == 0.0) continue;
    for (int a = 0; a < n.num_actions; ++a) {
      const int sa = n.sa_begin + a;
      const double w = reach[s] * probs[sa];
      const int b0 = tree.branch_begin(sa);
      for (int o = 0; o < tree.num_obs(sa); ++o)
        reach[tree.branch_child(b0 + o)] += w * kernel[b0 + o];
    }
  }
  return reach;
}

inline std::vector<double> state_occupancy(const TabularMdp& mdp, std::span<const double> probs) {
  return state_occupancy(mdp.tree(), mdp.prompt_probs(), mdp.kernel(), probs);
}

// E[f(s_h, a_h)] summed over every step, for a per-pair table f.
inline double expected_pair_sum(const TreeIndex& tree, std::span<const double> occupancy,
                                std::span<const double> probs, std::span<const double> f) {
  double total = 0.0;
  for (int s = 0; s < tree.num_states(); ++s) {
    if (occupancy[s] == 0.0) continue;
    const StateNode& n = tree.state(s);
    double row = 0.0;
    for (int a = 0; a < n.num_actions; ++a) row += probs[n.sa_begin + a] * f[n.sa_begin + a];
    total += occupancy[s] * row;
  }
  return total;
}

// E[table(s_H, a_H)]; `table` is indexed by state-action and only its
// terminal entries are read.
inline double expected_terminal(const TreeIndex& tree, std::span<const double> occupancy,
                                std::span<const double> probs, std::span<const double> table) {
  double total = 0.0;
  for (int s = 0; s < tree.num_states(); ++s) {
    if (!tree.terminal_state(s) || occupancy[s] == 0.0) continue;
    const StateNode& n = tree.state(s);
    double row = 0.0;
    for (int a = 0; a < n.num_actions; ++a) row += probs[n.sa_begin + a] * table[n.sa_begin + a];
    total += occupancy[s] * row;
  }
  return total;
}

// Sum over steps of E_pi[KL(pi_h(.|s_h) || other_h(.|s_h))].
inline double expected_kl(const TabularMdp& mdp, const Policy& policy, const Policy& other) {
  const TreeIndex& tree = mdp.tree();
  const std::vector<double> logp = action_log_probs(tree, policy);
  const std::vector<double> logq = action_log_probs(tree, other);
  std::vector<double> probs(logp.size());
  for (std::size_t i = 0; i < logp.size(); ++i) probs[i] = std::exp(logp[i]);
  const std::vector<double> reach = state_occupancy(mdp, probs);
  double total = 0.0;
  for (int s = 0; s < tree.num_states(); ++s)
    if (reach[s] > 0.0) total += reach[s] * state_kl(tree.state(s), logp, logq);
  return total;
}

// J(pi; M, pi_ref) = E[u] - eta * sum_h E[KL(pi_h || pi_ref,h)], by exact
// forward propagation over the tree. eta = 0 gives the plain expected utility.
inline double exact_expected_value(const TabularMdp& mdp, const Policy& policy,
                                   const Policy& ref_policy, double eta) {
  if (!(eta >= 0.0)) throw DomainError("eta must be non-negative");
  const TreeIndex& tree = mdp.tree();
  const std::vector<double> logp = action_log_probs(tree, policy);
  std::vector<double> probs(logp.size());
  for (std::size_t i = 0; i < logp.size(); ++i) probs[i] = std::exp(logp[i]);
  const std::vector<double> reach = state_occupancy(mdp, probs);
  double value = expected_terminal(tree, reach, probs, mdp.utility());
  if (eta > 0.0) {
    const std::vector<double> logq = action_log_probs(tree, ref_policy);
    double kl = 0.0;
    for (int s = 0; s < tree.num_states(); ++s)
      if (reach[s] > 0.0) kl += reach[s] * state_kl(tree.state(s), logp, logq);
    value -= eta * kl;
  }
  return value;
}

inline double expected_utility(const TabularMdp& mdp, const Policy& policy) {
  return exact_expected_value(mdp, policy, policy, 0.0);
}

// Expected utility when prompts are restricted to `prompts` (d0 renormalized).
inline double expected_utility_on_prompts(const TabularMdp& mdp, const Policy& policy,
                                          std::span<const int> prompts) {
  std::vector<double> d(mdp.tree().num_prompts(), 0.0);
  double total = 0.0;
  for (int p : prompts) total += mdp.prompt_probs()[p];
  if (total <= 0.0) {
    for (int p : prompts) d[p] = 1.0 / static_cast<double>(prompts.size());
  } else {
    for (int p : prompts) d[p] = mdp.prompt_probs()[p] / total;
  }
  const std::vector<double> probs = action_probs(mdp.tree(), policy);
  const std::vector<double> reach = state_occupancy(mdp.tree(), d, mdp.kernel(), probs);
  return expected_terminal(mdp.tree(), reach, probs, mdp.utility());
}

// Calls `visit(trajectory, probability)` for every trajectory with positive
// probability under d0 x pi x P. Intended for small trees.
inline void for_each_trajectory(const TabularMdp& mdp, std::span<const double> probs,
                                const std::function<void(const Trajectory&, double)>& visit) {
  const TreeIndex& tree = mdp.tree();
  Trajectory traj;
  std::function<void(int, double)> walk = [&](int s, double w) {
    const StateNode& n = tree.state(s);
    for (int a = 0; a < n.num_actions; ++a) {
      const int sa = n.sa_begin + a;
      const double wa = w * probs[sa];
      if (wa == 0.0) continue;
      traj.actions.push_back(a);
      if (n.step == tree.horizon()) {
        visit(traj, wa);
      } else {
        for (int o = 0; o < tree.num_obs(sa); ++o) {
          const double wo = wa * mdp.obs_prob(sa, o);
          if (wo == 0.0) continue;
          traj.observations.push_back(o);
          walk(tree.child(sa, o), wo);
          traj.observations.pop_back();
        }
      }
      traj.actions.pop_back();
    }
  };
  for (int p = 0; p < tree.num_prompts(); ++p) {
    if (mdp.prompt_probs()[p] == 0.0) continue;
    traj = Trajectory{p, {}, {}};
    walk(tree.root(p), mdp.prompt_probs()[p]);
  }
}

}  // namespace mturn
