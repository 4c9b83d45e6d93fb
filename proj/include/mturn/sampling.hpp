// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/env.hpp"
#include "mturn/policy.hpp"

namespace mturn {

// Draws trajectories from d0 x pi x P with probability tables computed once.
class TrajectorySampler {
 public:
  TrajectorySampler(const TabularMdp& mdp, const Policy& policy)
      : mdp_(&mdp), probs_(action_probs(mdp.tree(), policy)) {
    const TreeIndex& tree = mdp.tree();
    for (int s = 0; s < tree.num_states(); ++s) {
      const StateNode& n = tree.state(s);
      double total = 0.0;
      for (int a = 0; a < n.num_actions; ++a) total += probs_[n.sa_begin + a];
      if (!(std::abs(total - 1.0) < 1e-9))
        throw StructuralError("policy is undefined at state " + std::to_string(s));
    }
  }

  Trajectory sample(Rng& rng) const {
    const int prompt = static_cast<int>(rng.categorical(mdp_->prompt_probs()));
    return sample_from(prompt, rng);
  }

  Trajectory sample_from(int prompt, Rng& rng) const {
    const TreeIndex& tree = mdp_->tree();
    Trajectory traj;
    traj.prompt = prompt;
    traj.actions.reserve(tree.horizon());
    traj.observations.reserve(tree.horizon() - 1);
    int s = tree.root(prompt);
    for (int h = 1;; ++h) {
      const StateNode& n = tree.state(s);
      const int a = static_cast<int>(
          rng.categorical(std::span<const double>(probs_).subspan(n.sa_begin, n.num_actions)));
      traj.actions.push_back(a);
      if (h == tree.horizon()) break;
      const int sa = n.sa_begin + a;
      const int o = static_cast<int>(rng.categorical(mdp_->obs_row(sa)));
      traj.observations.push_back(o);
      s = tree.child(sa, o);
    }
    return traj;
  }

  // Continuation from a fixed state-action pair: the remaining observations
  // and actions are drawn; returns the terminal pair reached.
  int rollout_terminal_pair(int sa, Rng& rng) const {
    const TreeIndex& tree = mdp_->tree();
    while (!tree.terminal_pair(sa)) {
      const int o = static_cast<int>(rng.categorical(mdp_->obs_row(sa)));
      const StateNode& n = tree.state(tree.child(sa, o));
      const int a = static_cast<int>(
          rng.categorical(std::span<const double>(probs_).subspan(n.sa_begin, n.num_actions)));
      sa = n.sa_begin + a;
    }
    return sa;
  }

  std::span<const double> probs() const { return probs_; }

 private:
  const TabularMdp* mdp_;
  std::vector<double> probs_;
};

inline Trajectory sample_trajectory(const TabularMdp& mdp, const Policy& policy, Rng& rng) {
  return TrajectorySampler(mdp, policy).sample(rng);
}

// log Prob_pi(tau | x). With `mask_observations` only the action terms are
// summed. Otherwise observation terms come from the policy's observation
// predictor when it has one, else from `kernel`.
inline double trajectory_log_prob(const Policy& policy, const TreeIndex& tree,
                                  const Trajectory& traj, bool mask_observations,
                                  std::span<const double> kernel = {}) {
  const TrajectoryPath path = resolve_path(tree, traj);
  const std::vector<double> logp = action_log_probs(tree, policy);
  double total = 0.0;
  for (int sa : path.pairs) total += logp[sa];
  if (mask_observations) return total;
  // The observation sum is formed separately so that masked + observation
  // terms reproduces this value bit for bit.
  double obs = 0.0;
  if (policy.has_obs_model()) {
    const std::vector<double> logq = obs_log_probs(tree, policy);
    for (int b : path.branches) obs += logq[b];
  } else if (!kernel.empty()) {
    for (int b : path.branches) obs += std::log(kernel[b]);
  } else {
    throw ConfigError("unmasked log-probability needs an observation predictor or a kernel");
  }
  return total + obs;
}

inline double trajectory_log_prob(const Policy& policy, const TabularMdp& mdp,
                                  const Trajectory& traj, bool mask_observations) {
  return trajectory_log_prob(policy, mdp.tree(), traj, mask_observations, mdp.kernel());
}

// Sum of log P(o_h | s_h, a_h) along the trajectory under the environment kernel.
inline double observation_log_prob(const TabularMdp& mdp, const Trajectory& traj) {
  const TrajectoryPath path = resolve_path(mdp.tree(), traj);
  double total = 0.0;
  for (int b : path.branches) total += std::log(mdp.kernel()[b]);
  return total;
}

}  // namespace mturn
