// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/env.hpp"

namespace mturn {

// Softmax policy over a tree. `action_logits` has one entry per state-action
// pair. `obs_logits`, when nonempty, has one entry per observation branch and
// parameterizes a learned observation predictor q(o | s, a); only the
// single-turn baselines use it.
struct Policy {
  std::vector<double> action_logits;
  std::vector<double> obs_logits;

  bool has_obs_model() const { return !obs_logits.empty(); }
  bool operator==(const Policy&) const = default;
};

inline Policy uniform_policy(const TreeIndex& tree, bool with_obs_model = false) {
  Policy p;
  p.action_logits.assign(tree.num_state_actions(), 0.0);
  if (with_obs_model) p.obs_logits.assign(tree.num_branches(), 0.0);
  return p;
}

// Policy whose logits are the log-probabilities of a given table.
inline Policy policy_from_probs(const TreeIndex& tree, std::span<const double> probs) {
  Policy p;
  p.action_logits.resize(tree.num_state_actions());
  for (int sa = 0; sa < tree.num_state_actions(); ++sa) p.action_logits[sa] = std::log(probs[sa]);
  return p;
}

inline void check_shape(const TreeIndex& tree, const Policy& policy) {
  if (static_cast<int>(policy.action_logits.size()) != tree.num_state_actions())
    throw StructuralError("policy does not cover every state of the environment (has " +
                          std::to_string(policy.action_logits.size()) + " logits, needs " +
                          std::to_string(tree.num_state_actions()) + ")");
  if (policy.has_obs_model() && static_cast<int>(policy.obs_logits.size()) != tree.num_branches())
    throw StructuralError("observation predictor shape mismatch");
}

// Flat per-pair log pi(a|s).
inline std::vector<double> action_log_probs(const TreeIndex& tree, const Policy& policy) {
  check_shape(tree, policy);
  std::vector<double> out(policy.action_logits.size());
  const std::span<const double> logits = policy.action_logits;
  for (int s = 0; s < tree.num_states(); ++s) {
    const StateNode& n = tree.state(s);
    log_softmax(logits.subspan(n.sa_begin, n.num_actions),
                std::span<double>(out).subspan(n.sa_begin, n.num_actions));
  }
  return out;
}

inline std::vector<double> action_probs(const TreeIndex& tree, const Policy& policy) {
  check_shape(tree, policy);
  std::vector<double> out(policy.action_logits.size());
  const std::span<const double> logits = policy.action_logits;
  for (int s = 0; s < tree.num_states(); ++s) {
    const StateNode& n = tree.state(s);
    softmax(logits.subspan(n.sa_begin, n.num_actions),
            std::span<double>(out).subspan(n.sa_begin, n.num_actions));
  }
  return out;
}

// log ref(a|s), rejecting zero-probability entries.
inline std::vector<double> checked_ref_log_probs(const TreeIndex& tree, const Policy& ref) {
  std::vector<double> logref = action_log_probs(tree, ref);
  for (int sa = 0; sa < tree.num_state_actions(); ++sa)
    if (!(logref[sa] > kNegInf) || std::isnan(logref[sa]))
      throw DomainError("reference policy has zero probability at state " +
                        std::to_string(tree.sa_state(sa)) + ", action " +
                        std::to_string(tree.sa_action(sa)));
  return logref;
}

// Flat per-branch log q(o|s,a) of the learned observation predictor.
inline std::vector<double> obs_log_probs(const TreeIndex& tree, const Policy& policy) {
  if (!policy.has_obs_model()) throw ConfigError("policy has no observation predictor");
  check_shape(tree, policy);
  std::vector<double> out(policy.obs_logits.size());
  const std::span<const double> logits = policy.obs_logits;
  for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
    const int k = tree.num_obs(sa);
    if (k == 0) continue;
    const int b = tree.branch_begin(sa);
    log_softmax(logits.subspan(b, k), std::span<double>(out).subspan(b, k));
  }
  return out;
}

inline std::vector<double> obs_probs(const TreeIndex& tree, const Policy& policy) {
  std::vector<double> out = obs_log_probs(tree, policy);
  for (double& x : out) x = std::exp(x);
  return out;
}

// KL(p || q) between the action rows of two policies at one state, from flat
// log-probability tables.
inline double state_kl(const StateNode& n, std::span<const double> log_p,
                       std::span<const double> log_q) {
  double kl = 0.0;
  for (int a = 0; a < n.num_actions; ++a) {
    const double lp = log_p[n.sa_begin + a];
    if (lp == kNegInf) continue;
    kl += std::exp(lp) * (lp - log_q[n.sa_begin + a]);
  }
  return kl;
}

// Logits divided by the temperature; argmax is preserved for every T > 0.
inline Policy temperature_policy(const Policy& policy, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw DomainError("temperature must be positive");
  Policy out = policy;
  for (double& l : out.action_logits) l /= temperature;
  return out;
}

}  // namespace mturn
