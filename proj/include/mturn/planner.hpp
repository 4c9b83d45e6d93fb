// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mturn/core.hpp"
#include "mturn/env.hpp"
#include "mturn/evaluation.hpp"
#include "mturn/policy.hpp"
#include "mturn/sampling.hpp"

namespace mturn {

// Exact tables of the KL-regularized backward recursion.
//   q:              Q_h(s_h, a_h) per state-action
//   v:              V_h(s_h) per state (V_{H+1} = 0 is implicit)
//   log_normalizer: log Z_h(s_h) = V_h(s_h) / eta
//   optimal_policy: Gibbs policy, logits are normalized log-probabilities
struct PlanSolution {
  double eta = 1.0;
  std::vector<double> q;
  std::vector<double> v;
  std::vector<double> log_normalizer;
  Policy optimal_policy;

  double normalizer(int s) const { return std::exp(log_normalizer[s]); }
};

// Gibbs row pi(a|s) ∝ ref(a|s) exp(q(s,a)/eta) for one state; returns
// log Z and writes normalized log-probabilities.
inline double gibbs_row(const StateNode& n, std::span<const double> logref,
                        std::span<const double> q, double eta, std::span<double> log_pi) {
  double scratch[64];
  std::vector<double> heap;
  std::span<double> w;
  if (n.num_actions <= 64) {
    w = std::span<double>(scratch, n.num_actions);
  } else {
    heap.resize(n.num_actions);
    w = heap;
  }
  for (int a = 0; a < n.num_actions; ++a)
    w[a] = logref[n.sa_begin + a] + q[n.sa_begin + a] / eta;
  const double log_z = log_sum_exp(w);
  for (int a = 0; a < n.num_actions; ++a) log_pi[n.sa_begin + a] = w[a] - log_z;
  return log_z;
}

// Backward induction: Q_H = u, Q_h = E_o[V_{h+1}], V_h = eta log E_ref exp(Q_h/eta).
inline PlanSolution solve_kl_regularized(const TabularMdp& mdp, const Policy& ref_policy,
                                         double eta) {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw DomainError("eta must be positive");
  const TreeIndex& tree = mdp.tree();
  const std::vector<double> logref = checked_ref_log_probs(tree, ref_policy);

  PlanSolution plan;
  plan.eta = eta;
  plan.q.assign(tree.num_state_actions(), 0.0);
  plan.v.assign(tree.num_states(), 0.0);
  plan.log_normalizer.assign(tree.num_states(), 0.0);
  plan.optimal_policy.action_logits.assign(tree.num_state_actions(), 0.0);

  for (int s = tree.num_states() - 1; s >= 0; --s) {
    const StateNode& n = tree.state(s);
    for (int a = 0; a < n.num_actions; ++a) {
      const int sa = n.sa_begin + a;
      if (n.step == tree.horizon()) {
        plan.q[sa] = mdp.utility_at(sa);
        continue;
      }
      double expect = 0.0;
      const int b0 = tree.branch_begin(sa);
      for (int o = 0; o < tree.num_obs(sa); ++o)
        expect += mdp.kernel()[b0 + o] * plan.v[tree.branch_child(b0 + o)];
      plan.q[sa] = expect;
    }
    const double log_z = gibbs_row(n, logref, plan.q, eta, plan.optimal_policy.action_logits);
    plan.log_normalizer[s] = log_z;
    plan.v[s] = eta * log_z;
  }
  return plan;
}

// Decomposition of u(s_H, a_H) along one trajectory:
//   A = eta * sum_h log(pi*(a_h|s_h) / ref(a_h|s_h))
//   B = V_1(s_1)
//   C = sum_{h<H} [V_{h+1}(s_{h+1}) - E_o V_{h+1}(s_{h+1})]
struct OptimalityTerms {
  double term_a = 0.0;
  double term_b = 0.0;
  double term_c = 0.0;
  double residual = 0.0;
};

inline void check_plan_matches(const TabularMdp& mdp, const PlanSolution& plan, double eta) {
  const TreeIndex& tree = mdp.tree();
  if (static_cast<int>(plan.q.size()) != tree.num_state_actions() ||
      static_cast<int>(plan.v.size()) != tree.num_states() ||
      static_cast<int>(plan.optimal_policy.action_logits.size()) != tree.num_state_actions())
    throw StructuralError("plan tables do not match the environment");
  if (plan.eta != eta) throw StructuralError("plan was solved for a different eta");
}

inline OptimalityTerms audit_optimality_condition(const TabularMdp& mdp, const PlanSolution& plan,
                                                  const Policy& ref_policy, double eta,
                                                  const Trajectory& traj) {
  check_plan_matches(mdp, plan, eta);
  const TreeIndex& tree = mdp.tree();
  const TrajectoryPath path = resolve_path(tree, traj);
  const std::vector<double> logref = action_log_probs(tree, ref_policy);
  const std::vector<double> logpi = action_log_probs(tree, plan.optimal_policy);
  OptimalityTerms t;
  for (int sa : path.pairs) t.term_a += logpi[sa] - logref[sa];
  t.term_a *= eta;
  t.term_b = plan.v[path.states.front()];
  for (std::size_t h = 0; h + 1 < path.states.size(); ++h)
    t.term_c += plan.v[path.states[h + 1]] - plan.q[path.pairs[h]];
  t.residual = mdp.utility_at(path.pairs.back()) - (t.term_a + t.term_b + t.term_c);
  return t;
}

// Fraction of sampled trajectories with |C| <= 4 sqrt(sum_h sigma_h^2), where
// sigma_h^2 is the exact variance of V_{h+1}(s_{h+1}) given (s_h, a_h).
struct ChebyshevCheck {
  double fraction_within_bound = 1.0;
  bool vacuous = false;
  std::string diagnostic;
};

inline ChebyshevCheck chebyshev_bound_check(const TabularMdp& mdp, const PlanSolution& plan,
                                            const Policy& policy, int num_samples, Rng& rng) {
  if (num_samples < 100) throw ConfigError("chebyshev check needs at least 100 samples");
  check_plan_matches(mdp, plan, plan.eta);
  ChebyshevCheck out;
  if (mdp.deterministic()) {
    out.vacuous = true;
    out.diagnostic = "deterministic observations: term C is identically zero, bound is vacuous";
    return out;
  }
  const TreeIndex& tree = mdp.tree();
  std::vector<double> variance(tree.num_state_actions(), 0.0);
  for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
    const int b0 = tree.branch_begin(sa);
    double var = 0.0;
    for (int o = 0; o < tree.num_obs(sa); ++o) {
      const double d = plan.v[tree.branch_child(b0 + o)] - plan.q[sa];
      var += mdp.kernel()[b0 + o] * d * d;
    }
    variance[sa] = var;
  }
  const TrajectorySampler sampler(mdp, policy);
  int within = 0;
  for (int i = 0; i < num_samples; ++i) {
    const TrajectoryPath path = resolve_path(tree, sampler.sample(rng));
    double c = 0.0, var = 0.0;
    for (std::size_t h = 0; h + 1 < path.states.size(); ++h) {
      c += plan.v[path.states[h + 1]] - plan.q[path.pairs[h]];
      var += variance[path.pairs[h]];
    }
    within += std::abs(c) <= 4.0 * std::sqrt(var) + 1e-12;
  }
  out.fraction_within_bound = static_cast<double>(within) / num_samples;
  return out;
}

// Both sides of the value decomposition for a candidate Q table:
//   J(comparator) - J(pi_hat) = utility_term + bellman_term + kl_term
// with pi_hat the Gibbs policy of q_hat and V_hat its regularized value.
struct ValueDecomposition {
  double lhs = 0.0;
  double utility_term = 0.0;
  double bellman_term = 0.0;
  double kl_term = 0.0;
  Policy induced_policy;

  double rhs() const { return utility_term + bellman_term + kl_term; }
};

inline ValueDecomposition value_decomposition(const TabularMdp& mdp, std::span<const double> q_hat,
                                              const Policy& ref_policy, double eta,
                                              const Policy& comparator) {
  if (!(eta > 0.0)) throw DomainError("eta must be positive");
  const TreeIndex& tree = mdp.tree();
  if (static_cast<int>(q_hat.size()) != tree.num_state_actions())
    throw StructuralError("candidate Q table does not match the environment");
  const std::vector<double> logref = checked_ref_log_probs(tree, ref_policy);

  ValueDecomposition out;
  out.induced_policy.action_logits.assign(tree.num_state_actions(), 0.0);
  std::vector<double>& log_hat = out.induced_policy.action_logits;
  std::vector<double> v_hat(tree.num_states(), 0.0);
  for (int s = 0; s < tree.num_states(); ++s) {
    const StateNode& n = tree.state(s);
    gibbs_row(n, logref, q_hat, eta, log_hat);
    double eq = 0.0;
    for (int a = 0; a < n.num_actions; ++a)
      eq += std::exp(log_hat[n.sa_begin + a]) * q_hat[n.sa_begin + a];
    v_hat[s] = eq - eta * state_kl(n, log_hat, logref);
  }

  // E_o[V_hat_{h+1}] - Q_hat_h per pair, V_hat_{H+1} = 0.
  std::vector<double> residual(tree.num_state_actions(), 0.0);
  for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
    double next = 0.0;
    const int b0 = tree.branch_begin(sa);
    for (int o = 0; o < tree.num_obs(sa); ++o)
      next += mdp.kernel()[b0 + o] * v_hat[tree.branch_child(b0 + o)];
    residual[sa] = next - q_hat[sa];
  }

  const std::vector<double> log_cmp = action_log_probs(tree, comparator);
  std::vector<double> p_cmp(log_cmp.size()), p_hat(log_hat.size());
  for (std::size_t i = 0; i < p_cmp.size(); ++i) {
    p_cmp[i] = std::exp(log_cmp[i]);
    p_hat[i] = std::exp(log_hat[i]);
  }
  const std::vector<double> reach_cmp = state_occupancy(mdp, p_cmp);
  const std::vector<double> reach_hat = state_occupancy(mdp, p_hat);

  out.utility_term = expected_terminal(tree, reach_cmp, p_cmp, mdp.utility()) -
                     expected_terminal(tree, reach_hat, p_hat, mdp.utility());
  out.bellman_term = expected_pair_sum(tree, reach_cmp, p_cmp, residual) -
                     expected_pair_sum(tree, reach_hat, p_hat, residual);
  double kl = 0.0;
  for (int s = 0; s < tree.num_states(); ++s)
    if (reach_cmp[s] > 0.0) kl += reach_cmp[s] * state_kl(tree.state(s), log_cmp, log_hat);
  out.kl_term = -eta * kl;
  out.lhs = exact_expected_value(mdp, comparator, ref_policy, eta) -
            exact_expected_value(mdp, out.induced_policy, ref_policy, eta);
  return out;
}

inline nlohmann::json plan_to_json(const TabularMdp& mdp, const PlanSolution& plan) {
  const TreeIndex& tree = mdp.tree();
  const std::vector<double> probs = action_probs(tree, plan.optimal_policy);
  nlohmann::json states = nlohmann::json::array();
  for (int s = 0; s < tree.num_states(); ++s) {
    const StateNode& n = tree.state(s);
    nlohmann::json actions = nlohmann::json::array();
    for (int a = 0; a < n.num_actions; ++a)
      actions.push_back({{"action", a}, {"q", plan.q[n.sa_begin + a]}, {"pi", probs[n.sa_begin + a]}});
    states.push_back({{"id", s},
                      {"step", n.step},
                      {"prompt", n.prompt},
                      {"parent", n.parent},
                      {"parent_action", n.parent_action},
                      {"parent_obs", n.parent_obs},
                      {"v", plan.v[s]},
                      {"log_normalizer", plan.log_normalizer[s]},
                      {"actions", actions}});
  }
  return {{"eta", plan.eta}, {"horizon", tree.horizon()}, {"states", states}};
}

}  // namespace mturn
