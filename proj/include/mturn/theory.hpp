// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/env.hpp"
#include "mturn/evaluation.hpp"
#include "mturn/io.hpp"
#include "mturn/planner.hpp"
#include "mturn/policy.hpp"
#include "mturn/preference.hpp"
#include "mturn/sampling.hpp"

namespace mturn {

// Finite candidate sets for the utility table and the observation kernel of
// a fixed tree. The truth indices are for evaluation only; the learner never
// reads them.
struct ModelClass {
  std::vector<std::vector<double>> utilities;  // per state-action
  std::vector<std::vector<double>> kernels;    // per branch
  int true_utility = -1;
  int true_kernel = -1;
};

// Realizable class around `mdp`: the true tables plus random alternatives
// (uniform utilities in [0, B], flat-Dirichlet kernel rows), with the truth
// placed at a random position in each list.
inline ModelClass make_model_class(const TabularMdp& mdp, int num_utilities, int num_kernels,
                                   Rng& rng) {
  if (num_utilities < 1 || num_kernels < 1) throw ConfigError("model class must be nonempty");
  const TreeIndex& tree = mdp.tree();
  ModelClass c;
  c.true_utility = static_cast<int>(rng.index(num_utilities));
  c.true_kernel = static_cast<int>(rng.index(num_kernels));
  for (int i = 0; i < num_utilities; ++i) {
    if (i == c.true_utility) {
      c.utilities.emplace_back(mdp.utility().begin(), mdp.utility().end());
      continue;
    }
    std::vector<double> u(tree.num_state_actions(), 0.0);
    for (int sa = 0; sa < tree.num_state_actions(); ++sa)
      if (tree.terminal_pair(sa)) u[sa] = mdp.bound() * rng.uniform();
    c.utilities.push_back(std::move(u));
  }
  for (int i = 0; i < num_kernels; ++i) {
    if (i == c.true_kernel) {
      c.kernels.emplace_back(mdp.kernel().begin(), mdp.kernel().end());
      continue;
    }
    std::vector<double> k(tree.num_branches(), 0.0);
    for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
      const int n = tree.num_obs(sa);
      if (n == 0) continue;
      const int b0 = tree.branch_begin(sa);
      double total = 0.0;
      for (int o = 0; o < n; ++o) {
        double x = rng.uniform();
        while (x <= 0.0) x = rng.uniform();
        k[b0 + o] = -std::log(x);
        total += k[b0 + o];
      }
      double rest = 1.0;
      for (int o = 0; o + 1 < n; ++o) {
        k[b0 + o] /= total;
        rest -= k[b0 + o];
      }
      k[b0 + n - 1] = std::max(rest, 0.0);
    }
    c.kernels.push_back(std::move(k));
  }
  return c;
}

struct MleResult {
  int index = 0;
  std::vector<double> log_likelihoods;
  bool degenerate = false;  // no data: every candidate ties at 0
};

inline MleResult argmax_likelihood(std::vector<double> ll, bool degenerate) {
  MleResult r;
  r.degenerate = degenerate;
  for (std::size_t i = 1; i < ll.size(); ++i)
    if (ll[i] > ll[r.index]) r.index = static_cast<int>(i);
  r.log_likelihoods = std::move(ll);
  return r;
}

// Bradley-Terry log-likelihood of the labeled pairs under each candidate.
inline MleResult mle_reward(const TreeIndex& tree, std::span<const PreferenceRecord> data,
                            std::span<const std::vector<double>> candidates) {
  if (candidates.empty()) throw ConfigError("utility class is empty");
  std::vector<std::pair<int, int>> ends;
  ends.reserve(data.size());
  for (const PreferenceRecord& r : data)
    ends.emplace_back(resolve_path(tree, r.traj_1).pairs.back(),
                      resolve_path(tree, r.traj_2).pairs.back());
  std::vector<double> ll(candidates.size(), 0.0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::vector<double>& u = candidates[i];
    double total = 0.0;
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double diff = u[ends[k].first] - u[ends[k].second];
      total += data[k].z == 1 ? log_sigmoid(diff) : log_sigmoid(-diff);
    }
    ll[i] = total;
  }
  return argmax_likelihood(std::move(ll), data.empty());
}

// Observed transition counts per branch; sufficient for the kernel MLE since
// the policy factors of log P^pi(tau) do not depend on the candidate.
struct TransitionCounts {
  std::vector<double> count;
  std::size_t trajectories = 0;

  explicit TransitionCounts(const TreeIndex& tree) : count(tree.num_branches(), 0.0) {}

  void add(const TreeIndex& tree, const Trajectory& traj) {
    for (int b : resolve_path(tree, traj).branches) count[b] += 1.0;
    ++trajectories;
  }
};

inline double kernel_log_likelihood(const TransitionCounts& counts, std::span<const double> kernel) {
  double ll = 0.0;
  for (std::size_t b = 0; b < counts.count.size(); ++b) {
    if (counts.count[b] == 0.0) continue;
    if (kernel[b] <= 0.0) return kNegInf;
    ll += counts.count[b] * std::log(kernel[b]);
  }
  return ll;
}

inline MleResult mle_transition(const TransitionCounts& counts,
                                std::span<const std::vector<double>> candidates) {
  if (candidates.empty()) throw ConfigError("transition class is empty");
  std::vector<double> ll;
  ll.reserve(candidates.size());
  for (const auto& k : candidates) ll.push_back(kernel_log_likelihood(counts, k));
  return argmax_likelihood(std::move(ll), counts.trajectories == 0);
}

inline MleResult mle_transition(const TreeIndex& tree, std::span<const Trajectory> data,
                                std::span<const std::vector<double>> candidates) {
  TransitionCounts counts(tree);
  for (const Trajectory& t : data) counts.add(tree, t);
  return mle_transition(counts, candidates);
}

// Candidates within c1 * log(class_size * T / delta) of the best likelihood.
inline std::vector<int> confidence_set(std::span<const double> log_likelihoods, double c1,
                                       std::size_t class_size, int rounds, double delta) {
  if (!(c1 > 0.0)) throw DomainError("c1 must be positive");
  if (!(delta > 0.0 && delta <= 1.0)) throw DomainError("delta must lie in (0, 1]");
  if (rounds < 1) throw ConfigError("rounds must be at least 1");
  if (log_likelihoods.empty()) throw ConfigError("model class is empty");
  const double best = *std::max_element(log_likelihoods.begin(), log_likelihoods.end());
  const double slack =
      c1 * std::log(static_cast<double>(class_size) * static_cast<double>(rounds) / delta);
  std::vector<int> keep;
  for (std::size_t i = 0; i < log_likelihoods.size(); ++i) {
    const double l = log_likelihoods[i];
    if (l == best || (l > kNegInf && l >= best - slack)) keep.push_back(static_cast<int>(i));
  }
  return keep;
}

struct ConfidenceSets {
  std::vector<int> utilities;
  std::vector<int> kernels;
};

inline ConfidenceSets confidence_sets(const MleResult& reward, const MleResult& transition,
                                      double c1, int rounds, double delta) {
  return {confidence_set(reward.log_likelihoods, c1, reward.log_likelihoods.size(), rounds, delta),
          confidence_set(transition.log_likelihoods, c1, transition.log_likelihoods.size(), rounds,
                         delta)};
}

// Exploration objective of one policy against one (u~, P~) candidate:
//   E_{pi,P~}[u~ - u^] - E_{pi1,P~}[u~ - u^]
//   + sum_(s,a) occ_{pi,P~}(s,a) * ([P~ V^](s,a) - [P^ V^](s,a))
// with V^ the soft values of the current plan on (u^, P^).
struct ExplorationModel {
  const TreeIndex* tree = nullptr;
  std::span<const double> prompt_probs;
  std::span<const double> u_hat;
  std::span<const double> p_hat;
  std::span<const double> v_hat;  // per state
};

inline double exploration_score(const ExplorationModel& m, std::span<const double> pi_probs,
                                std::span<const double> main_probs, std::span<const double> u_tilde,
                                std::span<const double> p_tilde) {
  const TreeIndex& tree = *m.tree;
  std::vector<double> du(tree.num_state_actions(), 0.0);
  std::vector<double> dv(tree.num_state_actions(), 0.0);
  for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
    if (tree.terminal_pair(sa)) {
      du[sa] = u_tilde[sa] - m.u_hat[sa];
      continue;
    }
    const int b0 = tree.branch_begin(sa);
    double diff = 0.0;
    for (int o = 0; o < tree.num_obs(sa); ++o)
      diff += (p_tilde[b0 + o] - m.p_hat[b0 + o]) * m.v_hat[tree.branch_child(b0 + o)];
    dv[sa] = diff;
  }
  const std::vector<double> reach = state_occupancy(tree, m.prompt_probs, p_tilde, pi_probs);
  const std::vector<double> reach_main = state_occupancy(tree, m.prompt_probs, p_tilde, main_probs);
  return expected_terminal(tree, reach, pi_probs, du) -
         expected_terminal(tree, reach_main, main_probs, du) +
         expected_pair_sum(tree, reach, pi_probs, dv);
}

struct ExplorationChoice {
  std::size_t index = 0;
  double score = 0.0;
};

// argmax over candidate policies of the max over the confidence-set product;
// ties go to the lowest policy index.
inline ExplorationChoice theoretical_exploration_policy(
    const ExplorationModel& m, std::span<const Policy> candidates, const Policy& main,
    const ModelClass& cls, const ConfidenceSets& sets) {
  if (candidates.empty()) throw ConfigError("exploration needs at least one candidate policy");
  if (sets.utilities.empty() || sets.kernels.empty())
    throw StructuralError("confidence set is empty");
  const std::vector<double> main_probs = action_probs(*m.tree, main);
  ExplorationChoice best;
  best.score = kNegInf;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::vector<double> probs = action_probs(*m.tree, candidates[i]);
    double score = kNegInf;
    for (int ui : sets.utilities)
      for (int pi : sets.kernels)
        score = std::max(score, exploration_score(m, probs, main_probs, cls.utilities[ui],
                                                  cls.kernels[pi]));
    if (score > best.score) best = {i, score};
  }
  return best;
}

struct TheoryConfig {
  int rounds = 200;
  double eta = 0.5;
  int pairs_per_round = 1;
  double c1 = 1.0;
  double delta = 0.1;

  void validate() const {
    if (rounds < 1) throw ConfigError("rounds must be at least 1");
    if (!(eta > 0.0)) throw DomainError("eta must be positive");
    if (pairs_per_round < 1) throw ConfigError("pairs_per_round must be at least 1");
    if (!(c1 > 0.0)) throw DomainError("c1 must be positive");
    if (!(delta > 0.0 && delta <= 1.0)) throw DomainError("delta must lie in (0, 1]");
  }
};

struct RegretRow {
  int round = 0;
  double j_star = 0.0;
  double j_main = 0.0;
  double regret_cum = 0.0;
  double uncertainty_score = 0.0;
  int mle_u_index = 0;
  int mle_p_index = 0;
  bool truth_in_sets = false;
};

struct RegretLedger {
  std::vector<RegretRow> rows;

  double average_regret(int t) const { return rows.at(t - 1).regret_cum / t; }
};

// Theoretical loop on the true model `mdp` with learner-side class `cls`.
// Round t: MLE on the data from rounds < t, plan on (u^, P^) against the
// uniform initial policy, pick the exploration policy, then collect m pairs
// (tau1 ~ pi1, tau2 ~ pi2, soft BT label under the true utility).
inline RegretLedger run_theoretical_loop(const TabularMdp& mdp, const ModelClass& cls,
                                         const TheoryConfig& config, Rng& rng) {
  config.validate();
  const TreeIndex& tree = mdp.tree();
  if (cls.utilities.empty() || cls.kernels.empty()) throw ConfigError("model class is empty");
  for (const auto& u : cls.utilities)
    if (static_cast<int>(u.size()) != tree.num_state_actions())
      throw StructuralError("utility candidate does not match the environment");
  for (const auto& k : cls.kernels)
    if (static_cast<int>(k.size()) != tree.num_branches())
      throw StructuralError("kernel candidate does not match the environment");

  const Policy ref = uniform_policy(tree);
  const PlanSolution star = solve_kl_regularized(mdp, ref, config.eta);
  const double j_star = exact_expected_value(mdp, star.optimal_policy, ref, config.eta);
  const UtilityFunction truth_u = table_utility(mdp);

  std::vector<TabularMdp> models;  // all (u, P) pairs, row-major in the utility index
  models.reserve(cls.utilities.size() * cls.kernels.size());
  for (const auto& u : cls.utilities) {
    const double bound = std::max(mdp.bound(), *std::max_element(u.begin(), u.end()));
    for (const auto& k : cls.kernels) models.push_back(mdp.with_kernel(k).with_utility(u, bound));
  }
  std::vector<std::optional<Policy>> gibbs(models.size());
  auto gibbs_policy = [&](int ui, int pi) -> const Policy& {
    const std::size_t id = static_cast<std::size_t>(ui) * cls.kernels.size() + pi;
    if (!gibbs[id]) gibbs[id] = solve_kl_regularized(models[id], ref, config.eta).optimal_policy;
    return *gibbs[id];
  };

  std::vector<PreferenceRecord> pairs;
  TransitionCounts counts(tree);
  RegretLedger ledger;
  double regret = 0.0;
  for (int t = 1; t <= config.rounds; ++t) {
    const MleResult ru = mle_reward(tree, pairs, cls.utilities);
    const MleResult rp = mle_transition(counts, cls.kernels);
    const std::size_t hat_id = static_cast<std::size_t>(ru.index) * cls.kernels.size() + rp.index;
    const PlanSolution plan = solve_kl_regularized(models[hat_id], ref, config.eta);
    const Policy& main = plan.optimal_policy;
    const ConfidenceSets sets = confidence_sets(ru, rp, config.c1, config.rounds, config.delta);

    std::vector<Policy> candidates;
    for (int ui : sets.utilities)
      for (int pi : sets.kernels) candidates.push_back(gibbs_policy(ui, pi));
    candidates.push_back(main);
    candidates.push_back(ref);
    const ExplorationModel em{&tree, mdp.prompt_probs(), cls.utilities[ru.index],
                              cls.kernels[rp.index], plan.v};
    const ExplorationChoice choice = theoretical_exploration_policy(em, candidates, main, cls, sets);
    const Policy& explore = candidates[choice.index];

    const double j_main = exact_expected_value(mdp, main, ref, config.eta);
    regret += j_star - j_main;
    RegretRow row;
    row.round = t;
    row.j_star = j_star;
    row.j_main = j_main;
    row.regret_cum = regret;
    row.uncertainty_score = choice.score;
    row.mle_u_index = ru.index;
    row.mle_p_index = rp.index;
    row.truth_in_sets =
        std::find(sets.utilities.begin(), sets.utilities.end(), cls.true_utility) !=
            sets.utilities.end() &&
        std::find(sets.kernels.begin(), sets.kernels.end(), cls.true_kernel) != sets.kernels.end();
    ledger.rows.push_back(row);

    const TrajectorySampler s1(mdp, main);
    const TrajectorySampler s2(mdp, explore);
    for (int i = 0; i < config.pairs_per_round; ++i) {
      const int prompt = static_cast<int>(rng.categorical(mdp.prompt_probs()));
      Trajectory a = s1.sample_from(prompt, rng);
      Trajectory b = s2.sample_from(prompt, rng);
      counts.add(tree, a);
      counts.add(tree, b);
      const int z = bt_sample(truth_u, tree, a, b, rng);
      pairs.push_back({prompt, std::move(a), std::move(b), z});
    }
  }
  return ledger;
}

inline void write_regret_csv(std::ostream& os, const RegretLedger& ledger) {
  CsvWriter csv(os, {"round", "J_star", "J_main", "regret_cum", "uncertainty_score", "mle_u_index",
                     "mle_p_index"});
  for (const RegretRow& r : ledger.rows)
    csv.row(r.round, r.j_star, r.j_main, r.regret_cum, r.uncertainty_score, r.mle_u_index,
            r.mle_p_index);
}

}  // namespace mturn
