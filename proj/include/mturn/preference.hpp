// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/env.hpp"
#include "mturn/keyvalue.hpp"
#include "mturn/policy.hpp"
#include "mturn/sampling.hpp"

namespace mturn {

enum class UtilityKind { result_check, orm, prm_min, table };

inline const char* to_string(UtilityKind k) {
  switch (k) {
    case UtilityKind::result_check: return "result_check";
    case UtilityKind::orm: return "orm";
    case UtilityKind::prm_min: return "prm_min";
    case UtilityKind::table: return "table";
  }
  return "?";
}

// Trajectory utility. Because a terminal state encodes its whole history,
// every utility is a table over terminal pairs (`terminal`); the PRM variant
// additionally keeps its per-step reward table and evaluates the min along
// the path from it.
struct UtilityFunction {
  UtilityKind kind = UtilityKind::table;
  std::vector<double> terminal;
  std::vector<double> step_reward;
  double bound = 1.0;

  double operator()(const TreeIndex& tree, const Trajectory& traj) const {
    const TrajectoryPath path = resolve_path(tree, traj);
    if (kind == UtilityKind::prm_min) {
      double lo = step_reward[path.pairs.front()];
      for (int sa : path.pairs) lo = std::min(lo, step_reward[sa]);
      return lo;
    }
    return terminal[path.pairs.back()];
  }
};

inline UtilityFunction table_utility(const TabularMdp& mdp) {
  return {UtilityKind::table, {mdp.utility().begin(), mdp.utility().end()}, {}, mdp.bound()};
}

// u = 1{answer(s_H, a_H) = gold(prompt)}.
inline UtilityFunction result_check_utility(const TabularMdp& mdp, std::span<const int> gold) {
  const TreeIndex& tree = mdp.tree();
  if (static_cast<int>(gold.size()) != tree.num_prompts())
    throw ConfigError("gold answers must cover every prompt");
  for (int p = 0; p < tree.num_prompts(); ++p)
    if (gold[p] < 0) throw ConfigError("missing gold answer for prompt " + std::to_string(p));
  UtilityFunction u{UtilityKind::result_check, std::vector<double>(tree.num_state_actions(), 0.0),
                    {}, 1.0};
  for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
    if (!tree.terminal_pair(sa)) continue;
    const int prompt = tree.state(tree.sa_state(sa)).prompt;
    u.terminal[sa] = mdp.answers()[sa] == gold[prompt] ? 1.0 : 0.0;
  }
  return u;
}

inline UtilityFunction result_check_utility(const TabularMdp& mdp) {
  return result_check_utility(mdp, mdp.gold());
}

struct PreferenceRecord {
  int prompt = 0;
  Trajectory traj_1;
  Trajectory traj_2;
  int z = 1;  // 1: traj_1 preferred

  const Trajectory& winner() const { return z == 1 ? traj_1 : traj_2; }
  const Trajectory& loser() const { return z == 1 ? traj_2 : traj_1; }
  bool operator==(const PreferenceRecord&) const = default;
};

// z = 1 with probability sigma(u(traj_1) - u(traj_2)).
inline int bt_sample(const UtilityFunction& u, const TreeIndex& tree, const Trajectory& traj_1,
                     const Trajectory& traj_2, Rng& rng) {
  if (traj_1.prompt != traj_2.prompt)
    throw StructuralError("preference pair trajectories have different prompts");
  return rng.bernoulli(sigmoid(u(tree, traj_1) - u(tree, traj_2))) ? 1 : 0;
}

// `soft` samples the Bradley-Terry label. `hard` prefers the strictly higher
// utility and falls back to a fair coin on ties.
enum class LabelMode { hard, soft };

inline int preference_label(const UtilityFunction& u, const TreeIndex& tree,
                            const Trajectory& traj_1, const Trajectory& traj_2, LabelMode mode,
                            Rng& rng) {
  if (mode == LabelMode::soft) return bt_sample(u, tree, traj_1, traj_2, rng);
  if (traj_1.prompt != traj_2.prompt)
    throw StructuralError("preference pair trajectories have different prompts");
  const double u1 = u(tree, traj_1), u2 = u(tree, traj_2);
  if (u1 > u2) return 1;
  if (u1 < u2) return 0;
  return rng.bernoulli(0.5) ? 1 : 0;
}

// Tabular outcome reward model: n samples per prompt under `policy`, each
// labeled by the result check; the cross-entropy minimizer of a free
// per-terminal parameter is the empirical correctness rate. Unvisited
// terminal pairs predict 0.5.
inline UtilityFunction train_orm(const TabularMdp& mdp, const Policy& policy, int n,
                                 std::span<const int> gold, Rng& rng) {
  if (n < 1) throw ConfigError("ORM training needs at least one sample per prompt");
  const TreeIndex& tree = mdp.tree();
  const UtilityFunction check = result_check_utility(mdp, gold);
  std::vector<double> hits(tree.num_state_actions(), 0.0), visits(tree.num_state_actions(), 0.0);
  const TrajectorySampler sampler(mdp, policy);
  for (int p = 0; p < tree.num_prompts(); ++p) {
    for (int i = 0; i < n; ++i) {
      const Trajectory traj = sampler.sample_from(p, rng);
      const int sa = resolve_path(tree, traj).pairs.back();
      visits[sa] += 1.0;
      hits[sa] += check.terminal[sa];
    }
  }
  UtilityFunction u{UtilityKind::orm, std::vector<double>(tree.num_state_actions(), 0.0), {}, 1.0};
  for (int sa = 0; sa < tree.num_state_actions(); ++sa)
    if (tree.terminal_pair(sa)) u.terminal[sa] = visits[sa] > 0 ? hits[sa] / visits[sa] : 0.5;
  return u;
}

// Process proxy labels: for every pair (s_h, a_h), the fraction of n
// continuations under `policy` whose final answer is correct (`soft`), or
// whether any continuation is correct (`hard`).
inline std::vector<double> prm_proxy_labels(const TabularMdp& mdp, const Policy& policy, int n,
                                            std::span<const int> gold, LabelMode mode, Rng& rng) {
  if (n < 1) throw ConfigError("process labels need at least one rollout");
  const TreeIndex& tree = mdp.tree();
  const UtilityFunction check = result_check_utility(mdp, gold);
  const TrajectorySampler sampler(mdp, policy);
  std::vector<double> labels(tree.num_state_actions(), 0.0);
  for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
    int correct = 0;
    if (tree.terminal_pair(sa)) {
      correct = check.terminal[sa] > 0.5 ? n : 0;
    } else {
      for (int j = 0; j < n; ++j) correct += check.terminal[sampler.rollout_terminal_pair(sa, rng)] > 0.5;
    }
    const double soft = static_cast<double>(correct) / n;
    labels[sa] = mode == LabelMode::soft ? soft : (soft > 0.0 ? 1.0 : 0.0);
  }
  return labels;
}

// Tabular PRM fit on the steps present in `dataset` (per-entry cross-entropy
// is minimized by the label itself; unseen entries stay at 0.5), used as
// u = min_h r(s_h, a_h).
inline UtilityFunction train_prm_and_min_utility(const TabularMdp& mdp, std::span<const double> labels,
                                                 std::span<const Trajectory> dataset) {
  if (dataset.empty()) throw ConfigError("PRM training needs a nonempty dataset");
  const TreeIndex& tree = mdp.tree();
  if (static_cast<int>(labels.size()) != tree.num_state_actions())
    throw StructuralError("label table does not match the environment");
  for (double l : labels)
    if (!(l >= 0.0 && l <= 1.0)) throw DomainError("process labels must lie in [0, 1]");
  UtilityFunction u{UtilityKind::prm_min, std::vector<double>(tree.num_state_actions(), 0.0),
                    std::vector<double>(tree.num_state_actions(), 0.5), 1.0};
  for (const Trajectory& traj : dataset)
    for (int sa : resolve_path(tree, traj).pairs) u.step_reward[sa] = labels[sa];
  std::vector<double> prefix_min(tree.num_states(), 1.0);
  for (int s = 0; s < tree.num_states(); ++s) {
    const StateNode& n = tree.state(s);
    if (n.parent >= 0)
      prefix_min[s] = std::min(prefix_min[n.parent], u.step_reward[tree.sa(n.parent, n.parent_action)]);
    if (n.step == tree.horizon())
      for (int a = 0; a < n.num_actions; ++a)
        u.terminal[n.sa_begin + a] = std::min(prefix_min[s], u.step_reward[n.sa_begin + a]);
  }
  return u;
}

// N sampled trajectories for one prompt, with the index of the policy that
// produced each.
struct PromptBatch {
  int prompt = 0;
  std::vector<Trajectory> trajectories;
  std::vector<int> source;
};

struct AnnotationOptions {
  LabelMode label_mode = LabelMode::hard;
  double success_threshold = 0.5;  // u >= threshold puts a trajectory in the winning set
  std::function<bool(const Trajectory&)> keep;  // optional filter hook
};

// Splits each batch into winning and losing sets by utility and emits one
// pair drawn uniformly from their product; prompts with an empty side are
// skipped.
inline std::vector<PreferenceRecord> annotate_pairs(const TabularMdp& mdp,
                                                    std::span<const PromptBatch> batches,
                                                    const UtilityFunction& u, Rng& rng,
                                                    const AnnotationOptions& options = {}) {
  const TreeIndex& tree = mdp.tree();
  std::vector<PreferenceRecord> out;
  for (const PromptBatch& batch : batches) {
    if (batch.trajectories.size() < 2)
      throw ConfigError("annotation needs at least two trajectories per prompt");
    std::vector<const Trajectory*> win, lose;
    for (const Trajectory& t : batch.trajectories) {
      if (options.keep && !options.keep(t)) continue;
      (u(tree, t) >= options.success_threshold ? win : lose).push_back(&t);
    }
    if (win.empty() || lose.empty()) continue;
    const Trajectory& w = *win[rng.index(win.size())];
    const Trajectory& l = *lose[rng.index(lose.size())];
    PreferenceRecord r{batch.prompt, w, l, 1};
    r.z = preference_label(u, tree, w, l, options.label_mode, rng);
    out.push_back(std::move(r));
  }
  return out;
}

// Trajectory text form: a1/o1/a2/o2/.../aH
inline std::string encode_trajectory(const Trajectory& traj) {
  std::string out;
  for (std::size_t h = 0; h < traj.actions.size(); ++h) {
    if (h > 0) out += '/';
    out += std::to_string(traj.actions[h]);
    if (h < traj.observations.size()) out += '/' + std::to_string(traj.observations[h]);
  }
  return out;
}

inline Trajectory decode_trajectory(int prompt, const std::string& text) {
  Trajectory traj;
  traj.prompt = prompt;
  std::stringstream ss(text);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, '/')) {
    int v = 0;
    try {
      std::size_t used = 0;
      v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("malformed trajectory encoding '" + text + "'");
    }
    (i++ % 2 == 0 ? traj.actions : traj.observations).push_back(v);
  }
  if (traj.actions.empty() || traj.observations.size() + 1 != traj.actions.size())
    throw ConfigError("malformed trajectory encoding '" + text + "'");
  return traj;
}

// One record per line: prompt <TAB> traj_1 <TAB> traj_2 <TAB> z
inline void write_preference_dataset(std::ostream& os, std::span<const PreferenceRecord> records) {
  for (const PreferenceRecord& r : records)
    os << r.prompt << '\t' << encode_trajectory(r.traj_1) << '\t' << encode_trajectory(r.traj_2)
       << '\t' << r.z << '\n';
}

inline std::vector<PreferenceRecord> read_preference_dataset(std::istream& is) {
  std::vector<PreferenceRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string prompt, t1, t2, z;
    if (!std::getline(ss, prompt, '\t') || !std::getline(ss, t1, '\t') ||
        !std::getline(ss, t2, '\t') || !std::getline(ss, z))
      throw ConfigError("malformed preference record: '" + line + "'");
    PreferenceRecord r;
    r.prompt = static_cast<int>(KeyValueDocument::parse_int("prompt", prompt));
    r.traj_1 = decode_trajectory(r.prompt, t1);
    r.traj_2 = decode_trajectory(r.prompt, t2);
    r.z = static_cast<int>(KeyValueDocument::parse_int("z", z));
    if (r.z != 0 && r.z != 1) throw ConfigError("preference label must be 0 or 1");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mturn
