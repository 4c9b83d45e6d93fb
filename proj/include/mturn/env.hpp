// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mturn/core.hpp"

namespace mturn {

struct StateNode {
  int step = 1;          // 1-based position h in the episode
  int parent = -1;       // -1 for prompt roots
  int parent_action = -1;
  int parent_obs = -1;
  int prompt = 0;
  int sa_begin = 0;      // first state-action index of this state
  int num_actions = 0;
};

// Immutable tree of history states. A state at step h < H owns, for every
// action, one child per observation branch; terminal-step states have none.
// States are stored so that every parent precedes its children, and
// state-action pairs / observation branches are laid out in flat arrays.
class TreeIndex {
 public:
  class Builder;

  int horizon() const { return horizon_; }
  int num_prompts() const { return static_cast<int>(roots_.size()); }
  int num_states() const { return static_cast<int>(states_.size()); }
  int num_state_actions() const { return static_cast<int>(sa_state_.size()); }
  int num_branches() const { return static_cast<int>(branch_child_.size()); }

  const StateNode& state(int s) const { return states_.at(s); }
  int root(int prompt) const { return roots_.at(prompt); }

  int sa(int s, int a) const {
    const StateNode& n = states_.at(s);
    if (a < 0 || a >= n.num_actions)
      throw StructuralError("action " + std::to_string(a) + " not available in state " +
                            std::to_string(s));
    return n.sa_begin + a;
  }
  int sa_state(int sa) const { return sa_state_[sa]; }
  int sa_action(int sa) const { return sa - states_[sa_state_[sa]].sa_begin; }

  // Observation branches of a state-action pair: [branch_begin, branch_begin + num_obs).
  int num_obs(int sa) const { return sa_num_obs_[sa]; }
  int branch_begin(int sa) const { return sa_branch_begin_[sa]; }
  int child(int sa, int o) const {
    if (o < 0 || o >= sa_num_obs_[sa])
      throw StructuralError("observation " + std::to_string(o) + " not available after pair " +
                            std::to_string(sa));
    return branch_child_[sa_branch_begin_[sa] + o];
  }
  int branch_child(int branch) const { return branch_child_[branch]; }

  bool terminal_state(int s) const { return states_[s].step == horizon_; }
  bool terminal_pair(int sa) const { return terminal_state(sa_state_[sa]); }

  // Parent links reconstruct the full history of a state.
  std::vector<int> history(int s) const {
    std::vector<int> path;
    for (int cur = s; cur >= 0; cur = states_[cur].parent) path.push_back(cur);
    return {path.rbegin(), path.rend()};
  }

 private:
  int horizon_ = 1;
  std::vector<StateNode> states_;
  std::vector<int> roots_;
  std::vector<int> sa_state_;
  std::vector<int> sa_num_obs_;
  std::vector<int> sa_branch_begin_;
  std::vector<int> branch_child_;
};

// Grows a tree breadth-first. The caller supplies the action count of each new
// state and the branch count of each non-terminal state-action pair.
class TreeIndex::Builder {
 public:
  explicit Builder(int horizon) {
    if (horizon < 1) throw ConfigError("horizon must be at least 1");
    tree_.horizon_ = horizon;
  }

  int add_prompt(int num_actions) {
    const int s = add_state(1, -1, -1, -1, static_cast<int>(tree_.roots_.size()), num_actions);
    tree_.roots_.push_back(s);
    return s;
  }

  // `num_actions_of(h, parent_sa, o)` gives the action count of the child at
  // step h; `num_obs_of(sa)` the branching of a non-terminal pair.
  template <typename ActionCount, typename ObsCount>
  TreeIndex expand(ActionCount num_actions_of, ObsCount num_obs_of) && {
    TreeIndex& t = tree_;
    for (int s = 0; s < static_cast<int>(t.states_.size()); ++s) {
      const StateNode node = t.states_[s];
      for (int a = 0; a < node.num_actions; ++a) {
        const int sa = node.sa_begin + a;
        t.sa_branch_begin_[sa] = static_cast<int>(t.branch_child_.size());
        if (node.step == t.horizon_) {
          t.sa_num_obs_[sa] = 0;
          continue;
        }
        const int k = num_obs_of(sa);
        if (k < 1) throw ConfigError("every non-terminal pair needs at least one observation");
        t.sa_num_obs_[sa] = k;
        const int base = static_cast<int>(t.branch_child_.size());
        t.branch_child_.resize(base + k);
        for (int o = 0; o < k; ++o) {
          const int child =
              add_state(node.step + 1, s, a, o, node.prompt, num_actions_of(node.step + 1, sa, o));
          t.branch_child_[base + o] = child;
        }
      }
    }
    for (std::size_t s = 1; s < t.states_.size(); ++s) {
      const StateNode& n = t.states_[s];
      if (n.parent < 0) continue;
      // Injective derivation: the recorded branch must lead back to s.
      const int psa = t.states_[n.parent].sa_begin + n.parent_action;
      if (t.branch_child_[t.sa_branch_begin_[psa] + n.parent_obs] != static_cast<int>(s))
        throw StructuralError("tree derivation is not unique at state " + std::to_string(s));
    }
    return std::move(t);
  }

 private:
  int add_state(int step, int parent, int action, int obs, int prompt, int num_actions) {
    if (num_actions < 1) throw ConfigError("action sets must be nonempty");
    StateNode n{step, parent, action, obs, prompt,
                static_cast<int>(tree_.sa_state_.size()), num_actions};
    const int id = static_cast<int>(tree_.states_.size());
    tree_.states_.push_back(n);
    for (int a = 0; a < num_actions; ++a) tree_.sa_state_.push_back(id);
    tree_.sa_num_obs_.resize(tree_.sa_state_.size(), 0);
    tree_.sa_branch_begin_.resize(tree_.sa_state_.size(), 0);
    return id;
  }

  TreeIndex tree_;
};

// A prompt followed by H actions and H-1 observations.
struct Trajectory {
  int prompt = 0;
  std::vector<int> actions;
  std::vector<int> observations;

  bool operator==(const Trajectory&) const = default;
};

// State and state-action ids visited by a trajectory.
struct TrajectoryPath {
  std::vector<int> states;
  std::vector<int> pairs;
  std::vector<int> branches;  // branch ids of the H-1 observations
};

inline TrajectoryPath resolve_path(const TreeIndex& tree, const Trajectory& traj) {
  const int H = tree.horizon();
  if (traj.prompt < 0 || traj.prompt >= tree.num_prompts())
    throw StructuralError("trajectory prompt " + std::to_string(traj.prompt) + " out of range");
  if (static_cast<int>(traj.actions.size()) != H ||
      static_cast<int>(traj.observations.size()) != H - 1)
    throw StructuralError("trajectory length does not match the horizon");
  TrajectoryPath path;
  path.states.reserve(H);
  path.pairs.reserve(H);
  path.branches.reserve(H - 1);
  int s = tree.root(traj.prompt);
  for (int h = 0; h < H; ++h) {
    path.states.push_back(s);
    const int sa = tree.sa(s, traj.actions[h]);
    path.pairs.push_back(sa);
    if (h + 1 < H) {
      const int o = traj.observations[h];
      s = tree.child(sa, o);
      path.branches.push_back(tree.branch_begin(sa) + o);
    }
  }
  return path;
}

// Finite-horizon environment with external observations on a history tree.
//   prompt_probs: d0 over prompts
//   kernel:       P_h(o | s, a), one entry per observation branch
//   utility:      u(s_H, a_H), one entry per state-action (non-terminal entries are 0)
//   answers:      answer label of each terminal pair (-1 when none)
//   gold:         gold answer label per prompt (-1 when none)
class TabularMdp {
 public:
  TabularMdp(std::shared_ptr<const TreeIndex> tree, std::vector<double> prompt_probs,
             std::vector<double> kernel, std::vector<double> utility, double bound,
             std::vector<int> answers = {}, std::vector<int> gold = {})
      : tree_(std::move(tree)),
        prompt_probs_(std::move(prompt_probs)),
        kernel_(std::move(kernel)),
        utility_(std::move(utility)),
        answers_(std::move(answers)),
        gold_(std::move(gold)),
        bound_(bound) {
    if (answers_.empty()) answers_.assign(tree_->num_state_actions(), -1);
    if (gold_.empty()) gold_.assign(tree_->num_prompts(), -1);
    validate();
  }

  const TreeIndex& tree() const { return *tree_; }
  std::shared_ptr<const TreeIndex> shared_tree() const { return tree_; }
  int horizon() const { return tree_->horizon(); }
  double bound() const { return bound_; }

  std::span<const double> prompt_probs() const { return prompt_probs_; }
  std::span<const double> kernel() const { return kernel_; }
  std::span<const double> utility() const { return utility_; }
  std::span<const int> answers() const { return answers_; }
  std::span<const int> gold() const { return gold_; }

  double obs_prob(int sa, int o) const { return kernel_[tree_->branch_begin(sa) + o]; }
  std::span<const double> obs_row(int sa) const {
    return std::span<const double>(kernel_).subspan(tree_->branch_begin(sa), tree_->num_obs(sa));
  }
  double utility_at(int sa) const { return utility_[sa]; }

  // True when every observation row is a point mass.
  bool deterministic() const {
    for (int sa = 0; sa < tree_->num_state_actions(); ++sa) {
      int nonzero = 0;
      for (double p : obs_row(sa)) nonzero += p > 0.0;
      if (nonzero > 1) return false;
    }
    return true;
  }

  double utility_of(const Trajectory& traj) const {
    return utility_[resolve_path(*tree_, traj).pairs.back()];
  }

  TabularMdp with_utility(std::vector<double> utility) const {
    return TabularMdp(tree_, prompt_probs_, kernel_, std::move(utility), bound_, answers_, gold_);
  }
  TabularMdp with_utility(std::vector<double> utility, double bound) const {
    return TabularMdp(tree_, prompt_probs_, kernel_, std::move(utility), bound, answers_, gold_);
  }
  TabularMdp with_kernel(std::vector<double> kernel) const {
    return TabularMdp(tree_, prompt_probs_, std::move(kernel), utility_, bound_, answers_, gold_);
  }
  TabularMdp with_prompt_probs(std::vector<double> probs) const {
    return TabularMdp(tree_, std::move(probs), kernel_, utility_, bound_, answers_, gold_);
  }

 private:
  void validate() const {
    const TreeIndex& t = *tree_;
    if (bound_ < 0 || !std::isfinite(bound_)) throw ConfigError("utility bound must be >= 0");
    if (static_cast<int>(prompt_probs_.size()) != t.num_prompts())
      throw StructuralError("prompt distribution size mismatch");
    if (static_cast<int>(kernel_.size()) != t.num_branches())
      throw StructuralError("observation kernel size mismatch");
    if (static_cast<int>(utility_.size()) != t.num_state_actions() ||
        static_cast<int>(answers_.size()) != t.num_state_actions())
      throw StructuralError("utility table size mismatch");
    if (static_cast<int>(gold_.size()) != t.num_prompts())
      throw StructuralError("gold table size mismatch");
    check_distribution(prompt_probs_, "prompt distribution");
    for (int sa = 0; sa < t.num_state_actions(); ++sa) {
      if (t.terminal_pair(sa)) {
        const double u = utility_[sa];
        if (!(u >= 0.0 && u <= bound_))
          throw ConfigError("utility at pair " + std::to_string(sa) + " outside [0, B]");
      } else {
        check_distribution(obs_row(sa), "observation row of pair " + std::to_string(sa));
      }
    }
  }

  static void check_distribution(std::span<const double> row, const std::string& what) {
    double total = 0.0;
    for (double p : row) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError(what + " has a negative entry");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError(what + " does not sum to 1");
  }

  std::shared_ptr<const TreeIndex> tree_;
  std::vector<double> prompt_probs_;
  std::vector<double> kernel_;
  std::vector<double> utility_;
  std::vector<int> answers_;
  std::vector<int> gold_;
  double bound_;
};

}  // namespace mturn
