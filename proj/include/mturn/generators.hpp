// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/env.hpp"
#include "mturn/keyvalue.hpp"

namespace mturn {

// Declarative description of a generated environment.
//
// Families:
//   tool_tree   every tool call returns a fixed observation chosen by (s, a);
//               one gold action chain per prompt earns the full bound B.
//   noisy_tool  same chain, but each call returns its clean observation with
//               probability 1 - obs_noise and a corrupted one otherwise; the
//               answer is only correct when every observation was clean.
//   random      Dirichlet observation rows, uniform utilities in [0, B] and
//               random answer labels.
//
// With `halt_action`, every non-terminal state gets one extra action that
// ends the episode early: it leads to an absorbing chain of single-action,
// single-observation states down to step H.
struct EnvironmentSpec {
  std::string family = "tool_tree";
  int horizon = 2;
  int num_prompts = 1;
  int actions_per_state = 2;
  int obs_per_step = 1;
  double utility_bound = 1.0;
  std::uint64_t seed = 0;
  double obs_noise = 0.5;
  bool halt_action = false;

  bool operator==(const EnvironmentSpec&) const = default;
};

inline const std::vector<std::string>& environment_families() {
  static const std::vector<std::string> names = {"tool_tree", "noisy_tool", "random"};
  return names;
}

inline bool is_environment_family(const std::string& name) {
  for (const auto& f : environment_families())
    if (f == name) return true;
  return false;
}

// Defaults for a bare family name.
inline EnvironmentSpec default_environment_spec(const std::string& family) {
  EnvironmentSpec spec;
  spec.family = family;
  if (family == "tool_tree") return spec;
  if (family == "noisy_tool") {
    spec.obs_per_step = 3;
    spec.obs_noise = 0.5;
    return spec;
  }
  if (family == "random") {
    spec.horizon = 3;
    spec.num_prompts = 2;
    spec.actions_per_state = 3;
    spec.obs_per_step = 2;
    spec.seed = 7;
    return spec;
  }
  throw ConfigError("unknown environment family '" + family + "'");
}

inline EnvironmentSpec parse_environment_spec(const KeyValueDocument& doc) {
  doc.reject_unknown({"family", "horizon", "num_prompts", "actions_per_state", "obs_per_step",
                      "utility_bound", "seed", "obs_noise", "halt_action"});
  EnvironmentSpec spec = default_environment_spec(doc.get_string("family"));
  spec.horizon = static_cast<int>(doc.get_int("horizon", spec.horizon));
  spec.num_prompts = static_cast<int>(doc.get_int("num_prompts", spec.num_prompts));
  spec.actions_per_state = static_cast<int>(doc.get_int("actions_per_state", spec.actions_per_state));
  spec.obs_per_step = static_cast<int>(doc.get_int("obs_per_step", spec.obs_per_step));
  spec.utility_bound = doc.get_double("utility_bound", spec.utility_bound);
  spec.seed = static_cast<std::uint64_t>(doc.get_int("seed", static_cast<long long>(spec.seed)));
  spec.obs_noise = doc.get_double("obs_noise", spec.obs_noise);
  spec.halt_action = doc.get_bool("halt_action", spec.halt_action);
  return spec;
}

inline KeyValueDocument environment_spec_document(const EnvironmentSpec& spec) {
  KeyValueDocument doc;
  doc.set("family", spec.family);
  doc.set("horizon", std::to_string(spec.horizon));
  doc.set("num_prompts", std::to_string(spec.num_prompts));
  doc.set("actions_per_state", std::to_string(spec.actions_per_state));
  doc.set("obs_per_step", std::to_string(spec.obs_per_step));
  std::ostringstream b, n;
  b.precision(17);
  n.precision(17);
  b << spec.utility_bound;
  n << spec.obs_noise;
  doc.set("utility_bound", b.str());
  doc.set("seed", std::to_string(spec.seed));
  doc.set("obs_noise", n.str());
  doc.set("halt_action", spec.halt_action ? "true" : "false");
  return doc;
}

inline TabularMdp build_environment(const EnvironmentSpec& spec) {
  if (!is_environment_family(spec.family))
    throw ConfigError("unknown environment family '" + spec.family + "'");
  if (spec.horizon < 1) throw ConfigError("horizon must be at least 1");
  if (spec.actions_per_state < 1) throw ConfigError("action sets must be nonempty");
  if (spec.num_prompts < 1) throw ConfigError("need at least one prompt");
  if (spec.obs_per_step < 1) throw ConfigError("need at least one observation per step");
  if (spec.utility_bound < 0) throw ConfigError("utility bound must be >= 0");
  if (!(spec.obs_noise >= 0.0 && spec.obs_noise <= 1.0))
    throw ConfigError("obs_noise must lie in [0, 1]");

  const int H = spec.horizon;
  const int A = spec.actions_per_state;
  const int O = spec.obs_per_step;
  enum : char { kNormal = 0, kHalt = 1, kAbsorbing = 2 };
  std::vector<char> kind;  // per state-action

  auto push_state_kinds = [&](int step, bool absorbing) {
    if (absorbing) {
      kind.push_back(kAbsorbing);
      return 1;
    }
    const bool halt = spec.halt_action && step < H;
    for (int a = 0; a < A; ++a) kind.push_back(kNormal);
    if (halt) kind.push_back(kHalt);
    return A + (halt ? 1 : 0);
  };

  TreeIndex::Builder builder(H);
  for (int p = 0; p < spec.num_prompts; ++p) builder.add_prompt(push_state_kinds(1, false));
  auto tree = std::make_shared<const TreeIndex>(std::move(builder).expand(
      [&](int step, int parent_sa, int) {
        return push_state_kinds(step, kind[parent_sa] != kNormal);
      },
      [&](int sa) { return kind[sa] == kNormal ? O : 1; }));

  Rng rng(spec.seed);
  const int n_sa = tree->num_state_actions();
  std::vector<double> kernel(tree->num_branches(), 0.0);
  std::vector<int> clean_obs(n_sa, 0);
  for (int sa = 0; sa < n_sa; ++sa) {
    const int k = tree->num_obs(sa);
    if (k == 0) continue;
    const int b = tree->branch_begin(sa);
    if (kind[sa] != kNormal) {
      kernel[b] = 1.0;
      continue;
    }
    if (spec.family == "random") {
      double total = 0.0;
      for (int o = 0; o < k; ++o) {
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        kernel[b + o] = -std::log(u);
        total += kernel[b + o];
      }
      for (int o = 0; o < k; ++o) kernel[b + o] /= total;
      // Exact renormalization so the row sums to 1 within rounding.
      double rest = 1.0;
      for (int o = 0; o + 1 < k; ++o) rest -= kernel[b + o];
      kernel[b + k - 1] = std::max(rest, 0.0);
      continue;
    }
    clean_obs[sa] = static_cast<int>(rng.index(static_cast<std::size_t>(k)));
    if (spec.family == "tool_tree" || k == 1 || spec.obs_noise == 0.0) {
      kernel[b + clean_obs[sa]] = 1.0;
    } else {
      const double spill = spec.obs_noise / static_cast<double>(k - 1);
      for (int o = 0; o < k; ++o) kernel[b + o] = (o == clean_obs[sa]) ? 1.0 - spec.obs_noise : spill;
    }
  }

  std::vector<double> utility(n_sa, 0.0);
  std::vector<int> answers(n_sa, -1);
  std::vector<int> gold(spec.num_prompts, 0);
  std::vector<double> d0(spec.num_prompts, 1.0 / spec.num_prompts);

  if (spec.family == "random") {
    double total = 0.0;
    for (double& w : d0) {
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      w = -std::log(u);
      total += w;
    }
    for (double& w : d0) w /= total;
    for (int p = 0; p < spec.num_prompts; ++p) gold[p] = static_cast<int>(rng.index(A));
    for (int sa = 0; sa < n_sa; ++sa) {
      if (!tree->terminal_pair(sa)) continue;
      utility[sa] = spec.utility_bound * rng.uniform();
      answers[sa] = kind[sa] == kNormal ? static_cast<int>(rng.index(A)) : -1;
    }
  } else {
    // A state is on the gold chain when every earlier action was 0 and every
    // observation was the clean one.
    std::vector<char> on_chain(tree->num_states(), 0);
    for (int p = 0; p < spec.num_prompts; ++p) on_chain[tree->root(p)] = 1;
    for (int s = 0; s < tree->num_states(); ++s) {
      const StateNode& n = tree->state(s);
      if (n.parent < 0) continue;
      const int psa = tree->sa(n.parent, n.parent_action);
      on_chain[s] = on_chain[n.parent] && n.parent_action == 0 && kind[psa] == kNormal &&
                    n.parent_obs == clean_obs[psa];
    }
    for (int sa = 0; sa < n_sa; ++sa) {
      if (!tree->terminal_pair(sa)) continue;
      if (kind[sa] != kNormal) continue;
      const int a = tree->sa_action(sa);
      const bool correct = on_chain[tree->sa_state(sa)] && a == 0;
      answers[sa] = correct ? 0 : 1 + a;
      utility[sa] = correct ? spec.utility_bound : 0.0;
    }
  }
  return TabularMdp(tree, std::move(d0), std::move(kernel), std::move(utility),
                    spec.utility_bound, std::move(answers), std::move(gold));
}

// Accepts either a bare family name or a path to a spec document.
inline EnvironmentSpec resolve_environment_spec(const std::string& name_or_path) {
  if (is_environment_family(name_or_path)) return default_environment_spec(name_or_path);
  if (!std::filesystem::exists(name_or_path))
    throw ConfigError("unknown environment '" + name_or_path + "'");
  return parse_environment_spec(KeyValueDocument::load(name_or_path));
}

}  // namespace mturn
