// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/env.hpp"
#include "mturn/evaluation.hpp"
#include "mturn/io.hpp"
#include "mturn/policy.hpp"
#include "mturn/preference.hpp"
#include "mturn/sampling.hpp"
#include "mturn/trainers.hpp"

namespace mturn {

enum class ReferenceMode { fixed, moving };

inline ReferenceMode parse_reference_mode(const std::string& s) {
  if (s == "fixed") return ReferenceMode::fixed;
  if (s == "moving") return ReferenceMode::moving;
  throw ConfigError("unknown reference mode '" + s + "'");
}

inline const char* to_string(ReferenceMode m) {
  return m == ReferenceMode::fixed ? "fixed" : "moving";
}

// How the N trajectories per prompt are collected.
//   on_policy    all from the current main policy
//   mixture      n_current from the main policy, the rest from the previous one
//   temperature  half from the main policy, half from a heated copy of it
enum class ExplorationKind { on_policy, mixture, temperature };

inline ExplorationKind parse_exploration(const std::string& s) {
  if (s == "on_policy") return ExplorationKind::on_policy;
  if (s == "mixture") return ExplorationKind::mixture;
  if (s == "temperature") return ExplorationKind::temperature;
  throw ConfigError("unknown exploration strategy '" + s + "'");
}

inline const char* to_string(ExplorationKind k) {
  switch (k) {
    case ExplorationKind::on_policy: return "on_policy";
    case ExplorationKind::mixture: return "mixture";
    case ExplorationKind::temperature: return "temperature";
  }
  return "?";
}

// How a batch becomes a preference pair.
enum class PairingKind { annotate, west_of_n };

inline PairingKind parse_pairing(const std::string& s) {
  if (s == "annotate") return PairingKind::annotate;
  if (s == "west_of_n") return PairingKind::west_of_n;
  throw ConfigError("unknown pairing rule '" + s + "'");
}

inline const char* to_string(PairingKind k) {
  return k == PairingKind::annotate ? "annotate" : "west_of_n";
}

inline const char* to_string(LabelMode m) { return m == LabelMode::hard ? "hard" : "soft"; }

inline LabelMode parse_label_mode(const std::string& s) {
  if (s == "hard") return LabelMode::hard;
  if (s == "soft") return LabelMode::soft;
  throw ConfigError("unknown label mode '" + s + "'");
}

struct OnlineConfig {
  TrainerKind trainer = TrainerKind::m_dpo;
  ExplorationKind exploration = ExplorationKind::mixture;
  PairingKind pairing = PairingKind::annotate;
  ReferenceMode reference_mode = ReferenceMode::fixed;
  LabelMode label_mode = LabelMode::hard;
  int rounds = 3;
  int pairs_per_round = 64;  // prompt draws per round, each yielding at most one pair
  int samples_per_prompt = 30;
  int n_current = 20;        // mixture split; the remainder comes from the previous policy
  double exploration_temperature = 1.5;
  bool split_prompts = true;  // disjoint prompt parts per round when there are enough prompts
  TrainerConfig train;

  void validate() const {
    if (rounds < 1) throw ConfigError("rounds must be at least 1");
    if (pairs_per_round < 1) throw ConfigError("pairs_per_round must be at least 1");
    if (samples_per_prompt < 2) throw ConfigError("samples_per_prompt must be at least 2");
    if (n_current < 0 || n_current > samples_per_prompt)
      throw ConfigError("n_current must lie in [0, samples_per_prompt]");
    if (!(exploration_temperature > 0.0)) throw DomainError("temperature must be positive");
    train.validate();
  }
};

struct RoundMetrics {
  int round = 0;
  int pairs_collected = 0;
  double coverage = 0.0;
  double true_expected_utility = 0.0;
  double kl_target_value = 0.0;
  double kl_to_initial = 0.0;
  double kl_to_previous = 0.0;
  std::size_t dataset_size = 0;
};

// State of the practical loop after `round` completed rounds.
//   main_history[0] is the initial policy, main_history[t] the round-t model.
//   reference_history[t - 1] is the reference used to train round t.
struct IterationState {
  int round = 0;
  Policy initial;
  Policy main;
  std::vector<Policy> main_history;
  std::vector<Policy> reference_history;
  std::vector<PreferenceRecord> dataset;
  std::vector<RoundMetrics> metrics;
  std::vector<std::string> warnings;
  Rng rng;

  const Policy& previous_main() const {
    return main_history.size() >= 2 ? main_history[main_history.size() - 2] : initial;
  }
};

inline IterationState initial_iteration_state(Policy initial, std::uint64_t seed) {
  IterationState st;
  st.initial = initial;
  st.main = initial;
  st.main_history.push_back(std::move(initial));
  st.rng = Rng(seed);
  return st;
}

// Trajectory batches for the given prompts: n_current draws from `current`
// and n_previous from `previous`. Without a previous policy the two halves
// come from temperatures 1.0 and 1.5 of the current policy.
inline std::vector<PromptBatch> mixture_sampling(const TabularMdp& mdp, const Policy& current,
                                                 const Policy* previous, int n_current,
                                                 int n_previous, std::span<const int> prompts,
                                                 Rng& rng) {
  if (n_current < 0 || n_previous < 0 || n_current + n_previous < 2)
    throw ConfigError("mixture sampling needs at least two trajectories per prompt");
  const Policy heated = previous ? Policy{} : temperature_policy(current, 1.5);
  const TrajectorySampler first(mdp, current);
  const TrajectorySampler second(mdp, previous ? *previous : heated);
  std::vector<PromptBatch> out;
  out.reserve(prompts.size());
  for (int prompt : prompts) {
    PromptBatch b;
    b.prompt = prompt;
    for (int i = 0; i < n_current; ++i) {
      b.trajectories.push_back(first.sample_from(prompt, rng));
      b.source.push_back(0);
    }
    for (int i = 0; i < n_previous; ++i) {
      b.trajectories.push_back(second.sample_from(prompt, rng));
      b.source.push_back(1);
    }
    out.push_back(std::move(b));
  }
  return out;
}

// Best-versus-worst pair of one batch; ties resolve to the lowest index.
// Returns nothing when every trajectory has the same utility.
inline std::optional<PreferenceRecord> west_of_n_pair(const TreeIndex& tree,
                                                      const PromptBatch& batch,
                                                      const UtilityFunction& u) {
  if (batch.trajectories.size() < 2) throw ConfigError("west-of-n needs at least two trajectories");
  std::size_t best = 0, worst = 0;
  double hi = u(tree, batch.trajectories[0]), lo = hi;
  for (std::size_t i = 1; i < batch.trajectories.size(); ++i) {
    const double v = u(tree, batch.trajectories[i]);
    if (v > hi) {
      hi = v;
      best = i;
    }
    if (v < lo) {
      lo = v;
      worst = i;
    }
  }
  if (!(hi > lo)) return std::nullopt;
  return PreferenceRecord{batch.prompt, batch.trajectories[best], batch.trajectories[worst], 1};
}

inline std::vector<PreferenceRecord> west_of_n_pairs(const TreeIndex& tree,
                                                     std::span<const PromptBatch> batches,
                                                     const UtilityFunction& u) {
  std::vector<PreferenceRecord> out;
  for (const PromptBatch& b : batches)
    if (auto r = west_of_n_pair(tree, b, u)) out.push_back(std::move(*r));
  return out;
}

// Index of the candidate with the highest plain expected utility on the
// validation prompts; the earliest wins ties.
inline std::size_t select_best_model(const TabularMdp& mdp, std::span<const Policy> candidates,
                                     std::span<const int> validation_prompts) {
  if (candidates.empty()) throw ConfigError("model selection needs at least one candidate");
  if (validation_prompts.empty()) throw ConfigError("model selection needs validation prompts");
  std::size_t best = 0;
  double best_value = expected_utility_on_prompts(mdp, candidates[0], validation_prompts);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double v = expected_utility_on_prompts(mdp, candidates[i], validation_prompts);
    if (v > best_value) {
      best_value = v;
      best = i;
    }
  }
  return best;
}

// Prompts available to round `round` (1-based): with splitting enabled and at
// least one prompt per round, prompt p belongs to part p mod rounds.
inline std::vector<int> round_prompt_pool(const TreeIndex& tree, const OnlineConfig& config,
                                          int round) {
  std::vector<int> pool;
  const int n = tree.num_prompts();
  const bool split = config.split_prompts && n >= config.rounds;
  for (int p = 0; p < n; ++p)
    if (!split || p % config.rounds == (round - 1) % config.rounds) pool.push_back(p);
  return pool;
}

// One round of the practical loop: collect pairs with the exploration
// strategy, append them to D, train a new main policy on all of D from a warm
// start, and record metrics.
inline void run_iteration(IterationState& st, const TabularMdp& mdp, const UtilityFunction& u,
                          const OnlineConfig& config) {
  config.validate();
  const TreeIndex& tree = mdp.tree();
  const int round = st.round + 1;
  Rng sample_rng = st.rng.fork(1);
  Rng label_rng = st.rng.fork(2);
  const std::uint64_t train_seed = st.rng.next();

  // Prompt draws from d0 restricted to this round's pool.
  const std::vector<int> pool = round_prompt_pool(tree, config, round);
  std::vector<double> weights;
  for (int p : pool) weights.push_back(mdp.prompt_probs()[p]);
  std::vector<int> prompts;
  prompts.reserve(config.pairs_per_round);
  for (int i = 0; i < config.pairs_per_round; ++i)
    prompts.push_back(pool[sample_rng.categorical(weights)]);

  const int n = config.samples_per_prompt;
  std::vector<PromptBatch> batches;
  switch (config.exploration) {
    case ExplorationKind::on_policy:
      batches = mixture_sampling(mdp, st.main, &st.main, n, 0, prompts, sample_rng);
      break;
    case ExplorationKind::mixture: {
      const bool have_previous = st.main_history.size() >= 2;
      batches = mixture_sampling(mdp, st.main, have_previous ? &st.previous_main() : nullptr,
                                 config.n_current, n - config.n_current, prompts, sample_rng);
      break;
    }
    case ExplorationKind::temperature: {
      const Policy heated = temperature_policy(st.main, config.exploration_temperature);
      batches = mixture_sampling(mdp, st.main, &heated, n - n / 2, n / 2, prompts, sample_rng);
      break;
    }
  }

  std::vector<PreferenceRecord> fresh;
  if (config.pairing == PairingKind::west_of_n) {
    fresh = west_of_n_pairs(tree, batches, u);
  } else {
    AnnotationOptions opts;
    opts.label_mode = config.label_mode;
    opts.success_threshold = 0.5 * u.bound;
    fresh = annotate_pairs(mdp, batches, u, label_rng, opts);
  }

  const Policy reference =
      config.reference_mode == ReferenceMode::fixed ? st.initial : st.main;
  st.reference_history.push_back(reference);
  st.dataset.insert(st.dataset.end(), fresh.begin(), fresh.end());

  const Policy before = st.main;
  if (fresh.empty()) {
    st.warnings.push_back("round " + std::to_string(round) +
                          ": no usable preference pairs, training skipped");
  } else {
    st.main = train_on_pairs(mdp, config.trainer, st.main, reference, st.dataset, config.train,
                             train_seed)
                  .policy;
  }
  st.main_history.push_back(st.main);
  st.round = round;

  RoundMetrics m;
  m.round = round;
  m.pairs_collected = static_cast<int>(fresh.size());
  m.coverage = static_cast<double>(fresh.size()) / config.pairs_per_round;
  m.true_expected_utility = expected_utility(mdp, st.main);
  m.kl_target_value = exact_expected_value(mdp, st.main, st.initial, config.train.eta);
  m.kl_to_initial = expected_kl(mdp, st.main, st.initial);
  m.kl_to_previous = expected_kl(mdp, st.main, before);
  m.dataset_size = st.dataset.size();
  st.metrics.push_back(m);
}

inline Policy initial_loop_policy(const TreeIndex& tree, TrainerKind trainer) {
  return uniform_policy(tree, uses_observation_model(trainer));
}

inline IterationState run_online_loop(const TabularMdp& mdp, const UtilityFunction& u,
                                      const OnlineConfig& config, std::uint64_t seed) {
  config.validate();
  IterationState st = initial_iteration_state(initial_loop_policy(mdp.tree(), config.trainer), seed);
  for (int t = 0; t < config.rounds; ++t) run_iteration(st, mdp, u, config);
  return st;
}

inline void write_round_metrics_csv(std::ostream& os, const IterationState& st,
                                    const OnlineConfig& config) {
  CsvWriter csv(os, {"round", "trainer", "reference_mode", "eta", "pairs_collected", "coverage",
                     "true_expected_utility", "kl_to_initial", "kl_to_previous"});
  for (const RoundMetrics& m : st.metrics)
    csv.row(m.round, std::string(to_string(config.trainer)),
            std::string(to_string(config.reference_mode)), config.train.eta, m.pairs_collected,
            m.coverage, m.true_expected_utility, m.kl_to_initial, m.kl_to_previous);
}

}  // namespace mturn
