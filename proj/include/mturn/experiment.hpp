// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mturn/core.hpp"
#include "mturn/evaluation.hpp"
#include "mturn/generators.hpp"
#include "mturn/io.hpp"
#include "mturn/keyvalue.hpp"
#include "mturn/online_loop.hpp"
#include "mturn/planner.hpp"
#include "mturn/preference.hpp"
#include "mturn/theory.hpp"
#include "mturn/trainers.hpp"

namespace mturn {

inline constexpr const char* kVersion = "0.1.0";

// Resolved run configuration. Every field has a text form, and a manifest
// written from it loads back to the same configuration.
struct ExperimentConfig {
  EnvironmentSpec env;
  std::string utility = "table";  // table | result_check
  OnlineConfig online;
  TheoryConfig theory;
  int theory_num_utilities = 4;
  int theory_num_kernels = 4;
  int audit_draws = 100;
  int audit_samples = 10000;
  std::vector<std::string> sweep_eta;
  std::vector<std::string> sweep_reference_mode;
  std::vector<std::string> sweep_exploration;
  std::uint64_t seed = 0;
  bool has_seed = false;
};

inline const std::set<std::string>& experiment_keys() {
  static const std::set<std::string> keys = {
      "env", "env.*", "utility", "trainer", "exploration", "pairing", "reference_mode",
      "label_mode", "eta", "rounds", "pairs_per_round", "samples_per_prompt", "n_current",
      "exploration_temperature", "split_prompts", "learning_rate", "steps", "batch_size",
      "lambda_plus", "lambda_minus", "nll_weight", "mask_observations", "outer_eta_in_kto",
      "z0_samples", "seed", "theory.*", "audit.*", "sweep.*", "manifest.*"};
  return keys;
}

inline EnvironmentSpec resolve_env_section(const KeyValueDocument& doc,
                                           const std::filesystem::path& base_dir) {
  EnvironmentSpec spec = default_environment_spec("tool_tree");
  if (doc.contains("env")) {
    const std::string ref = doc.get_string("env");
    if (is_environment_family(ref)) {
      spec = default_environment_spec(ref);
    } else {
      std::filesystem::path p = ref;
      if (p.is_relative() && !base_dir.empty() && std::filesystem::exists(base_dir / p)) p = base_dir / p;
      spec = resolve_environment_spec(p.string());
    }
  }
  const KeyValueDocument env = doc.section("env.");
  if (!env.values().empty()) {
    KeyValueDocument merged = environment_spec_document(spec);
    if (env.contains("family") && env.get_string("family") != spec.family)
      merged = environment_spec_document(default_environment_spec(env.get_string("family")));
    for (const auto& [k, v] : env.values()) merged.set(k, v);
    spec = parse_environment_spec(merged);
  }
  return spec;
}

inline ExperimentConfig parse_experiment_config(const KeyValueDocument& doc,
                                                const std::filesystem::path& base_dir = {}) {
  doc.reject_unknown(experiment_keys());
  ExperimentConfig c;
  c.env = resolve_env_section(doc, base_dir);
  c.utility = doc.get_string("utility", c.utility);
  if (c.utility != "table" && c.utility != "result_check")
    throw ConfigError("unknown utility '" + c.utility + "'");

  OnlineConfig& o = c.online;
  o.trainer = parse_trainer(doc.get_string("trainer", to_string(o.trainer)));
  o.exploration = parse_exploration(doc.get_string("exploration", to_string(o.exploration)));
  o.pairing = parse_pairing(doc.get_string("pairing", to_string(o.pairing)));
  o.reference_mode = parse_reference_mode(doc.get_string("reference_mode", to_string(o.reference_mode)));
  o.label_mode = parse_label_mode(doc.get_string("label_mode", to_string(o.label_mode)));
  o.rounds = static_cast<int>(doc.get_int("rounds", o.rounds));
  o.pairs_per_round = static_cast<int>(doc.get_int("pairs_per_round", o.pairs_per_round));
  o.samples_per_prompt = static_cast<int>(doc.get_int("samples_per_prompt", o.samples_per_prompt));
  o.n_current = static_cast<int>(doc.get_int("n_current", o.n_current));
  o.exploration_temperature = doc.get_double("exploration_temperature", o.exploration_temperature);
  o.split_prompts = doc.get_bool("split_prompts", o.split_prompts);

  TrainerConfig& t = o.train;
  t.eta = doc.get_double("eta", t.eta);
  t.learning_rate = doc.get_double("learning_rate", t.learning_rate);
  t.steps = static_cast<int>(doc.get_int("steps", t.steps));
  t.batch_size = static_cast<int>(doc.get_int("batch_size", t.batch_size));
  t.lambda_plus = doc.get_double("lambda_plus", t.lambda_plus);
  t.lambda_minus = doc.get_double("lambda_minus", t.lambda_minus);
  t.nll_weight = doc.get_double("nll_weight", t.nll_weight);
  t.mask_observations = doc.get_bool("mask_observations", t.mask_observations);
  t.outer_eta_in_kto = doc.get_bool("outer_eta_in_kto", t.outer_eta_in_kto);
  t.z0_samples = static_cast<int>(doc.get_int("z0_samples", t.z0_samples));

  const KeyValueDocument th = doc.section("theory.");
  th.reject_unknown({"rounds", "pairs_per_round", "c1", "delta", "num_utilities", "num_kernels"});
  c.theory.eta = t.eta;
  c.theory.rounds = static_cast<int>(th.get_int("rounds", c.theory.rounds));
  c.theory.pairs_per_round = static_cast<int>(th.get_int("pairs_per_round", c.theory.pairs_per_round));
  c.theory.c1 = th.get_double("c1", c.theory.c1);
  c.theory.delta = th.get_double("delta", c.theory.delta);
  c.theory_num_utilities = static_cast<int>(th.get_int("num_utilities", c.theory_num_utilities));
  c.theory_num_kernels = static_cast<int>(th.get_int("num_kernels", c.theory_num_kernels));

  const KeyValueDocument au = doc.section("audit.");
  au.reject_unknown({"draws", "samples"});
  c.audit_draws = static_cast<int>(au.get_int("draws", c.audit_draws));
  c.audit_samples = static_cast<int>(au.get_int("samples", c.audit_samples));

  const KeyValueDocument sw = doc.section("sweep.");
  sw.reject_unknown({"eta", "reference_mode", "exploration"});
  if (sw.contains("eta")) c.sweep_eta = sw.get_list("eta");
  if (sw.contains("reference_mode")) c.sweep_reference_mode = sw.get_list("reference_mode");
  if (sw.contains("exploration")) c.sweep_exploration = sw.get_list("exploration");

  if (doc.contains("seed")) {
    const long long s = doc.get_int("seed");
    if (s < 0) throw ConfigError("seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(s);
    c.has_seed = true;
  }
  return c;
}

inline std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + xs[i];
  return out;
}

// Full resolved configuration; loads back through parse_experiment_config.
inline KeyValueDocument experiment_config_document(const ExperimentConfig& c) {
  KeyValueDocument doc;
  const KeyValueDocument env = environment_spec_document(c.env);
  for (const auto& [k, v] : env.values()) doc.set("env." + k, v);
  const OnlineConfig& o = c.online;
  const TrainerConfig& t = o.train;
  doc.set("utility", c.utility);
  doc.set("trainer", to_string(o.trainer));
  doc.set("exploration", to_string(o.exploration));
  doc.set("pairing", to_string(o.pairing));
  doc.set("reference_mode", to_string(o.reference_mode));
  doc.set("label_mode", to_string(o.label_mode));
  doc.set("rounds", std::to_string(o.rounds));
  doc.set("pairs_per_round", std::to_string(o.pairs_per_round));
  doc.set("samples_per_prompt", std::to_string(o.samples_per_prompt));
  doc.set("n_current", std::to_string(o.n_current));
  doc.set("exploration_temperature", format_double(o.exploration_temperature));
  doc.set("split_prompts", o.split_prompts ? "true" : "false");
  doc.set("eta", format_double(t.eta));
  doc.set("learning_rate", format_double(t.learning_rate));
  doc.set("steps", std::to_string(t.steps));
  doc.set("batch_size", std::to_string(t.batch_size));
  doc.set("lambda_plus", format_double(t.lambda_plus));
  doc.set("lambda_minus", format_double(t.lambda_minus));
  doc.set("nll_weight", format_double(t.nll_weight));
  doc.set("mask_observations", t.mask_observations ? "true" : "false");
  doc.set("outer_eta_in_kto", t.outer_eta_in_kto ? "true" : "false");
  doc.set("z0_samples", std::to_string(t.z0_samples));
  doc.set("theory.rounds", std::to_string(c.theory.rounds));
  doc.set("theory.pairs_per_round", std::to_string(c.theory.pairs_per_round));
  doc.set("theory.c1", format_double(c.theory.c1));
  doc.set("theory.delta", format_double(c.theory.delta));
  doc.set("theory.num_utilities", std::to_string(c.theory_num_utilities));
  doc.set("theory.num_kernels", std::to_string(c.theory_num_kernels));
  doc.set("audit.draws", std::to_string(c.audit_draws));
  doc.set("audit.samples", std::to_string(c.audit_samples));
  if (!c.sweep_eta.empty()) doc.set("sweep.eta", join(c.sweep_eta));
  if (!c.sweep_reference_mode.empty()) doc.set("sweep.reference_mode", join(c.sweep_reference_mode));
  if (!c.sweep_exploration.empty()) doc.set("sweep.exploration", join(c.sweep_exploration));
  if (c.has_seed) doc.set("seed", std::to_string(c.seed));
  return doc;
}

inline void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& c,
                           const std::string& command) {
  KeyValueDocument doc = experiment_config_document(c);
  doc.set("manifest.command", command);
  doc.set("manifest.tool", "mturn");
  doc.set("manifest.version", kVersion);
  std::ofstream out = open_output(dir / "manifest.txt");
  out << "# resolved configuration; pass back with --config to reproduce\n" << doc.to_text();
}

inline void require_seed(const ExperimentConfig& c) {
  if (!c.has_seed) throw ConfigError("a seed is required (config key 'seed' or --seed)");
}

inline UtilityFunction experiment_utility(const ExperimentConfig& c, const TabularMdp& mdp) {
  return c.utility == "result_check" ? result_check_utility(mdp) : table_utility(mdp);
}

// Practical loop: metrics.csv, pairs.tsv, checkpoints/round_<t>.json and the
// validation-selected model in checkpoints/best.json. Returns the state.
inline IterationState run_iterate(const ExperimentConfig& c, const std::filesystem::path& out,
                                  std::ostream& log = std::cerr) {
  require_seed(c);
  const TabularMdp mdp = build_environment(c.env);
  const UtilityFunction u = experiment_utility(c, mdp);
  IterationState st = run_online_loop(mdp, u, c.online, c.seed);
  for (const std::string& w : st.warnings) log << "warning: " << w << '\n';

  write_manifest(out, c, "iterate");
  {
    std::ofstream f = open_output(out / "metrics.csv");
    write_round_metrics_csv(f, st, c.online);
  }
  {
    std::ofstream f = open_output(out / "pairs.tsv");
    write_preference_dataset(f, st.dataset);
  }
  for (std::size_t r = 0; r < st.main_history.size(); ++r)
    save_checkpoint(out / "checkpoints" / ("round_" + std::to_string(r) + ".json"),
                    st.main_history[r]);
  std::vector<int> validation(mdp.tree().num_prompts());
  for (int p = 0; p < mdp.tree().num_prompts(); ++p) validation[p] = p;
  const std::span<const Policy> rounds(st.main_history.data() + 1, st.main_history.size() - 1);
  const std::size_t best = select_best_model(mdp, rounds, validation);
  save_checkpoint(out / "checkpoints" / "best.json", rounds[best]);
  return st;
}

inline RegretLedger run_theory(const ExperimentConfig& c, const std::filesystem::path& out) {
  require_seed(c);
  const TabularMdp mdp = build_environment(c.env);
  Rng rng(c.seed);
  Rng class_rng = rng.fork(1);
  const ModelClass cls = make_model_class(mdp, c.theory_num_utilities, c.theory_num_kernels, class_rng);
  Rng loop_rng = rng.fork(2);
  const RegretLedger ledger = run_theoretical_loop(mdp, cls, c.theory, loop_rng);
  write_manifest(out, c, "theory");
  std::ofstream f = open_output(out / "regret.csv");
  write_regret_csv(f, ledger);
  return ledger;
}

inline nlohmann::json run_plan(const EnvironmentSpec& env, double eta) {
  const TabularMdp mdp = build_environment(env);
  const PlanSolution plan = solve_kl_regularized(mdp, uniform_policy(mdp.tree()), eta);
  return plan_to_json(mdp, plan);
}

// Optimality-condition audit over every trajectory, the value decomposition
// on random (Q, comparator) draws, and the deviation bound check.
struct AuditSummary {
  double max_residual = 0.0;
  double max_abs_term_c = 0.0;
  double max_decomposition_gap = 0.0;
  double chebyshev_fraction = 1.0;
  bool chebyshev_vacuous = false;
};

inline Policy random_policy(const TreeIndex& tree, Rng& rng, double scale = 2.0) {
  Policy p = uniform_policy(tree);
  for (double& l : p.action_logits) l = scale * rng.normal();
  return p;
}

inline AuditSummary run_audit(const ExperimentConfig& c, const std::filesystem::path& out) {
  require_seed(c);
  if (c.audit_draws < 1) throw ConfigError("audit.draws must be at least 1");
  const TabularMdp mdp = build_environment(c.env);
  const TreeIndex& tree = mdp.tree();
  const double eta = c.online.train.eta;
  const Policy ref = uniform_policy(tree);
  const PlanSolution plan = solve_kl_regularized(mdp, ref, eta);
  Rng rng(c.seed);
  AuditSummary s;

  write_manifest(out, c, "audit");
  {
    std::ofstream f = open_output(out / "optimality.csv");
    CsvWriter csv(f, {"prompt", "trajectory", "probability", "utility", "term_a", "term_b",
                      "term_c", "residual"});
    const std::vector<double> probs = action_probs(tree, plan.optimal_policy);
    for_each_trajectory(mdp, probs, [&](const Trajectory& traj, double p) {
      const OptimalityTerms t = audit_optimality_condition(mdp, plan, ref, eta, traj);
      s.max_residual = std::max(s.max_residual, std::abs(t.residual));
      s.max_abs_term_c = std::max(s.max_abs_term_c, std::abs(t.term_c));
      csv.row(traj.prompt, encode_trajectory(traj), p, mdp.utility_of(traj), t.term_a, t.term_b,
              t.term_c, t.residual);
    });
  }
  {
    std::ofstream f = open_output(out / "decomposition.csv");
    CsvWriter csv(f, {"draw", "lhs", "utility_term", "bellman_term", "kl_term", "gap"});
    for (int d = 0; d < c.audit_draws; ++d) {
      std::vector<double> q(tree.num_state_actions());
      for (double& x : q) x = mdp.bound() * rng.uniform();
      const Policy cmp = random_policy(tree, rng);
      const ValueDecomposition v = value_decomposition(mdp, q, ref, eta, cmp);
      const double gap = v.lhs - v.rhs();
      s.max_decomposition_gap = std::max(s.max_decomposition_gap, std::abs(gap));
      csv.row(d, v.lhs, v.utility_term, v.bellman_term, v.kl_term, gap);
    }
  }
  const ChebyshevCheck ch =
      chebyshev_bound_check(mdp, plan, plan.optimal_policy, std::max(100, c.audit_samples), rng);
  s.chebyshev_fraction = ch.fraction_within_bound;
  s.chebyshev_vacuous = ch.vacuous;
  {
    std::ofstream f = open_output(out / "audit_summary.csv");
    CsvWriter csv(f, {"max_residual", "max_abs_term_c", "max_decomposition_gap",
                      "chebyshev_fraction", "chebyshev_vacuous"});
    csv.row(s.max_residual, s.max_abs_term_c, s.max_decomposition_gap, s.chebyshev_fraction,
            s.chebyshev_vacuous);
  }
  return s;
}

struct SweepCell {
  int index = 0;
  ExperimentConfig config;
  std::string eta, reference_mode, exploration;
  bool ok = false;
  std::string error;
  double final_utility = 0.0;
  double final_kl_to_initial = 0.0;
};

// Runs `jobs(i)` for i in [0, n) on `workers` threads.
inline void parallel_for(int n, int workers, const std::function<void(int)>& job) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) job(i);
    });
  for (std::thread& t : pool) t.join();
}

// eta x reference_mode x exploration grid of iterate runs, one directory per
// cell and summary.csv. A cell that throws is marked failed.
inline std::vector<SweepCell> run_sweep(const ExperimentConfig& c, const std::filesystem::path& out,
                                        int jobs) {
  require_seed(c);
  const ExperimentConfig base = c;
  auto axis = [](const std::vector<std::string>& v, std::string fallback) {
    return v.empty() ? std::vector<std::string>{std::move(fallback)} : v;
  };
  const auto etas = axis(c.sweep_eta, format_double(c.online.train.eta));
  const auto modes = axis(c.sweep_reference_mode, to_string(c.online.reference_mode));
  const auto explore = axis(c.sweep_exploration, to_string(c.online.exploration));

  std::vector<SweepCell> cells;
  for (const auto& e : etas)
    for (const auto& m : modes)
      for (const auto& x : explore) {
        SweepCell cell;
        cell.index = static_cast<int>(cells.size());
        cell.eta = e;
        cell.reference_mode = m;
        cell.exploration = x;
        cells.push_back(std::move(cell));
      }
  write_manifest(out, c, "sweep");

  parallel_for(static_cast<int>(cells.size()), jobs, [&](int i) {
    SweepCell& cell = cells[i];
    const std::filesystem::path dir = out / ("cell_" + std::to_string(i));
    try {
      ExperimentConfig cc = base;
      cc.sweep_eta.clear();
      cc.sweep_reference_mode.clear();
      cc.sweep_exploration.clear();
      cc.online.train.eta = KeyValueDocument::parse_double("sweep.eta", cell.eta);
      cc.theory.eta = cc.online.train.eta;
      cc.online.reference_mode = parse_reference_mode(cell.reference_mode);
      cc.online.exploration = parse_exploration(cell.exploration);
      cc.seed = mix_seed(base.seed, static_cast<std::uint64_t>(i));
      cell.config = cc;
      std::ostringstream log;
      const IterationState st = run_iterate(cc, dir, log);
      cell.final_utility = st.metrics.back().true_expected_utility;
      cell.final_kl_to_initial = st.metrics.back().kl_to_initial;
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.error = e.what();
      std::ofstream f = open_output(dir / "error.txt");
      f << cell.error << '\n';
    }
  });

  int best = -1;
  for (const SweepCell& cell : cells)
    if (cell.ok && (best < 0 || cell.final_utility > cells[best].final_utility)) best = cell.index;
  std::ofstream f = open_output(out / "summary.csv");
  CsvWriter csv(f, {"cell", "eta", "reference_mode", "exploration", "seed", "status",
                    "final_true_expected_utility", "final_kl_to_initial", "best"});
  for (const SweepCell& cell : cells)
    csv.row(cell.index, cell.eta, cell.reference_mode, cell.exploration,
            mix_seed(base.seed, static_cast<std::uint64_t>(cell.index)),
            std::string(cell.ok ? "ok" : "failed"), cell.final_utility, cell.final_kl_to_initial,
            cell.index == best);
  return cells;
}

}  // namespace mturn
