// SPDX-License-Identifier: Apache-2.0
// Command-line front end: plan, iterate, theory, sweep, audit.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mturn/experiment.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<long long> seed;
  std::string out;
  int jobs = 1;
};

mturn::KeyValueDocument load_document(const CommonFlags& f) {
  mturn::KeyValueDocument doc;
  if (!f.config.empty()) doc = mturn::KeyValueDocument::load(f.config);
  if (f.seed) {
    if (*f.seed < 0) throw mturn::ConfigError("seed must be non-negative");
    doc.set("seed", std::to_string(*f.seed));
  }
  return doc;
}

mturn::ExperimentConfig load_config(const CommonFlags& f) {
  return mturn::parse_experiment_config(load_document(f),
                                        std::filesystem::path(f.config).parent_path());
}

std::filesystem::path output_dir(const CommonFlags& f, const char* command) {
  return f.out.empty() ? std::filesystem::path("runs") / command : std::filesystem::path(f.out);
}

void add_common(CLI::App* cmd, CommonFlags& f, bool with_jobs) {
  cmd->add_option("--config", f.config, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "master seed (overrides the config)");
  cmd->add_option("--out", f.out, "output directory");
  if (with_jobs) cmd->add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-turn preference learning laboratory"};
  app.set_version_flag("--version", mturn::kVersion);
  app.require_subcommand(1);

  CommonFlags plan_f, iter_f, theory_f, sweep_f, audit_f;
  std::string plan_env;
  std::optional<double> plan_eta;

  CLI::App* plan = app.add_subcommand("plan", "solve the KL-regularized planning problem");
  add_common(plan, plan_f, false);
  plan->add_option("--env", plan_env, "environment family or spec file");
  plan->add_option("--eta", plan_eta, "KL coefficient (default 1)");

  CLI::App* iterate = app.add_subcommand("iterate", "run the practical online loop");
  add_common(iterate, iter_f, false);
  CLI::App* theory = app.add_subcommand("theory", "run the theoretical loop and record regret");
  add_common(theory, theory_f, false);
  CLI::App* sweep = app.add_subcommand("sweep", "grid of iterate runs with a summary table");
  add_common(sweep, sweep_f, true);
  CLI::App* audit = app.add_subcommand("audit", "optimality-condition and decomposition audits");
  add_common(audit, audit_f, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (plan->parsed()) {
      const mturn::KeyValueDocument doc = load_document(plan_f);
      const mturn::ExperimentConfig c = mturn::parse_experiment_config(
          doc, std::filesystem::path(plan_f.config).parent_path());
      mturn::EnvironmentSpec env = c.env;
      if (!plan_env.empty()) env = mturn::resolve_environment_spec(plan_env);
      double eta = doc.contains("eta") ? c.online.train.eta : 1.0;
      if (plan_eta) eta = *plan_eta;
      const nlohmann::json j = mturn::run_plan(env, eta);
      if (plan_f.out.empty()) {
        std::cout << j.dump(2) << '\n';
      } else {
        std::ofstream f = mturn::open_output(std::filesystem::path(plan_f.out) / "plan.json");
        f << j.dump(2) << '\n';
      }
    } else if (iterate->parsed()) {
      const mturn::ExperimentConfig c = load_config(iter_f);
      const auto out = output_dir(iter_f, "iterate");
      const mturn::IterationState st = mturn::run_iterate(c, out);
      std::cout << "iterate: " << st.metrics.size() << " rounds, final expected utility "
                << mturn::format_double(st.metrics.back().true_expected_utility) << ", wrote "
                << out.string() << '\n';
    } else if (theory->parsed()) {
      const mturn::ExperimentConfig c = load_config(theory_f);
      const auto out = output_dir(theory_f, "theory");
      const mturn::RegretLedger l = mturn::run_theory(c, out);
      std::cout << "theory: " << l.rows.size() << " rounds, cumulative regret "
                << mturn::format_double(l.rows.back().regret_cum) << ", wrote " << out.string()
                << '\n';
    } else if (sweep->parsed()) {
      const mturn::ExperimentConfig c = load_config(sweep_f);
      const auto out = output_dir(sweep_f, "sweep");
      const auto cells = mturn::run_sweep(c, out, sweep_f.jobs);
      int failed = 0;
      for (const auto& cell : cells) {
        if (cell.ok) continue;
        ++failed;
        std::cerr << "warning: cell " << cell.index << " failed: " << cell.error << '\n';
      }
      std::cout << "sweep: " << cells.size() << " cells, " << failed << " failed, wrote "
                << out.string() << '\n';
    } else if (audit->parsed()) {
      const mturn::ExperimentConfig c = load_config(audit_f);
      const auto out = output_dir(audit_f, "audit");
      const mturn::AuditSummary s = mturn::run_audit(c, out);
      std::cout << "audit: max residual " << mturn::format_double(s.max_residual)
                << ", max decomposition gap " << mturn::format_double(s.max_decomposition_gap)
                << ", chebyshev fraction " << mturn::format_double(s.chebyshev_fraction)
                << ", wrote " << out.string() << '\n';
    }
  } catch (const mturn::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const mturn::DomainError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
