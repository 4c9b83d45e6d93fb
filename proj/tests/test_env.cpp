// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "mturn/evaluation.hpp"
#include "mturn/generators.hpp"
#include "mturn/sampling.hpp"
#include "support/oracles.hpp"

using namespace mturn;

namespace {

TabularMdp make_env(const std::string& family, int horizon, int actions, int obs, int prompts = 1,
                    std::uint64_t seed = 0, bool halt = false) {
  EnvironmentSpec spec = default_environment_spec(family);
  spec.horizon = horizon;
  spec.actions_per_state = actions;
  spec.obs_per_step = obs;
  spec.num_prompts = prompts;
  spec.seed = seed;
  spec.halt_action = halt;
  return build_environment(spec);
}

Policy one_hot_policy(const TreeIndex& tree, int action) {
  Policy p = uniform_policy(tree);
  for (int s = 0; s < tree.num_states(); ++s) {
    const StateNode& n = tree.state(s);
    for (int a = 0; a < n.num_actions; ++a) p.action_logits[n.sa_begin + a] = a == action ? 0.0 : -1e9;
  }
  return p;
}

}  // namespace

TEST(Environment, ToolTreeRowsArePointMasses) {
  const TabularMdp mdp = make_env("tool_tree", 2, 2, 3);
  const TreeIndex& tree = mdp.tree();
  for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
    if (tree.terminal_pair(sa)) continue;
    int ones = 0;
    for (double p : mdp.obs_row(sa)) {
      EXPECT_TRUE(p == 0.0 || p == 1.0);
      ones += p == 1.0;
    }
    EXPECT_EQ(ones, 1);
  }
  EXPECT_TRUE(mdp.deterministic());
}

TEST(Environment, RandomFamilyIsSeeded) {
  const TabularMdp a = make_env("random", 3, 3, 2, 2, 7);
  const TabularMdp b = make_env("random", 3, 3, 2, 2, 7);
  EXPECT_EQ(std::vector<double>(a.kernel().begin(), a.kernel().end()),
            std::vector<double>(b.kernel().begin(), b.kernel().end()));
  EXPECT_EQ(std::vector<double>(a.utility().begin(), a.utility().end()),
            std::vector<double>(b.utility().begin(), b.utility().end()));
  EXPECT_EQ(std::vector<double>(a.prompt_probs().begin(), a.prompt_probs().end()),
            std::vector<double>(b.prompt_probs().begin(), b.prompt_probs().end()));
  const TabularMdp c = make_env("random", 3, 3, 2, 2, 8);
  EXPECT_NE(std::vector<double>(a.utility().begin(), a.utility().end()),
            std::vector<double>(c.utility().begin(), c.utility().end()));
}

TEST(Environment, NoisyToolHasStochasticRows) {
  const TabularMdp mdp = make_env("noisy_tool", 2, 2, 3);
  bool found = false;
  for (int sa = 0; sa < mdp.tree().num_state_actions(); ++sa) {
    int nonzero = 0;
    for (double p : mdp.obs_row(sa)) nonzero += p > 0.0;
    found = found || nonzero >= 2;
  }
  EXPECT_TRUE(found);
  EXPECT_FALSE(mdp.deterministic());
}

TEST(Environment, RowsAndPromptDistributionNormalized) {
  for (const char* fam : {"tool_tree", "noisy_tool", "random"}) {
    const TabularMdp mdp = make_env(fam, 3, 3, 3, 3, 11, true);
    const TreeIndex& tree = mdp.tree();
    double d0 = 0.0;
    for (double p : mdp.prompt_probs()) d0 += p;
    EXPECT_NEAR(d0, 1.0, 1e-12) << fam;
    for (int sa = 0; sa < tree.num_state_actions(); ++sa) {
      if (tree.terminal_pair(sa)) {
        EXPECT_GE(mdp.utility_at(sa), 0.0);
        EXPECT_LE(mdp.utility_at(sa), mdp.bound());
        continue;
      }
      double row = 0.0;
      for (double p : mdp.obs_row(sa)) row += p;
      EXPECT_NEAR(row, 1.0, 1e-12) << fam;
    }
  }
}

TEST(Environment, TreeDerivationsAreUnique) {
  const TabularMdp mdp = make_env("random", 3, 3, 2, 2, 3, true);
  const TreeIndex& tree = mdp.tree();
  std::map<std::tuple<int, int, int>, int> seen;
  for (int s = 0; s < tree.num_states(); ++s) {
    const StateNode& n = tree.state(s);
    if (n.parent < 0) continue;
    EXPECT_EQ(tree.child(tree.sa(n.parent, n.parent_action), n.parent_obs), s);
    EXPECT_TRUE(seen.emplace(std::make_tuple(n.parent, n.parent_action, n.parent_obs), s).second);
    EXPECT_EQ(n.step, tree.state(n.parent).step + 1);
  }
}

TEST(Environment, HaltActionLeadsToAbsorbingChain) {
  const TabularMdp mdp = make_env("tool_tree", 3, 2, 1, 1, 0, true);
  const TreeIndex& tree = mdp.tree();
  const StateNode& root = tree.state(tree.root(0));
  ASSERT_EQ(root.num_actions, 3);
  const int halt = tree.sa(tree.root(0), 2);
  ASSERT_EQ(tree.num_obs(halt), 1);
  const StateNode& next = tree.state(tree.child(halt, 0));
  EXPECT_EQ(next.num_actions, 1);
  Trajectory t{0, {2, 0, 0}, {0, 0}};
  EXPECT_EQ(mdp.utility_of(t), 0.0);
}

TEST(Environment, RejectsInvalidSpecs) {
  EnvironmentSpec spec;
  spec.horizon = 0;
  EXPECT_THROW(build_environment(spec), ConfigError);
  spec = EnvironmentSpec{};
  spec.actions_per_state = 0;
  EXPECT_THROW(build_environment(spec), ConfigError);
  spec = EnvironmentSpec{};
  spec.utility_bound = -1;
  EXPECT_THROW(build_environment(spec), ConfigError);
  spec = EnvironmentSpec{};
  spec.family = "maze";
  EXPECT_THROW(build_environment(spec), ConfigError);
  spec = EnvironmentSpec{};
  spec.obs_noise = 1.5;
  EXPECT_THROW(build_environment(spec), ConfigError);
}

TEST(Environment, RejectsUnnormalizableKernel) {
  const TabularMdp mdp = make_env("noisy_tool", 2, 2, 3);
  std::vector<double> k(mdp.kernel().begin(), mdp.kernel().end());
  k[0] += 1e-6;
  EXPECT_THROW(mdp.with_kernel(k), ConfigError);
  std::vector<double> u(mdp.utility().begin(), mdp.utility().end());
  u[mdp.tree().num_state_actions() - 1] = 2.0;
  EXPECT_THROW(mdp.with_utility(u), ConfigError);
  EXPECT_THROW(mdp.with_prompt_probs({0.5}), ConfigError);
}

TEST(EnvironmentSpecFile, RoundTripAndUnknownKeys) {
  EnvironmentSpec spec = default_environment_spec("random");
  spec.obs_noise = 0.3;
  const KeyValueDocument doc = environment_spec_document(spec);
  EXPECT_EQ(parse_environment_spec(KeyValueDocument::parse(doc.to_text())), spec);
  EXPECT_THROW(parse_environment_spec(KeyValueDocument::parse("family = random\nwidth = 3\n")),
               ConfigError);
  EXPECT_THROW(resolve_environment_spec("no_such_env"), ConfigError);
  EXPECT_EQ(resolve_environment_spec("tool_tree"), default_environment_spec("tool_tree"));
}

TEST(Sampling, DeterministicPolicyGivesSingleTrajectory) {
  const TabularMdp mdp = make_env("tool_tree", 3, 3, 2);
  const Policy p = one_hot_policy(mdp.tree(), 1);
  Rng rng(5);
  const Trajectory first = sample_trajectory(mdp, p, rng);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_trajectory(mdp, p, rng), first);
  EXPECT_EQ(first.actions, (std::vector<int>{1, 1, 1}));
}

TEST(Sampling, UniformPolicyFrequencies) {
  const TabularMdp mdp = make_env("tool_tree", 2, 2, 1);
  const Policy p = uniform_policy(mdp.tree());
  Rng rng(17);
  std::map<std::vector<int>, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[sample_trajectory(mdp, p, rng).actions];
  ASSERT_EQ(counts.size(), 4u);
  const double sd = std::sqrt(0.25 * 0.75 / n);
  for (const auto& [k, c] : counts) EXPECT_NEAR(c / double(n), 0.25, 3 * sd);
}

TEST(Sampling, SeededStreamsRepeat) {
  const TabularMdp mdp = make_env("random", 3, 3, 2, 2, 7);
  const Policy p = uniform_policy(mdp.tree());
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_trajectory(mdp, p, a), sample_trajectory(mdp, p, b));
}

TEST(Sampling, UncoveredPolicyIsStructuralError) {
  const TabularMdp mdp = make_env("tool_tree", 2, 2, 1);
  Policy p;
  p.action_logits = {0.0, 0.0};
  Rng rng(1);
  EXPECT_THROW(sample_trajectory(mdp, p, rng), StructuralError);
}

// Empirical trajectory law against exact enumeration, 4 binomial sigmas.
TEST(Sampling, LawMatchesExactProbabilities) {
  EnvironmentSpec spec = default_environment_spec("random");
  spec.horizon = 2;
  spec.actions_per_state = 3;
  spec.obs_per_step = 2;
  spec.num_prompts = 2;
  spec.seed = 21;
  const TabularMdp mdp = build_environment(spec);
  Rng prng(4);
  Policy p = uniform_policy(mdp.tree());
  for (double& l : p.action_logits) l = prng.normal();
  const std::vector<double> probs = oracle::softmax_rows(mdp.tree(), p.action_logits);

  std::map<std::vector<int>, double> exact;
  oracle::enumerate(mdp, probs, [&](const oracle::PathVisit& v) {
    std::vector<int> key = v.pairs;
    key.insert(key.end(), v.branches.begin(), v.branches.end());
    exact[key] += v.prob;
  });
  ASSERT_LE(exact.size(), 64u);

  std::map<std::vector<int>, double> hits;
  const int n = 100000;
  Rng rng(8);
  for (int i = 0; i < n; ++i) {
    const TrajectoryPath path = resolve_path(mdp.tree(), sample_trajectory(mdp, p, rng));
    std::vector<int> key = path.pairs;
    key.insert(key.end(), path.branches.begin(), path.branches.end());
    hits[key] += 1.0;
  }
  for (const auto& [k, prob] : exact) {
    const double sd = std::sqrt(prob * (1 - prob) / n);
    EXPECT_NEAR(hits[k] / n, prob, 4 * sd + 1e-12);
  }
}

TEST(TrajectoryLogProb, UniformMasked) {
  const TabularMdp mdp = make_env("tool_tree", 2, 2, 1);
  const Trajectory t{0, {0, 1}, {0}};
  EXPECT_NEAR(trajectory_log_prob(uniform_policy(mdp.tree()), mdp, t, true), -1.3863, 1e-4);
}

TEST(TrajectoryLogProb, DeterministicMaskedEqualsUnmasked) {
  const TabularMdp mdp = make_env("tool_tree", 3, 2, 2);
  const Policy p = uniform_policy(mdp.tree());
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const Trajectory t = sample_trajectory(mdp, p, rng);
    EXPECT_EQ(trajectory_log_prob(p, mdp, t, true), trajectory_log_prob(p, mdp, t, false));
  }
}

TEST(TrajectoryLogProb, ObservationTermsSplitExactly) {
  const TabularMdp mdp = make_env("random", 4, 2, 3, 2, 5);
  Policy p = uniform_policy(mdp.tree());
  Rng rng(12);
  for (double& l : p.action_logits) l = rng.normal();
  for (int i = 0; i < 50; ++i) {
    const Trajectory t = sample_trajectory(mdp, p, rng);
    const double masked = trajectory_log_prob(p, mdp, t, true);
    const double unmasked = trajectory_log_prob(p, mdp, t, false);
    EXPECT_EQ(masked + observation_log_prob(mdp, t), unmasked);
    // independent recomputation of the observation sum
    const TrajectoryPath path = resolve_path(mdp.tree(), t);
    double obs = 0.0;
    for (std::size_t h = 0; h + 1 < path.states.size(); ++h)
      obs += std::log(mdp.obs_prob(path.pairs[h], t.observations[h]));
    EXPECT_NEAR(unmasked - masked, obs, 1e-12);
  }
}

TEST(TrajectoryLogProb, UnmaskedWithoutObservationModelIsConfigError) {
  const TabularMdp mdp = make_env("tool_tree", 2, 2, 1);
  const Trajectory t{0, {0, 1}, {0}};
  EXPECT_THROW(trajectory_log_prob(uniform_policy(mdp.tree()), mdp.tree(), t, false), ConfigError);
  EXPECT_NO_THROW(trajectory_log_prob(uniform_policy(mdp.tree(), true), mdp.tree(), t, false));
}

TEST(TrajectoryLogProb, InconsistentTrajectoryIsStructuralError) {
  const TabularMdp mdp = make_env("tool_tree", 2, 2, 1);
  EXPECT_THROW(trajectory_log_prob(uniform_policy(mdp.tree()), mdp, Trajectory{0, {0, 5}, {0}}, true),
               StructuralError);
  EXPECT_THROW(trajectory_log_prob(uniform_policy(mdp.tree()), mdp, Trajectory{0, {0}, {}}, true),
               StructuralError);
}

TEST(ExpectedValue, HandEvaluatedSingleStep) {
  const TabularMdp mdp = make_env("tool_tree", 1, 2, 1);
  ASSERT_EQ(mdp.utility_at(0), 1.0);
  ASSERT_EQ(mdp.utility_at(1), 0.0);
  Policy p = uniform_policy(mdp.tree());
  p.action_logits = {1.0, 0.0};
  // pi = (0.7311, 0.2689): 0.7311 - (0.7311 log 1.4622 + 0.2689 log 0.5378)
  EXPECT_NEAR(exact_expected_value(mdp, p, uniform_policy(mdp.tree()), 1.0), 0.6201, 1e-4);
}

TEST(ExpectedValue, MatchesBruteForceEnumeration) {
  const TabularMdp mdp = make_env("random", 3, 3, 2, 2, 9);
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Policy p = uniform_policy(mdp.tree()), ref = uniform_policy(mdp.tree());
    for (double& l : p.action_logits) l = rng.normal();
    for (double& l : ref.action_logits) l = rng.normal();
    for (double eta : {0.0, 0.1, 1.0}) {
      const double expect = oracle::brute_force_value(mdp, oracle::softmax_rows(mdp.tree(), p.action_logits),
                                                      oracle::softmax_rows(mdp.tree(), ref.action_logits), eta);
      EXPECT_NEAR(exact_expected_value(mdp, p, ref, eta), expect, 1e-12);
    }
  }
}

TEST(ExpectedValue, IdenticalPoliciesHaveNoKlCost) {
  const TabularMdp mdp = make_env("random", 3, 3, 2, 2, 9);
  Policy p = uniform_policy(mdp.tree());
  Rng rng(1);
  for (double& l : p.action_logits) l = rng.normal();
  EXPECT_DOUBLE_EQ(exact_expected_value(mdp, p, p, 5.0), expected_utility(mdp, p));
}

TEST(ExpectedValue, ConstantUtilityFactorsOut) {
  const TabularMdp base = make_env("random", 3, 2, 2, 1, 4);
  std::vector<double> u(base.utility().size(), 0.0);
  for (int sa = 0; sa < base.tree().num_state_actions(); ++sa)
    if (base.tree().terminal_pair(sa)) u[sa] = 0.4;
  const TabularMdp mdp = base.with_utility(u);
  Policy p = uniform_policy(mdp.tree());
  Rng rng(6);
  for (double& l : p.action_logits) l = rng.normal();
  const Policy ref = uniform_policy(mdp.tree());
  EXPECT_NEAR(exact_expected_value(mdp, p, ref, 0.7), 0.4 - 0.7 * expected_kl(mdp, p, ref), 1e-12);
}

TEST(ExpectedValue, LinearInUtility) {
  const TabularMdp mdp = make_env("random", 3, 3, 2, 2, 13);
  Policy p = uniform_policy(mdp.tree());
  Rng rng(7);
  for (double& l : p.action_logits) l = rng.normal();
  std::vector<double> u(mdp.utility().begin(), mdp.utility().end()), u2 = u, uc = u;
  for (int sa = 0; sa < mdp.tree().num_state_actions(); ++sa) {
    u2[sa] *= 2.0;
    if (mdp.tree().terminal_pair(sa)) uc[sa] += 0.25;
  }
  const double base = expected_utility(mdp, p);
  EXPECT_NEAR(expected_utility(mdp.with_utility(u2, 2.0), p), 2 * base, 1e-12);
  EXPECT_NEAR(expected_utility(mdp.with_utility(uc, 1.25), p), base + 0.25, 1e-12);
}

TEST(ExpectedValue, NegativeEtaRejected) {
  const TabularMdp mdp = make_env("tool_tree", 2, 2, 1);
  const Policy p = uniform_policy(mdp.tree());
  EXPECT_THROW(exact_expected_value(mdp, p, p, -0.1), DomainError);
}
