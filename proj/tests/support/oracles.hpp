// SPDX-License-Identifier: Apache-2.0
// Independent reference computations used by the tests. Nothing here calls
// the library's evaluation or planning code.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mturn/env.hpp"
#include "mturn/policy.hpp"

namespace oracle {

inline std::vector<double> softmax_rows(const mturn::TreeIndex& tree, const std::vector<double>& logits) {
  std::vector<double> p(logits.size());
  for (int s = 0; s < tree.num_states(); ++s) {
    const auto& n = tree.state(s);
    double m = -1e300;
    for (int a = 0; a < n.num_actions; ++a) m = std::max(m, logits[n.sa_begin + a]);
    double z = 0.0;
    for (int a = 0; a < n.num_actions; ++a) z += std::exp(logits[n.sa_begin + a] - m);
    for (int a = 0; a < n.num_actions; ++a) p[n.sa_begin + a] = std::exp(logits[n.sa_begin + a] - m) / z;
  }
  return p;
}

struct PathVisit {
  std::vector<int> pairs;     // visited state-action ids
  std::vector<int> branches;  // taken observation branches
  double prob = 0.0;          // d0 x pi x P
};

// Depth-first enumeration of every trajectory with its probability.
inline void enumerate(const mturn::TabularMdp& mdp, const std::vector<double>& probs,
                      const std::function<void(const PathVisit&)>& visit) {
  const auto& tree = mdp.tree();
  PathVisit cur;
  std::function<void(int, double)> rec = [&](int s, double w) {
    const auto& n = tree.state(s);
    for (int a = 0; a < n.num_actions; ++a) {
      const int sa = n.sa_begin + a;
      cur.pairs.push_back(sa);
      if (n.step == tree.horizon()) {
        cur.prob = w * probs[sa];
        visit(cur);
      } else {
        const int b0 = tree.branch_begin(sa);
        for (int o = 0; o < tree.num_obs(sa); ++o) {
          cur.branches.push_back(b0 + o);
          rec(tree.child(sa, o), w * probs[sa] * mdp.kernel()[b0 + o]);
          cur.branches.pop_back();
        }
      }
      cur.pairs.pop_back();
    }
  };
  for (int p = 0; p < tree.num_prompts(); ++p) rec(tree.root(p), mdp.prompt_probs()[p]);
}

// J(pi) = sum_tau P(tau) [u(tau) - eta * sum_h log(pi/ref)(a_h|s_h)].
inline double brute_force_value(const mturn::TabularMdp& mdp, const std::vector<double>& probs,
                                const std::vector<double>& ref_probs, double eta) {
  double j = 0.0;
  enumerate(mdp, probs, [&](const PathVisit& v) {
    if (v.prob == 0.0) return;
    double lr = 0.0;
    for (int sa : v.pairs) lr += std::log(probs[sa] / ref_probs[sa]);
    j += v.prob * (mdp.utility()[v.pairs.back()] - eta * lr);
  });
  return j;
}

// Probability that a continuation from `sa` under `probs` ends in a terminal
// pair with answer equal to `gold`.
inline double continuation_success(const mturn::TabularMdp& mdp, const std::vector<double>& probs,
                                   int sa, int gold) {
  const auto& tree = mdp.tree();
  if (tree.terminal_pair(sa)) return mdp.answers()[sa] == gold ? 1.0 : 0.0;
  double total = 0.0;
  const int b0 = tree.branch_begin(sa);
  for (int o = 0; o < tree.num_obs(sa); ++o) {
    const auto& n = tree.state(tree.child(sa, o));
    for (int a = 0; a < n.num_actions; ++a)
      total += mdp.kernel()[b0 + o] * probs[n.sa_begin + a] *
               continuation_success(mdp, probs, n.sa_begin + a, gold);
  }
  return total;
}

// Central finite difference of f along coordinate i of x.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f,
                                 std::vector<double> x, std::size_t i, double h = 1e-5) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

inline double max_state_tv(const mturn::TreeIndex& tree, const std::vector<double>& p,
                           const std::vector<double>& q) {
  double worst = 0.0;
  for (int s = 0; s < tree.num_states(); ++s) {
    const auto& n = tree.state(s);
    double tv = 0.0;
    for (int a = 0; a < n.num_actions; ++a) tv += std::abs(p[n.sa_begin + a] - q[n.sa_begin + a]);
    worst = std::max(worst, 0.5 * tv);
  }
  return worst;
}

}  // namespace oracle
