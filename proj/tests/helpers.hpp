#pragma once

// Synthetic groups and parameter instances shared by the unit suites.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "serl/core.hpp"
#include "serl/policy.hpp"
#include "serl/rng.hpp"

namespace serl::testing {

inline PolicyParams random_params(std::size_t V, std::size_t D, Rng& rng, double scale = 0.5) {
  PolicyParams p(V, D);
  for (auto& w : p.weights()) w = scale * (2.0 * uniform01(rng) - 1.0);
  for (auto& b : p.bias()) b = scale * (2.0 * uniform01(rng) - 1.0);
  return p;
}

inline TokenId random_word(Rng& rng, std::size_t V) {
  return static_cast<TokenId>(kNumMarkers + uniform_index(rng, V - kNumMarkers));
}

// THINK ACT_BEGIN w.. ACT_END with 1-3 command words.
inline TokenList random_action(Rng& rng, std::size_t V) {
  TokenList a{tok(Marker::Think), tok(Marker::ActBegin)};
  const std::size_t len = 1 + uniform_index(rng, 3);
  for (std::size_t i = 0; i < len; ++i) a.push_back(random_word(rng, V));
  a.push_back(tok(Marker::ActEnd));
  return a;
}

struct GroupSpec {
  std::size_t n = 4;
  std::size_t min_steps = 1;
  std::size_t max_steps = 3;
  std::size_t vocab = 24;
  bool unique_keys = true;
  // Stored log-probs are the current policy's minus a small offset so ratios
  // stay inside the clip range.
  double logp_jitter = 0.05;
};

// Random group whose stored log-probs are taken from `params` (plus jitter),
// so ratios are near 1 and the min/clip gate is away from its kink.
inline RolloutGroup random_group(Rng& rng, const PolicyParams& params, const GroupSpec& spec = {}) {
  RolloutGroup g;
  g.task_id = "synthetic";
  int key_counter = 0;
  TrainConfig cfg;
  for (std::size_t n = 0; n < spec.n; ++n) {
    Trajectory tr;
    tr.task_id = g.task_id;
    const std::size_t steps = spec.min_steps + uniform_index(rng, spec.max_steps - spec.min_steps + 1);
    for (std::size_t t = 0; t < steps; ++t) {
      Step s;
      for (int i = 0; i < 3; ++i) s.observation.push_back(random_word(rng, spec.vocab));
      s.action = random_action(rng, spec.vocab);
      s.feedback = {random_word(rng, spec.vocab), random_word(rng, spec.vocab)};
      s.action_mask = action_mask_for(s.action);
      s.state_key = spec.unique_keys ? "k" + std::to_string(key_counter++) : "k" + std::to_string(uniform_index(rng, 3));
      tr.steps.push_back(std::move(s));
    }
    // Stored log-probs need the full history, so fill them after the steps exist.
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      auto& s = tr.steps[t];
      for (std::size_t i = 0; i < s.action.size(); ++i) {
        auto ctx = build_history(tr, t, i, cfg);
        s.sampled_logprobs.push_back(log_prob(params, ctx, s.action[i]) - spec.logp_jitter * uniform01(rng));
      }
    }
    tr.outcome_reward = uniform01(rng) < 0.5 ? 1.0 : 0.0;
    tr.success = tr.outcome_reward == 1.0;
    g.trajectories.push_back(std::move(tr));
  }
  // Non-degenerate rewards.
  g.trajectories[0].outcome_reward = 1.0;
  g.trajectories[0].success = true;
  g.trajectories[1].outcome_reward = 0.0;
  g.trajectories[1].success = false;
  return g;
}

// Plain GRPO written from the equations: token-mean of -min(rho A, clip(rho) A),
// dense logits, no reweighting and no distillation.
inline std::vector<double> reference_grpo_grad(const RolloutGroup& g, const PolicyParams& p, const TrainConfig& cfg) {
  const std::size_t V = p.vocab_size(), D = p.feature_dim();
  const double N = static_cast<double>(g.trajectories.size());
  double mean = 0.0;
  for (const auto& tr : g.trajectories) mean += tr.outcome_reward / N;
  double var = 0.0;
  for (const auto& tr : g.trajectories) var += (tr.outcome_reward - mean) * (tr.outcome_reward - mean) / N;
  std::size_t tokens = 0;
  for (const auto& tr : g.trajectories)
    for (const auto& s : tr.steps) tokens += s.action.size();
  std::vector<double> grad(V * D + V, 0.0);
  for (const auto& tr : g.trajectories) {
    const double A = (tr.outcome_reward - mean) / (std::sqrt(var) + cfg.adv_eps);
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const auto& s = tr.steps[t];
      for (std::size_t i = 0; i < s.action.size(); ++i) {
        auto f = featurize(build_history(tr, t, i, cfg), D);
        std::vector<double> x(D, 0.0);
        for (auto j : f.indices) x[j] = 1.0;
        std::vector<double> z(V);
        double zmax = -1e300;
        for (std::size_t v = 0; v < V; ++v) {
          z[v] = p.bias()[v];
          for (std::size_t j = 0; j < D; ++j) z[v] += p.w(v, j) * x[j];
          zmax = std::max(zmax, z[v]);
        }
        double zs = 0.0;
        for (double zv : z) zs += std::exp(zv - zmax);
        const TokenId y = s.action[i];
        const double logp = z[y] - zmax - std::log(zs);
        const double rho = std::exp(logp - s.sampled_logprobs[i]);
        const double lo = 1.0 - cfg.clip_eps, hi = 1.0 + cfg.clip_eps;
        const double clipped = rho < lo ? lo : (rho > hi ? hi : rho);
        if (rho * A > clipped * A) continue;  // min picks the constant branch
        for (std::size_t v = 0; v < V; ++v) {
          const double pv = std::exp(z[v] - zmax) / zs;
          const double dz = -A * rho * ((v == y ? 1.0 : 0.0) - pv) / static_cast<double>(tokens);
          grad[V * D + v] += dz;
          for (std::size_t j = 0; j < D; ++j) grad[v * D + j] += dz * x[j];
        }
      }
    }
  }
  return grad;
}

// Gradients and parameters as one vector: W row-major, then b.
inline std::vector<double> flatten(const ParamGrad& g) {
  std::vector<double> x = g.W;
  x.insert(x.end(), g.b.begin(), g.b.end());
  return x;
}

inline std::vector<double> flatten(const PolicyParams& p) {
  std::vector<double> x = p.weights();
  x.insert(x.end(), p.bias().begin(), p.bias().end());
  return x;
}

inline PolicyParams unflatten(std::span<const double> x, std::size_t V, std::size_t D) {
  PolicyParams p(V, D);
  std::copy(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(V * D), p.weights().begin());
  std::copy(x.begin() + static_cast<std::ptrdiff_t>(V * D), x.end(), p.bias().begin());
  return p;
}

}  // namespace serl::testing
