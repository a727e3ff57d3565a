#pragma once

// Independent reference implementations for tests and task validation.
// Nothing here reuses the numeric routines of the policy or objective.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "serl/envs.hpp"

namespace serl::oracle {

inline std::uint64_t reference_fnv1a64(std::span<const unsigned char> bytes) {
  constexpr std::uint64_t kOffset = 14695981039346656037ULL;
  constexpr std::uint64_t kPrime = 1099511628211ULL;
  std::uint64_t h = kOffset;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    h = h ^ static_cast<std::uint64_t>(bytes[i]);
    h = h * kPrime;
  }
  return h;
}

inline std::uint64_t reference_fnv1a64(const std::string& s) {
  return reference_fnv1a64(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

struct FiniteDiffSpec {
  double h = 1e-5;
  std::size_t coordinates = 100;
  double rel_tol = 1e-5;
};

using ScalarLoss = std::function<double(std::span<const double>)>;

// Central differences on the requested coordinates of x.
inline std::vector<double> finite_diff_grad(const ScalarLoss& loss, std::vector<double> x,
                                            std::span<const std::size_t> coords, const FiniteDiffSpec& spec) {
  if (!(spec.h > 0.0)) throw std::invalid_argument("finite difference step must be > 0");
  std::vector<double> out;
  out.reserve(coords.size());
  for (std::size_t c : coords) {
    if (c >= x.size()) throw std::out_of_range("finite difference coordinate out of range");
    const double orig = x[c];
    x[c] = orig + spec.h;
    const double plus = loss(x);
    x[c] = orig - spec.h;
    const double minus = loss(x);
    x[c] = orig;
    if (!std::isfinite(plus) || !std::isfinite(minus)) throw std::runtime_error("finite difference: non-finite loss");
    out.push_back((plus - minus) / (2.0 * spec.h));
  }
  return out;
}

// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero pairs comparable.
inline double relative_error(double a, double b, double floor = 1e-8) {
  double scale = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / scale;
}

struct SearchResult {
  double best_reward = 0.0;
  std::vector<std::string> actions;
};

// Breadth-first search over state keys. Returns the best reward reachable
// within max_depth commands and the lexicographically first shortest
// command sequence achieving it.
inline SearchResult brute_force_best_from(const EnvState& start, int max_depth) {
  if (max_depth <= 0) throw std::invalid_argument("brute_force_best: depth must be > 0");
  struct Node {
    EnvState state;
    int parent;
    std::string command;
    int depth;
  };
  std::vector<Node> nodes;
  nodes.push_back({start, -1, "", 0});
  std::unordered_set<std::string> seen{state_key(nodes[0].state)};
  std::deque<int> queue{0};

  SearchResult best;
  int best_parent = -2;
  std::string best_command;
  auto path_to = [&](int idx) {
    std::vector<std::string> rev;
    for (int i = idx; nodes[static_cast<std::size_t>(i)].parent >= 0; i = nodes[static_cast<std::size_t>(i)].parent) {
      rev.push_back(nodes[static_cast<std::size_t>(i)].command);
    }
    return std::vector<std::string>(rev.rbegin(), rev.rend());
  };

  while (!queue.empty()) {
    int idx = queue.front();
    queue.pop_front();
    const int depth = nodes[static_cast<std::size_t>(idx)].depth;
    if (depth >= max_depth) continue;
    const EnvState state = nodes[static_cast<std::size_t>(idx)].state;
    for (const auto& cmd : candidate_commands(state)) {
      auto [next, outcome] = env_step(state, cmd);
      if (outcome.done) {
        if (outcome.reward > best.best_reward) {
          best.best_reward = outcome.reward;
          best_parent = idx;
          best_command = cmd;
          if (outcome.reward >= 1.0) {
            best.actions = path_to(idx);
            best.actions.push_back(cmd);
            return best;
          }
        }
        continue;
      }
      auto key = state_key(next);
      if (!seen.insert(key).second) continue;
      nodes.push_back({std::move(next), idx, cmd, depth + 1});
      queue.push_back(static_cast<int>(nodes.size() - 1));
    }
  }
  if (best_parent >= 0) {
    best.actions = path_to(best_parent);
    best.actions.push_back(best_command);
  }
  return best;
}

inline SearchResult brute_force_best(const TaskSpec& task, int max_depth) {
  return brute_force_best_from(reset(task).state, max_depth);
}

}  // namespace serl::oracle
