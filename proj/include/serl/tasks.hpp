#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "serl/envs.hpp"
#include "serl/oracle.hpp"

namespace serl {

inline TaskSpec make_task(EnvKind kind, std::uint64_t seed, int size = 0) {
  TaskSpec t;
  t.kind = kind;
  t.seed = seed;
  t.size = size > 0 ? size : default_env_size(kind);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(seed));
  t.task_id = std::string(env_name(kind)) + "-" + buf;
  if (kind == EnvKind::KeyDoor) {
    t.goal_text = std::string(kKeyDoorGoal);
  } else {
    t.goal_text = shop_goal_text(detail::shop_catalog(t)->required);
  }
  return t;
}

// Tasks are kept only if the brute-force solver reaches reward 1.0 within the
// environment's default turn limit.
inline std::vector<TaskSpec> generate_tasks(EnvKind kind, int count, std::uint64_t seed, int size = 0) {
  if (count < 1) throw std::invalid_argument("generate_tasks: count must be >= 1");
  std::vector<TaskSpec> out;
  for (std::uint64_t i = 0; static_cast<int>(out.size()) < count; ++i) {
    TaskSpec t = make_task(kind, derive_seed(seed, i), size);
    if (oracle::brute_force_best(t, default_max_turns(kind)).best_reward >= 1.0) out.push_back(std::move(t));
    if (i > static_cast<std::uint64_t>(count) * 100 + 1000) throw std::runtime_error("generate_tasks: too many unsolvable draws");
  }
  return out;
}

}  // namespace serl
