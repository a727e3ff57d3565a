#pragma once

// Rollout collection, schedules, teacher synchronization, the update loop and
// greedy evaluation.

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "serl/core.hpp"
#include "serl/envs.hpp"
#include "serl/feedback.hpp"
#include "serl/objective.hpp"
#include "serl/policy.hpp"
#include "serl/rng.hpp"
#include "serl/tasks.hpp"

namespace serl {

inline double schedule_value(const Schedule& s, long k) { return s.value(k); }

inline int resolved_max_turns(const TrainConfig& config, EnvKind kind) {
  return config.max_turns > 0 ? config.max_turns : default_max_turns(kind);
}

// Produces a response given the untruncated history h_t.
using Actor = std::function<GeneratedAction(std::span<const TokenId> history)>;

inline Trajectory run_episode(const TaskSpec& task, const Actor& actor, const Vocabulary& vocab, int max_turns) {
  Trajectory traj;
  traj.task_id = task.task_id;
  auto [state, obs] = reset(task);
  TokenList history;
  for (int turn = 0; turn < max_turns; ++turn) {
    Step step;
    step.observation = tokenize(obs, vocab);
    step.state_key = state_key(state);
    history.push_back(tok(Marker::ObsBegin));
    history.insert(history.end(), step.observation.begin(), step.observation.end());
    history.push_back(tok(Marker::ObsEnd));

    GeneratedAction act = actor(history);
    auto [next, outcome] = env_step(state, detokenize(command_tokens(act.tokens), vocab));
    step.action = std::move(act.tokens);
    step.sampled_logprobs = std::move(act.logprobs);
    step.action_mask = std::move(act.mask);
    step.feedback = tokenize(outcome.feedback_text, vocab);

    history.insert(history.end(), step.action.begin(), step.action.end());
    history.push_back(tok(Marker::FbBegin));
    history.insert(history.end(), step.feedback.begin(), step.feedback.end());
    history.push_back(tok(Marker::FbEnd));
    traj.steps.push_back(std::move(step));

    state = std::move(next);
    obs = std::move(outcome.next_observation_text);
    if (outcome.done) {
      traj.outcome_reward = outcome.reward;
      break;
    }
  }
  traj.success = traj.outcome_reward >= 1.0;
  return traj;
}

inline Actor policy_actor(const PolicyParams& params, const TrainConfig& config, Rng& rng, Decoding decoding) {
  return [&params, &config, &rng, decoding](std::span<const TokenId> history) {
    return generate_action(params, history, config, rng, decoding);
  };
}

// Replays a fixed command list with the canonical response format.
inline Actor scripted_actor(std::vector<std::string> commands, const Vocabulary& vocab) {
  auto idx = std::make_shared<std::size_t>(0);
  return [commands = std::move(commands), &vocab, idx](std::span<const TokenId>) {
    GeneratedAction a;
    a.tokens = {tok(Marker::Think), tok(Marker::ActBegin)};
    std::string cmd = *idx < commands.size() ? commands[*idx] : "look";
    ++*idx;
    for (auto t : tokenize(cmd, vocab)) a.tokens.push_back(t);
    a.tokens.push_back(tok(Marker::ActEnd));
    a.logprobs.assign(a.tokens.size(), 0.0);
    a.mask = action_mask_for(a.tokens);
    return a;
  };
}

inline std::uint64_t episode_seed(std::uint64_t root, const std::string& task_id, std::size_t rollout_index) {
  return derive_seed(derive_seed(root, task_id), static_cast<std::uint64_t>(rollout_index));
}

// N sampled episodes per task, each on its own stream derived from
// (root seed, task id, rollout index).
inline std::vector<RolloutGroup> collect_rollouts(const PolicyParams& params, std::span<const TaskSpec> tasks,
                                                  const TrainConfig& config, std::uint64_t root_seed, const Vocabulary& vocab) {
  if (tasks.empty()) throw std::invalid_argument("collect_rollouts: no tasks");
  std::vector<RolloutGroup> groups;
  for (const auto& task : tasks) {
    RolloutGroup g;
    g.task_id = task.task_id;
    const int max_turns = resolved_max_turns(config, task.kind);
    for (int n = 0; n < config.group_size; ++n) {
      Rng rng(episode_seed(root_seed, task.task_id, static_cast<std::size_t>(n)));
      g.trajectories.push_back(run_episode(task, policy_actor(params, config, rng, Decoding::Sample), vocab, max_turns));
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

struct TrainState {
  long step = 0;
  PolicyParams params;
  TeacherSnapshot teacher;
  std::uint64_t seed = 0;

  TrainState(PolicyParams p, std::uint64_t s, long k = 0)
      : step(k), params(std::move(p)), teacher(snapshot(params, k)), seed(s) {}
};

inline void maybe_sync_teacher(TrainState& state, const TrainConfig& config) {
  if (state.step % config.teacher_sync_interval == 0) state.teacher = snapshot(state.params, state.step);
}

struct MetricsRecord {
  long step = 0;
  double mean_reward = 0.0;
  double success_rate = 0.0;
  double alpha = 0.0;
  double lambda = 0.0;
  double l_rw = 0.0;
  double l_act = 0.0;
  double l_total = 0.0;
  double kl_mean = 0.0;
  double delta_mean_abs = 0.0;
  double frac_w_clipped = 0.0;
  double grad_norm = 0.0;
  double entropy_mean = 0.0;
  std::uint64_t seed = 0;
};

inline std::uint64_t step_rollout_seed(std::uint64_t seed, long k) {
  return derive_seed(derive_seed(seed, "rollout"), static_cast<std::uint64_t>(k));
}

inline std::uint64_t step_task_seed(std::uint64_t seed, long k) {
  return derive_seed(derive_seed(seed, "tasks"), static_cast<std::uint64_t>(k));
}

// Evaluation tasks come from one fixed held-out stream so that evaluating a
// saved checkpoint reproduces the numbers logged during training.
inline constexpr std::uint64_t kHeldOutRoot = 0x5e41e7a1ULL;

inline std::vector<TaskSpec> heldout_tasks(EnvKind kind, int count) {
  return generate_tasks(kind, count, derive_seed(kHeldOutRoot, "heldout"));
}

// Sync teacher, collect, place, compute the loss and apply one full-batch
// gradient step. Increments state.step.
inline MetricsRecord train_step(TrainState& state, std::span<const TaskSpec> tasks, const TrainConfig& config,
                                const Vocabulary& vocab, std::vector<RolloutGroup>* rollouts_out = nullptr) {
  maybe_sync_teacher(state, config);
  const long k = state.step;
  auto groups = collect_rollouts(state.params, tasks, config, step_rollout_seed(state.seed, k), vocab);

  std::vector<AdvantageTable> tables;
  tables.reserve(groups.size());
  for (const auto& g : groups) {
    auto plan = place(config.placement_mode, config.feedback_sources, g, static_cast<std::size_t>(config.hindsight_cap));
    tables.push_back(build_advantage_table(g, state.params, state.teacher, plan, config, k));
  }
  const double lambda = config.lambda_schedule.value(k);
  auto result = loss_and_grad(groups, tables, state.params, config, lambda);
  result.grad.descend(state.params, config.learning_rate);

  MetricsRecord m;
  m.step = k;
  m.seed = state.seed;
  std::size_t episodes = 0;
  for (const auto& g : groups) {
    for (const auto& tr : g.trajectories) {
      ++episodes;
      m.mean_reward += tr.outcome_reward;
      m.success_rate += tr.success ? 1.0 : 0.0;
    }
  }
  m.mean_reward /= static_cast<double>(episodes);
  m.success_rate /= static_cast<double>(episodes);
  m.alpha = config.alpha_schedule.value(k);
  m.lambda = lambda;
  m.l_rw = result.loss.l_rw;
  m.l_act = result.loss.l_act;
  m.l_total = result.loss.l_total;
  m.kl_mean = result.loss.kl_mean;
  m.delta_mean_abs = result.loss.delta_mean_abs;
  m.frac_w_clipped = result.loss.frac_w_clipped;
  m.grad_norm = result.grad.norm();
  m.entropy_mean = result.loss.entropy_mean;
  if (!state.params.all_finite()) throw std::runtime_error("train_step: parameters became non-finite");
  if (rollouts_out) *rollouts_out = std::move(groups);
  ++state.step;
  return m;
}

struct EvalResult {
  double success_rate = 0.0;
  double mean_reward = 0.0;
  std::size_t episodes = 0;
};

inline EvalResult evaluate_actor(const std::function<Actor(const TaskSpec&)>& make_actor, std::span<const TaskSpec> tasks,
                                 int episodes_per_task, const TrainConfig& config, const Vocabulary& vocab) {
  if (episodes_per_task < 1) throw std::invalid_argument("evaluate: episodes per task must be >= 1");
  EvalResult r;
  for (const auto& task : tasks) {
    for (int e = 0; e < episodes_per_task; ++e) {
      auto tr = run_episode(task, make_actor(task), vocab, resolved_max_turns(config, task.kind));
      r.success_rate += tr.success ? 1.0 : 0.0;
      r.mean_reward += tr.outcome_reward;
      ++r.episodes;
    }
  }
  if (r.episodes) {
    r.success_rate /= static_cast<double>(r.episodes);
    r.mean_reward /= static_cast<double>(r.episodes);
  }
  return r;
}

// Greedy decoding: argmax token, ties to the lowest id.
inline EvalResult evaluate(const PolicyParams& params, std::span<const TaskSpec> tasks, int episodes_per_task,
                           const TrainConfig& config, const Vocabulary& vocab) {
  Rng unused(0);
  return evaluate_actor([&](const TaskSpec&) { return policy_actor(params, config, unused, Decoding::Greedy); }, tasks,
                        episodes_per_task, config, vocab);
}

// ---------------------------------------------------------------------------
// Supervised warm start: teaches the response format
// "<think> <act> command </act>". Targets are the solver's next command with
// probability demo_rate and a uniformly random applicable command otherwise,
// standing in for a pretrained base model with partial task competence.

// Commands that change something; "look" is excluded since it never does.
inline std::vector<std::string> applicable_commands(const EnvState& state) {
  std::vector<std::string> out;
  for (auto& c : candidate_commands(state)) {
    if (c == "look") continue;
    if (env_step(state, c).second.feedback_text != kNothingHappens) out.push_back(std::move(c));
  }
  return out;
}

struct SupervisedExample {
  TokenList history;
  TokenList response;
};

inline std::vector<SupervisedExample> warmup_examples(EnvKind kind, int episodes, int turns, double demo_rate,
                                                      std::uint64_t seed, const Vocabulary& vocab) {
  std::vector<SupervisedExample> out;
  auto tasks = generate_tasks(kind, episodes, derive_seed(seed, "format-tasks"));
  Rng rng(derive_seed(seed, "format-commands"));
  for (const auto& task : tasks) {
    auto [state, obs] = reset(task);
    TokenList history;
    for (int turn = 0; turn < turns; ++turn) {
      auto obs_tokens = tokenize(obs, vocab);
      history.push_back(tok(Marker::ObsBegin));
      history.insert(history.end(), obs_tokens.begin(), obs_tokens.end());
      history.push_back(tok(Marker::ObsEnd));
      std::string cmd;
      if (uniform01(rng) < demo_rate) {
        cmd = oracle::brute_force_best_from(state, default_max_turns(kind)).actions.front();
      } else {
        auto options = applicable_commands(state);
        cmd = options[uniform_index(rng, options.size())];
      }
      TokenList response{tok(Marker::Think), tok(Marker::ActBegin)};
      for (auto t : tokenize(cmd, vocab)) response.push_back(t);
      response.push_back(tok(Marker::ActEnd));
      out.push_back({history, response});
      auto [next, outcome] = env_step(state, cmd);
      auto fb = tokenize(outcome.feedback_text, vocab);
      history.insert(history.end(), response.begin(), response.end());
      history.push_back(tok(Marker::FbBegin));
      history.insert(history.end(), fb.begin(), fb.end());
      history.push_back(tok(Marker::FbEnd));
      state = std::move(next);
      obs = std::move(outcome.next_observation_text);
      if (outcome.done) break;
    }
  }
  return out;
}

// Mean token cross-entropy and its gradient over the examples.
inline double supervised_step(PolicyParams& params, std::span<const SupervisedExample> examples, std::size_t context_cap,
                              double lr) {
  ParamGrad grad(params);
  std::size_t count = 0;
  for (const auto& ex : examples) count += ex.response.size();
  double loss = 0.0;
  const double scale = -1.0 / static_cast<double>(count);
  for (const auto& ex : examples) {
    for (std::size_t i = 0; i < ex.response.size(); ++i) {
      auto ctx = recent_context(ex.history, std::span<const TokenId>(ex.response.data(), i), context_cap);
      auto g = log_prob_grad(params, ctx, ex.response[i]);
      loss -= std::log(1.0 - g.dlogits[ex.response[i]]);
      grad.add(g.features, g.dlogits, scale);
    }
  }
  grad.descend(params, lr);
  return loss / static_cast<double>(count);
}

inline void pretrain_format(PolicyParams& params, EnvKind kind, const TrainConfig& config, const Vocabulary& vocab,
                            std::uint64_t seed) {
  for (int s = 0; s < config.warmup_steps; ++s) {
    auto examples = warmup_examples(kind, 16, default_max_turns(kind), config.warmup_demo_rate, derive_seed(seed, static_cast<std::uint64_t>(s)), vocab);
    supervised_step(params, examples, static_cast<std::size_t>(config.context_cap), config.warmup_learning_rate);
  }
}

inline PolicyParams initial_params(EnvKind kind, const TrainConfig& config, const Vocabulary& vocab) {
  PolicyParams p(vocab.size(), static_cast<std::size_t>(config.feature_dim));
  pretrain_format(p, kind, config, vocab, derive_seed(config.seed, "warmup"));
  return p;
}

}  // namespace serl
