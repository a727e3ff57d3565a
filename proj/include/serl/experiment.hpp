#pragma once

// Experiment orchestration behind the command-line tool: training runs with
// their on-disk artifacts, checkpoint evaluation, GRPO-vs-SERL comparison and
// trajectory pretty-printing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "serl/config.hpp"
#include "serl/trainer.hpp"

namespace serl {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr int kCheckpointEvery = 25;

inline Json to_json(const MetricsRecord& m) {
  return Json{{"step", m.step},
              {"mean_reward", m.mean_reward},
              {"success_rate", m.success_rate},
              {"alpha", m.alpha},
              {"lambda", m.lambda},
              {"l_rw", m.l_rw},
              {"l_act", m.l_act},
              {"l_total", m.l_total},
              {"kl_mean", m.kl_mean},
              {"delta_mean_abs", m.delta_mean_abs},
              {"frac_w_clipped", m.frac_w_clipped},
              {"grad_norm", m.grad_norm},
              {"entropy_mean", m.entropy_mean},
              {"seed", m.seed}};
}

inline MetricsRecord metrics_from_json(const Json& j) {
  MetricsRecord m;
  m.step = j.at("step").get<long>();
  m.mean_reward = j.at("mean_reward").get<double>();
  m.success_rate = j.at("success_rate").get<double>();
  m.alpha = j.at("alpha").get<double>();
  m.lambda = j.at("lambda").get<double>();
  m.l_rw = j.at("l_rw").get<double>();
  m.l_act = j.at("l_act").get<double>();
  m.l_total = j.at("l_total").get<double>();
  m.kl_mean = j.at("kl_mean").get<double>();
  m.delta_mean_abs = j.at("delta_mean_abs").get<double>();
  m.frac_w_clipped = j.at("frac_w_clipped").get<double>();
  m.grad_norm = j.at("grad_norm").get<double>();
  m.entropy_mean = j.at("entropy_mean").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

// Core fields follow the trajectory dump format; step, rollout and state_key
// are extras used by inspect.
inline Json trajectory_json(const Trajectory& tr, long step, std::size_t rollout, const Vocabulary& vocab) {
  Json steps = Json::array();
  for (const auto& s : tr.steps) {
    std::vector<int> mask(s.action_mask.begin(), s.action_mask.end());
    steps.push_back(Json{{"obs", detokenize(s.observation, vocab)},
                         {"act", detokenize(s.action, vocab)},
                         {"fb", detokenize(s.feedback, vocab)},
                         {"mask", mask},
                         {"logp", s.sampled_logprobs},
                         {"state_key", s.state_key}});
  }
  return Json{{"task_id", tr.task_id},
              {"steps", steps},
              {"reward", tr.outcome_reward},
              {"success", tr.success},
              {"step", step},
              {"rollout", rollout}};
}

inline Json task_json(const TaskSpec& t) {
  return Json{{"task_id", t.task_id}, {"kind", env_name(t.kind)}, {"seed", t.seed}, {"goal", t.goal_text}, {"size", t.size}};
}

inline fs::path checkpoint_path(const fs::path& dir, long k) { return dir / ("ckpt_" + std::to_string(k) + ".txt"); }

// The teacher snapshot lives next to its checkpoint so a resumed run scores
// hindsight with the same teacher the uninterrupted run would have used.
inline fs::path teacher_path(const fs::path& ckpt) {
  auto p = ckpt;
  p.replace_extension(".teacher.txt");
  return p;
}

inline void save_state(const fs::path& dir, const TrainState& state, const Vocabulary& vocab) {
  {
    std::ofstream f(checkpoint_path(dir, state.step));
    write_checkpoint(f, state.params, state.step, vocab);
  }
  std::ofstream t(teacher_path(checkpoint_path(dir, state.step)));
  write_checkpoint(t, state.teacher.params(), state.teacher.step(), vocab);
}

inline Checkpoint load_checkpoint_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read checkpoint '" + path.string() + "'");
  return read_checkpoint(f);
}

struct EvalRecord {
  long step = 0;
  EvalResult result;
};

struct TrainOutcome {
  std::vector<MetricsRecord> metrics;
  std::vector<EvalRecord> evals;
  EvalResult final_eval;
  long final_step = 0;
};

inline Json eval_json(const EvalRecord& e) {
  return Json{{"step", e.step},
              {"success_rate", e.result.success_rate},
              {"mean_reward", e.result.mean_reward},
              {"episodes", e.result.episodes}};
}

// Keeps the JSON lines whose "step" is below `step`; used when resuming.
inline void truncate_jsonl(const fs::path& path, long step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (Json::parse(line).at("step").get<long>() < step) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

struct TrainOptions {
  std::optional<fs::path> resume;
  // Skips the warm start when the caller already has the initial parameters.
  std::optional<PolicyParams> initial;
  bool quiet = false;
};

inline TrainOutcome run_training(const RunSettings& settings, const TrainOptions& opts = {}) {
  validate_settings(settings);
  const TrainConfig& config = settings.train;
  const fs::path dir = settings.out_dir;
  fs::create_directories(dir);
  const Vocabulary vocab = make_vocabulary(settings.env);

  std::optional<TrainState> state;
  if (opts.resume) {
    auto ck = load_checkpoint_file(*opts.resume);
    auto teacher = load_checkpoint_file(teacher_path(*opts.resume));
    if (!(ck.vocab == vocab)) throw std::runtime_error("resume: checkpoint vocabulary does not match --env");
    state.emplace(std::move(ck.params), config.seed, ck.step);
    state->teacher = TeacherSnapshot(std::move(teacher.params), teacher.step);
    truncate_jsonl(dir / "metrics.jsonl", state->step);
    truncate_jsonl(dir / "eval.jsonl", state->step + 1);
    truncate_jsonl(dir / "trajectories.jsonl", state->step);
    truncate_jsonl(dir / "tasks.jsonl", state->step);
  } else {
    PolicyParams p = opts.initial ? *opts.initial : initial_params(settings.env, config, vocab);
    state.emplace(std::move(p), config.seed, 0);
    std::ofstream(dir / "metrics.jsonl", std::ios::trunc);
    std::ofstream(dir / "eval.jsonl", std::ios::trunc);
    std::ofstream(dir / "trajectories.jsonl", std::ios::trunc);
    std::ofstream(dir / "tasks.jsonl", std::ios::trunc);
  }
  if (state->params.vocab_size() != vocab.size() ||
      state->params.feature_dim() != static_cast<std::size_t>(config.feature_dim)) {
    throw std::runtime_error("parameter shape does not match the configuration");
  }

  std::ofstream metrics_out(dir / "metrics.jsonl", std::ios::app);
  std::ofstream eval_out(dir / "eval.jsonl", std::ios::app);
  std::ofstream traj_out(dir / "trajectories.jsonl", std::ios::app);
  std::ofstream tasks_out(dir / "tasks.jsonl", std::ios::app);

  const auto eval_tasks = heldout_tasks(settings.env, settings.eval_tasks);
  const auto t0 = std::chrono::steady_clock::now();
  TrainOutcome outcome;
  auto run_eval = [&](long step) {
    EvalRecord rec{step, evaluate(state->params, eval_tasks, 1, config, vocab)};
    eval_out << eval_json(rec).dump() << '\n';
    outcome.evals.push_back(rec);
    if (!opts.quiet) {
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "[%s seed %llu] step %ld eval success %.3f reward %.3f (%.1fs)\n", settings.out_dir.c_str(),
                   static_cast<unsigned long long>(config.seed), step, rec.result.success_rate, rec.result.mean_reward, secs);
    }
    return rec.result.success_rate;
  };

  while (state->step < config.total_steps) {
    const long k = state->step;
    auto tasks = generate_tasks(settings.env, settings.tasks_per_step, step_task_seed(config.seed, k));
    for (const auto& t : tasks) {
      Json j{{"step", k}};
      j.update(task_json(t));
      tasks_out << j.dump() << '\n';
    }
    std::vector<RolloutGroup> groups;
    MetricsRecord m = train_step(*state, tasks, config, vocab, &groups);
    metrics_out << to_json(m).dump() << '\n';
    outcome.metrics.push_back(m);
    const bool last = state->step == config.total_steps;
    if (state->step % kCheckpointEvery == 0 || last) {
      for (const auto& g : groups) {
        for (std::size_t n = 0; n < g.trajectories.size(); ++n) {
          traj_out << trajectory_json(g.trajectories[n], k, n, vocab).dump() << '\n';
        }
      }
    }
    bool stop = false;
    if (settings.eval_every > 0 && state->step % settings.eval_every == 0) {
      stop = settings.stop_success_rate > 0.0 && run_eval(state->step) >= settings.stop_success_rate;
    }
    if (state->step % kCheckpointEvery == 0 || last || stop) save_state(dir, *state, vocab);
    if (stop) break;
  }
  metrics_out.flush();

  outcome.final_step = state->step;
  if (outcome.evals.empty() || outcome.evals.back().step != state->step) run_eval(state->step);
  outcome.final_eval = outcome.evals.back().result;
  if (state->step == 0) save_state(dir, *state, vocab);
  return outcome;
}

inline int steps_to_threshold(const std::vector<EvalRecord>& evals, double threshold, long* out) {
  for (const auto& e : evals) {
    if (e.result.success_rate >= threshold) {
      *out = e.step;
      return 1;
    }
  }
  return 0;
}

// Median with unreached runs counted as +infinity; nullopt if the median
// itself is unreached.
inline std::optional<double> median_steps(std::vector<double> steps) {
  if (steps.empty()) return std::nullopt;
  std::sort(steps.begin(), steps.end());
  const std::size_t n = steps.size();
  double med = n % 2 ? steps[n / 2] : 0.5 * (steps[n / 2 - 1] + steps[n / 2]);
  if (!std::isfinite(med)) return std::nullopt;
  return med;
}

struct CompareArm {
  std::string algo;
  std::vector<double> steps_to_threshold;  // +inf when not reached
  std::vector<double> final_success;
};

struct CompareResult {
  double threshold = 0.8;
  std::vector<std::uint64_t> seeds;
  CompareArm grpo{"grpo", {}, {}};
  CompareArm serl{"serl", {}, {}};
};

inline RunSettings as_grpo(RunSettings s) {
  s.train.alpha_schedule.init_value = 0.0;
  s.train.lambda_schedule.init_value = 0.0;
  return s;
}

inline Json arm_summary(const CompareArm& arm) {
  Json per_seed = Json::array();
  for (double v : arm.steps_to_threshold) per_seed.push_back(std::isfinite(v) ? Json(v) : Json(nullptr));
  auto med = median_steps(arm.steps_to_threshold);
  std::size_t reached = 0;
  for (double v : arm.steps_to_threshold) reached += std::isfinite(v) ? 1 : 0;
  return Json{{"median_steps_to_threshold", med ? Json(*med) : Json(nullptr)},
              {"reached", reached},
              {"runs", arm.steps_to_threshold.size()},
              {"steps_to_threshold", per_seed},
              {"final_success_rate", arm.final_success}};
}

// Both arms of a seed share the warm start and see the same task sequence;
// they differ only in the alpha/lambda schedules.
inline CompareResult run_compare(const RunSettings& base, const std::vector<std::uint64_t>& seeds, double threshold = 0.8) {
  if (seeds.empty()) throw std::invalid_argument("compare: at least one seed required");
  validate_settings(base);
  const fs::path root = base.out_dir;
  fs::create_directories(root);
  CompareResult result;
  result.threshold = threshold;
  result.seeds = seeds;
  std::ofstream csv(root / "compare.csv", std::ios::trunc);
  csv << "seed,algo,step,mean_reward,success_rate\n";
  const Vocabulary vocab = make_vocabulary(base.env);
  for (auto seed : seeds) {
    RunSettings s = base;
    s.train.seed = seed;
    TrainOptions opts;
    opts.initial = initial_params(s.env, s.train, vocab);
    for (CompareArm* arm : {&result.grpo, &result.serl}) {
      RunSettings run = arm == &result.grpo ? as_grpo(s) : s;
      run.out_dir = (root / (arm->algo + "_seed" + std::to_string(seed))).string();
      auto out = run_training(run, opts);
      for (const auto& m : out.metrics) {
        char buf[128];
        std::snprintf(buf, sizeof buf, ",%ld,%.17g,%.17g\n", m.step, m.mean_reward, m.success_rate);
        csv << seed << ',' << arm->algo << buf;
      }
      long k = 0;
      arm->steps_to_threshold.push_back(steps_to_threshold(out.evals, threshold, &k) ? static_cast<double>(k)
                                                                                     : std::numeric_limits<double>::infinity());
      arm->final_success.push_back(out.final_eval.success_rate);
    }
  }
  Json summary{{"threshold", threshold}, {"seeds", seeds}, {"grpo", arm_summary(result.grpo)}, {"serl", arm_summary(result.serl)}};
  std::ofstream(root / "compare_summary.json") << summary.dump(2) << '\n';
  return result;
}

// One greedy episode per held-out task.
inline EvalResult run_checkpoint_eval(const fs::path& checkpoint, EnvKind env, int episodes, const TrainConfig& config = {}) {
  if (episodes < 1) throw std::invalid_argument("episodes must be >= 1");
  auto ck = load_checkpoint_file(checkpoint);
  if (!(ck.vocab == make_vocabulary(env))) throw std::runtime_error("checkpoint vocabulary does not match --env");
  TrainConfig c = config;
  c.feature_dim = static_cast<int>(ck.params.feature_dim());
  return evaluate(ck.params, heldout_tasks(env, episodes), 1, c, ck.vocab);
}

// Distils the brute-force solver into a policy by supervised training on its
// actions alone. Only KeyDoorGrid is supported: its decision-relevant hint fits
// in the featurizer window, MiniShop's instruction does not.
inline PolicyParams oracle_policy(EnvKind env, TrainConfig config) {
  if (env != EnvKind::KeyDoor) throw std::invalid_argument("oracle policy is only available for keydoor");
  config.warmup_demo_rate = 1.0;
  config.warmup_steps = 300;
  const Vocabulary vocab = make_vocabulary(env);
  PolicyParams p(vocab.size(), static_cast<std::size_t>(config.feature_dim));
  pretrain_format(p, env, config, vocab, derive_seed(config.seed, "oracle"));
  return p;
}

inline void print_trajectories(std::istream& in, std::ostream& out) {
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw std::runtime_error("trajectories line " + std::to_string(line_no) + ": " + e.what());
    }
    out << "== task " << j.at("task_id").get<std::string>();
    if (j.contains("step")) out << "  step " << j["step"].get<long>() << "  rollout " << j.at("rollout").get<long>();
    out << "  reward " << j.at("reward").get<double>() << (j.at("success").get<bool>() ? "  (success)" : "") << '\n';
    int t = 0;
    for (const auto& s : j.at("steps")) {
      out << "  [" << t++ << "]";
      if (s.contains("state_key")) out << ' ' << s["state_key"].get<std::string>();
      out << "\n      obs: " << s.at("obs").get<std::string>() << '\n';
      out << "      act: " << s.at("act").get<std::string>() << '\n';
      out << "      fb:  " << s.at("fb").get<std::string>() << '\n';
    }
  }
}

}  // namespace serl
