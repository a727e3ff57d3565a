#pragma once

// Flat "key = value" run configuration with '#' comments.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "serl/core.hpp"
#include "serl/envs.hpp"

namespace serl {

struct RunSettings {
  TrainConfig train;
  EnvKind env = EnvKind::KeyDoor;
  std::string out_dir = "runs/default";
  int tasks_per_step = 8;
  int eval_tasks = 50;
  // 0 disables periodic evaluation.
  int eval_every = 10;
  // Stop once greedy eval success reaches this value; 0 runs all steps.
  double stop_success_rate = 0.0;

  friend bool operator==(const RunSettings&, const RunSettings&) = default;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, int line, const std::string& why)
      : std::runtime_error(format(key, line, why)), key_(std::move(key)), line_(line) {}

  const std::string& key() const { return key_; }
  int line() const { return line_; }

 private:
  static std::string format(const std::string& key, int line, const std::string& why) {
    std::string out = "config";
    if (line > 0) out += " line " + std::to_string(line);
    if (!key.empty()) out += ", key '" + key + "'";
    return out + ": " + why;
  }

  std::string key_;
  int line_;
};

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& text) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) throw std::invalid_argument("malformed value '" + text + "'");
  return v;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct KeyHandler {
  std::function<void(RunSettings&, const std::string&)> set;
  std::function<std::string(const RunSettings&)> get;
};

inline const std::vector<std::pair<std::string, KeyHandler>>& config_keys() {
  using R = RunSettings;
  auto int_key = [](int TrainConfig::*m) {
    return KeyHandler{[m](R& r, const std::string& v) { r.train.*m = parse_number<int>(v); },
                      [m](const R& r) { return std::to_string(r.train.*m); }};
  };
  auto dbl_key = [](double TrainConfig::*m) {
    return KeyHandler{[m](R& r, const std::string& v) { r.train.*m = parse_number<double>(v); },
                      [m](const R& r) { return format_double(r.train.*m); }};
  };
  auto sched_init = [](Schedule TrainConfig::*m) {
    return KeyHandler{[m](R& r, const std::string& v) { (r.train.*m).init_value = parse_number<double>(v); },
                      [m](const R& r) { return format_double((r.train.*m).init_value); }};
  };
  auto sched_steps = [](Schedule TrainConfig::*m) {
    return KeyHandler{[m](R& r, const std::string& v) { (r.train.*m).decay_steps = parse_number<int>(v); },
                      [m](const R& r) { return std::to_string((r.train.*m).decay_steps); }};
  };
  static const std::vector<std::pair<std::string, KeyHandler>> keys = {
      {"group_size", int_key(&TrainConfig::group_size)},
      {"learning_rate", dbl_key(&TrainConfig::learning_rate)},
      {"rollout_temperature", dbl_key(&TrainConfig::rollout_temperature)},
      {"max_turns", int_key(&TrainConfig::max_turns)},
      {"clip_eps", dbl_key(&TrainConfig::clip_eps)},
      {"adv_eps", dbl_key(&TrainConfig::adv_eps)},
      {"weight_clip", dbl_key(&TrainConfig::weight_clip)},
      {"weight_clip_mode",
       {[](R& r, const std::string& v) {
          if (v == "exp") r.train.weight_clip_mode = WeightClipMode::Exp;
          else if (v == "linear") r.train.weight_clip_mode = WeightClipMode::Linear;
          else throw std::invalid_argument("expected exp or linear, got '" + v + "'");
        },
        [](const R& r) { return std::string(r.train.weight_clip_mode == WeightClipMode::Exp ? "exp" : "linear"); }}},
      {"alpha_init", sched_init(&TrainConfig::alpha_schedule)},
      {"alpha_decay_steps", sched_steps(&TrainConfig::alpha_schedule)},
      {"lambda_init", sched_init(&TrainConfig::lambda_schedule)},
      {"lambda_decay_steps", sched_steps(&TrainConfig::lambda_schedule)},
      {"teacher_sync_interval", int_key(&TrainConfig::teacher_sync_interval)},
      {"feedback_sources",
       {[](R& r, const std::string& v) { r.train.feedback_sources = parse_sources(v); },
        [](const R& r) { return format_sources(r.train.feedback_sources); }}},
      {"placement_mode",
       {[](R& r, const std::string& v) { r.train.placement_mode = parse_placement(v); },
        [](const R& r) { return std::string(placement_name(r.train.placement_mode)); }}},
      {"context_cap", int_key(&TrainConfig::context_cap)},
      {"hindsight_cap", int_key(&TrainConfig::hindsight_cap)},
      {"seed",
       {[](R& r, const std::string& v) { r.train.seed = parse_number<std::uint64_t>(v); },
        [](const R& r) { return std::to_string(r.train.seed); }}},
      {"total_steps", int_key(&TrainConfig::total_steps)},
      {"feature_dim", int_key(&TrainConfig::feature_dim)},
      {"warmup_steps", int_key(&TrainConfig::warmup_steps)},
      {"warmup_learning_rate", dbl_key(&TrainConfig::warmup_learning_rate)},
      {"warmup_demo_rate", dbl_key(&TrainConfig::warmup_demo_rate)},
      {"env",
       {[](R& r, const std::string& v) { r.env = parse_env(v); }, [](const R& r) { return std::string(env_name(r.env)); }}},
      {"out_dir", {[](R& r, const std::string& v) { r.out_dir = v; }, [](const R& r) { return r.out_dir; }}},
      {"tasks_per_step",
       {[](R& r, const std::string& v) { r.tasks_per_step = parse_number<int>(v); },
        [](const R& r) { return std::to_string(r.tasks_per_step); }}},
      {"eval_tasks",
       {[](R& r, const std::string& v) { r.eval_tasks = parse_number<int>(v); },
        [](const R& r) { return std::to_string(r.eval_tasks); }}},
      {"eval_every",
       {[](R& r, const std::string& v) { r.eval_every = parse_number<int>(v); },
        [](const R& r) { return std::to_string(r.eval_every); }}},
      {"stop_success_rate",
       {[](R& r, const std::string& v) { r.stop_success_rate = parse_number<double>(v); },
        [](const R& r) { return format_double(r.stop_success_rate); }}},
  };
  return keys;
}

inline const KeyHandler* find_key(const std::string& key) {
  for (const auto& [name, h] : config_keys()) {
    if (name == key) return &h;
  }
  return nullptr;
}

}  // namespace detail

// Range checks beyond TrainConfig::validate. `lines` maps keys to the line they
// were set on so errors can point at it.
inline void validate_settings(const RunSettings& s, const std::map<std::string, int>& lines = {}) {
  auto line_of = [&](const std::string& key) {
    auto it = lines.find(key);
    return it == lines.end() ? 0 : it->second;
  };
  try {
    s.train.validate();
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    auto colon = msg.find(':');
    std::string key = colon == std::string::npos ? std::string() : msg.substr(0, colon);
    throw ConfigError(key, line_of(key), msg.substr(colon == std::string::npos ? 0 : colon + 2));
  }
  if (s.tasks_per_step < 1) throw ConfigError("tasks_per_step", line_of("tasks_per_step"), "must be >= 1");
  if (s.eval_tasks < 1) throw ConfigError("eval_tasks", line_of("eval_tasks"), "must be >= 1");
  if (s.eval_every < 0) throw ConfigError("eval_every", line_of("eval_every"), "must be >= 0");
  if (!(s.stop_success_rate >= 0.0 && s.stop_success_rate <= 1.0)) {
    throw ConfigError("stop_success_rate", line_of("stop_success_rate"), "must be in [0,1]");
  }
  if (s.out_dir.empty()) throw ConfigError("out_dir", line_of("out_dir"), "must be non-empty");
}

inline RunSettings parse_config_text(std::string_view text) {
  RunSettings s;
  std::map<std::string, int> lines;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    auto hash = raw.find('#');
    std::string line = detail::trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("", line_no, "expected 'key = value'");
    std::string key = detail::trim(std::string_view(line).substr(0, eq));
    std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    const auto* handler = detail::find_key(key);
    if (!handler) throw ConfigError(key, line_no, "unknown key");
    if (lines.count(key)) throw ConfigError(key, line_no, "duplicate key");
    try {
      handler->set(s, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(key, line_no, e.what());
    }
    lines[key] = line_no;
  }
  validate_settings(s, lines);
  return s;
}

inline RunSettings parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("", 0, "cannot read '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

inline std::string serialize_config(const RunSettings& s) {
  std::string out;
  for (const auto& [name, h] : detail::config_keys()) out += name + " = " + h.get(s) + "\n";
  return out;
}

}  // namespace serl
