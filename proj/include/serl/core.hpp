#pragma once

// Vocabulary, tokenization, trajectory data model, history construction and
// the run configuration shared by every other module.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace serl {

using TokenId = std::uint32_t;
using TokenList = std::vector<TokenId>;

// Special markers occupy ids 0..9 in exactly this order.
enum class Marker : TokenId {
  ObsBegin = 0,
  ObsEnd,
  ActBegin,
  ActEnd,
  FbBegin,
  FbEnd,
  HindBegin,
  HindEnd,
  Think,
  Unk,
};

inline constexpr std::size_t kNumMarkers = 10;

inline constexpr std::array<std::string_view, kNumMarkers> kMarkerNames = {
    "<obs>", "</obs>", "<act>", "</act>", "<fb>", "</fb>", "<hind>", "</hind>", "<think>", "<unk>"};

constexpr TokenId tok(Marker m) { return static_cast<TokenId>(m); }

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // `words` excludes the markers; they are prepended automatically.
  explicit Vocabulary(const std::vector<std::string>& words) {
    words_.reserve(kNumMarkers + words.size());
    for (auto name : kMarkerNames) add(std::string(name));
    for (const auto& w : words) add(w);
  }

  std::size_t size() const { return words_.size(); }

  TokenId lookup(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? tok(Marker::Unk) : it->second;
  }

  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

  const std::string& word(TokenId id) const {
    if (id >= words_.size()) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(words_.size()));
    }
    return words_[id];
  }

  const std::vector<std::string>& words() const { return words_; }

  // One word per line, line number = id.
  std::string dump() const {
    std::string out;
    for (const auto& w : words_) {
      out += w;
      out += '\n';
    }
    return out;
  }

  static Vocabulary parse(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
      auto nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      lines.emplace_back(text.substr(pos, nl - pos));
      pos = nl + 1;
    }
    if (lines.size() < kNumMarkers) throw std::runtime_error("vocabulary dump shorter than marker block");
    for (std::size_t i = 0; i < kNumMarkers; ++i) {
      if (lines[i] != kMarkerNames[i]) throw std::runtime_error("vocabulary dump has bad marker at line " + std::to_string(i));
    }
    return Vocabulary(std::vector<std::string>(lines.begin() + kNumMarkers, lines.end()));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  void add(std::string w) {
    if (w.empty()) throw std::invalid_argument("empty vocabulary word");
    if (!index_.emplace(w, static_cast<TokenId>(words_.size())).second) {
      throw std::invalid_argument("duplicate vocabulary word: " + w);
    }
    words_.push_back(std::move(w));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

inline bool is_word_separator(char c) {
  switch (c) {
    case ' ': case '\t': case '\n': case '\r': case '\f': case '\v':
    case '[': case ']': case '(': case ')': case '{': case '}':
      return true;
    default:
      return false;
  }
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_word_separator(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_word_separator(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline TokenList tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenList out;
  for (const auto& w : split_words(text)) out.push_back(vocab.lookup(w));
  return out;
}

inline std::string detokenize(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += vocab.word(tokens[i]);
  }
  return out;
}

// True exactly for tokens strictly between the first ActBegin and the next ActEnd.
inline std::vector<bool> action_mask_for(std::span<const TokenId> action) {
  std::vector<bool> mask(action.size(), false);
  auto begin = std::find(action.begin(), action.end(), tok(Marker::ActBegin));
  if (begin == action.end()) return mask;
  for (auto it = begin + 1; it != action.end() && *it != tok(Marker::ActEnd); ++it) {
    mask[static_cast<std::size_t>(it - action.begin())] = true;
  }
  return mask;
}

// Command tokens (the masked span) of a response.
inline TokenList command_tokens(std::span<const TokenId> action) {
  TokenList out;
  auto mask = action_mask_for(action);
  for (std::size_t i = 0; i < action.size(); ++i) {
    if (mask[i]) out.push_back(action[i]);
  }
  return out;
}

struct Step {
  TokenList observation;
  TokenList action;
  TokenList feedback;
  std::vector<double> sampled_logprobs;
  std::vector<bool> action_mask;
  // Canonical key of the environment state before acting (anchor grouping).
  std::string state_key;

  void validate() const {
    if (sampled_logprobs.size() != action.size() || action_mask.size() != action.size()) {
      throw std::invalid_argument("step: logprob/mask length differs from action length");
    }
    for (double lp : sampled_logprobs) {
      if (!(lp <= 0.0) || !std::isfinite(lp)) throw std::invalid_argument("step: sampled logprob must be finite and <= 0");
    }
    if (action_mask != action_mask_for(action)) throw std::invalid_argument("step: action mask does not match the ACT span");
  }
};

struct Trajectory {
  std::string task_id;
  std::vector<Step> steps;
  double outcome_reward = 0.0;
  bool success = false;

  std::size_t turn_count() const { return steps.size(); }
};

struct RolloutGroup {
  std::string task_id;
  std::vector<Trajectory> trajectories;

  std::size_t size() const { return trajectories.size(); }

  void validate() const {
    if (trajectories.size() < 2) throw std::invalid_argument("rollout group needs at least 2 trajectories");
    for (const auto& t : trajectories) {
      if (t.task_id != task_id) throw std::invalid_argument("rollout group mixes task ids");
    }
  }
};

enum class FeedbackSource { Immediate = 0, NextObservation, FutureTrajectory, SuccessfulTrajectory, CurrentTrajectory };

inline constexpr std::array<FeedbackSource, 5> kAllSources = {
    FeedbackSource::Immediate, FeedbackSource::NextObservation, FeedbackSource::FutureTrajectory,
    FeedbackSource::SuccessfulTrajectory, FeedbackSource::CurrentTrajectory};

inline std::string_view source_name(FeedbackSource s) {
  switch (s) {
    case FeedbackSource::Immediate: return "immediate";
    case FeedbackSource::NextObservation: return "next_obs";
    case FeedbackSource::FutureTrajectory: return "future";
    case FeedbackSource::SuccessfulTrajectory: return "success";
    case FeedbackSource::CurrentTrajectory: return "current";
  }
  throw std::invalid_argument("bad feedback source");
}

inline FeedbackSource parse_source(std::string_view name) {
  for (auto s : kAllSources) {
    if (source_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown feedback source '" + std::string(name) + "'");
}

// Ordered by the fixed enumeration order regardless of insertion order.
using SourceSet = std::set<FeedbackSource>;

inline SourceSet parse_sources(std::string_view csv) {
  SourceSet out;
  for (std::size_t pos = 0; pos <= csv.size();) {
    auto comma = csv.find(',', pos);
    if (comma == std::string_view::npos) comma = csv.size();
    auto item = csv.substr(pos, comma - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.insert(parse_source(item));
    pos = comma + 1;
  }
  return out;
}

inline std::string format_sources(const SourceSet& sources) {
  std::string out;
  for (auto s : sources) {
    if (!out.empty()) out += ',';
    out += source_name(s);
  }
  return out;
}

enum class PlacementMode { Step, Anchor };

inline std::string_view placement_name(PlacementMode m) { return m == PlacementMode::Step ? "step" : "anchor"; }

inline PlacementMode parse_placement(std::string_view s) {
  if (s == "step") return PlacementMode::Step;
  if (s == "anchor") return PlacementMode::Anchor;
  throw std::invalid_argument("unknown placement mode '" + std::string(s) + "'");
}

// Exp: w in [e^-c, e^+c].  Linear: w in [1-c, 1+c].
enum class WeightClipMode { Exp, Linear };

struct Schedule {
  double init_value = 0.5;
  int decay_steps = 50;

  double value(long k) const {
    if (k < 0) throw std::invalid_argument("schedule step must be non-negative");
    double frac = 1.0 - static_cast<double>(k) / static_cast<double>(decay_steps);
    return init_value * std::max(0.0, frac);
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

struct TrainConfig {
  int group_size = 8;
  double learning_rate = 0.05;
  double rollout_temperature = 0.4;
  // 0 selects the environment default (50 KeyDoorGrid, 15 MiniShop).
  int max_turns = 0;
  double clip_eps = 0.2;
  double adv_eps = 1e-8;
  double weight_clip = 0.2;
  WeightClipMode weight_clip_mode = WeightClipMode::Exp;
  Schedule alpha_schedule{0.5, 50};
  Schedule lambda_schedule{0.5, 50};
  int teacher_sync_interval = 10;
  SourceSet feedback_sources{FeedbackSource::Immediate};
  PlacementMode placement_mode = PlacementMode::Step;
  int context_cap = 256;
  int hindsight_cap = 64;
  std::uint64_t seed = 0;
  int total_steps = 150;
  int feature_dim = 1024;
  // Supervised warm start before RL; see pretrain_format.
  int warmup_steps = 120;
  double warmup_learning_rate = 2.0;
  double warmup_demo_rate = 0.2;

  double w_min() const { return weight_clip_mode == WeightClipMode::Exp ? std::exp(-weight_clip) : 1.0 - weight_clip; }
  double w_max() const { return weight_clip_mode == WeightClipMode::Exp ? std::exp(weight_clip) : 1.0 + weight_clip; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  bool serl_active() const { return alpha_schedule.init_value > 0.0 || lambda_schedule.init_value > 0.0; }

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw std::invalid_argument(key + ": " + why);
    };
    if (group_size < 2) fail("group_size", "must be >= 2");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate", "must be finite and >= 0");
    if (!(rollout_temperature > 0.0) || !std::isfinite(rollout_temperature)) fail("rollout_temperature", "must be > 0");
    if (max_turns < 0) fail("max_turns", "must be >= 0");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) fail("clip_eps", "must lie in (0, 1)");
    if (!(adv_eps > 0.0)) fail("adv_eps", "must be > 0");
    if (!(weight_clip > 0.0) || !std::isfinite(weight_clip)) fail("weight_clip", "must be > 0");
    if (weight_clip_mode == WeightClipMode::Linear && weight_clip >= 1.0) fail("weight_clip", "must be < 1 in linear mode");
    auto check_schedule = [&](const Schedule& s, const std::string& name) {
      if (!(s.init_value >= 0.0 && s.init_value <= 1.0)) fail(name + "_init", "must lie in [0, 1]");
      if (s.decay_steps <= 0) fail(name + "_decay_steps", "must be > 0");
    };
    check_schedule(alpha_schedule, "alpha");
    check_schedule(lambda_schedule, "lambda");
    if (teacher_sync_interval < 1) fail("teacher_sync_interval", "must be >= 1");
    if (serl_active() && feedback_sources.empty()) fail("feedback_sources", "must be non-empty when reweighting is active");
    if (context_cap < 1) fail("context_cap", "must be >= 1");
    if (hindsight_cap < 2) fail("hindsight_cap", "must be >= 2");
    if (total_steps < 0) fail("total_steps", "must be >= 0");
    if (feature_dim < 2) fail("feature_dim", "must be >= 2");
    if (warmup_steps < 0) fail("warmup_steps", "must be >= 0");
    if (!(warmup_learning_rate >= 0.0) || !std::isfinite(warmup_learning_rate)) fail("warmup_learning_rate", "must be finite and >= 0");
    if (!(warmup_demo_rate >= 0.0 && warmup_demo_rate <= 1.0)) fail("warmup_demo_rate", "must be in [0,1]");
  }
};

// h_t without truncation: OBS s_0 /OBS a_0 FB r_0 /FB ... OBS s_t /OBS.
inline TokenList full_history(const Trajectory& traj, std::size_t t) {
  if (t >= traj.steps.size()) throw std::out_of_range("history step index out of range");
  TokenList out;
  for (std::size_t j = 0; j <= t; ++j) {
    const Step& s = traj.steps[j];
    out.push_back(tok(Marker::ObsBegin));
    out.insert(out.end(), s.observation.begin(), s.observation.end());
    out.push_back(tok(Marker::ObsEnd));
    if (j == t) break;
    out.insert(out.end(), s.action.begin(), s.action.end());
    out.push_back(tok(Marker::FbBegin));
    out.insert(out.end(), s.feedback.begin(), s.feedback.end());
    out.push_back(tok(Marker::FbEnd));
  }
  return out;
}

// Most recent `cap` tokens of history ++ prefix.
inline TokenList recent_context(std::span<const TokenId> history, std::span<const TokenId> prefix, std::size_t cap) {
  std::size_t total = history.size() + prefix.size();
  std::size_t skip = total > cap ? total - cap : 0;
  TokenList out;
  out.reserve(total - skip);
  if (skip < history.size()) {
    out.insert(out.end(), history.begin() + static_cast<std::ptrdiff_t>(skip), history.end());
    out.insert(out.end(), prefix.begin(), prefix.end());
  } else {
    out.insert(out.end(), prefix.begin() + static_cast<std::ptrdiff_t>(skip - history.size()), prefix.end());
  }
  return out;
}

// h_t ++ y_{t,<prefix_len}, truncated to the most recent context_cap tokens.
inline TokenList build_history(const Trajectory& traj, std::size_t t, std::size_t prefix_len, const TrainConfig& config) {
  if (t >= traj.steps.size()) throw std::out_of_range("build_history: step index out of range");
  const auto& action = traj.steps[t].action;
  if (prefix_len > action.size()) throw std::out_of_range("build_history: prefix longer than action");
  TokenList h = full_history(traj, t);
  return recent_context(h, std::span<const TokenId>(action.data(), prefix_len), static_cast<std::size_t>(config.context_cap));
}

}  // namespace serl
