#pragma once

// Feedback sources and the step/anchor placement operators that decide which
// hindsight block the teacher sees at every (trajectory, step).

#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "serl/core.hpp"

namespace serl {

namespace detail {

inline void check_index(const RolloutGroup& group, std::size_t n, std::size_t t) {
  if (n >= group.trajectories.size()) throw std::out_of_range("feedback: trajectory index out of range");
  if (t >= group.trajectories[n].steps.size()) throw std::out_of_range("feedback: step index out of range");
}

// OBS s /OBS a
inline TokenList serialize_pair(const Step& s) {
  TokenList out;
  out.push_back(tok(Marker::ObsBegin));
  out.insert(out.end(), s.observation.begin(), s.observation.end());
  out.push_back(tok(Marker::ObsEnd));
  out.insert(out.end(), s.action.begin(), s.action.end());
  return out;
}

inline TokenList serialize_command(const Step& s) {
  TokenList out{tok(Marker::ActBegin)};
  auto cmd = command_tokens(s.action);
  out.insert(out.end(), cmd.begin(), cmd.end());
  out.push_back(tok(Marker::ActEnd));
  return out;
}

inline TokenList head(const TokenList& t, std::size_t budget) {
  return TokenList(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(std::min(budget, t.size())));
}

}  // namespace detail

// Lowest-index trajectory that succeeded with the group's maximal reward.
inline std::optional<std::size_t> success_reference(const RolloutGroup& group) {
  double best = -1.0;
  for (const auto& t : group.trajectories) best = std::max(best, t.outcome_reward);
  for (std::size_t n = 0; n < group.trajectories.size(); ++n) {
    const auto& t = group.trajectories[n];
    if (t.success && t.outcome_reward == best) return n;
  }
  return std::nullopt;
}

// Raw hindsight tokens of one source at (n, t), at most `budget` tokens.
// Multi-step sources keep whole serialized steps.
inline TokenList extract_feedback(FeedbackSource source, const RolloutGroup& group, std::size_t n, std::size_t t,
                                  std::size_t budget = std::numeric_limits<std::size_t>::max()) {
  detail::check_index(group, n, t);
  const auto& steps = group.trajectories[n].steps;
  TokenList out;
  auto append_whole = [&](const TokenList& unit) {
    if (out.size() + unit.size() > budget) return false;
    out.insert(out.end(), unit.begin(), unit.end());
    return true;
  };
  switch (source) {
    case FeedbackSource::Immediate:
      return detail::head(steps[t].feedback, budget);
    case FeedbackSource::NextObservation:
      if (t + 1 >= steps.size()) return {};
      return detail::head(steps[t + 1].observation, budget);
    case FeedbackSource::FutureTrajectory:
      // Nearest future steps first; stop at the first pair that does not fit.
      for (std::size_t j = t + 1; j < steps.size(); ++j) {
        if (!append_whole(detail::serialize_pair(steps[j]))) break;
      }
      return out;
    case FeedbackSource::SuccessfulTrajectory: {
      auto ref = success_reference(group);
      if (!ref) return {};
      for (const auto& s : group.trajectories[*ref].steps) {
        if (!append_whole(detail::serialize_pair(s))) break;
      }
      return out;
    }
    case FeedbackSource::CurrentTrajectory: {
      // Most recent commands survive the budget; output stays in temporal order.
      std::vector<TokenList> kept;
      std::size_t used = 0;
      for (std::size_t j = t + 1; j-- > 0;) {
        auto cmd = detail::serialize_command(steps[j]);
        if (used + cmd.size() > budget) break;
        used += cmd.size();
        kept.push_back(std::move(cmd));
      }
      for (auto it = kept.rbegin(); it != kept.rend(); ++it) out.insert(out.end(), it->begin(), it->end());
      return out;
    }
  }
  throw std::invalid_argument("extract_feedback: bad source");
}

// FB-delimited concatenation of the non-empty blocks, truncated to `cap`
// tokens; the first block that does not fit and every later one are dropped.
inline TokenList combine_sources(std::span<const TokenList> blocks, std::size_t cap) {
  TokenList out;
  for (const auto& b : blocks) {
    if (b.empty()) continue;
    if (out.size() + b.size() + 2 > cap) break;
    out.push_back(tok(Marker::FbBegin));
    out.insert(out.end(), b.begin(), b.end());
    out.push_back(tok(Marker::FbEnd));
  }
  return out;
}

inline TokenList step_feedback(const SourceSet& sources, const RolloutGroup& group, std::size_t n, std::size_t t,
                               std::size_t cap) {
  std::vector<TokenList> blocks;
  const std::size_t budget = cap >= 2 ? cap - 2 : 0;
  for (auto s : sources) blocks.push_back(extract_feedback(s, group, n, t, budget));
  return combine_sources(blocks, cap);
}

struct StepRef {
  std::size_t n = 0;
  std::size_t t = 0;
  friend bool operator==(const StepRef&, const StepRef&) = default;
  friend auto operator<=>(const StepRef&, const StepRef&) = default;
};

struct Anchor {
  int anchor_id = 0;
  std::vector<StepRef> members;
  TokenList aggregated_feedback;
};

// Maps a state key to the anchor key; identity means exact-state anchors.
using SimilarityKey = std::function<std::string(const std::string&)>;

// raw_feedback[n][t] is the hindsight block of each transition.
inline std::vector<Anchor> build_anchors(const RolloutGroup& group, const std::vector<std::vector<TokenList>>& raw_feedback,
                                         std::size_t cap, const SimilarityKey& similarity = {}) {
  if (raw_feedback.size() != group.trajectories.size()) throw std::invalid_argument("build_anchors: feedback shape mismatch");
  std::vector<Anchor> anchors;
  std::map<std::string, std::size_t> by_key;
  for (std::size_t n = 0; n < group.trajectories.size(); ++n) {
    const auto& steps = group.trajectories[n].steps;
    if (raw_feedback[n].size() != steps.size()) throw std::invalid_argument("build_anchors: feedback shape mismatch");
    for (std::size_t t = 0; t < steps.size(); ++t) {
      std::string key = similarity ? similarity(steps[t].state_key) : steps[t].state_key;
      auto [it, inserted] = by_key.emplace(key, anchors.size());
      if (inserted) anchors.push_back(Anchor{static_cast<int>(anchors.size()), {}, {}});
      anchors[it->second].members.push_back({n, t});
    }
  }
  for (auto& a : anchors) {
    std::vector<const TokenList*> seen;
    for (const auto& m : a.members) {
      const TokenList& block = raw_feedback[m.n][m.t];
      if (block.empty()) continue;
      bool dup = false;
      for (const auto* s : seen) dup = dup || *s == block;
      if (dup) continue;
      seen.push_back(&block);
      if (a.aggregated_feedback.size() + block.size() > cap) break;
      a.aggregated_feedback.insert(a.aggregated_feedback.end(), block.begin(), block.end());
    }
  }
  return anchors;
}

struct PlacementPlan {
  PlacementMode mode = PlacementMode::Step;
  // phi[n][t]
  std::vector<std::vector<TokenList>> phi;

  const TokenList& at(std::size_t n, std::size_t t) const { return phi.at(n).at(t); }

  friend bool operator==(const PlacementPlan&, const PlacementPlan&) = default;
};

inline PlacementPlan place(PlacementMode mode, const SourceSet& sources, const RolloutGroup& group, std::size_t cap,
                           const SimilarityKey& similarity = {}) {
  PlacementPlan plan;
  plan.mode = mode;
  plan.phi.resize(group.trajectories.size());
  for (std::size_t n = 0; n < group.trajectories.size(); ++n) {
    for (std::size_t t = 0; t < group.trajectories[n].steps.size(); ++t) {
      plan.phi[n].push_back(step_feedback(sources, group, n, t, cap));
    }
  }
  if (mode == PlacementMode::Step) return plan;
  for (const auto& a : build_anchors(group, plan.phi, cap, similarity)) {
    for (const auto& m : a.members) plan.phi[m.n][m.t] = a.aggregated_feedback;
  }
  return plan;
}

}  // namespace serl
