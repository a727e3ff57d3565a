#pragma once

// Group-relative advantages, the clipped surrogate, hindsight-gap reweighting,
// the action-only KL term, and the combined loss with its exact gradient.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "serl/core.hpp"
#include "serl/feedback.hpp"
#include "serl/policy.hpp"

namespace serl {

// (R - mean) / (std + eps) with the population standard deviation.
inline std::vector<double> group_advantage(std::span<const double> rewards, double adv_eps) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantage: need at least 2 rewards");
  if (!(adv_eps > 0.0)) throw std::invalid_argument("group_advantage: eps must be > 0");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / n) + adv_eps;
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mean) / denom);
  return out;
}

inline double policy_ratio(double logp_new, double logp_old) { return std::exp(logp_new - logp_old); }

inline double clip_ratio(double ratio, double eps) { return std::clamp(ratio, 1.0 - eps, 1.0 + eps); }

inline double clipped_surrogate(double ratio, double adv, double eps) {
  return std::min(ratio * adv, clip_ratio(ratio, eps) * adv);
}

// True when the min selects the unclipped term, i.e. the ratio carries gradient.
inline bool surrogate_passes_gradient(double ratio, double adv, double eps) {
  return ratio * adv <= clip_ratio(ratio, eps) * adv;
}

inline double hindsight_gap(double teacher_logp, double student_logp) { return teacher_logp - student_logp; }

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

inline double reweight(double delta, double adv, double w_min, double w_max) {
  return std::clamp(std::exp(sgn(adv) * delta), w_min, w_max);
}

inline double apply_mask(double w, bool action_token) { return action_token ? w : 1.0; }

inline double token_advantage(double adv, double alpha, double wbar) { return adv * ((1.0 - alpha) + alpha * wbar); }

inline void check_normalized(std::span<const double> p, const char* what) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw std::invalid_argument(std::string(what) + ": negative or NaN probability");
    s += x;
  }
  if (std::fabs(s - 1.0) > 1e-9) throw std::invalid_argument(std::string(what) + ": distribution does not sum to 1");
}

// KL(p || q) with 0 log 0 = 0.
inline double kl_categorical(std::span<const double> p_teacher, std::span<const double> log_q_student) {
  if (p_teacher.size() != log_q_student.size()) throw std::invalid_argument("kl_categorical: size mismatch");
  check_normalized(p_teacher, "kl_categorical teacher");
  double qs = 0.0;
  for (double lq : log_q_student) qs += std::exp(lq);
  if (std::fabs(qs - 1.0) > 1e-9) throw std::invalid_argument("kl_categorical student: distribution does not sum to 1");
  double kl = 0.0;
  for (std::size_t i = 0; i < p_teacher.size(); ++i) {
    if (p_teacher[i] > 0.0) kl += p_teacher[i] * (std::log(p_teacher[i]) - log_q_student[i]);
  }
  return kl;
}

inline std::vector<double> kl_grad_wrt_student_logits(std::span<const double> p_teacher, std::span<const double> p_student) {
  if (p_teacher.size() != p_student.size()) throw std::invalid_argument("kl_grad: size mismatch");
  std::vector<double> g(p_student.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = p_student[i] - p_teacher[i];
  return g;
}

// Teacher context: student context followed by HIND_BEGIN phi HIND_END. An
// empty phi adds nothing, so the teacher conditions exactly like the student.
inline TokenList teacher_context(std::span<const TokenId> student_context, std::span<const TokenId> phi) {
  TokenList out(student_context.begin(), student_context.end());
  if (phi.empty()) return out;
  out.push_back(tok(Marker::HindBegin));
  out.insert(out.end(), phi.begin(), phi.end());
  out.push_back(tok(Marker::HindEnd));
  return out;
}

struct TokenTerms {
  std::size_t n = 0, t = 0, i = 0;
  double adv = 0.0;
  double delta = 0.0;
  double w = 1.0;
  double wbar = 1.0;
  double adv_tilde = 0.0;
  bool masked = false;
  // Teacher distribution; filled for action tokens only.
  std::vector<double> teacher_probs;
};

// Everything the loss treats as constant: advantages, gaps, weights and
// teacher distributions, recorded at the parameters the table was built with.
struct AdvantageTable {
  std::vector<double> trajectory_adv;
  double alpha = 0.0;
  std::vector<TokenTerms> tokens;
};

struct LossBreakdown {
  double l_rw = 0.0;
  double l_act = 0.0;
  double l_total = 0.0;
  double lambda = 0.0;
  double delta_mean_abs = 0.0;
  double frac_w_clipped = 0.0;
  double kl_mean = 0.0;
  double entropy_mean = 0.0;
  std::size_t tokens = 0;
  std::size_t action_tokens = 0;
};

struct LossAndGrad {
  LossBreakdown loss;
  ParamGrad grad;
};

inline AdvantageTable build_advantage_table(const RolloutGroup& group, const PolicyParams& params,
                                            const TeacherSnapshot& teacher, const PlacementPlan& plan,
                                            const TrainConfig& config, long k) {
  if (group.trajectories.empty()) throw std::invalid_argument("advantage table: empty group");
  std::vector<double> rewards;
  for (const auto& tr : group.trajectories) rewards.push_back(tr.outcome_reward);
  AdvantageTable table;
  table.trajectory_adv = group_advantage(rewards, config.adv_eps);
  table.alpha = config.alpha_schedule.value(k);
  const double w_min = config.w_min(), w_max = config.w_max();
  const auto cap = static_cast<std::size_t>(config.context_cap);
  const auto D = params.feature_dim();
  for (std::size_t n = 0; n < group.trajectories.size(); ++n) {
    const auto& tr = group.trajectories[n];
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const auto& step = tr.steps[t];
      const TokenList history = full_history(tr, t);
      const TokenList& phi = plan.at(n, t);
      for (std::size_t i = 0; i < step.action.size(); ++i) {
        const TokenId y = step.action[i];
        auto ctx = recent_context(history, std::span<const TokenId>(step.action.data(), i), cap);
        auto student = log_softmax(logits(params, featurize(ctx, D)));
        auto teacher_lp = log_softmax(logits(teacher.params(), featurize(teacher_context(ctx, phi), D)));
        TokenTerms tt;
        tt.n = n;
        tt.t = t;
        tt.i = i;
        tt.adv = table.trajectory_adv[n];
        tt.delta = hindsight_gap(teacher_lp[y], student[y]);
        tt.masked = step.action_mask[i];
        tt.w = reweight(tt.delta, tt.adv, w_min, w_max);
        tt.wbar = apply_mask(tt.w, tt.masked);
        tt.adv_tilde = token_advantage(tt.adv, table.alpha, tt.wbar);
        if (tt.masked) {
          tt.teacher_probs = std::move(teacher_lp);
          for (double& x : tt.teacher_probs) x = std::exp(x);
        }
        table.tokens.push_back(std::move(tt));
      }
    }
  }
  return table;
}

namespace detail {

inline LossAndGrad evaluate_loss(std::span<const RolloutGroup> groups, std::span<const AdvantageTable> tables,
                                 const PolicyParams& params, const TrainConfig& config, double lambda, bool want_grad) {
  if (groups.empty() || groups.size() != tables.size()) throw std::invalid_argument("loss: groups/tables mismatch");
  LossAndGrad out;
  if (want_grad) out.grad = ParamGrad(params);
  auto& L = out.loss;
  L.lambda = lambda;
  for (const auto& tb : tables) {
    for (const auto& tt : tb.tokens) {
      ++L.tokens;
      if (tt.masked) ++L.action_tokens;
    }
  }
  if (L.tokens == 0) throw std::invalid_argument("loss: batch has no tokens");
  const double inv_tokens = 1.0 / static_cast<double>(L.tokens);
  const double inv_masked = L.action_tokens ? 1.0 / static_cast<double>(L.action_tokens) : 0.0;
  const auto cap = static_cast<std::size_t>(config.context_cap);
  const auto D = params.feature_dim();
  const double w_min = config.w_min(), w_max = config.w_max();

  double rw_sum = 0.0, act_sum = 0.0, delta_abs = 0.0, entropy = 0.0;
  std::size_t clipped = 0, weighted = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    auto it = tables[g].tokens.begin();
    for (std::size_t n = 0; n < group.trajectories.size(); ++n) {
      const auto& tr = group.trajectories[n];
      for (std::size_t t = 0; t < tr.steps.size(); ++t) {
        const auto& step = tr.steps[t];
        const TokenList history = full_history(tr, t);
        for (std::size_t i = 0; i < step.action.size(); ++i, ++it) {
          if (it == tables[g].tokens.end() || it->n != n || it->t != t || it->i != i) {
            throw std::invalid_argument("loss: advantage table does not match the group");
          }
          const TokenTerms& tt = *it;
          const TokenId y = step.action[i];
          auto ctx = recent_context(history, std::span<const TokenId>(step.action.data(), i), cap);
          auto f = featurize(ctx, D);
          auto logp = log_softmax(logits(params, f));
          std::vector<double> p(logp.size());
          for (std::size_t v = 0; v < p.size(); ++v) {
            p[v] = std::exp(logp[v]);
            entropy -= p[v] * logp[v];
          }
          delta_abs += std::fabs(tt.delta);
          const double ratio = policy_ratio(logp[y], step.sampled_logprobs[i]);
          rw_sum -= clipped_surrogate(ratio, tt.adv_tilde, config.clip_eps);
          if (want_grad && surrogate_passes_gradient(ratio, tt.adv_tilde, config.clip_eps)) {
            // d(-ratio * A)/dz = -A * ratio * (onehot - p)
            std::vector<double> dz(p.size());
            for (std::size_t v = 0; v < p.size(); ++v) dz[v] = -p[v];
            dz[y] += 1.0;
            out.grad.add(f, dz, -tt.adv_tilde * ratio * inv_tokens);
          }
          if (tt.masked) {
            act_sum += kl_categorical(tt.teacher_probs, logp);
            if (want_grad && lambda != 0.0) out.grad.add(f, kl_grad_wrt_student_logits(tt.teacher_probs, p), lambda * inv_masked);
            if (tt.adv != 0.0) {
              ++weighted;
              if (tt.w <= w_min || tt.w >= w_max) ++clipped;
            }
          }
        }
      }
    }
    if (it != tables[g].tokens.end()) throw std::invalid_argument("loss: advantage table does not match the group");
  }
  L.l_rw = rw_sum * inv_tokens;
  L.l_act = act_sum * inv_masked;
  L.l_total = L.l_rw + lambda * L.l_act;
  L.kl_mean = L.l_act;
  L.delta_mean_abs = delta_abs * inv_tokens;
  L.entropy_mean = entropy * inv_tokens;
  L.frac_w_clipped = weighted ? static_cast<double>(clipped) / static_cast<double>(weighted) : 0.0;
  return out;
}

}  // namespace detail

// Token-mean L_rw + lambda * L_act over the whole batch, with table entries
// held constant.
inline LossAndGrad loss_and_grad(std::span<const RolloutGroup> groups, std::span<const AdvantageTable> tables,
                                 const PolicyParams& params, const TrainConfig& config, double lambda) {
  return detail::evaluate_loss(groups, tables, params, config, lambda, true);
}

inline LossBreakdown loss_value(std::span<const RolloutGroup> groups, std::span<const AdvantageTable> tables,
                                const PolicyParams& params, const TrainConfig& config, double lambda) {
  return detail::evaluate_loss(groups, tables, params, config, lambda, false).loss;
}

inline LossAndGrad serl_loss_and_grad(const RolloutGroup& group, const PolicyParams& params, const TeacherSnapshot& teacher,
                                      const PlacementPlan& plan, const TrainConfig& config, long k) {
  if (group.trajectories.empty()) throw std::invalid_argument("serl_loss_and_grad: empty group");
  AdvantageTable table = build_advantage_table(group, params, teacher, plan, config, k);
  return loss_and_grad(std::span<const RolloutGroup>(&group, 1), std::span<const AdvantageTable>(&table, 1), params, config,
                       config.lambda_schedule.value(k));
}

}  // namespace serl
