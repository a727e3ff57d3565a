#include <gtest/gtest.h>

#include "helpers.hpp"
#include "serl/feedback.hpp"
#include "serl/objective.hpp"
#include "serl/oracle.hpp"

using namespace serl;
using serl::testing::random_group;
using serl::testing::random_params;
using serl::testing::flatten;
using serl::testing::unflatten;

namespace {

constexpr std::size_t kV = 24;
constexpr std::size_t kD = 32;

TrainConfig grpo_config() {
  TrainConfig c;
  c.alpha_schedule.init_value = 0.0;
  c.lambda_schedule.init_value = 0.0;
  return c;
}

}  // namespace

TEST(GroupAdvantage, WorkedExample) {
  std::vector<double> r{1, 0, 0, 1, 0, 0, 0, 0};
  auto a = group_advantage(r, 1e-8);
  const double s = std::sqrt(0.1875);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(a[i], (r[i] - 0.25) / (s + 1e-8), 1e-15);
  EXPECT_NEAR(a[0], 1.7320508, 1e-6);
  EXPECT_NEAR(a[1], -0.5773502, 1e-6);
}

TEST(GroupAdvantage, EqualRewardsAndErrors) {
  for (double x : group_advantage(std::vector<double>(5, 0.7), 1e-8)) EXPECT_EQ(x, 0.0);
  EXPECT_THROW(group_advantage(std::vector<double>{1.0}, 1e-8), std::invalid_argument);
  EXPECT_THROW(group_advantage(std::vector<double>{1.0, 0.0}, 0.0), std::invalid_argument);
}

TEST(GroupAdvantage, MeanZero) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(2 + uniform_index(rng, 15));
    for (auto& x : r) x = uniform01(rng);
    double s = 0.0;
    for (double a : group_advantage(r, 1e-8)) s += a;
    EXPECT_NEAR(s / static_cast<double>(r.size()), 0.0, 1e-12);
  }
}

TEST(Ratio, Examples) {
  EXPECT_EQ(policy_ratio(-1.3, -1.3), 1.0);
  EXPECT_NEAR(policy_ratio(std::log(2.0) - 4.0, -4.0), 2.0, 1e-15);
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    double a = -10 * uniform01(rng), b = -10 * uniform01(rng);
    long double ref = std::exp(static_cast<long double>(a) - static_cast<long double>(b));
    EXPECT_LE(std::fabs(policy_ratio(a, b) - static_cast<double>(ref)) / static_cast<double>(ref), 1e-15);
  }
}

TEST(Surrogate, Examples) {
  EXPECT_EQ(clipped_surrogate(1.0, -0.7, 0.2), -0.7);
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
  EXPECT_FALSE(surrogate_passes_gradient(1.5, 1.0, 0.2));
  EXPECT_TRUE(surrogate_passes_gradient(1.5, -1.0, 0.2));
  EXPECT_TRUE(surrogate_passes_gradient(1.1, 1.0, 0.2));
}

TEST(Gap, Examples) {
  EXPECT_DOUBLE_EQ(hindsight_gap(-1.0, -1.5), 0.5);
  Rng rng(3);
  auto p = random_params(kV, kD, rng);
  auto t = snapshot(p);
  TokenList ctx{3, 4, 5};
  for (TokenId y = 0; y < kV; ++y) {
    double s = log_prob(p, ctx, y);
    EXPECT_NEAR(hindsight_gap(log_prob(t.params(), teacher_context(ctx, TokenList{}), y), s), 0.0, 1e-12);
  }
}

TEST(TeacherContext, AppendsHindsightBlock) {
  TokenList ctx{11, 12};
  TokenList phi{20};
  EXPECT_EQ(teacher_context(ctx, phi), (TokenList{11, 12, tok(Marker::HindBegin), 20, tok(Marker::HindEnd)}));
  EXPECT_EQ(teacher_context(ctx, TokenList{}), ctx);
}

TEST(Reweight, Examples) {
  const double lo = std::exp(-0.2), hi = std::exp(0.2);
  EXPECT_EQ(reweight(0.0, 1.0, lo, hi), 1.0);
  EXPECT_NEAR(reweight(0.1, 1.0, lo, hi), 1.1051709180756477, 1e-15);
  EXPECT_NEAR(reweight(0.1, -1.0, lo, hi), 0.9048374180359595, 1e-15);
  EXPECT_EQ(reweight(5.0, 0.0, lo, hi), 1.0);
  EXPECT_EQ(reweight(5.0, 2.0, lo, hi), hi);
  EXPECT_EQ(reweight(5.0, -2.0, lo, hi), lo);
}

TEST(Mask, Examples) {
  EXPECT_EQ(apply_mask(0.3, false), 1.0);
  EXPECT_EQ(apply_mask(1.2, true), 1.2);
}

TEST(TokenAdvantage, Examples) {
  EXPECT_EQ(token_advantage(-0.6, 0.0, 1.2), -0.6);
  EXPECT_EQ(token_advantage(-0.6, 0.4, 1.0), -0.6);
  EXPECT_DOUBLE_EQ(token_advantage(1.0, 0.5, 1.2), 1.1);
}

TEST(Reweighting, SignAndBoundsOverRandomConfigs) {
  Rng rng(4);
  const double lo = std::exp(-0.2), hi = std::exp(0.2);
  for (int trial = 0; trial < 1000; ++trial) {
    double delta = 6.0 * (uniform01(rng) - 0.5);
    double A = uniform01(rng) < 0.1 ? 0.0 : 4.0 * (uniform01(rng) - 0.5);
    double alpha = uniform01(rng);
    bool m = uniform01(rng) < 0.5;
    double w = reweight(delta, A, lo, hi);
    ASSERT_GE(w, lo);
    ASSERT_LE(w, hi);
    double at = token_advantage(A, alpha, apply_mask(w, m));
    if (A != 0.0) {
      ASSERT_EQ(sgn(at), sgn(A));
    }
    if (!m) {
      ASSERT_EQ(at, A);
    }
    double mult = (1 - alpha) + alpha * apply_mask(w, m);
    ASSERT_GE(mult, (1 - alpha) + alpha * std::min(lo, 1.0) - 1e-15);
    ASSERT_LE(mult, (1 - alpha) + alpha * std::max(hi, 1.0) + 1e-15);
  }
}

TEST(Kl, Examples) {
  std::vector<double> p{1.0, 0.0}, lq{std::log(0.5), std::log(0.5)};
  EXPECT_NEAR(kl_categorical(p, lq), std::log(2.0), 1e-12);
  std::vector<double> bad{0.7, 0.7};
  EXPECT_THROW(kl_categorical(bad, lq), std::invalid_argument);
  std::vector<double> badq{0.0, 0.0};
  EXPECT_THROW(kl_categorical(p, badq), std::invalid_argument);
}

TEST(Kl, NonNegativeAndZeroOnSelf) {
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    std::size_t V = 2 + uniform_index(rng, 10);
    std::vector<double> zp(V), zq(V);
    for (auto& x : zp) x = 4 * (uniform01(rng) - 0.5);
    for (auto& x : zq) x = 4 * (uniform01(rng) - 0.5);
    auto p = softmax(zp);
    auto lq = log_softmax(zq);
    ASSERT_GE(kl_categorical(p, lq), -1e-12);
    ASSERT_LE(std::fabs(kl_categorical(p, log_softmax(zp))), 1e-12);
  }
}

TEST(Kl, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  oracle::FiniteDiffSpec spec;
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t V = 3 + uniform_index(rng, 6);
    std::vector<double> zt(V), zs(V);
    for (auto& x : zt) x = 3 * (uniform01(rng) - 0.5);
    for (auto& x : zs) x = 3 * (uniform01(rng) - 0.5);
    auto pt = softmax(zt);
    auto g = kl_grad_wrt_student_logits(pt, softmax(zs));
    double sum = 0.0;
    for (double x : g) sum += x;
    EXPECT_NEAR(sum, 0.0, 1e-12);
    std::vector<std::size_t> coords(V);
    std::iota(coords.begin(), coords.end(), 0);
    auto fd = oracle::finite_diff_grad([&](std::span<const double> z) { return kl_categorical(pt, log_softmax(z)); }, zs, coords, spec);
    for (std::size_t v = 0; v < V; ++v) EXPECT_LE(oracle::relative_error(g[v], fd[v]), 1e-5);
  }
  auto same = softmax(std::vector<double>{0.1, 0.2});
  for (double x : kl_grad_wrt_student_logits(same, same)) EXPECT_EQ(x, 0.0);
}

TEST(SerlLoss, ReducesToPlainGrpo) {
  Rng rng(7);
  auto cfg = grpo_config();
  cfg.feedback_sources = parse_sources("immediate,future");
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(kV, kD, rng);
    auto g = random_group(rng, p);
    auto teacher = snapshot(random_params(kV, kD, rng));
    auto plan = place(PlacementMode::Step, cfg.feedback_sources, g, 64);
    auto out = serl_loss_and_grad(g, p, teacher, plan, cfg, 0);
    auto ref = serl::testing::reference_grpo_grad(g, p, cfg);
    auto got = flatten(out.grad);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], ref[i], 1e-12) << i;
  }
}

TEST(SerlLoss, ZeroAdvantageLeavesOnlyDistillation) {
  Rng rng(8);
  TrainConfig cfg;
  auto p = random_params(kV, kD, rng);
  auto g = random_group(rng, p);
  for (auto& tr : g.trajectories) tr.outcome_reward = 1.0;
  auto teacher = snapshot(random_params(kV, kD, rng));
  auto plan = place(PlacementMode::Step, cfg.feedback_sources, g, 64);
  auto out = serl_loss_and_grad(g, p, teacher, plan, cfg, 0);
  EXPECT_EQ(out.loss.l_rw, 0.0);
  EXPECT_GT(out.loss.l_act, 0.0);
  // gradient equals lambda * grad(L_act): compare against a lambda-only run
  auto no_kl = cfg;
  no_kl.lambda_schedule.init_value = 0.0;
  auto rw = serl_loss_and_grad(g, p, teacher, plan, no_kl, 0);
  EXPECT_EQ(rw.grad.norm(), 0.0);
}

TEST(SerlLoss, DistillationZeroWhenTeacherIsStudentAndPhiEmpty) {
  Rng rng(9);
  TrainConfig cfg;
  auto p = random_params(kV, kD, rng);
  auto g = random_group(rng, p);
  PlacementPlan plan;
  for (const auto& tr : g.trajectories) plan.phi.emplace_back(tr.steps.size());
  auto out = serl_loss_and_grad(g, p, snapshot(p), plan, cfg, 0);
  EXPECT_NEAR(out.loss.l_act, 0.0, 1e-12);
  EXPECT_NEAR(out.loss.delta_mean_abs, 0.0, 1e-12);
  auto table = build_advantage_table(g, p, snapshot(p), plan, cfg, 0);
  for (const auto& tt : table.tokens) EXPECT_EQ(tt.wbar, 1.0);
}

TEST(SerlLoss, TableInvariants) {
  Rng rng(10);
  TrainConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(kV, kD, rng);
    auto g = random_group(rng, p);
    auto teacher = snapshot(random_params(kV, kD, rng, 2.0));
    auto plan = place(PlacementMode::Step, cfg.feedback_sources, g, 64);
    auto table = build_advantage_table(g, p, teacher, plan, cfg, 10);
    EXPECT_DOUBLE_EQ(table.alpha, 0.4);
    for (const auto& tt : table.tokens) {
      EXPECT_TRUE(std::isfinite(tt.delta));
      EXPECT_GE(tt.w, cfg.w_min());
      EXPECT_LE(tt.w, cfg.w_max());
      if (!tt.masked) {
        EXPECT_EQ(tt.wbar, 1.0);
        EXPECT_EQ(tt.adv_tilde, tt.adv);
      }
      if (tt.adv != 0.0) {
        EXPECT_EQ(sgn(tt.adv_tilde), sgn(tt.adv));
      }
    }
  }
}

// Full L_SERL with the table frozen versus central differences of the scalar.
TEST(SerlLoss, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  TrainConfig cfg;
  oracle::FiniteDiffSpec spec;
  int checked = 0;
  for (int trial = 0; trial < 5; ++trial) {
    auto p = random_params(kV, kD, rng);
    serl::testing::GroupSpec gs;
    gs.n = 2;
    gs.min_steps = 2;
    gs.max_steps = 2;
    auto g = random_group(rng, p, gs);
    auto teacher = snapshot(random_params(kV, kD, rng));
    auto plan = place(PlacementMode::Step, cfg.feedback_sources, g, 64);
    const long k = 5;
    auto table = build_advantage_table(g, p, teacher, plan, cfg, k);
    const double lambda = cfg.lambda_schedule.value(k);
    std::span<const RolloutGroup> gspan(&g, 1);
    std::span<const AdvantageTable> tspan(&table, 1);
    auto analytic = flatten(loss_and_grad(gspan, tspan, p, cfg, lambda).grad);
    auto loss = [&](std::span<const double> x) { return loss_value(gspan, tspan, unflatten(x, kV, kD), cfg, lambda).l_total; };
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < analytic.size() && coords.size() < 20; ++i) {
      if (analytic[i] != 0.0 && uniform01(rng) < 0.3) coords.push_back(i);
    }
    for (int extra = 0; extra < 5; ++extra) coords.push_back(uniform_index(rng, analytic.size()));
    auto fd = oracle::finite_diff_grad(loss, flatten(p), coords, spec);
    for (std::size_t c = 0; c < coords.size(); ++c) {
      if (analytic[coords[c]] == 0.0) {
        EXPECT_LE(std::fabs(fd[c]), 1e-9);
      } else {
        EXPECT_LE(oracle::relative_error(analytic[coords[c]], fd[c]), 1e-5) << coords[c];
      }
      ++checked;
    }
  }
  EXPECT_GE(checked, 100);
}

// Perturbing the teacher changes the loss but not the gradient of L_rw at the
// recorded table.
TEST(SerlLoss, StopGradientThroughTeacher) {
  Rng rng(12);
  TrainConfig cfg;
  auto p = random_params(kV, kD, rng);
  auto g = random_group(rng, p);
  auto plan = place(PlacementMode::Step, cfg.feedback_sources, g, 64);
  auto t1 = random_params(kV, kD, rng);
  auto table = build_advantage_table(g, p, snapshot(t1), plan, cfg, 0);
  // a uniform shift would cancel in the softmax, so perturb entrywise
  auto t2 = t1;
  for (auto& w : t2.weights()) w += 0.5 * (uniform01(rng) - 0.5);
  auto table2 = build_advantage_table(g, p, snapshot(t2), plan, cfg, 0);
  std::span<const RolloutGroup> gs(&g, 1);
  auto a = loss_and_grad(gs, std::span<const AdvantageTable>(&table, 1), p, cfg, 0.0);
  // same recorded advantages, different teacher distributions
  auto frozen = table2;
  for (std::size_t i = 0; i < frozen.tokens.size(); ++i) frozen.tokens[i].adv_tilde = table.tokens[i].adv_tilde;
  auto b = loss_and_grad(gs, std::span<const AdvantageTable>(&frozen, 1), p, cfg, 0.0);
  EXPECT_EQ(a.grad.W, b.grad.W);
  EXPECT_EQ(a.grad.b, b.grad.b);
  auto full1 = loss_value(gs, std::span<const AdvantageTable>(&table, 1), p, cfg, 0.5);
  auto full2 = loss_value(gs, std::span<const AdvantageTable>(&table2, 1), p, cfg, 0.5);
  EXPECT_NE(full1.l_total, full2.l_total);
  // recorded delta is pre-update: moving the student leaves the table alone
  auto p2 = p;
  p2.bias()[12] += 1.0;
  auto before = table.tokens[0].delta;
  auto rebuilt = build_advantage_table(g, p2, snapshot(t1), plan, cfg, 0);
  EXPECT_EQ(table.tokens[0].delta, before);
  bool changed = false;
  for (std::size_t i = 0; i < table.tokens.size(); ++i) changed = changed || rebuilt.tokens[i].delta != table.tokens[i].delta;
  EXPECT_TRUE(changed);
}

TEST(SerlLoss, AnchorEqualsStepOnUniqueKeys) {
  Rng rng(13);
  TrainConfig cfg;
  cfg.feedback_sources = parse_sources("immediate,next_obs,current");
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_params(kV, kD, rng);
    auto g = random_group(rng, p);
    auto teacher = snapshot(random_params(kV, kD, rng));
    auto ps = place(PlacementMode::Step, cfg.feedback_sources, g, 64);
    auto pa = place(PlacementMode::Anchor, cfg.feedback_sources, g, 64);
    auto a = flatten(serl_loss_and_grad(g, p, teacher, ps, cfg, 3).grad);
    auto b = flatten(serl_loss_and_grad(g, p, teacher, pa, cfg, 3).grad);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(SerlLoss, AfterDecayEqualsGrpo) {
  Rng rng(14);
  TrainConfig cfg;
  for (int trial = 0; trial < 5; ++trial) {
    auto p = random_params(kV, kD, rng);
    auto g = random_group(rng, p);
    auto teacher = snapshot(random_params(kV, kD, rng));
    auto plan = place(PlacementMode::Step, cfg.feedback_sources, g, 64);
    for (long k : {50L, 75L}) {
      auto got = flatten(serl_loss_and_grad(g, p, teacher, plan, cfg, k).grad);
      auto ref = serl::testing::reference_grpo_grad(g, p, cfg);
      for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], ref[i], 1e-12);
    }
  }
}

TEST(SerlLoss, EmptyGroupIsAnError) {
  TrainConfig cfg;
  RolloutGroup g;
  PolicyParams p(kV, kD);
  EXPECT_THROW(serl_loss_and_grad(g, p, snapshot(p), PlacementPlan{}, cfg, 0), std::invalid_argument);
}
