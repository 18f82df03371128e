#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "derex/agent.hpp"

using namespace derex;

namespace {

// Random walk with episode resets at the goal or the horizon, written against
// the wall map only.
std::vector<std::size_t> random_walk_coverage(const FourRooms& env, std::size_t episodes, std::size_t horizon,
                                              std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> pick(0, 3);
  const int moves[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  std::set<int> seen;
  std::vector<std::size_t> curve;
  for (std::size_t e = 0; e < episodes; ++e) {
    int r = 1, c = 1;
    seen.insert(r * kGridSize + c);
    for (std::size_t t = 0; t < horizon; ++t) {
      const int a = pick(gen);
      const int nr = r + moves[a][0], nc = c + moves[a][1];
      if (!env.is_wall(nr * kGridSize + nc)) r = nr, c = nc;
      seen.insert(r * kGridSize + c);
      curve.push_back(seen.size());
      if (r == 9 && c == 9) break;
    }
  }
  return curve;
}

// Checks, whenever a state is entered for the first time, that its bonus
// beats the bonus of the most visited state.
class FreshStateCheck : public BonusModel {
 public:
  explicit FreshStateCheck(const FourRooms& env) : inner_(env) {}
  void begin_episode(int s) override { arrive(s, [&] { inner_.begin_episode(s); }); }
  void observe(int s, int a, int n) override { arrive(n, [&] { inner_.observe(s, a, n); }); }
  double bonus(int s) override { return inner_.bonus(s); }

  std::size_t checks = 0, violations = 0;
  TabularExactBonus inner_;

 private:
  template <class F>
  void arrive(int s, F&& update) {
    const bool fresh = inner_.visits(s) == 0.0;
    update();
    if (!fresh) return;
    int most = s;
    for (int c = 0; c < kNumCells; ++c)
      if (inner_.visits(c) > inner_.visits(most)) most = c;
    if (most == s) return;
    ++checks;
    violations += !(inner_.bonus(s) > inner_.bonus(most));
  }
};

}  // namespace

// ---- normalization ------------------------------------------------------------------

TEST(StreamNormalizer, ConstantStreamTendsToUnitMagnitude) {
  for (double c : {3.0, -0.2, 1e-3}) {
    StreamNormalizer n(0.99);
    double last = 0;
    for (int i = 0; i < 500; ++i) last = n(c);
    EXPECT_NEAR(std::abs(last), 1.0, 1e-9) << c;
    EXPECT_EQ(std::signbit(last), std::signbit(c));
  }
}

TEST(StreamNormalizer, ZeroStreamStaysZero) {
  StreamNormalizer n(0.9);
  for (int i = 0; i < 100; ++i) {
    const double v = n(0.0);
    EXPECT_EQ(v, 0.0);
  }
  EXPECT_TRUE(std::isfinite(n(1.0)));
}

TEST(StreamNormalizer, ScaleInvariantAfterBurnIn) {
  Rng rng(4);
  StreamNormalizer a(0.99), b(0.99);
  for (int i = 0; i < 2000; ++i) {
    const double x = normal01(rng) + (i % 7 == 0 ? 3.0 : 0.0);
    const double u = a(x), v = b(10.0 * x);
    if (i > 200) EXPECT_NEAR(v, u, 0.01 * std::max(1.0, std::abs(u)));
  }
}

TEST(StreamNormalizer, RejectsBadDecay) {
  EXPECT_THROW(StreamNormalizer(1.0), ConfigError);
  EXPECT_THROW(StreamNormalizer(0.0), ConfigError);
}

// ---- agent ----------------------------------------------------------------------------

TEST(Agent, PureRandomWalkMatchesIndependentSimulation) {
  const FourRooms env;
  AgentConfig cfg;
  cfg.epsilon = 1.0;
  std::vector<double> agent50, oracle50, agent95, oracle95;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const AgentRun run = run_agent(env, cfg, 40, seed);
    const CoverageMetrics m = coverage_metrics(run);
    const CoverageMetrics o = coverage_metrics(random_walk_coverage(env, 40, cfg.horizon, 1000 + seed), 68);
    agent50.push_back(censored(m.steps_to_50, 1e9));
    oracle50.push_back(censored(o.steps_to_50, 1e9));
    agent95.push_back(censored(m.steps_to_95, 1e9));
    oracle95.push_back(censored(o.steps_to_95, 1e9));
  }
  EXPECT_GT(ks_two_sample(agent50, oracle50).p_value, 0.01);
  EXPECT_GT(ks_two_sample(agent95, oracle95).p_value, 0.01);
}

TEST(Agent, FreshStatesOutrankMostVisitedUnderTabularBonus) {
  const FourRooms env;
  AgentConfig cfg;
  cfg.bonus = BonusSource::tabular_exact;
  cfg.lambda_b = 0.1;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    FreshStateCheck check(env);
    run_agent(env, cfg, 30, seed, &check);
    EXPECT_GT(check.checks, 20u);
    EXPECT_EQ(check.violations, 0u) << "seed " << seed;
  }
}

TEST(Agent, DenseRewardWithoutDiscountConvergesToOne) {
  const FourRooms env;
  AgentConfig cfg;
  cfg.gamma = 0.0;
  cfg.epsilon = 1.0;
  cfg.lr = 0.5;
  cfg.reward = RewardMode::dense;
  const AgentRun run = run_agent(env, cfg, 200, 3);
  for (int c : env.free_cells())
    for (int a = 0; a < kNumActions; ++a)
      EXPECT_NEAR(run.q(static_cast<std::size_t>(c), static_cast<std::size_t>(a)), 1.0, 1e-6) << c << "," << a;
  // Walls are never updated.
  EXPECT_EQ(run.q(0, 0), 0.0);
}

TEST(Agent, LogsAreConsistent) {
  const FourRooms env;
  AgentConfig cfg;
  cfg.bonus = BonusSource::tabular_exact;
  cfg.lambda_b = 0.5;
  cfg.center_bonus = false;
  const AgentRun run = run_agent(env, cfg, 10, 1);
  ASSERT_EQ(run.episodes.size(), 10u);
  StreamNormalizer nr(cfg.norm_decay), nb(cfg.norm_decay);
  std::size_t prev = 1;
  for (const auto& e : run.episodes) {
    ASSERT_EQ(e.coverage.size(), e.steps.size());
    EXPECT_LE(e.steps.size(), cfg.horizon);
    double ret = 0;
    for (std::size_t t = 0; t < e.steps.size(); ++t) {
      const StepLog& s = e.steps[t];
      EXPECT_EQ(env.step(s.state, s.action), s.next);
      if (t + 1 < e.steps.size()) EXPECT_EQ(e.steps[t + 1].state, s.next);
      EXPECT_GE(e.coverage[t], prev);
      prev = e.coverage[t];
      EXPECT_DOUBLE_EQ(s.mixed, nr(s.extrinsic) + cfg.lambda_b * nb(s.bonus));
      ret += s.extrinsic;
    }
    EXPECT_EQ(e.extrinsic_return, ret);
    EXPECT_EQ(e.reached_goal, !e.steps.empty() && e.steps.back().next == FourRooms::goal_cell());
  }
}

TEST(Agent, CenteredBonusSubtractsRunningMean) {
  const FourRooms env;
  AgentConfig cfg;
  cfg.bonus = BonusSource::tabular_exact;
  cfg.lambda_b = 0.5;
  const AgentRun run = run_agent(env, cfg, 5, 2);
  StreamNormalizer nb(cfg.norm_decay);
  double ema = 0;
  std::size_t n = 0;
  for (const auto& e : run.episodes)
    for (const auto& s : e.steps) {
      const double v = nb(s.bonus);
      const double want = n == 0 ? 0.0 : v - ema / (1.0 - std::pow(cfg.norm_decay, double(n)));
      ema = cfg.norm_decay * ema + (1.0 - cfg.norm_decay) * v;
      ++n;
      if (s.extrinsic == 0.0) EXPECT_NEAR(s.mixed, cfg.lambda_b * want, 1e-12);
    }
}

TEST(Agent, DeterministicPerSeed) {
  const FourRooms env;
  AgentConfig cfg;
  cfg.bonus = BonusSource::derex_fa;
  cfg.lambda_b = 0.1;
  cfg.refresh_every = 300;
  cfg.train_steps = 5;
  cfg.fa.batch = 32;
  const AgentRun a = run_agent(env, cfg, 4, 9), b = run_agent(env, cfg, 4, 9);
  EXPECT_EQ(a.coverage_curve(), b.coverage_curve());
  EXPECT_EQ(a.q.storage(), b.q.storage());
  const AgentRun c = run_agent(env, cfg, 4, 10);
  EXPECT_NE(a.coverage_curve(), c.coverage_curve());
}

TEST(Agent, LearnedBonusesTurnOnAfterRefresh) {
  const FourRooms env;
  for (BonusSource src : {BonusSource::derex_fa, BonusSource::derex_psr}) {
    AgentConfig cfg;
    cfg.bonus = src;
    cfg.lambda_b = 0.1;
    cfg.refresh_every = 200;
    cfg.train_steps = 5;
    cfg.fa.batch = 32;
    cfg.psr.batch = 4;
    cfg.psr.bn_center = true;
    const AgentRun run = run_agent(env, cfg, 3, 2);
    std::size_t n = 0;
    bool nonzero_after = false;
    for (const auto& e : run.episodes)
      for (const auto& s : e.steps) {
        ++n;
        EXPECT_TRUE(std::isfinite(s.bonus));
        if (n < 200) EXPECT_EQ(s.bonus, 0.0) << bonus_source_name(src);
        if (n > 200 && s.bonus > 0.0) nonzero_after = true;
      }
    ASSERT_GT(n, 200u);
    EXPECT_TRUE(nonzero_after) << bonus_source_name(src);
  }
}

TEST(Agent, BonusAnticorrelatesWithVisits) {
  const FourRooms env;
  AgentConfig cfg;
  cfg.bonus = BonusSource::tabular_exact;
  cfg.lambda_b = 0.1;
  TabularExactBonus model(env);
  run_agent(env, cfg, 40, 5, &model);
  std::vector<double> lv, lb;
  for (int c : env.free_cells())
    if (model.visits(c) >= 1) {
      lv.push_back(std::log(model.visits(c)));
      lb.push_back(std::log(model.bonus(c)));
    }
  EXPECT_GT(lv.size(), 30u);
  EXPECT_LE(spearman(lv, lb), -0.5);
}

TEST(Agent, ConfigValidation) {
  AgentConfig cfg;
  cfg.lambda_b = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.gamma = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.norm_decay = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_EQ(parse_bonus_source("derex_psr"), BonusSource::derex_psr);
  EXPECT_THROW(parse_bonus_source("rnd"), ConfigError);
}

// ---- coverage metrics ----------------------------------------------------------------------

TEST(Coverage, SingleStateSaturatesImmediately) {
  const CoverageMetrics m = coverage_metrics(std::vector<std::size_t>{1, 1, 1, 1}, 1);
  EXPECT_EQ(m.steps_to_50, 1u);
  EXPECT_EQ(m.steps_to_100, 1u);
  EXPECT_DOUBLE_EQ(m.auc, 1.0);
}

TEST(Coverage, ScriptedTourReachesFullCoverageAtItsLength) {
  const FourRooms env;
  // Depth-first tour with backtracking from the start cell.
  std::vector<int> path{FourRooms::start_cell()};
  std::vector<bool> seen(kNumCells, false);
  seen[static_cast<std::size_t>(path[0])] = true;
  std::size_t found = 1;
  std::vector<int> stack{path[0]};
  while (found < 68) {
    const int c = stack.back();
    int next = -1;
    for (int a = 0; a < kNumActions && next < 0; ++a) {
      const int n = env.step(c, a);
      if (!seen[static_cast<std::size_t>(n)]) next = n;
    }
    if (next < 0) {
      stack.pop_back();
      path.push_back(stack.back());
      continue;
    }
    seen[static_cast<std::size_t>(next)] = true;
    ++found;
    stack.push_back(next);
    path.push_back(next);
  }
  std::vector<std::size_t> curve;
  std::set<int> cov{path[0]};
  for (std::size_t i = 1; i < path.size(); ++i) {
    cov.insert(path[i]);
    curve.push_back(cov.size());
  }
  const CoverageMetrics m = coverage_metrics(curve, 68);
  EXPECT_EQ(m.steps_to_100, path.size() - 1);
  EXPECT_LE(*m.steps_to_95, *m.steps_to_100);
  EXPECT_LE(*m.steps_to_50, *m.steps_to_95);
  EXPECT_FALSE(coverage_metrics(std::vector<std::size_t>{1, 2}, 68).steps_to_50.has_value());
  EXPECT_EQ(coverage_metrics(curve, 68, {false, false, true}).first_goal_episode, 3u);
}

TEST(Coverage, ResultsCsv) {
  AgentResultRow r;
  r.seed = 3;
  r.lambda_b = 0.1;
  r.source = BonusSource::tabular_exact;
  r.metrics.steps_to_50 = 10;
  r.metrics.steps_to_95 = 200;
  r.metrics.auc = 0.5;
  std::ostringstream os;
  write_results_csv(os, {r});
  EXPECT_EQ(os.str(),
            "seed,lambda_b,bonus_source,steps_to_50,steps_to_95,steps_to_100,first_goal_episode,coverage_auc\n"
            "3,0.1,tabular_exact,10,200,NA,NA,0.5\n");
}
