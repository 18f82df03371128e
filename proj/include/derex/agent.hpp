#pragma once

// Tabular Q-learning on 4-rooms with a sparse goal reward and an exploration
// bonus mixed into the reward after separate EMA normalization. Coverage
// metrics summarize how fast the state space is explored.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "derex/error.hpp"
#include "derex/fourrooms.hpp"
#include "derex/linalg.hpp"
#include "derex/matrix.hpp"
#include "derex/psr.hpp"
#include "derex/stats.hpp"
#include "derex/svd_loss.hpp"

namespace derex {

enum class BonusSource { none, tabular_exact, derex_fa, derex_psr };

inline std::string bonus_source_name(BonusSource b) {
  switch (b) {
    case BonusSource::none: return "none";
    case BonusSource::tabular_exact: return "tabular_exact";
    case BonusSource::derex_fa: return "derex_fa";
    case BonusSource::derex_psr: return "derex_psr";
  }
  return "?";
}

inline BonusSource parse_bonus_source(const std::string& s) {
  for (BonusSource b : {BonusSource::none, BonusSource::tabular_exact, BonusSource::derex_fa, BonusSource::derex_psr})
    if (bonus_source_name(b) == s) return b;
  throw ConfigError("unknown bonus source '" + s + "' (expected none, tabular_exact, derex_fa or derex_psr)");
}

enum class RewardMode {
  sparse_goal,  // 1 on reaching the goal (episode ends), else 0
  dense,        // 1 on every step, no goal termination
};

struct AgentConfig {
  double lr = 0.1;
  double gamma = 0.99;
  double epsilon = 0.1;
  BonusSource bonus = BonusSource::none;
  double lambda_b = 0.0;
  double norm_decay = 0.99;
  std::size_t horizon = kEpisodeHorizon;
  RewardMode reward = RewardMode::sparse_goal;
  std::size_t refresh_every = 2000;  // environment steps between learned-bonus refreshes
  std::size_t train_steps = 200;     // learner updates per refresh
  FaConfig fa;                       // derex_fa learner
  PsrConfig psr;                     // derex_psr learner
  bool center_bonus = true;          // subtract the running mean of the normalized bonus
  std::size_t psr_window = 20;       // actions per training sequence cut from episodes

  void validate() const {
    if (!(lambda_b >= 0.0)) throw ConfigError("lambda_b must be >= 0");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
    if (!(norm_decay > 0.0 && norm_decay < 1.0)) throw ConfigError("norm_decay must lie in (0, 1)");
    if (!(lr > 0.0 && lr <= 1.0)) throw ConfigError("lr must lie in (0, 1]");
    if (horizon == 0) throw ConfigError("horizon must be >= 1");
    if (refresh_every == 0) throw ConfigError("refresh_every must be >= 1");
  }
};

// ---- reward / bonus normalization ------------------------------------------------

// Divides by an EMA estimate of the stream's scale, sqrt(EMA of x^2) with bias
// correction, then folds the value into the estimate. With no history yet the
// value's own magnitude is the estimate.
struct StreamNormalizer {
  static constexpr double kFloor = 1e-8;
  double decay = 0.99;
  double ema_sq = 0.0;
  std::size_t count = 0;

  explicit StreamNormalizer(double d = 0.99) : decay(d) {
    if (!(d > 0.0 && d < 1.0)) throw ConfigError("normalizer decay must lie in (0, 1)");
  }

  double scale() const {
    if (count == 0) return 0.0;
    return std::sqrt(ema_sq / (1.0 - std::pow(decay, static_cast<double>(count))));
  }

  double operator()(double x) {
    const double s = count == 0 ? std::abs(x) : scale();
    const double out = x / std::max(s, kFloor);
    ema_sq = decay * ema_sq + (1.0 - decay) * x * x;
    ++count;
    return out;
  }
};

// ---- bonus models -------------------------------------------------------------------

// Reacts to every arrival; bonus(s) for the state just reached.
class BonusModel {
 public:
  virtual ~BonusModel() = default;
  virtual void begin_episode(int state) = 0;
  virtual void observe(int state, int action, int next) = 0;
  virtual double bonus(int state) = 0;
};

// alpha_s / d(s)^2 with d the running arrival distribution and alpha_s the
// diagonal of (P P^T)^+ for the uniform-policy chain.
class TabularExactBonus : public BonusModel {
 public:
  explicit TabularExactBonus(const FourRooms& env) : env_(&env), visits_(kNumCells, 0.0), alpha_(kNumCells, 0.0) {
    const Matrix p = exact_transition_matrix(env);
    const SvdResult s = svd(p);
    for (int c : env.free_cells()) {
      const auto i = static_cast<std::size_t>(env.dense_index(c));
      double a = 0.0;
      for (std::size_t r = 0; r < s.sigma.size(); ++r)
        if (s.sigma[r] > s.rank_tolerance) a += s.u(i, r) * s.u(i, r) / (s.sigma[r] * s.sigma[r]);
      alpha_[static_cast<std::size_t>(c)] = a;
    }
  }

  void begin_episode(int state) override { arrive(state); }
  void observe(int, int, int next) override { arrive(next); }

  double bonus(int state) override {
    const double n = visits_.at(static_cast<std::size_t>(state));
    if (n == 0.0) throw Error("TabularExactBonus: state " + std::to_string(state) + " never visited");
    const double d = n / total_;
    return alpha_[static_cast<std::size_t>(state)] / (d * d);
  }

  double visits(int state) const { return visits_.at(static_cast<std::size_t>(state)); }
  double alpha(int state) const { return alpha_.at(static_cast<std::size_t>(state)); }

 private:
  void arrive(int s) {
    if (env_->is_wall(s)) throw Error("TabularExactBonus: wall cell");
    visits_[static_cast<std::size_t>(s)] += 1.0;
    total_ += 1.0;
  }

  const FourRooms* env_;
  Vector visits_, alpha_;
  double total_ = 0.0;
};

// Learned state representation from the agent's own transitions, retrained
// every refresh_every arrivals; zero bonus before the first refresh.
class FaBonus : public BonusModel {
 public:
  FaBonus(const FourRooms& env, const AgentConfig& cfg, std::uint64_t seed)
      : env_(&env), cfg_(cfg), learner_(env, cfg.fa, seed), table_(kNumCells, 0.0) {}

  void begin_episode(int) override {}

  void observe(int state, int, int next) override {
    data_.src.push_back(state);
    data_.dst.push_back(next);
    if (data_.size() % cfg_.refresh_every == 0) refresh();
  }

  double bonus(int state) override { return table_.at(static_cast<std::size_t>(state)); }
  std::size_t refreshes() const { return refreshes_; }

 private:
  void refresh() {
    for (std::size_t t = 0; t < cfg_.train_steps; ++t) learner_.step(data_);
    const auto& cells = env_->free_cells();
    const Matrix rep = learner_.represent(cells);
    for (std::size_t i = 0; i < cells.size(); ++i)
      table_[static_cast<std::size_t>(cells[i])] = learner_.bonus(rep.row(i));
    ++refreshes_;
  }

  const FourRooms* env_;
  AgentConfig cfg_;
  FaLearner learner_;
  PairData data_;
  Vector table_;
  std::size_t refreshes_ = 0;
};

// History bonus from recurrent encoders trained on fixed-length windows cut
// from the agent's episodes; the current episode's history is tracked online.
class PsrBonus : public BonusModel {
 public:
  PsrBonus(const FourRooms& env, const AgentConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), learner_(cfg.psr, kNumCells, kNumActions, fourrooms_observations(env, cfg.psr.encoder), seed) {
    if (cfg_.psr_window == 0) throw ConfigError("psr_window must be >= 1");
    windows_.num_actions = kNumActions;
  }

  void begin_episode(int state) override {
    current_ = Sequence{};
    current_.obs.push_back(state);
    current_.states.push_back(state);
    cursor_ = learner_.begin_history(state);
  }

  void observe(int, int action, int next) override {
    current_.actions.push_back(action);
    current_.obs.push_back(next);
    current_.states.push_back(next);
    if (current_.actions.size() == cfg_.psr_window) {
      windows_.seqs.push_back(current_);
      current_ = Sequence{{next}, {}, {next}};
    }
    if (++arrivals_ % cfg_.refresh_every == 0 && !windows_.seqs.empty()) {
      for (std::size_t t = 0; t < cfg_.train_steps; ++t) learner_.step(windows_);
      trained_ = true;
    }
    learner_.extend_history(cursor_, action, next);
  }

  // Bonus of the tracked history (its end state is the argument).
  double bonus(int) override { return trained_ ? learner_.history_bonus(learner_.history_rep(cursor_)) : 0.0; }

 private:
  AgentConfig cfg_;
  PsrLearner learner_;
  SequenceData windows_;
  Sequence current_;
  PsrLearner::HistoryCursor cursor_;
  std::size_t arrivals_ = 0;
  bool trained_ = false;
};

// ---- agent ----------------------------------------------------------------------------

struct StepLog {
  int state = 0;
  int action = 0;
  int next = 0;
  double extrinsic = 0.0;
  double bonus = 0.0;
  double mixed = 0.0;
};

struct EpisodeLog {
  std::vector<StepLog> steps;
  double extrinsic_return = 0.0;
  bool reached_goal = false;
  std::vector<std::size_t> coverage;  // cumulative distinct states after each step (whole run)
};

struct AgentRun {
  std::vector<EpisodeLog> episodes;
  Matrix q;
  std::size_t num_free = 0;

  // Cumulative distinct-state count after every environment step, start included.
  std::vector<std::size_t> coverage_curve() const {
    std::vector<std::size_t> out;
    for (const auto& e : episodes) out.insert(out.end(), e.coverage.begin(), e.coverage.end());
    return out;
  }
};

inline std::unique_ptr<BonusModel> make_bonus_model(const FourRooms& env, const AgentConfig& cfg, std::uint64_t seed) {
  switch (cfg.bonus) {
    case BonusSource::none: return nullptr;
    case BonusSource::tabular_exact: return std::make_unique<TabularExactBonus>(env);
    case BonusSource::derex_fa: return std::make_unique<FaBonus>(env, cfg, derive_seed(seed, 2));
    case BonusSource::derex_psr: return std::make_unique<PsrBonus>(env, cfg, derive_seed(seed, 2));
  }
  return nullptr;
}

// Greedy action with uniform tie-breaking.
inline int greedy_action(const Matrix& q, int s, Rng& rng) {
  const auto row = q.row(static_cast<std::size_t>(s));
  const double best = *std::max_element(row.begin(), row.end());
  int ties[kNumActions];
  int n = 0;
  for (int a = 0; a < kNumActions; ++a)
    if (row[static_cast<std::size_t>(a)] == best) ties[n++] = a;
  return ties[uniform_index(rng, static_cast<std::size_t>(n))];
}

inline AgentRun run_agent(const FourRooms& env, const AgentConfig& cfg, std::size_t episodes, std::uint64_t seed,
                          BonusModel* external_bonus = nullptr) {
  cfg.validate();
  Rng rng(derive_seed(seed, 1));
  std::unique_ptr<BonusModel> owned = external_bonus ? nullptr : make_bonus_model(env, cfg, seed);
  BonusModel* bonus = external_bonus ? external_bonus : owned.get();
  StreamNormalizer norm_r(cfg.norm_decay), norm_b(cfg.norm_decay);
  double bonus_mean = 0.0;
  std::size_t bonus_count = 0;
  AgentRun run;
  run.q = Matrix(kNumCells, kNumActions);
  run.num_free = static_cast<std::size_t>(env.num_free());
  std::vector<bool> seen(kNumCells, false);
  std::size_t distinct = 0;
  const int goal = FourRooms::goal_cell();

  for (std::size_t ep = 0; ep < episodes; ++ep) {
    EpisodeLog log;
    int s = FourRooms::start_cell();
    if (!seen[static_cast<std::size_t>(s)]) seen[static_cast<std::size_t>(s)] = true, ++distinct;
    if (bonus) bonus->begin_episode(s);
    for (std::size_t t = 0; t < cfg.horizon; ++t) {
      const int a = uniform01(rng) < cfg.epsilon ? static_cast<int>(uniform_index(rng, kNumActions))
                                                 : greedy_action(run.q, s, rng);
      const int next = env.step(s, a);
      const bool at_goal = cfg.reward == RewardMode::sparse_goal && next == goal;
      const double r = cfg.reward == RewardMode::dense ? 1.0 : (at_goal ? 1.0 : 0.0);
      double b = 0.0;
      if (bonus) {
        bonus->observe(s, a, next);
        b = bonus->bonus(next);
      }
      double nb = 0.0;
      if (bonus) {
        nb = norm_b(b);
        if (cfg.center_bonus) {
          const double centered = bonus_count == 0 ? 0.0 : nb - bonus_mean / (1.0 - std::pow(cfg.norm_decay, static_cast<double>(bonus_count)));
          bonus_mean = cfg.norm_decay * bonus_mean + (1.0 - cfg.norm_decay) * nb;
          ++bonus_count;
          nb = centered;
        }
      }
      const double mixed = norm_r(r) + cfg.lambda_b * nb;
      const auto si = static_cast<std::size_t>(s), ni = static_cast<std::size_t>(next);
      double target = mixed;
      if (!at_goal) {
        const auto nrow = run.q.row(ni);
        target += cfg.gamma * *std::max_element(nrow.begin(), nrow.end());
      }
      double& qsa = run.q(si, static_cast<std::size_t>(a));
      qsa += cfg.lr * (target - qsa);
      if (!seen[ni]) seen[ni] = true, ++distinct;
      log.steps.push_back({s, a, next, r, b, mixed});
      log.coverage.push_back(distinct);
      log.extrinsic_return += r;
      s = next;
      if (at_goal) {
        log.reached_goal = true;
        break;
      }
    }
    run.episodes.push_back(std::move(log));
  }
  return run;
}

// ---- coverage metrics ---------------------------------------------------------------------

struct CoverageMetrics {
  // First step (1-based) at which coverage reaches the fraction; nullopt if never.
  std::optional<std::size_t> steps_to_50, steps_to_95, steps_to_100;
  std::optional<std::size_t> first_goal_episode;  // 1-based
  double auc = 0.0;                               // mean covered fraction over all steps
  std::size_t total_steps = 0;
};

inline std::optional<std::size_t> steps_to_fraction(const std::vector<std::size_t>& curve, std::size_t num_states,
                                                    double fraction) {
  const auto need = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(num_states) - 1e-9));
  for (std::size_t t = 0; t < curve.size(); ++t)
    if (curve[t] >= need) return t + 1;
  return std::nullopt;
}

inline CoverageMetrics coverage_metrics(const std::vector<std::size_t>& curve, std::size_t num_states,
                                        const std::vector<bool>& goal_reached = {}) {
  if (num_states == 0) throw Error("coverage_metrics: no states");
  CoverageMetrics m;
  m.total_steps = curve.size();
  m.steps_to_50 = steps_to_fraction(curve, num_states, 0.5);
  m.steps_to_95 = steps_to_fraction(curve, num_states, 0.95);
  m.steps_to_100 = steps_to_fraction(curve, num_states, 1.0);
  for (std::size_t e = 0; e < goal_reached.size(); ++e)
    if (goal_reached[e]) {
      m.first_goal_episode = e + 1;
      break;
    }
  double area = 0.0;
  for (std::size_t c : curve) area += static_cast<double>(c) / static_cast<double>(num_states);
  m.auc = curve.empty() ? 0.0 : area / static_cast<double>(curve.size());
  return m;
}

inline CoverageMetrics coverage_metrics(const AgentRun& run) {
  std::vector<bool> goals;
  for (const auto& e : run.episodes) goals.push_back(e.reached_goal);
  return coverage_metrics(run.coverage_curve(), run.num_free, goals);
}

// Missing values are censored at `censor` so medians over seeds stay defined.
inline double censored(const std::optional<std::size_t>& v, double censor) {
  return v ? static_cast<double>(*v) : censor;
}

struct AgentResultRow {
  std::uint64_t seed = 0;
  double lambda_b = 0.0;
  BonusSource source = BonusSource::none;
  CoverageMetrics metrics;
};

inline void write_results_csv(std::ostream& os, const std::vector<AgentResultRow>& rows) {
  auto opt = [](const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : std::string("NA"); };
  os << "seed,lambda_b,bonus_source,steps_to_50,steps_to_95,steps_to_100,first_goal_episode,coverage_auc\n";
  for (const auto& r : rows) {
    os << r.seed << ',' << format_number(r.lambda_b) << ',' << bonus_source_name(r.source) << ','
       << opt(r.metrics.steps_to_50) << ',' << opt(r.metrics.steps_to_95) << ',' << opt(r.metrics.steps_to_100) << ','
       << opt(r.metrics.first_goal_episode) << ',' << format_number(r.metrics.auc) << '\n';
  }
}

}  // namespace derex
