#pragma once

#include <json.hpp>

#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "derex/checks.hpp"
#include "derex/io.hpp"

// Experiment runner: settings in, a directory of CSV tables, graymap/pixmap
// heatmaps, a JSON summary and a sha256 manifest out. Artifacts depend only on
// the settings (never on `out` or `threads`), so reruns hash identically.
namespace derex {

using json = nlohmann::json;

// ---- settings schema -------------------------------------------------------------------------

inline std::vector<FieldSpec> experiment_schema() {
  using K = FieldKind;
  const std::vector<std::string> sources{"none", "tabular_exact", "derex_fa", "derex_psr"};
  return {
      {"seeds", K::integer_list, 0, 1e15},
      {"threads", K::integer, 1, 256},
      {"out", K::text},
      {"cell_px", K::integer, 1, 64},
      // transition data and learners
      {"n", K::integer, 1, 1e8},
      {"k", K::integer, 0, 121},
      {"b", K::integer, 1, 1e6},
      {"b2", K::integer, 0, 1e6},
      {"lambda_r", K::real, 0, 1e6},
      {"lambda_r_laplacian", K::real, 0, 1e6},
      {"lr", K::real, 1e-12, 10},
      {"momentum", K::real, 0, 1, {}, true},
      {"rho", K::real, 0, 1, {}, true},
      {"steps", K::integer, 1, 1e8},
      {"log_every", K::integer, 0, 1e8},
      {"hidden", K::integer, 0, 4096},
      {"encoder", K::text, 0, 0, {"onehot", "pixel"}},
      {"bn_center", K::flag},
      // partially observed runs
      {"p", K::real_list, 0, 1},
      {"sequences", K::integer, 2, 1e7},
      {"test_sequences", K::integer, 1, 1e7},
      {"length", K::integer, 1, 10000},
      {"test_length", K::integer, 0, 10000},
      {"embed", K::integer, 1, 4096},
      {"probe_iters", K::integer, 1, 1e7},
      {"w_horizon", K::integer, 1, 6},
      // exploration
      {"episodes", K::integer, 1, 1e7},
      {"bonus", K::text_list, 0, 0, sources},
      {"lambda_b", K::real_list, 0, 1e6},
      {"q_lr", K::real, 1e-12, 1},
      {"gamma", K::real, 0, 1, {}, true},
      {"epsilon", K::real, 0, 1},
      {"norm_decay", K::real, 1e-12, 1, {}, true},
      {"center_bonus", K::flag},
      {"refresh_every", K::integer, 1, 1e9},
      {"train_steps", K::integer, 1, 1e8},
      {"psr_window", K::integer, 1, 10000},
  };
}

// ---- output helpers ------------------------------------------------------------------------

struct RunContext {
  fs::path out;
  std::size_t threads = 1;
  std::vector<std::string> warnings;
  std::mutex warn_mutex;

  void warn(const std::string& w) {
    std::lock_guard<std::mutex> lock(warn_mutex);
    warnings.push_back(w);
  }
};

inline fs::path ensure_dir(const fs::path& p) {
  fs::create_directories(p);
  return p;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

// Values over the 121 cells as an 11x11 grid; `skip` cells (walls, unvisited)
// are masked out of the normalization.
inline void emit_grid_heatmap(RunContext& ctx, const fs::path& stem, const Vector& per_cell,
                              const std::vector<bool>& skip, std::size_t cell_px) {
  Matrix grid(kGridSize, kGridSize);
  for (int c = 0; c < kNumCells; ++c) grid(row_of(c), col_of(c)) = per_cell[static_cast<std::size_t>(c)];
  const auto info = write_graymap(fs::path(stem).concat(".pgm"), grid, cell_px, skip);
  write_pixmap(fs::path(stem).concat(".ppm"), grid, cell_px, skip);
  if (info.uniform) ctx.warn(fs::relative(stem, ctx.out).generic_string() + ": " + info.warning);
}

inline std::vector<bool> wall_mask(const FourRooms& env) {
  std::vector<bool> m(kNumCells);
  for (int c = 0; c < kNumCells; ++c) m[static_cast<std::size_t>(c)] = env.is_wall(c);
  return m;
}

// 0..3 for the rooms (row-major quadrants), 4 for doorway cells in the walls.
inline int room_group(int c) {
  const int r = row_of(c), q = col_of(c), mid = kGridSize / 2;
  if (r == mid || q == mid) return 4;
  return (r > mid ? 2 : 0) + (q > mid ? 1 : 0);
}

inline std::string seed_dir(std::uint64_t s) { return "seed_" + std::to_string(s); }
inline std::string noise_dir(double p) { return "p_" + format_number(p); }

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline FaConfig fa_config_from(const Settings& s) {
  FaConfig c;
  c.k = s.size("k");
  if (c.k == 0) throw ConfigError("field 'k': must be >= 1 for this experiment");
  c.lambda_r = s.real("lambda_r");
  c.lr = s.real("lr");
  c.momentum = s.real("momentum");
  c.batch = s.size("b");
  c.batch2 = s.size("b2");
  c.rho = s.real("rho");
  c.steps = s.size("steps");
  c.hidden = s.size("hidden");
  c.encoder = parse_encoder(s.text("encoder"));
  c.bn_center = s.flag("bn_center");
  return c;
}

inline ProbeSetup probe_setup_from(const Settings& s, double p) {
  ProbeSetup setup = ProbeSetup::standard(p);
  setup.train_sequences = s.size("sequences");
  setup.test_sequences = s.size("test_sequences");
  setup.length = s.size("length");
  auto& c = setup.psr;
  if (s.size("k") > 0) c.k = s.size("k");
  c.lambda_r = s.real("lambda_r");
  c.lr = s.real("lr");
  c.momentum = s.real("momentum");
  c.batch = s.size("b");
  c.batch2 = s.size("b2");
  c.rho = s.real("rho");
  c.steps = s.size("steps");
  c.embed = s.size("embed");
  c.hidden = s.size("hidden");
  c.test_length = s.size("test_length");
  c.encoder = parse_encoder(s.text("encoder"));
  c.bn_center = s.flag("bn_center");
  setup.probe.iters = s.size("probe_iters");
  return setup;
}

// ---- tabular decomposition maps ------------------------------------------------------------

inline json run_tabular(const Settings& s, RunContext& ctx) {
  const FourRooms env;
  const auto seeds = s.u64s("seeds");
  const std::size_t n = s.size("n"), k = s.size("k"), px = s.size("cell_px");
  if (k == 0) throw ConfigError("field 'k': must be >= 1 for this experiment");
  std::vector<json> per_seed(seeds.size());
  parallel_for(seeds.size(), ctx.threads, [&](std::size_t i) {
    const auto dir = ensure_dir(ctx.out / seed_dir(seeds[i]));
    const auto ds = collect_transitions(env, n, derive_seed(seeds[i], 701), Encoder::onehot, episodic_collection());
    VisitBonus vb = visited_cells(env, ds);
    const TabularDecomposition dec = decompose(build_a_n(ds), k);
    const TabularExactBonus exact(env);
    const double n_total = double(ds.tuples.size());

    std::vector<bool> unvisited = wall_mask(env);
    Vector log_bonus(kNumCells, 0.0);
    std::vector<CsvRow> rep_rows, bonus_rows;
    for (int c : env.free_cells()) {
      const auto ci = static_cast<std::size_t>(c);
      CsvRow r{cell(c), cell(row_of(c)), cell(col_of(c)), cell(vb.visits[ci])};
      for (std::size_t j = 0; j < k; ++j) r.push_back(cell(dec.rep(ci, j)));
      rep_rows.push_back(std::move(r));
      if (vb.visits[ci] == 0.0) {
        unvisited[ci] = true;
        continue;
      }
      const double d = vb.visits[ci] / n_total;
      const double b = exact.alpha(c) / (d * d);
      vb.bonus.push_back(b);
      log_bonus[ci] = std::log10(b);
      bonus_rows.push_back({cell(c), cell(row_of(c)), cell(col_of(c)), cell(vb.visits[ci]), cell(b),
                            cell(exact_bonus(dec, ci)), cell(bonus(dec, ci))});
    }
    vb.rho = log_rank_correlation(vb.visits, vb.cells, vb.bonus);

    CsvRow rep_header{"cell", "row", "col", "visits"};
    for (std::size_t j = 0; j < k; ++j) rep_header.push_back("u_" + std::to_string(j + 1));
    write_csv(dir / "representation.csv", rep_header, rep_rows);
    if (k >= 2) {
      std::vector<double> xs, ys;
      std::vector<int> rooms;
      for (int c : env.free_cells()) {
        xs.push_back(dec.rep(static_cast<std::size_t>(c), 0));
        ys.push_back(dec.rep(static_cast<std::size_t>(c), 1));
        rooms.push_back(room_group(c));
      }
      write_scatter_pixmap(dir / "representation_scatter.ppm", xs, ys, rooms);
    }
    write_csv(dir / "bonus.csv", {"cell", "row", "col", "visits", "bonus_tabular_exact", "bonus_empirical_full", "bonus_empirical_top_k"}, bonus_rows);
    std::vector<CsvRow> sv;
    for (std::size_t j = 0; j < dec.svd.sigma.size(); ++j) sv.push_back({cell(j + 1), cell(dec.svd.sigma[j])});
    write_csv(dir / "singular_values.csv", {"index", "sigma"}, sv);
    emit_grid_heatmap(ctx, dir / "visitation", vb.visits, wall_mask(env), px);
    emit_grid_heatmap(ctx, dir / "bonus_log10", log_bonus, unvisited, px);

    per_seed[i] = {{"seed", seeds[i]},
                   {"visited_cells", vb.cells.size()},
                   {"spearman_log_visits_log_bonus", vb.rho},
                   {"sigma_1", dec.svd.sigma[0]},
                   {"sigma_k", dec.svd.sigma[k - 1]},
                   {"sigma_k_plus_1", dec.svd.sigma[k]}};
  });
  std::vector<double> rhos;
  for (const auto& j : per_seed) rhos.push_back(j["spearman_log_visits_log_bonus"].get<double>());
  return {{"per_seed", per_seed}, {"median_spearman_log_visits_log_bonus", median(rhos)}};
}

// ---- learned transition representation ---------------------------------------------------------

inline json run_fa(const Settings& s, RunContext& ctx) {
  const FourRooms env;
  const auto seeds = s.u64s("seeds");
  const FaConfig cfg = fa_config_from(s);
  const std::size_t n = s.size("n"), px = s.size("cell_px"), log_every = s.size("log_every");
  std::vector<json> per_seed(seeds.size());
  parallel_for(seeds.size(), ctx.threads, [&](std::size_t i) {
    const auto dir = ensure_dir(ctx.out / seed_dir(seeds[i]));
    const auto ds = collect_transitions(env, n, derive_seed(seeds[i], 701), Encoder::onehot, episodic_collection());
    VisitBonus vb = visited_cells(env, ds);
    const Matrix a = build_a_n(ds);
    const TabularDecomposition dec = decompose(a, std::min(cfg.k, svd(a).numerical_rank()));

    FaLearner learner(env, cfg, seeds[i]);
    const auto log = learner.train(PairData::from(ds), log_every);
    {
      std::ofstream os(dir / "training_log.csv", std::ios::binary);
      write_training_log(os, log);
    }
    const auto& cells = env.free_cells();
    const Matrix rep = learner.represent(cells);

    std::vector<bool> unvisited = wall_mask(env);
    Vector log_bonus(kNumCells, 0.0), exact;
    std::vector<CsvRow> rep_rows, bonus_rows;
    for (std::size_t r = 0; r < cells.size(); ++r) {
      const int c = cells[r];
      const auto ci = static_cast<std::size_t>(c);
      CsvRow row{cell(c), cell(row_of(c)), cell(col_of(c)), cell(vb.visits[ci])};
      for (std::size_t j = 0; j < cfg.k; ++j) row.push_back(cell(rep(r, j)));
      rep_rows.push_back(std::move(row));
      if (vb.visits[ci] == 0.0) {
        unvisited[ci] = true;
        continue;
      }
      const double b = learner.bonus(rep.row(r));
      vb.bonus.push_back(b);
      exact.push_back(exact_bonus(dec, ci));
      log_bonus[ci] = std::log10(std::max(b, 1e-300));
      bonus_rows.push_back({cell(c), cell(row_of(c)), cell(col_of(c)), cell(vb.visits[ci]), cell(b), cell(exact.back())});
    }
    vb.rho = log_rank_correlation(vb.visits, vb.cells, vb.bonus);

    CsvRow rep_header{"cell", "row", "col", "visits"};
    for (std::size_t j = 0; j < cfg.k; ++j) rep_header.push_back("f_" + std::to_string(j + 1));
    write_csv(dir / "representation.csv", rep_header, rep_rows);
    write_csv(dir / "bonus.csv", {"cell", "row", "col", "visits", "bonus_learned", "bonus_exact"}, bonus_rows);
    emit_grid_heatmap(ctx, dir / "bonus_learned_log10", log_bonus, unvisited, px);

    // Principal angle between the learned span and A_n's top-k left subspace.
    Matrix target(cells.size(), dec.k);
    for (std::size_t r = 0; r < cells.size(); ++r)
      for (std::size_t j = 0; j < dec.k; ++j) target(r, j) = dec.rep(static_cast<std::size_t>(cells[r]), j);
    per_seed[i] = {{"seed", seeds[i]},
                   {"spearman_log_visits_log_bonus", vb.rho},
                   {"spearman_learned_vs_exact_bonus", spearman(vb.bonus, exact)},
                   {"max_principal_angle_deg", max_principal_angle(rep, target) * 180.0 / M_PI},
                   {"final_total_loss", log.empty() ? json(nullptr) : finite_or_null(log.back().loss.total)}};
  });
  std::vector<double> rhos, angles;
  for (const auto& j : per_seed) {
    rhos.push_back(j["spearman_log_visits_log_bonus"].get<double>());
    angles.push_back(j["max_principal_angle_deg"].get<double>());
  }
  return {{"per_seed", per_seed},
          {"median_spearman_log_visits_log_bonus", median(rhos)},
          {"median_max_principal_angle_deg", median(angles)}};
}

// ---- partially observed four rooms ---------------------------------------------------------

// Probe probabilities of one history drawn over the grid.
inline Vector belief_over_cells(const ProbeRun& run, std::size_t row) {
  Vector v(kNumCells, 0.0);
  for (std::size_t j = 0; j < run.classes.size(); ++j) v[static_cast<std::size_t>(run.classes[j])] = run.test_probs[row][j];
  return v;
}

inline void emit_beliefs(RunContext& ctx, const fs::path& dir, const FourRooms& env, const ProbeRun& run,
                         std::size_t px) {
  // First test sequence, at the start, middle and end of the history.
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < run.test.splits.size(); ++r)
    if (run.test.splits[r].sequence == 0) rows.push_back(r);
  if (rows.empty()) return;
  std::vector<CsvRow> out;
  for (std::size_t pick : {rows.front(), rows[rows.size() / 2], rows.back()}) {
    const Vector b = belief_over_cells(run, pick);
    const std::size_t split = run.test.splits[pick].split;
    emit_grid_heatmap(ctx, dir / ("belief_step" + std::to_string(split)), b, wall_mask(env), px);
    for (int c : env.free_cells())
      out.push_back({cell(split), cell(c), cell(b[static_cast<std::size_t>(c)]), cell(run.test.end_states[pick] == c ? 1 : 0)});
  }
  write_csv(dir / "belief.csv", {"history_length", "cell", "probability", "true_state"}, out);
}

inline std::string sequences_digest(const SequenceData& d) {
  std::ostringstream os;
  for (const auto& s : d.seqs) {
    for (int o : s.obs) os << o << ' ';
    os << '|';
    for (int a : s.actions) os << a << ' ';
    os << '|';
    for (int st : s.states) os << st << ' ';
    os << '\n';
  }
  return sha256_hex(os.str());
}

inline json tiny_pomdp_tables(const Settings& s, RunContext& ctx) {
  const SystemDynamicsMatrix w = exact_w(TinyPomdp::standard(), s.size("w_horizon"));
  auto join = [](const std::vector<int>& v) {
    std::string out;
    for (int x : v) out += (out.empty() ? "" : " ") + std::to_string(x);
    return out;
  };
  std::vector<CsvRow> rows;
  for (std::size_t i = 0; i < w.histories.size(); ++i)
    for (std::size_t j = 0; j < w.tests.size(); ++j)
      rows.push_back({join(w.histories[i]), join(w.tests[j]), cell(w.w(i, j))});
  write_csv(ctx.out / "tiny_pomdp_w.csv", {"history", "test", "probability"}, rows);
  const SvdResult sv = svd(w.w);
  std::vector<CsvRow> srows;
  for (std::size_t j = 0; j < sv.sigma.size(); ++j) srows.push_back({cell(j + 1), cell(sv.sigma[j])});
  write_csv(ctx.out / "tiny_pomdp_sigma.csv", {"index", "sigma"}, srows);
  return {{"rows", w.w.rows()}, {"cols", w.w.cols()}, {"rank_rel_1e-8", relative_rank(w.w, 1e-8)}};
}

inline json run_pomdp_probe(const Settings& s, RunContext& ctx) {
  const FourRooms env;
  const auto seeds = s.u64s("seeds");
  const auto ps = s.reals("p");
  const std::size_t px = s.size("cell_px"), log_every = s.size("log_every");
  std::vector<ProbeRun> runs(ps.size() * seeds.size());
  parallel_for(runs.size(), ctx.threads, [&](std::size_t i) {
    const double p = ps[i / seeds.size()];
    const std::uint64_t seed = seeds[i % seeds.size()];
    const auto dir = ensure_dir(ctx.out / noise_dir(p) / seed_dir(seed));
    runs[i] = belief_probe_run(env, p, seed, probe_setup_from(s, p), log_every);
    std::ofstream os(dir / "training_log.csv", std::ios::binary);
    write_training_log(os, runs[i].log);
    emit_beliefs(ctx, dir, env, runs[i], px);
  });
  std::vector<CsvRow> rows;
  for (const auto& r : runs) rows.push_back({cell(r.p), cell(std::size_t(r.seed)), cell(r.accuracy), cell(r.top3), cell(r.majority)});
  write_csv(ctx.out / "probe_metrics.csv", {"p", "seed", "accuracy", "top3", "majority"}, rows);

  json by_p = json::array();
  std::vector<double> med;
  for (std::size_t j = 0; j < ps.size(); ++j) {
    std::vector<double> acc, top3;
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      acc.push_back(runs[j * seeds.size() + k].accuracy);
      top3.push_back(runs[j * seeds.size() + k].top3);
    }
    med.push_back(median(acc));
    by_p.push_back({{"p", ps[j]}, {"median_accuracy", med.back()}, {"median_top3", median(top3)}, {"accuracy", acc}});
  }
  bool monotone = true;
  for (std::size_t j = 1; j < med.size(); ++j) monotone = monotone && med[j] <= med[j - 1];
  return {{"by_p", by_p}, {"median_accuracy_nonincreasing_in_p", monotone}, {"tiny_pomdp", tiny_pomdp_tables(s, ctx)}};
}

// Same data, seeds, budgets and probe for both objectives; only the loss and
// its default weight differ. The protocol fields are compared and recorded.
inline json run_baseline_compare(const Settings& s, RunContext& ctx) {
  const FourRooms env;
  const auto seeds = s.u64s("seeds");
  const auto ps = s.reals("p");
  const std::size_t log_every = s.size("log_every");
  const std::vector<PsrObjective> objectives{PsrObjective::derex, PsrObjective::laplacian};
  const std::size_t jobs = ps.size() * seeds.size();
  std::vector<ProbeRun> runs(jobs * objectives.size());
  std::vector<std::string> digests(jobs);
  parallel_for(jobs, ctx.threads, [&](std::size_t i) {
    const double p = ps[i / seeds.size()];
    const std::uint64_t seed = seeds[i % seeds.size()];
    const auto dir = ensure_dir(ctx.out / noise_dir(p) / seed_dir(seed));
    const ProbeSetup base = probe_setup_from(s, p);
    const ProbeData data = probe_data(env, p, seed, base);
    digests[i] = sequences_digest(data.train) + sequences_digest(data.test);
    for (std::size_t o = 0; o < objectives.size(); ++o) {
      ProbeSetup setup = base;
      setup.psr.objective = objectives[o];
      if (objectives[o] == PsrObjective::laplacian) setup.psr.lambda_r = s.real("lambda_r_laplacian");
      ProbeRun& r = runs[i * objectives.size() + o];
      r = belief_probe_run(env, data, p, seed, setup, log_every);
      std::ofstream os(dir / ("training_log_" + objective_name(objectives[o]) + ".csv"), std::ios::binary);
      write_training_log(os, r.log, objective_name(objectives[o]));
    }
  });
  std::vector<CsvRow> rows;
  json protocol = json::array();
  for (std::size_t i = 0; i < jobs; ++i) {
    for (std::size_t o = 0; o < objectives.size(); ++o) {
      const ProbeRun& r = runs[i * objectives.size() + o];
      rows.push_back({objective_name(objectives[o]), cell(r.p), cell(std::size_t(r.seed)), cell(r.accuracy), cell(r.top3),
                      cell(r.majority)});
    }
    const ProbeRun &a = runs[i * objectives.size()], &b = runs[i * objectives.size() + 1];
    const bool same = a.seed == b.seed && a.p == b.p && a.log.size() == b.log.size() && a.majority == b.majority &&
                      a.test.end_states == b.test.end_states;
    if (!same) throw Error("baseline_compare: protocols differ for p = " + format_number(a.p));
    protocol.push_back({{"p", a.p}, {"seed", a.seed}, {"data_sha256", digests[i]}, {"identical", same}});
  }
  write_csv(ctx.out / "compare.csv", {"objective", "p", "seed", "accuracy", "top3", "majority"}, rows);
  json medians = json::object();
  for (std::size_t o = 0; o < objectives.size(); ++o)
    for (std::size_t j = 0; j < ps.size(); ++j) {
      std::vector<double> acc;
      for (std::size_t k = 0; k < seeds.size(); ++k) acc.push_back(runs[(j * seeds.size() + k) * objectives.size() + o].accuracy);
      medians[objective_name(objectives[o])][noise_dir(ps[j])] = median(acc);
    }
  return {{"protocol", protocol}, {"median_accuracy", medians}};
}

// ---- exploration ---------------------------------------------------------------------------------

inline json run_explore(const Settings& s, RunContext& ctx) {
  const FourRooms env;
  const auto seeds = s.u64s("seeds");
  const std::size_t episodes = s.size("episodes");
  AgentConfig base;
  base.lr = s.real("q_lr");
  base.gamma = s.real("gamma");
  base.epsilon = s.real("epsilon");
  base.norm_decay = s.real("norm_decay");
  base.center_bonus = s.flag("center_bonus");
  base.refresh_every = s.size("refresh_every");
  base.train_steps = s.size("train_steps");
  base.psr_window = s.size("psr_window");
  base.fa = fa_config_from(s);
  base.psr = probe_setup_from(s, 0.0).psr;
  base.validate();

  // The lambda_b = 0 baseline runs once, without a bonus model.
  std::vector<std::pair<BonusSource, double>> arms{{BonusSource::none, 0.0}};
  for (const auto& name : s.texts("bonus")) {
    const BonusSource src = parse_bonus_source(name);
    if (src == BonusSource::none) continue;
    for (double lb : s.reals("lambda_b"))
      if (lb > 0.0) arms.push_back({src, lb});
  }
  std::vector<AgentResultRow> results(arms.size() * seeds.size());
  std::vector<std::vector<std::size_t>> curves(results.size());
  parallel_for(results.size(), ctx.threads, [&](std::size_t i) {
    AgentConfig cfg = base;
    cfg.bonus = arms[i / seeds.size()].first;
    cfg.lambda_b = arms[i / seeds.size()].second;
    const AgentRun run = run_agent(env, cfg, episodes, seeds[i % seeds.size()]);
    results[i] = {seeds[i % seeds.size()], cfg.lambda_b, cfg.bonus, coverage_metrics(run)};
    curves[i] = run.coverage_curve();
  });
  {
    std::ofstream os(ctx.out / "results.csv", std::ios::binary);
    write_results_csv(os, results);
  }
  std::vector<CsvRow> rows;
  for (std::size_t i = 0; i < results.size(); ++i)
    for (std::size_t t = 0; t < curves[i].size(); t += 50)
      rows.push_back({bonus_source_name(results[i].source), cell(results[i].lambda_b), cell(std::size_t(results[i].seed)),
                      cell(t + 1), cell(curves[i][t])});
  write_csv(ctx.out / "coverage_curves.csv", {"bonus_source", "lambda_b", "seed", "step", "covered_states"}, rows);

  json arms_json = json::array();
  for (std::size_t a = 0; a < arms.size(); ++a) {
    ExploreSummary sum;
    std::vector<double> c95, auc;
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      const auto& m = results[a * seeds.size() + k].metrics;
      sum.runs.push_back(m);
      c95.push_back(censored(m.steps_to_95, std::numeric_limits<double>::infinity()));
      auc.push_back(m.auc);
    }
    arms_json.push_back({{"bonus_source", bonus_source_name(arms[a].first)},
                         {"lambda_b", arms[a].second},
                         {"median_steps_to_95", finite_or_null(sum.median_steps_to_95())},
                         {"iqr_steps_to_95", {finite_or_null(quantile(c95, 0.25)), finite_or_null(quantile(c95, 0.75))}},
                         {"median_first_goal_episode", finite_or_null(sum.median_first_goal())},
                         {"median_coverage_auc", median(auc)}});
  }
  return {{"arms", arms_json}, {"note", "null medians mean the event was not reached in at least half the runs"}};
}

// ---- verifier suite ----------------------------------------------------------------------------

inline json run_verify(const Settings& s, RunContext& ctx) {
  const std::uint64_t seed = s.u64s("seeds").front();
  const auto dir = ensure_dir(ctx.out / "reports");
  std::vector<std::function<CheckResult()>> checks{
      [&] { return check_eigen_agreement(seed); }, [&] { return check_count_estimator(seed); },
      [&] { return check_bonus_identity(seed); }, [] { return check_double_sampling(); },
      [] { return check_gradients(); }};
  std::vector<CheckResult> results(checks.size());
  parallel_for(checks.size(), ctx.threads, [&](std::size_t i) { results[i] = checks[i](); });
  json out = json::object();
  bool all = true;
  for (const auto& r : results) {
    write_text(dir / (r.name + ".txt"), format_report(r));
    out[r.name] = r.pass ? "PASS" : "FAIL";
    all = all && r.pass;
  }
  return {{"reports", out}, {"all_pass", all}};
}

// ---- registry ---------------------------------------------------------------------------------

struct Experiment {
  std::string name;
  std::string target;  // what the artifacts show
  std::map<std::string, std::string> defaults;
  std::function<json(const Settings&, RunContext&)> run;
};

inline const std::map<std::string, std::string>& common_defaults() {
  static const std::map<std::string, std::string> d{
      {"seeds", "0,1,2"}, {"threads", std::to_string(default_threads())}, {"out", "runs"}, {"cell_px", "16"},
      {"n", "20000"}, {"k", "2"}, {"b", "256"}, {"b2", "0"}, {"lambda_r", "1"}, {"lambda_r_laplacian", "10"},
      {"lr", "0.01"}, {"momentum", "0"}, {"rho", "0.99"}, {"steps", "2000"}, {"log_every", "100"}, {"hidden", "0"},
      {"encoder", "onehot"}, {"bn_center", "false"}, {"p", "0,0.3,0.6,0.9"}, {"sequences", "400"},
      {"test_sequences", "100"}, {"length", "20"}, {"test_length", "0"}, {"embed", "16"}, {"probe_iters", "2000"},
      {"w_horizon", "3"}, {"episodes", "100"}, {"bonus", "tabular_exact"}, {"lambda_b", "0,0.01,0.1,1"},
      {"q_lr", "0.1"}, {"gamma", "0.99"}, {"epsilon", "0.1"}, {"norm_decay", "0.99"}, {"center_bonus", "true"},
      {"refresh_every", "2000"}, {"train_steps", "200"}, {"psr_window", "20"}};
  return d;
}

inline const std::vector<Experiment>& experiments() {
  static const std::vector<Experiment> list{
      {"tabular", "visitation map, top-k singular-vector representation of A_n and tabular bonus map on four rooms",
       {{"k", "2"}}, run_tabular},
      {"fa", "learned f/g representation, learned bonus map and its agreement with the exact bonus on four rooms",
       {{"k", "68"}, {"lambda_r", "10"}, {"lr", "0.005"}, {"momentum", "0.9"}, {"steps", "3000"}}, run_fa},
      {"pomdp_probe",
       "belief-probe accuracy of learned history representations across observation-hiding probability p, belief "
       "maps, and the exact system-dynamics matrix of a 3-state POMDP",
       {{"k", "0"}, {"b", "8"}, {"hidden", "32"}, {"momentum", "0.9"}, {"steps", "3000"}, {"bn_center", "true"},
        {"log_every", "500"}, {"test_length", "5"}},
       run_pomdp_probe},
      {"baseline_compare", "belief-probe accuracy of the spectral objective against graph drawing under one protocol",
       {{"k", "0"}, {"b", "8"}, {"hidden", "32"}, {"momentum", "0.9"}, {"steps", "3000"}, {"bn_center", "true"},
        {"p", "0,0.3"}, {"log_every", "500"}, {"test_length", "5"}},
       run_baseline_compare},
      {"explore", "coverage and first-goal statistics of Q-learning with and without exploration bonuses",
       {{"seeds", "0,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19"}, {"k", "8"}, {"lambda_r", "10"},
        {"lr", "0.005"}, {"momentum", "0.9"}, {"b", "64"}},
       run_explore},
      {"verify", "verifier reports: eigenvector agreement, count estimator, bonus identity, double sampling, gradients",
       {{"seeds", "0"}}, run_verify},
  };
  return list;
}

inline const Experiment& find_experiment(const std::string& name) {
  for (const auto& e : experiments())
    if (e.name == name) return e;
  std::string all;
  for (const auto& e : experiments()) all += (all.empty() ? "" : ", ") + e.name;
  throw ConfigError("unknown experiment '" + name + "' (available: " + all + ")");
}

inline Settings experiment_settings(const Experiment& e) {
  Settings s(experiment_schema());
  for (const auto& [k, v] : common_defaults()) s.set(k, v);
  for (const auto& [k, v] : e.defaults) s.set(k, v);
  return s;
}

struct RunResult {
  json summary;
  std::vector<ManifestEntry> manifest;
  std::vector<std::string> warnings;
  double seconds = 0.0;
};

// Clears `out`, runs the experiment, writes config.txt, summary.json and the
// manifest. Only the settings that shape artifacts go into the files.
inline RunResult run_experiment(const Experiment& e, const Settings& s) {
  const auto t0 = std::chrono::steady_clock::now();
  RunContext ctx;
  ctx.out = s.text("out");
  ctx.threads = s.size("threads");
  if (fs::exists(ctx.out) && !fs::is_directory(ctx.out)) throw Error(ctx.out.string() + " exists and is not a directory");
  fs::remove_all(ctx.out);
  ensure_dir(ctx.out);

  Settings shaped(experiment_schema());
  json settings_json = json::object();
  for (const auto& [k, v] : s.values())
    if (k != "out" && k != "threads") {
      shaped.set(k, v);
      settings_json[k] = v;
    }
  write_text(ctx.out / "config.txt", shaped.resolved());

  json metrics = e.run(s, ctx);
  std::sort(ctx.warnings.begin(), ctx.warnings.end());
  RunResult r;
  r.summary = {{"experiment", e.name}, {"target", e.target}, {"settings", settings_json}, {"metrics", metrics},
               {"warnings", ctx.warnings}};
  write_text(ctx.out / "summary.json", r.summary.dump(2) + "\n");
  r.manifest = write_manifest(ctx.out);
  r.warnings = ctx.warnings;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace derex
