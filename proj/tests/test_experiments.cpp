#include <gtest/gtest.h>

#include <random>

#include "derex/experiments.hpp"

using namespace derex;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("derex_exp_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Small budgets so each experiment finishes in a few seconds.
const std::map<std::string, std::vector<std::string>> kSmall{
    {"tabular", {"seeds=0,1", "n=3000"}},
    {"fa", {"seeds=0", "n=3000", "k=4", "steps=100"}},
    {"pomdp_probe",
     {"seeds=0", "p=0,0.5", "sequences=30", "test_sequences=8", "length=8", "steps=60", "probe_iters=100",
      "log_every=20", "w_horizon=2"}},
    {"baseline_compare",
     {"seeds=0", "p=0", "sequences=30", "test_sequences=8", "length=8", "steps=60", "probe_iters=100", "log_every=20"}},
    {"explore", {"seeds=0,1", "episodes=5", "lambda_b=0,0.1"}},
};

Settings small_settings(const std::string& name, const fs::path& out, std::size_t threads) {
  Settings s = experiment_settings(find_experiment(name));
  for (const auto& kv : kSmall.at(name)) s.set_assignment(kv);
  s.set("out", out.string());
  s.set("threads", std::to_string(threads));
  return s;
}

std::string manifest_text(const fs::path& dir) { return read_file(dir / kManifestName); }

}  // namespace

TEST(Experiments, UnknownExperimentListsChoices) {
  try {
    find_experiment("tabular_maps");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("tabular"), std::string::npos);
  }
}

TEST(Experiments, DefaultsAreValidForEveryExperiment) {
  for (const auto& e : experiments()) {
    const Settings s = experiment_settings(e);
    for (const auto& f : s.schema()) EXPECT_TRUE(s.has(f.name)) << e.name << " lacks " << f.name;
  }
}

TEST(Experiments, TabularEmitsMapsScatterAndTables) {
  TempDir tmp;
  const auto r = run_experiment(find_experiment("tabular"), small_settings("tabular", tmp.path / "o", 1));
  const fs::path seed0 = tmp.path / "o" / "seed_0";
  for (const char* f : {"visitation.pgm", "visitation.ppm", "bonus_log10.pgm", "bonus_log10.ppm",
                        "representation_scatter.ppm", "representation.csv", "bonus.csv", "singular_values.csv"})
    EXPECT_TRUE(fs::exists(seed0 / f)) << f;
  const std::string rep = read_file(seed0 / "representation.csv");
  EXPECT_EQ(rep.substr(0, rep.find('\n')), "cell,row,col,visits,u_1,u_2");
  const Graymap g = read_graymap(seed0 / "visitation.pgm");
  EXPECT_EQ(g.width, kGridSize * 16u);
  // Every file in the manifest, and nothing else.
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(tmp.path / "o")) files += e.is_regular_file();
  EXPECT_EQ(r.manifest.size() + 1, files);
}

TEST(Experiments, SummaryRecordsTargetAndSettings) {
  TempDir tmp;
  run_experiment(find_experiment("tabular"), small_settings("tabular", tmp.path / "o", 1));
  const json j = json::parse(read_file(tmp.path / "o" / "summary.json"));
  EXPECT_EQ(j["experiment"], "tabular");
  EXPECT_FALSE(j["target"].get<std::string>().empty());
  EXPECT_EQ(j["settings"]["n"], "3000");
  EXPECT_FALSE(j["settings"].contains("out"));
  EXPECT_FALSE(j["settings"].contains("threads"));
  EXPECT_TRUE(j["metrics"].contains("median_spearman_log_visits_log_bonus"));
  const std::string cfg = read_file(tmp.path / "o" / "config.txt");
  EXPECT_NE(cfg.find("n = 3000\n"), std::string::npos);
  EXPECT_EQ(cfg.find("out ="), std::string::npos);
}

// Same settings into two directories with different thread counts: identical manifests.
TEST(Experiments, RerunsAreByteIdentical) {
  for (const auto& [name, _] : kSmall) {
    TempDir tmp;
    const auto& e = find_experiment(name);
    run_experiment(e, small_settings(name, tmp.path / "a", 1));
    run_experiment(e, small_settings(name, tmp.path / "b", 3));
    EXPECT_EQ(manifest_text(tmp.path / "a"), manifest_text(tmp.path / "b")) << name;
  }
}

TEST(Experiments, DifferentSeedsGiveDifferentArtifacts) {
  TempDir tmp;
  const auto& e = find_experiment("fa");
  Settings a = small_settings("fa", tmp.path / "a", 1), b = small_settings("fa", tmp.path / "b", 1);
  b.set("seeds", "1");
  run_experiment(e, a);
  run_experiment(e, b);
  EXPECT_NE(manifest_text(tmp.path / "a"), manifest_text(tmp.path / "b"));
}

TEST(Experiments, PomdpProbeWritesMetricsAndExactW) {
  TempDir tmp;
  const auto r = run_experiment(find_experiment("pomdp_probe"), small_settings("pomdp_probe", tmp.path / "o", 2));
  const std::string metrics = read_file(tmp.path / "o" / "probe_metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "p,seed,accuracy,top3,majority");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(tmp.path / "o" / "p_0.5" / "seed_0" / "belief.csv"));
  EXPECT_EQ(r.summary["metrics"]["tiny_pomdp"]["rank_rel_1e-8"], 3);
}

TEST(Experiments, BaselineCompareSharesDataAcrossObjectives) {
  TempDir tmp;
  const auto r =
      run_experiment(find_experiment("baseline_compare"), small_settings("baseline_compare", tmp.path / "o", 1));
  const auto& protocol = r.summary["metrics"]["protocol"];
  ASSERT_EQ(protocol.size(), 1u);
  EXPECT_TRUE(protocol[0]["identical"].get<bool>());
  EXPECT_EQ(protocol[0]["data_sha256"].get<std::string>().size(), 128u);
  const std::string cmp = read_file(tmp.path / "o" / "compare.csv");
  EXPECT_NE(cmp.find("\nderex,0,0,"), std::string::npos);
  EXPECT_NE(cmp.find("\nlaplacian,0,0,"), std::string::npos);
}

TEST(Experiments, ExploreRunsBaselineOncePerSeed) {
  TempDir tmp;
  const auto r = run_experiment(find_experiment("explore"), small_settings("explore", tmp.path / "o", 2));
  const std::string csv = read_file(tmp.path / "o" / "results.csv");
  // header + (baseline + one bonus arm) x 2 seeds
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(r.summary["metrics"]["arms"].size(), 2u);
}

TEST(Experiments, ZeroRankRejectedWhereFixedRankNeeded) {
  TempDir tmp;
  Settings s = small_settings("tabular", tmp.path / "o", 1);
  s.set("k", "0");
  EXPECT_THROW(run_experiment(find_experiment("tabular"), s), ConfigError);
}
