#include <CLI11.hpp>

#include <iostream>

#include "derex/experiments.hpp"

int main(int argc, char** argv) {
  using namespace derex;
  CLI::App app{"Spectral representation experiments on four rooms"};
  std::string name, config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
  std::vector<std::string> sets;
  std::string names;
  for (const auto& e : experiments()) names += (names.empty() ? "" : ", ") + e.name;
  app.add_option("experiment", name, "one of: " + names)->required();
  app.add_option("--config", config, "settings file (key = value per line)")->required();
  app.add_option("--seed", seed, "run a single seed (overrides `seeds`)");
  app.add_option("--out", out, "output directory (replaced)");
  app.add_option("--threads", threads, "worker threads");
  app.add_option("--set", sets, "key=value override, repeatable")->take_all();
  CLI11_PARSE(app, argc, argv);

  try {
    const Experiment& exp = find_experiment(name);
    Settings s = experiment_settings(exp);
    s.load_file(config);
    for (const auto& kv : sets) s.set_assignment(kv);
    if (seed) s.set("seeds", std::to_string(*seed));
    if (out) s.set("out", *out);
    if (threads) s.set("threads", std::to_string(*threads));

    const RunResult r = run_experiment(exp, s);
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << r.summary["metrics"].dump(2) << "\n";
    std::cout << "wrote " << r.manifest.size() << " files to " << s.text("out") << " in " << format_number(r.seconds)
              << " s\n";
    if (exp.name == "verify" && !r.summary["metrics"]["all_pass"].get<bool>()) return 1;
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
