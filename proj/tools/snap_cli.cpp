// Command-line front end: run, sweep, costs, bias, gradcheck.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "snap/snap.hpp"

namespace {

using namespace snap;

// One string option per RunConfig key; applied after parsing so that flags
// override the config file and the file overrides defaults.
struct RunOptions {
  std::map<std::string, std::string> values;

  void add_to(CLI::App& app) {
    for (const auto& key : config_keys()) {
      if (key == "seed" || key == "out") continue;
      app.add_option("--" + key, values[key], "run config: " + key);
    }
  }

  RunConfig build(CLI::App& app, const std::string& config_file, std::uint64_t seed, const std::string& out) {
    RunConfig config = config_file.empty() ? RunConfig{} : load_config(config_file);
    for (const auto& [key, value] : values)
      if (app.count("--" + key) > 0) set_config_value(config, key, value);
    if (app.count("--seed") > 0) config.seed = seed;
    if (app.count("--out") > 0) config.out = out;
    return config;
  }
};

void print_summary(const RunConfig& config, const RunSummary& summary) {
  std::cout << kSummaryHeader << '\n' << summary_csv_row(config, summary) << '\n';
  if (summary.status != "ok") std::cerr << "run " << summary.status << ": " << summary.message << '\n';
}

int gradcheck(std::size_t instances, std::uint64_t seed) {
  bool ok = true;
  auto line = [&](const std::string& name, bool passed, const std::string& detail) {
    ok = ok && passed;
    std::cout << (passed ? "PASS " : "FAIL ") << name << "  " << detail << '\n';
  };
  for (auto arch : {Arch::vanilla, Arch::gru, Arch::lstm}) {
    const auto a = to_string(arch);
    auto r1 = check_bptt_matches_fd(arch, instances, seed, 1e-6, 1e-5);
    line(a + " bptt vs finite differences", r1.passed, "worst rel err " + format_real(r1.worst));
    auto r2 = check_rtrl_matches_bptt(arch, instances, seed + 1, 1e-8);
    line(a + " rtrl vs bptt", r2.passed, "worst rel err " + format_real(r2.worst));
    auto r3 = check_snap_fixpoint_bitwise(arch, instances, seed + 2);
    line(a + " snap(n_star) vs rtrl_sparse", r3.passed, "mismatching values " + format_real(r3.worst));
    auto r4 = check_dense_snap2_matches_rtrl(arch, instances, seed + 3, 1e-10);
    line(a + " dense snap2 vs rtrl", r4.passed, "worst rel err " + format_real(r4.worst));
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse n-step approximation to real-time recurrent learning"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  std::string out;
  std::string config_file;
  auto common = [&](CLI::App* sub, bool run_config) {
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--out", out, "output path");
    if (run_config) {
      sub->add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    } else {
      sub->set_config("--config", "", "key = value config file");
    }
  };

  auto* run = app.add_subcommand("run", "train one configuration");
  RunOptions run_options;
  run_options.add_to(*run);
  common(run, true);

  auto* sweep = app.add_subcommand("sweep", "grid over learning rates and seeds");
  RunOptions sweep_options;
  sweep_options.add_to(*sweep);
  common(sweep, true);
  std::vector<double> lrs = default_learning_rates();
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t jobs = 1;
  sweep->add_option("--lrs", lrs, "learning rates");
  sweep->add_option("--seeds", seeds, "seeds");
  sweep->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);

  auto* costs = app.add_subcommand("costs", "analytic and measured per-step costs");
  common(costs, false);
  CostConfig cost;
  std::string cost_arch = "vanilla";
  std::string engines_csv;
  costs->add_option("--arch", cost_arch, "vanilla | gru | lstm");
  costs->add_option("--units", cost.units, "hidden units");
  costs->add_option("--inputs", cost.inputs, "input size (0: same as units)");
  costs->add_option("--sparsity", cost.sparsity, "parameter sparsity");
  costs->add_option("--steps", cost.steps, "steps measured")->check(CLI::PositiveNumber);
  costs->add_option("--engines", cost.engines, "engines to measure")->delimiter(',');
  double cost_T = 128.0;
  costs->add_option("--T", cost_T, "sequence length for the analytic memory column");

  auto* bias = app.add_subcommand("bias", "influence bias analysis on fixed-length copy");
  common(bias, false);
  BiasConfig bias_config;
  std::string pattern_out;
  bias->add_option("--units", bias_config.units, "GRU units");
  bias->add_option("--sparsity", bias_config.sparsity, "parameter sparsity");
  bias->add_option("--length", bias_config.length, "copy target length");
  bias->add_option("--batch", bias_config.batch, "training batch size");
  bias->add_option("--lr", bias_config.lr, "learning rate");
  bias->add_option("--checkpoints", bias_config.checkpoints, "training steps to analyze")->delimiter(',');
  bias->add_option("--pattern-out", pattern_out, "directory for SnAp-1/SnAp-2 pattern exports");

  auto* check = app.add_subcommand("gradcheck", "gradient oracle suites on small nets");
  common(check, false);
  std::size_t instances = 20;
  check->add_option("--instances", instances, "random instances per suite")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (run->parsed()) {
      const auto config = run_options.build(*run, config_file, seed, out);
      const auto summary = run_experiment(config);
      print_summary(config, summary);
      return summary.status == "ok" ? 0 : 2;
    }
    if (sweep->parsed()) {
      const auto config = sweep_options.build(*sweep, config_file, seed, out);
      const auto result = run_sweep(config, lrs, seeds, jobs);
      std::cout << "lr,runs,mean_final_L,min_final_L,max_final_L,mean_final_bpc,mean_valid_bpc,best\n";
      for (const auto& a : result.aggregates) {
        std::cout << format_real(a.lr) << ',' << a.runs << ',' << format_real(a.mean_final_length) << ','
                  << a.min_final_length << ',' << a.max_final_length << ',' << format_real(a.mean_final_bpc) << ','
                  << (a.mean_valid_bpc ? format_real(*a.mean_valid_bpc) : "") << ',' << (a.best ? 1 : 0) << '\n';
      }
      return 0;
    }
    if (costs->parsed()) {
      cost.arch = parse_arch(cost_arch);
      cost.seed = seed;
      const auto rows = measure_costs(cost);
      std::ofstream file;
      if (!out.empty()) {
        file.open(out);
        if (!file) throw std::runtime_error("cannot write " + out);
      }
      std::ostream& os = out.empty() ? std::cout : file;
      write_cost_csv(os, rows);
      const CellShape shape{cost.arch, cost.units, cost.input_size()};
      const double p = static_cast<double>(dense_param_count(shape));
      const double d = 1.0 - cost.sparsity;
      const double k = static_cast<double>(shape.state_size());
      os << "# analytic: engine,memory,time (T=" << cost_T << ", k=" << k << ", p=" << p << ", d=" << d << ")\n";
      for (const char* e : {"bptt", "sparse_bptt", "uoro", "rtrl", "rtrl_sparse", "snap1", "snap2"}) {
        const auto a = analytic_cost(e, cost_T, k, p, d);
        os << "# " << e << ',' << format_real(a.memory) << ',' << format_real(a.time) << '\n';
      }
      return 0;
    }
    if (bias->parsed()) {
      bias_config.seed = seed;
      bias_config.out = out;
      const auto rows = analyze_bias(bias_config);
      std::cout << "step,entries,snap1_mean_kept,snap1_mass,snap2_mean_kept,snap2_mass\n";
      for (const auto& r : rows) {
        std::cout << r.step << ',' << r.entries << ',' << format_real(r.snap1_mean_kept) << ','
                  << format_real(r.snap1_mass) << ',' << format_real(r.snap2_mean_kept) << ','
                  << format_real(r.snap2_mass) << '\n';
      }
      if (!pattern_out.empty()) {
        Rng rng(seed);
        auto structure = make_structure(CellShape{Arch::gru, bias_config.units, kCopyChannels}, bias_config.sparsity, rng);
        const Cell cell(structure);
        std::filesystem::create_directories(pattern_out);
        std::ofstream p1(std::filesystem::path(pattern_out) / "snap1.txt");
        write_pattern(p1, *cell.i_pattern());
        std::ofstream p2(std::filesystem::path(pattern_out) / "snap2.txt");
        write_pattern(p2, n_step_pattern(*cell.d_pattern(), *cell.i_pattern(), 2));
      }
      return 0;
    }
    if (check->parsed()) return gradcheck(instances, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
