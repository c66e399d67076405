// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion in the selected group fails.
//
//   structural  gradient oracles, SnAp convergence, bias ordering, UORO mean,
//               Jacobian sparsity, cost ratios, influence bias analysis
//   online      fully online copy-task curriculum comparison (about 30 min)
//   pruning     constant-budget pruning on the byte corpus (about 25 min)

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "snap/snap.hpp"

#ifndef SNAP_DATA_DIR
#define SNAP_DATA_DIR "data"
#endif

namespace {

using namespace snap;

const std::vector<Arch> kArchs{Arch::vanilla, Arch::gru, Arch::lstm};

struct Report {
  int failures = 0;

  void line(int id, const std::string& name, bool passed, const std::string& detail) {
    if (!passed) ++failures;
    std::cout << (passed ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << detail << std::endl;
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

void gradient_oracles(Report& report) {
  bool ok = true;
  std::ostringstream detail;
  for (auto arch : kArchs) {
    const auto rtrl = check_rtrl_matches_bptt(arch, 20, 101, 1e-8);
    const auto fd = check_bptt_matches_fd(arch, 20, 202, 1e-6, 1e-5);
    ok = ok && rtrl.passed && fd.passed;
    detail << to_string(arch) << " rtrl-vs-bptt " << fmt(rtrl.worst, 3) << " bptt-vs-fd " << fmt(fd.worst, 3) << "; ";
  }
  detail << "bounds 1e-8 / 1e-5 over 20 instances each";
  report.line(1, "gradient oracle equivalence", ok, detail.str());
}

void snap_convergence(Report& report) {
  bool ok = true;
  std::ostringstream detail;
  for (auto arch : kArchs) {
    const auto fix = check_snap_fixpoint_bitwise(arch, 20, 303);
    const auto dense = check_dense_snap2_matches_rtrl(arch, 20, 404, 1e-10);
    ok = ok && fix.passed && dense.passed;
    detail << to_string(arch) << " mismatched values at n* " << fix.worst << ", dense snap2 rel err "
           << fmt(dense.worst, 3) << "; ";
  }
  detail << "bitwise and 1e-10";
  report.line(2, "SnAp converges to RTRL", ok, detail.str());
}

void bias_ordering(Report& report) {
  const std::vector<std::string> engines{"rflo", "snap1", "snap2", "snap3", "rtrl_sparse"};
  bool ok = true;
  std::ostringstream detail;
  for (auto arch : kArchs) {
    InstanceSpec spec;
    spec.arch = arch;
    spec.units = 8;
    spec.steps = 16;
    spec.sparsity = 0.75;
    spec.target_rate = 0.5;
    const auto r = check_cosine_ordering(spec, engines, 20, 7, 0.01);
    ok = ok && r.passed;
    detail << to_string(arch);
    for (std::size_t e = 0; e < engines.size(); ++e) detail << ' ' << engines[e] << '=' << fmt(r.mean_cosine[e]);
    detail << "; ";
  }
  detail << "slack 0.01, 20 instances";
  report.line(3, "bias ordering", ok, detail.str());
}

void uoro_mean(Report& report) {
  Rng rng(11);
  InstanceSpec spec;
  spec.arch = Arch::vanilla;
  spec.units = 4;
  spec.steps = 5;
  const auto inst = make_instance(spec, rng);
  const auto r = check_uoro_unbiased(inst, 10000, 1, 3.0);
  report.line(4, "UORO unbiasedness", r.passed,
              std::to_string(r.outside) + " of " + std::to_string(r.coordinates) +
                  " coordinates beyond 3 SE over 10000 draws, worst z " + fmt(r.worst_z, 3));
}

void jacobian_sparsity(Report& report) {
  const double vanilla = mean_snap_sparsity(Arch::vanilla, 128, 128, 0.75, 2, 1, 5);
  const double gru = mean_snap_sparsity(Arch::gru, 128, 128, 0.75, 2, 1, 5);
  const double lstm = mean_snap_sparsity(Arch::lstm, 128, 128, 0.75, 2, 1, 5);
  const bool ok = std::abs(vanilla - 0.83) <= 0.03 && std::abs(gru - 0.709) <= 0.03;
  report.line(5, "SnAp-2 Jacobian sparsity", ok,
              "vanilla " + fmt(vanilla) + " (target 0.83 +- 0.03), gru " + fmt(gru) +
                  " (target 0.709 +- 0.03), lstm " + fmt(lstm) + " (reported only)");
}

void cost_ratios(Report& report) {
  CostConfig config;
  config.arch = Arch::vanilla;
  config.units = 128;
  config.sparsity = 0.75;
  config.engines = {"bptt", "snap1", "snap2", "rtrl_sparse", "rtrl"};
  const auto rows = measure_costs(config);
  std::map<std::string, double> madds;
  for (const auto& r : rows) madds[r.engine] = r.madds;
  const double snap2 = madds["snap2"] / madds["bptt"];
  const double sparse = madds["rtrl_sparse"] / madds["rtrl"];
  const double d2 = 0.25 * 0.25;
  const bool ok_snap2 = std::abs(snap2 - 349.0) <= 0.15 * 349.0;
  const bool ok_sparse = sparse >= d2 / 2.0 && sparse <= d2 * 2.0;
  report.line(6, "cost ratios", ok_snap2 && ok_sparse,
              "snap2/bptt " + fmt(snap2) + " (target 349 +- 15%), rtrl_sparse/rtrl " + fmt(sparse) +
                  " (target within 2x of " + fmt(d2) + "), snap1/bptt " + fmt(madds["snap1"] / madds["bptt"]));
}

void bias_analysis(Report& report, const std::filesystem::path& out) {
  BiasConfig config;
  config.checkpoints = {100};
  config.out = (out / "bias").string();
  const auto rows = analyze_bias(config);
  const auto& r = rows.front();
  const bool ok = r.snap2_mass >= 0.8 && r.snap1_mass < r.snap2_mass;
  report.line(8, "influence bias analysis", ok,
              "step " + std::to_string(r.step) + ": snap2 kept mass " + fmt(r.snap2_mass) + " (>= 0.8), snap1 " +
                  fmt(r.snap1_mass) + " (< snap2)");
}

void online_learning(Report& report, const std::filesystem::path& out) {
  const std::vector<std::string> engines{"bptt", "rflo", "snap1", "snap2"};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::map<std::string, std::vector<std::size_t>> length;
  for (auto seed : seeds) {
    for (const auto& engine : engines) {
      RunConfig c;
      c.task = TaskKind::copy;
      c.arch = Arch::gru;
      c.units = 64;
      c.sparsity = 0.9;
      c.engine = engine;
      c.update_period = 1;
      c.batch = 16;
      c.lr = 1e-3;
      c.max_tokens = 2'000'000;
      c.seed = seed;
      c.log_interval = 200;
      c.out = (out / "online" / (engine + "_seed" + std::to_string(seed))).string();
      const auto s = run_experiment(c);
      length[engine].push_back(s.status == "ok" ? s.final_length : 0);
      std::cout << "  online " << engine << " seed " << seed << ": L " << s.final_length << " (" << s.status
                << ", " << s.tokens << " tokens)" << std::endl;
    }
  }
  int a = 0, c = 0;
  bool b = true;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    a += length["snap1"][i] > length["bptt"][i];
    b = b && length["snap2"][i] + 1 >= length["snap1"][i];
    c += length["snap1"][i] >= length["rflo"][i];
  }
  auto list = [&](const std::string& e) {
    std::string s;
    for (auto l : length[e]) s += (s.empty() ? "" : "/") + std::to_string(l);
    return e + " " + s;
  };
  report.line(7, "online copy curriculum", a >= 2 && b && c >= 2,
              "final L per seed: " + list("bptt") + ", " + list("rflo") + ", " + list("snap1") + ", " +
                  list("snap2") + "; snap1>bptt on " + std::to_string(a) + "/3, snap2>=snap1-1 on every seed " +
                  (b ? "yes" : "no") + ", snap1>=rflo on " + std::to_string(c) + "/3");
}

void pruning(Report& report, const std::filesystem::path& out, const std::string& corpus) {
  RunConfig base;
  base.task = TaskKind::bytelm;
  base.corpus = corpus;
  base.arch = Arch::gru;
  base.engine = "bptt";
  base.update_period = 0;
  base.batch = 8;
  base.crop = 32;
  base.readout_hidden = 64;
  base.lr = 1e-3;
  base.max_tokens = 0;
  base.max_steps = 50'000;
  base.valid_crops = 512;
  base.log_interval = 1000;
  base.eval_interval = 10'000;
  base.seed = 1;

  RunConfig dense = base;
  dense.units = 32;
  dense.out = (out / "pruning" / "base").string();
  RunConfig wide = base;
  wide.units = 64;
  wide.prune_sparsity = 0.75;
  wide.prune_interval = 1000;
  wide.prune_final_step = 25'000;
  wide.out = (out / "pruning" / "wide").string();

  const auto d = run_experiment(dense);
  std::cout << "  pruning base: valid bpc " << fmt(d.valid_bpc.value_or(NAN)) << ", " << d.nonzero_params
            << " nonzero core params" << std::endl;
  const auto w = run_experiment(wide);
  std::cout << "  pruning 2x/75%: valid bpc " << fmt(w.valid_bpc.value_or(NAN)) << ", " << w.nonzero_params
            << " nonzero core params" << std::endl;
  const bool ok = d.status == "ok" && w.status == "ok" && d.valid_bpc && w.valid_bpc &&
                  *w.valid_bpc <= *d.valid_bpc + 0.02;
  report.line(9, "pruning at constant recurrent budget", ok,
              "valid bpc base(32 dense) " + fmt(d.valid_bpc.value_or(NAN)) + ", 2x(64 pruned to 75%) " +
                  fmt(w.valid_bpc.value_or(NAN)) + " (must be <= base + 0.02) after 50000 steps");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string group = "structural";
  std::string out = "acceptance_out";
  std::string corpus = std::string(SNAP_DATA_DIR) + "/corpus.txt";
  app.add_option("--group", group, "structural | online | pruning | all")
      ->check(CLI::IsMember({"structural", "online", "pruning", "all"}));
  app.add_option("--out", out, "directory for run artifacts");
  app.add_option("--corpus", corpus, "byte corpus for the pruning group");
  CLI11_PARSE(app, argc, argv);

  Report report;
  const std::filesystem::path dir(out);
  try {
    if (group == "structural" || group == "all") {
      gradient_oracles(report);
      snap_convergence(report);
      bias_ordering(report);
      uoro_mean(report);
      jacobian_sparsity(report);
      cost_ratios(report);
      bias_analysis(report, dir);
    }
    if (group == "online" || group == "all") online_learning(report, dir);
    if (group == "pruning" || group == "all") pruning(report, dir, corpus);
  } catch (const std::exception& e) {
    std::cout << "FAIL error: " << e.what() << std::endl;
    return 2;
  }
  return report.failures == 0 ? 0 : 1;
}
