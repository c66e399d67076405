#pragma once

// Analytic per-step costs of each gradient method and measured
// multiply-add counts from the instrumented kernels.
//
// Reports print FLOPs as 2 x multiply-adds; ratios do not depend on that.
// Readout work is never counted.

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "snap/cells.hpp"
#include "snap/engines.hpp"
#include "snap/pattern.hpp"
#include "snap/readout.hpp"

namespace snap {

struct AnalyticCost {
  double memory = 0.0;
  double time = 0.0;
};

// T: sequence length, k: units, p: parameter count, d: parameter density.
inline AnalyticCost analytic_cost(std::string_view engine, double T, double k, double p, double d) {
  if (!(d > 0.0 && d <= 1.0)) throw std::invalid_argument("density must lie in (0, 1]");
  if (T <= 0.0 || k <= 0.0 || p <= 0.0) throw std::invalid_argument("T, k and p must be positive");
  if (engine == "bptt") return {T * k + p, k * k + p};
  if (engine == "uoro") return {k + p, k * k + p};
  if (engine == "rtrl") return {k + k * p, k * k + k * k * p};
  if (engine == "sparse_bptt") return {T * k + d * p, d * (k * k + p)};
  if (engine == "rtrl_sparse") return {k + d * k * p, d * (k * k + d * k * k * p)};
  if (engine == "snap1") return {k + d * p, d * (k * k + p)};
  if (engine == "snap2") return {k + d * d * k * p, d * (k * k + d * d * k * k * p)};
  throw std::invalid_argument("no analytic cost for engine '" + std::string(engine) + "'");
}

struct CostConfig {
  Arch arch = Arch::vanilla;
  std::size_t units = 128;
  std::size_t inputs = 0;  // 0: same as units
  double sparsity = 0.75;
  std::uint64_t seed = 1;
  std::size_t steps = 4;
  std::vector<std::string> engines{"bptt", "snap1", "snap2", "rtrl_sparse"};

  std::size_t input_size() const { return inputs == 0 ? units : inputs; }
};

struct CostRow {
  std::string engine;
  Arch arch = Arch::vanilla;
  std::size_t units = 0;
  double param_sparsity = 0.0;
  std::optional<double> j_sparsity;
  double madds = 0.0;  // per step
  std::optional<double> ratio_vs_bptt;
  std::optional<double> ratio_vs_rtrl;
  std::size_t influence_scalars = 0;
  std::size_t tape_scalars = 0;
};

namespace detail {

inline std::vector<std::vector<double>> cost_inputs(std::size_t steps, std::size_t inputs, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> xs(steps, std::vector<double>(inputs));
  for (auto& x : xs)
    for (auto& v : x) v = normal(rng);
  return xs;
}

}  // namespace detail

// Runs `steps` steps with a loss at every step and frozen weights per engine,
// all on the same mask, parameters and inputs; madds are averaged per step.
inline std::vector<CostRow> measure_costs(const CostConfig& config) {
  Rng rng(config.seed);
  const CellShape shape{config.arch, config.units, config.input_size()};
  auto structure = make_structure(shape, config.sparsity, rng);
  auto cell = std::make_shared<const Cell>(structure);
  const auto params = init_params(structure, rng);
  const Readout readout(config.units, 0, 2, rng);
  const auto xs = detail::cost_inputs(config.steps, shape.inputs, rng);
  std::vector<int> targets(config.steps);
  std::bernoulli_distribution coin(0.5);
  for (auto& t : targets) t = coin(rng) ? 1 : 0;

  std::vector<CostRow> rows;
  for (const auto& name : config.engines) {
    auto spec = parse_engine(name);
    spec.seed = config.seed;
    auto ctx = make_context(spec, cell);
    auto engine = make_engine(ctx);
    const auto result = sequence_gradient(*engine, params, readout, xs, targets);
    CostRow row;
    row.engine = spec.name();
    row.arch = config.arch;
    row.units = config.units;
    row.param_sparsity = config.sparsity;
    row.madds = static_cast<double>(result.madds) / static_cast<double>(config.steps);
    if (ctx->influence_pattern) {
      row.j_sparsity = measure_sparsity(*ctx->influence_pattern);
      row.influence_scalars = ctx->influence_pattern->nnz();
    } else if (spec.kind == EngineKind::rtrl_dense) {
      row.j_sparsity = 0.0;
      row.influence_scalars = engine->accumulator_nnz();
    } else if (spec.kind == EngineKind::uoro) {
      row.influence_scalars = engine->accumulator_nnz();
    } else if (spec.kind == EngineKind::bptt) {
      row.tape_scalars = config.steps * cell->state_size();
    }
    rows.push_back(std::move(row));
  }

  auto find = [&](std::string_view name) -> const CostRow* {
    for (const auto& r : rows)
      if (r.engine == name) return &r;
    return nullptr;
  };
  const CostRow* bptt = find("bptt");
  const CostRow* rtrl = find("rtrl_sparse");
  if (!rtrl) rtrl = find("rtrl");
  const double bptt_madds = bptt ? bptt->madds : 0.0;
  const double rtrl_madds = rtrl ? rtrl->madds : 0.0;
  for (auto& r : rows) {
    if (bptt_madds > 0.0) r.ratio_vs_bptt = r.madds / bptt_madds;
    if (rtrl_madds > 0.0) r.ratio_vs_rtrl = r.madds / rtrl_madds;
  }
  return rows;
}

inline std::vector<CostRow> empirical_flops_table(const std::vector<CostConfig>& configs) {
  std::vector<CostRow> table;
  for (const auto& c : configs) {
    auto rows = measure_costs(c);
    table.insert(table.end(), rows.begin(), rows.end());
  }
  return table;
}

inline void write_cost_csv(std::ostream& os, const std::vector<CostRow>& rows) {
  auto opt = [&](const std::optional<double>& v) {
    if (v) os << *v;
  };
  os << "# madds are multiply-adds per step (1 madd = 2 FLOPs); ratio_vs_rtrl is against rtrl_sparse\n";
  os << "engine,arch,k,param_sparsity,j_sparsity,madds,ratio_vs_bptt,ratio_vs_rtrl\n";
  const auto old_precision = os.precision(10);
  for (const auto& r : rows) {
    os << r.engine << ',' << to_string(r.arch) << ',' << r.units << ',' << r.param_sparsity << ',';
    opt(r.j_sparsity);
    os << ',' << r.madds << ',';
    opt(r.ratio_vs_bptt);
    os << ',';
    opt(r.ratio_vs_rtrl);
    os << '\n';
  }
  os.precision(old_precision);
}

// Mean structural SnAp-n sparsity over mask seeds seed, seed+1, ...
inline double mean_snap_sparsity(Arch arch, std::size_t units, std::size_t inputs, double sparsity, std::size_t n,
                                 std::uint64_t seed, std::size_t seeds) {
  double total = 0.0;
  for (std::size_t i = 0; i < seeds; ++i) {
    Rng rng(seed + i);
    auto structure = make_structure(CellShape{arch, units, inputs}, sparsity, rng);
    const Cell cell(structure);
    total += measure_sparsity(n_step_pattern(*cell.d_pattern(), *cell.i_pattern(), n));
  }
  return total / static_cast<double>(seeds);
}

}  // namespace snap
