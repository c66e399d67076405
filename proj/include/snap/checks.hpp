#pragma once

// Gradient oracle suites on small random nets: BPTT against finite
// differences, RTRL against BPTT, SnAp at its fixpoint against sparse RTRL,
// estimator cosine ordering and the UORO mean.

#include <array>
#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "snap/cells.hpp"
#include "snap/engines.hpp"
#include "snap/pattern.hpp"
#include "snap/readout.hpp"

namespace snap {

struct Instance {
  StructurePtr structure;
  std::shared_ptr<const Cell> cell;
  CellParams params;
  Readout readout;
  std::vector<std::vector<double>> inputs;
  std::vector<int> targets;
};

struct InstanceSpec {
  Arch arch = Arch::vanilla;
  std::size_t units = 4;
  std::size_t inputs = 3;
  std::size_t steps = 8;
  double sparsity = 0.0;
  std::size_t classes = 3;
  double target_rate = 1.0;  // fraction of steps with a loss
};

inline Instance make_instance(const InstanceSpec& spec, Rng& rng) {
  Instance inst;
  inst.structure = make_structure(CellShape{spec.arch, spec.units, spec.inputs}, spec.sparsity, rng);
  inst.cell = std::make_shared<const Cell>(inst.structure);
  inst.params = init_params(inst.structure, rng);
  // Nonzero biases so gates sit away from their symmetric point.
  std::uniform_real_distribution<double> bias(-0.5, 0.5);
  for (std::size_t bi = 0; bi < inst.structure->blocks().size(); ++bi) {
    if (inst.structure->blocks()[bi].is_weight()) continue;
    for (auto col : inst.structure->index(bi).values) inst.params.values()[col] += bias(rng);
  }
  inst.readout = Readout(spec.units, 0, spec.classes, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(spec.classes) - 1);
  std::bernoulli_distribution has_target(spec.target_rate);
  inst.inputs.assign(spec.steps, std::vector<double>(spec.inputs));
  inst.targets.assign(spec.steps, -1);
  for (std::size_t t = 0; t < spec.steps; ++t) {
    for (auto& v : inst.inputs[t]) v = normal(rng);
    if (has_target(rng) || t + 1 == spec.steps) inst.targets[t] = cls(rng);
  }
  return inst;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ||a - b|| / max(||b||, tiny)
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: lengths differ");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(diff) / std::max(l2_norm(b), 1e-300);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (na * nb);
}

inline SequenceGradient run_engine(const Instance& inst, const EngineSpec& spec) {
  auto engine = make_engine(spec, inst.cell);
  return sequence_gradient(*engine, inst.params, inst.readout, inst.inputs, inst.targets);
}

// Central differences of the total sequence loss, core parameters then
// readout parameters.
inline std::vector<double> finite_difference_gradient(const Instance& inst, double eps) {
  CellParams params = inst.params;
  Readout readout = inst.readout;
  auto loss = [&] { return sequence_loss(*inst.cell, params, readout, inst.inputs, inst.targets); };
  std::vector<double> grad;
  auto probe = [&](std::span<double> values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + eps;
      const double up = loss();
      values[i] = keep - eps;
      const double down = loss();
      values[i] = keep;
      grad.push_back((up - down) / (2.0 * eps));
    }
  };
  probe(params.values());
  probe(readout.params());
  return grad;
}

struct OracleStats {
  std::size_t instances = 0;
  double worst = 0.0;
  bool passed = true;
};

inline InstanceSpec random_small_spec(Arch arch, Rng& rng) {
  std::uniform_int_distribution<std::size_t> units(2, 8);
  std::uniform_int_distribution<std::size_t> steps(4, 16);
  std::uniform_int_distribution<int> sparse(0, 2);
  InstanceSpec spec;
  spec.arch = arch;
  spec.units = units(rng);
  spec.steps = steps(rng);
  spec.sparsity = std::array<double, 3>{0.0, 0.5, 0.75}[static_cast<std::size_t>(sparse(rng))];
  spec.target_rate = 0.7;
  return spec;
}

// Summed dense-RTRL per-step gradients against the BPTT gradient.
inline OracleStats check_rtrl_matches_bptt(Arch arch, std::size_t instances, std::uint64_t seed, double tol) {
  Rng rng(seed);
  OracleStats stats;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto inst = make_instance(random_small_spec(arch, rng), rng);
    const auto bptt = run_engine(inst, {EngineKind::bptt});
    const auto rtrl = run_engine(inst, {EngineKind::rtrl_dense});
    const double err = std::max(relative_error(rtrl.core, bptt.core), relative_error(rtrl.readout, bptt.readout));
    stats.worst = std::max(stats.worst, err);
    ++stats.instances;
  }
  stats.passed = stats.worst <= tol;
  return stats;
}

inline OracleStats check_bptt_matches_fd(Arch arch, std::size_t instances, std::uint64_t seed, double eps,
                                         double tol) {
  Rng rng(seed);
  OracleStats stats;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto inst = make_instance(random_small_spec(arch, rng), rng);
    const auto bptt = run_engine(inst, {EngineKind::bptt});
    std::vector<double> analytic = bptt.core;
    analytic.insert(analytic.end(), bptt.readout.begin(), bptt.readout.end());
    const auto fd = finite_difference_gradient(inst, eps);
    stats.worst = std::max(stats.worst, relative_error(analytic, fd));
    ++stats.instances;
  }
  stats.passed = stats.worst <= tol;
  return stats;
}

// SnAp at n = n_star against rtrl_sparse: per-step core gradients must be
// bitwise equal. Returns the number of differing values in `worst`.
inline OracleStats check_snap_fixpoint_bitwise(Arch arch, std::size_t instances, std::uint64_t seed) {
  Rng rng(seed);
  OracleStats stats;
  for (std::size_t i = 0; i < instances; ++i) {
    auto spec = random_small_spec(arch, rng);
    spec.sparsity = 0.75;
    const auto inst = make_instance(spec, rng);
    const auto fix = pattern_fixpoint(*inst.cell->d_pattern(), *inst.cell->i_pattern());
    auto snap = make_engine({EngineKind::snap, fix.n_star}, inst.cell);
    auto exact = make_engine({EngineKind::rtrl_sparse}, inst.cell);
    snap->reset(CellState::zeros(inst.cell->state_size()));
    exact->reset(CellState::zeros(inst.cell->state_size()));
    std::size_t mismatches = 0;
    for (std::size_t t = 0; t < inst.inputs.size(); ++t) {
      GradientBuffer ga(inst.params.values().size(), inst.readout.param_count());
      GradientBuffer gb(inst.params.values().size(), inst.readout.param_count());
      snap->step(inst.params, inst.readout, inst.inputs[t], inst.targets[t], ga);
      exact->step(inst.params, inst.readout, inst.inputs[t], inst.targets[t], gb);
      for (std::size_t c = 0; c < ga.core.size(); ++c)
        if (std::bit_cast<std::uint64_t>(ga.core[c]) != std::bit_cast<std::uint64_t>(gb.core[c])) ++mismatches;
    }
    stats.worst = std::max(stats.worst, static_cast<double>(mismatches));
    ++stats.instances;
  }
  stats.passed = stats.worst == 0.0;
  return stats;
}

// Dense cell: SnAp-2 against dense RTRL on every column.
inline OracleStats check_dense_snap2_matches_rtrl(Arch arch, std::size_t instances, std::uint64_t seed, double tol) {
  Rng rng(seed);
  OracleStats stats;
  for (std::size_t i = 0; i < instances; ++i) {
    auto spec = random_small_spec(arch, rng);
    spec.sparsity = 0.0;
    const auto inst = make_instance(spec, rng);
    const auto snap2 = run_engine(inst, {EngineKind::snap, 2});
    const auto rtrl = run_engine(inst, {EngineKind::rtrl_dense});
    stats.worst = std::max(stats.worst, relative_error(snap2.core, rtrl.core));
    ++stats.instances;
  }
  stats.passed = stats.worst <= tol;
  return stats;
}

struct CosineOrdering {
  std::vector<std::string> engines;
  std::vector<double> mean_cosine;
  std::size_t instances = 0;
  bool passed = true;
};

// Mean cosine similarity to the BPTT gradient of the core parameters, per
// engine, over frozen-weight instances. Ordering must be non-decreasing
// along `engines` up to `slack`.
inline CosineOrdering check_cosine_ordering(const InstanceSpec& base, const std::vector<std::string>& engines,
                                            std::size_t instances, std::uint64_t seed, double slack) {
  Rng rng(seed);
  CosineOrdering out;
  out.engines = engines;
  out.mean_cosine.assign(engines.size(), 0.0);
  for (std::size_t i = 0; i < instances; ++i) {
    const auto inst = make_instance(base, rng);
    const auto truth = run_engine(inst, {EngineKind::bptt});
    for (std::size_t e = 0; e < engines.size(); ++e) {
      const auto g = run_engine(inst, parse_engine(engines[e]));
      out.mean_cosine[e] += cosine(g.core, truth.core);
    }
    ++out.instances;
  }
  for (auto& c : out.mean_cosine) c /= static_cast<double>(instances);
  for (std::size_t e = 1; e < engines.size(); ++e)
    if (out.mean_cosine[e] < out.mean_cosine[e - 1] - slack) out.passed = false;
  return out;
}

struct UoroCheck {
  std::size_t draws = 0;
  std::size_t coordinates = 0;
  std::size_t outside = 0;       // coordinates beyond the z bound
  double worst_z = 0.0;          // max |mean - truth| / standard error
  bool passed = true;
};

inline UoroCheck check_uoro_unbiased(const Instance& inst, std::size_t draws, std::uint64_t seed, double z_bound) {
  const auto truth = run_engine(inst, {EngineKind::bptt});
  const std::size_t p = truth.core.size();
  std::vector<double> sum(p, 0.0), sum_sq(p, 0.0);
  for (std::size_t d = 0; d < draws; ++d) {
    const auto g = run_engine(inst, {EngineKind::uoro, 1, seed + d});
    for (std::size_t c = 0; c < p; ++c) {
      sum[c] += g.core[c];
      sum_sq[c] += g.core[c] * g.core[c];
    }
  }
  UoroCheck out;
  out.draws = draws;
  out.coordinates = p;
  const double n = static_cast<double>(draws);
  for (std::size_t c = 0; c < p; ++c) {
    const double mean = sum[c] / n;
    const double var = std::max(0.0, (sum_sq[c] - n * mean * mean) / (n - 1.0));
    const double se = std::sqrt(var / n);
    const double diff = std::abs(mean - truth.core[c]);
    const double z = se > 0.0 ? diff / se : (diff <= 1e-12 ? 0.0 : std::numeric_limits<double>::infinity());
    out.worst_z = std::max(out.worst_z, z);
    if (z > z_bound) ++out.outside;
  }
  out.passed = out.outside == 0;
  return out;
}

}  // namespace snap
