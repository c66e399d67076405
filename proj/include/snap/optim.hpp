#pragma once

// Parameter updates and gradual magnitude pruning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "snap/cells.hpp"
#include "snap/engines.hpp"

namespace snap {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t t = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  AdamState(std::size_t size, double lr) : learning_rate(lr), m(size, 0.0), v(size, 0.0) {}
};

inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size() || state.m.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment lengths differ");
  }
  if (!all_finite(grad)) throw NumericError("adam_step: non-finite gradient");
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

inline std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

// One optimizer over one parameter vector. Adam moments follow remap() when
// the compressed layout changes under pruning.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerKind kind, std::size_t size, double lr) : kind_(kind), lr_(lr), adam_(size, lr) {}

  void step(std::span<double> params, std::span<const double> grad) {
    if (kind_ == OptimizerKind::adam) {
      adam_step(adam_, params, grad);
      return;
    }
    if (params.size() != grad.size()) throw DimensionError("sgd: parameter and gradient lengths differ");
    if (!all_finite(grad)) throw NumericError("sgd: non-finite gradient");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grad[i];
  }

  // old_to_new[i] is the new index of old entry i, or -1 when dropped.
  void remap(std::span<const std::int64_t> old_to_new, std::size_t new_size) {
    if (kind_ != OptimizerKind::adam) return;
    std::vector<double> m(new_size, 0.0);
    std::vector<double> v(new_size, 0.0);
    for (std::size_t i = 0; i < old_to_new.size(); ++i) {
      if (old_to_new[i] < 0) continue;
      m[static_cast<std::size_t>(old_to_new[i])] = adam_.m[i];
      v[static_cast<std::size_t>(old_to_new[i])] = adam_.v[i];
    }
    adam_.m = std::move(m);
    adam_.v = std::move(v);
  }

  OptimizerKind kind() const { return kind_; }
  const AdamState& adam() const { return adam_; }

 private:
  OptimizerKind kind_ = OptimizerKind::adam;
  double lr_ = 1e-3;
  AdamState adam_;
};

// Gradual pruning: target sparsity s(t) = s_f (1 - (1 - t / t_f)^3), checked
// every `interval` steps, per weight matrix.
struct PruneSchedule {
  std::size_t interval = 1000;
  double final_sparsity = 0.0;
  std::size_t final_step = 350000;

  bool active() const { return final_sparsity > 0.0; }
  bool is_event(std::size_t step) const { return active() && interval > 0 && step > 0 && step % interval == 0; }

  double target(std::size_t step) const {
    if (!active()) return 0.0;
    if (final_step == 0 || step >= final_step) return final_sparsity;
    const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(final_step);
    return final_sparsity * (1.0 - frac * frac * frac);
  }
};

inline void validate_pruning(const EngineSpec& engine, const PruneSchedule& schedule) {
  if (schedule.active() && engine.compressed_influence()) {
    throw ConfigError("progressive pruning needs dense gradients (bptt); engine " + engine.name() +
                      " tracks a compressed influence matrix");
  }
}

struct PruneResult {
  CellParams params;
  std::vector<std::int64_t> old_to_new;
  bool changed = false;
};

// Masks the smallest-magnitude kept entries of each weight matrix until it
// reaches the schedule's sparsity at `step`. Ties go to the lower flat index.
// Masked entries never come back; biases are never pruned.
inline PruneResult prune_step(const PruneSchedule& schedule, std::size_t step, const CellParams& params) {
  const auto& s = params.structure();
  const double target = schedule.target(step);
  std::vector<std::uint8_t> keep(s.keep().begin(), s.keep().end());
  bool changed = false;
  for (std::size_t bi = 0; bi < s.blocks().size(); ++bi) {
    const auto& b = s.blocks()[bi];
    if (!b.is_weight()) continue;
    const auto& idx = s.index(bi);
    const std::size_t kept = idx.values.size();
    const auto want_masked = static_cast<std::size_t>(std::llround(target * static_cast<double>(b.size())));
    const std::size_t masked = b.size() - kept;
    if (want_masked <= masked) continue;
    std::size_t to_prune = std::min(want_masked - masked, kept);
    std::vector<std::uint32_t> cols(idx.values.begin(), idx.values.end());
    std::sort(cols.begin(), cols.end(), [&](std::uint32_t x, std::uint32_t y) {
      const double ax = std::abs(params.values()[x]);
      const double ay = std::abs(params.values()[y]);
      if (ax != ay) return ax < ay;
      return x < y;  // compressed order follows flat order
    });
    for (std::size_t i = 0; i < to_prune; ++i) keep[s.columns().flat_of(cols[i])] = 0;
    changed = changed || to_prune > 0;
  }
  PruneResult result;
  result.changed = changed;
  if (!changed) {
    result.params = params;
    result.old_to_new.resize(params.values().size());
    std::iota(result.old_to_new.begin(), result.old_to_new.end(), 0);
    return result;
  }
  auto structure = std::make_shared<const CellStructure>(s.shape(), std::move(keep));
  CellParams next(structure);
  result.old_to_new.assign(params.values().size(), -1);
  for (std::size_t c = 0; c < params.values().size(); ++c) {
    const auto col = structure->columns().column_of(s.columns().flat_of(c));
    result.old_to_new[c] = col;
    if (col >= 0) next.values()[static_cast<std::size_t>(col)] = params.values()[c];
  }
  result.params = std::move(next);
  return result;
}

}  // namespace snap
