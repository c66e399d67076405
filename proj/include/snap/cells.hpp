#pragma once

// Recurrent cells with analytic per-step Jacobians.
//
// Every supported cell is written as a set of linear maps
//   lin_m = Σ_b W_b · src_b + bias_m      (src is the input x or the hidden h)
// followed by an elementwise combination producing the next state. The
// elementwise part reports, per map m and state row block rb, the
// sensitivity ∂state'[rb, u] / ∂lin_m[u], plus a few elementwise (diagonal)
// state-to-state terms. From those two pieces the dynamics Jacobian D, the
// column-compressed immediate Jacobian Ĩ and the reverse-mode step all follow
// without per-architecture code.
//
//   Vanilla  h' = tanh(W_h h + W_x x + b)
//   GRU      z = σ(W_iz x + W_hz h + b_z), r = σ(W_ir x + W_hr h + b_r)
//            a = tanh(W_ia x + r ⊙ (W_ha h) + b_a), h' = (1 - z) ⊙ h + z ⊙ a
//   LSTM     state [h; c], gates i, f, o (σ) and g (tanh),
//            c' = f ⊙ c + i ⊙ g, h' = o ⊙ tanh(c')

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "snap/kernels.hpp"
#include "snap/pattern.hpp"

namespace snap {

using Rng = std::mt19937_64;

enum class Arch { vanilla, gru, lstm };

inline std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::vanilla: return "vanilla";
    case Arch::gru: return "gru";
    case Arch::lstm: return "lstm";
  }
  return "unknown";
}

inline Arch parse_arch(std::string_view name) {
  if (name == "vanilla" || name == "rnn") return Arch::vanilla;
  if (name == "gru") return Arch::gru;
  if (name == "lstm") return Arch::lstm;
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

enum class Source : std::uint8_t { input, hidden, bias };

struct BlockInfo {
  std::string name;
  Source source = Source::bias;
  std::size_t map = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t flat_offset = 0;

  std::size_t size() const { return rows * cols; }
  bool is_weight() const { return source != Source::bias; }
};

struct CellShape {
  Arch arch = Arch::vanilla;
  std::size_t units = 0;
  std::size_t inputs = 0;

  std::size_t row_blocks() const { return arch == Arch::lstm ? 2 : 1; }
  std::size_t state_size() const { return units * row_blocks(); }
  std::size_t maps() const { return arch == Arch::vanilla ? 1 : 4; }
};

namespace detail {

// Elementwise state-to-state terms: (row block, column block).
inline std::vector<std::pair<std::size_t, std::size_t>> diag_terms(Arch arch) {
  switch (arch) {
    case Arch::vanilla: return {};
    case Arch::gru: return {{0, 0}};
    case Arch::lstm: return {{1, 1}, {0, 1}};
  }
  return {};
}

// Whether lin_m can reach state row block rb within one step.
inline bool map_reaches(Arch arch, std::size_t map, std::size_t rb) {
  // The LSTM output gate only touches h.
  return !(arch == Arch::lstm && map == 2 && rb == 1);
}

inline std::vector<BlockInfo> make_blocks(const CellShape& shape) {
  const std::size_t k = shape.units;
  const std::size_t a = shape.inputs;
  std::vector<BlockInfo> blocks;
  auto add = [&](std::string name, Source source, std::size_t map) {
    const std::size_t cols = source == Source::input ? a : source == Source::hidden ? k : 1;
    const std::size_t offset = blocks.empty() ? 0 : blocks.back().flat_offset + blocks.back().size();
    blocks.push_back({std::move(name), source, map, k, cols, offset});
  };
  switch (shape.arch) {
    case Arch::vanilla:
      add("W_h", Source::hidden, 0);
      add("W_x", Source::input, 0);
      add("b", Source::bias, 0);
      break;
    case Arch::gru:
      add("W_iz", Source::input, 0);
      add("W_hz", Source::hidden, 0);
      add("b_z", Source::bias, 0);
      add("W_ir", Source::input, 1);
      add("W_hr", Source::hidden, 1);
      add("b_r", Source::bias, 1);
      add("W_ia", Source::input, 2);
      add("W_ha", Source::hidden, 3);
      add("b_a", Source::bias, 2);
      break;
    case Arch::lstm: {
      const std::array<const char*, 4> gates{"i", "f", "o", "g"};
      for (std::size_t m = 0; m < 4; ++m) {
        add(std::string("W_i") + gates[m], Source::input, m);
        add(std::string("W_h") + gates[m], Source::hidden, m);
        add(std::string("b_") + gates[m], Source::bias, m);
      }
      break;
    }
  }
  return blocks;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace detail

// Shape, mask and the index structures derived from them. Immutable; a new
// structure is built whenever the mask changes.
class CellStructure {
 public:
  struct BlockIndex {
    // Kept entries, row-major: row_ptr/cols; value = compressed parameter index.
    std::vector<std::size_t> row_ptr;
    std::vector<std::uint32_t> cols;
    std::vector<std::uint32_t> values;
    // Same entries grouped by column.
    std::vector<std::size_t> col_ptr;
    std::vector<std::uint32_t> col_rows;
    std::vector<std::uint32_t> col_values;
  };

  struct ColumnInfo {
    std::uint32_t block = 0;
    std::uint32_t unit = 0;
    std::uint32_t source_col = 0;
  };

  CellStructure(CellShape shape, std::vector<std::uint8_t> keep)
      : shape_(shape), blocks_(detail::make_blocks(shape)), keep_(std::move(keep)) {
    if (shape_.units == 0) throw std::invalid_argument("cell needs at least one unit");
    const std::size_t p = blocks_.back().flat_offset + blocks_.back().size();
    if (keep_.size() != p) throw DimensionError("mask length differs from parameter count");
    for (const auto& b : blocks_) {
      if (b.is_weight()) continue;
      for (std::size_t i = 0; i < b.size(); ++i) {
        if (!keep_[b.flat_offset + i]) throw std::invalid_argument("biases cannot be masked");
      }
    }
    columns_ = CompressedColumnMap(keep_);
    index_.resize(blocks_.size());
    column_info_.resize(columns_.compressed());
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
      const auto& b = blocks_[bi];
      auto& idx = index_[bi];
      idx.row_ptr.assign(b.rows + 1, 0);
      idx.col_ptr.assign(b.cols + 1, 0);
      for (std::size_t r = 0; r < b.rows; ++r) {
        for (std::size_t c = 0; c < b.cols; ++c) {
          const std::size_t flat = b.flat_offset + r * b.cols + c;
          if (!keep_[flat]) continue;
          const auto col = static_cast<std::uint32_t>(columns_.column_of(flat));
          idx.cols.push_back(static_cast<std::uint32_t>(c));
          idx.values.push_back(col);
          ++idx.row_ptr[r + 1];
          ++idx.col_ptr[c + 1];
          column_info_[col] = {static_cast<std::uint32_t>(bi), static_cast<std::uint32_t>(r),
                               static_cast<std::uint32_t>(c)};
        }
      }
      for (std::size_t r = 0; r < b.rows; ++r) idx.row_ptr[r + 1] += idx.row_ptr[r];
      for (std::size_t c = 0; c < b.cols; ++c) idx.col_ptr[c + 1] += idx.col_ptr[c];
      idx.col_rows.resize(idx.cols.size());
      idx.col_values.resize(idx.cols.size());
      std::vector<std::size_t> fill(idx.col_ptr.begin(), idx.col_ptr.end() - 1);
      for (std::size_t r = 0; r < b.rows; ++r) {
        for (std::size_t s = idx.row_ptr[r]; s < idx.row_ptr[r + 1]; ++s) {
          const std::size_t e = fill[idx.cols[s]]++;
          idx.col_rows[e] = static_cast<std::uint32_t>(r);
          idx.col_values[e] = idx.values[s];
        }
      }
    }
  }

  const CellShape& shape() const { return shape_; }
  Arch arch() const { return shape_.arch; }
  std::size_t units() const { return shape_.units; }
  std::size_t inputs() const { return shape_.inputs; }
  std::size_t state_size() const { return shape_.state_size(); }

  const std::vector<BlockInfo>& blocks() const { return blocks_; }
  const BlockIndex& index(std::size_t block) const { return index_[block]; }
  const ColumnInfo& column_info(std::size_t column) const { return column_info_[column]; }

  std::size_t block_index(std::string_view name) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      if (blocks_[i].name == name) return i;
    throw std::invalid_argument("no parameter block named '" + std::string(name) + "'");
  }

  std::span<const std::uint8_t> keep() const { return keep_; }
  const CompressedColumnMap& columns() const { return columns_; }
  std::size_t param_count() const { return columns_.total(); }
  std::size_t nonzero_param_count() const { return columns_.compressed(); }

  std::size_t flat_index(std::size_t block, std::size_t r, std::size_t c) const {
    const auto& b = blocks_.at(block);
    if (r >= b.rows || c >= b.cols) throw DimensionError("parameter index outside block " + b.name);
    return b.flat_offset + r * b.cols + c;
  }

  // Kept weight entries over all weight matrices.
  std::size_t weight_nnz() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      if (blocks_[i].is_weight()) n += index_[i].cols.size();
    return n;
  }

 private:
  CellShape shape_;
  std::vector<BlockInfo> blocks_;
  std::vector<std::uint8_t> keep_;
  CompressedColumnMap columns_;
  std::vector<BlockIndex> index_;
  std::vector<ColumnInfo> column_info_;
};

using StructurePtr = std::shared_ptr<const CellStructure>;

inline std::size_t dense_param_count(const CellShape& shape) {
  const auto blocks = detail::make_blocks(shape);
  return blocks.back().flat_offset + blocks.back().size();
}

inline std::vector<std::uint8_t> dense_mask(const CellShape& shape) {
  return std::vector<std::uint8_t>(dense_param_count(shape), 1);
}

// Uniform random mask per weight matrix at the given sparsity; each matrix
// keeps round((1 - s) * rows * cols) entries. Biases are always kept.
inline std::vector<std::uint8_t> random_mask(const CellShape& shape, double sparsity, Rng& rng) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw std::invalid_argument("sparsity must lie in [0, 1)");
  const auto blocks = detail::make_blocks(shape);
  std::vector<std::uint8_t> keep(blocks.back().flat_offset + blocks.back().size(), 1);
  for (const auto& b : blocks) {
    if (!b.is_weight() || b.size() == 0) continue;
    const auto n_keep = static_cast<std::size_t>(std::llround((1.0 - sparsity) * static_cast<double>(b.size())));
    std::vector<std::size_t> order(b.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Partial Fisher-Yates: the first n_keep slots are a uniform sample.
    for (std::size_t i = 0; i < n_keep && i + 1 < order.size(); ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
      std::swap(order[i], order[pick(rng)]);
    }
    for (std::size_t i = 0; i < b.size(); ++i) keep[b.flat_offset + i] = 0;
    for (std::size_t i = 0; i < n_keep; ++i) keep[b.flat_offset + order[i]] = 1;
  }
  return keep;
}

inline StructurePtr make_structure(const CellShape& shape, double sparsity, Rng& rng) {
  if (sparsity == 0.0) return std::make_shared<const CellStructure>(shape, dense_mask(shape));
  return std::make_shared<const CellStructure>(shape, random_mask(shape, sparsity, rng));
}

// Parameter values over the nonzero (unmasked) entries only.
class CellParams {
 public:
  CellParams() = default;
  explicit CellParams(StructurePtr structure)
      : structure_(std::move(structure)), values_(structure_->nonzero_param_count(), 0.0) {}
  CellParams(StructurePtr structure, std::vector<double> values)
      : structure_(std::move(structure)), values_(std::move(values)) {
    if (values_.size() != structure_->nonzero_param_count()) {
      throw DimensionError("CellParams: value count differs from nonzero parameter count");
    }
  }

  const CellStructure& structure() const { return *structure_; }
  const StructurePtr& structure_ptr() const { return structure_; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  double get(std::size_t block, std::size_t r, std::size_t c) const {
    const auto col = structure_->columns().column_of(structure_->flat_index(block, r, c));
    return col == CompressedColumnMap::kMasked ? 0.0 : values_[static_cast<std::size_t>(col)];
  }

  void set(std::size_t block, std::size_t r, std::size_t c, double v) {
    const auto col = structure_->columns().column_of(structure_->flat_index(block, r, c));
    if (col == CompressedColumnMap::kMasked) {
      throw PatternError("CellParams::set: entry (" + std::to_string(r) + ", " + std::to_string(c) + ") of " +
                         structure_->blocks()[block].name + " is masked");
    }
    values_[static_cast<std::size_t>(col)] = v;
  }

  void set(std::string_view block, std::size_t r, std::size_t c, double v) {
    set(structure_->block_index(block), r, c, v);
  }
  double get(std::string_view block, std::size_t r, std::size_t c) const {
    return get(structure_->block_index(block), r, c);
  }

  std::vector<double> flat() const { return structure_->columns().expand(values_); }

 private:
  StructurePtr structure_;
  std::vector<double> values_;
};

// Weights uniform in ±1/sqrt(fan_in) with the dense fan-in of the gate
// (inputs + units); biases zero except the LSTM forget gate at +1.
inline CellParams init_params(StructurePtr structure, Rng& rng) {
  CellParams params(structure);
  const auto& s = *structure;
  const double bound = 1.0 / std::sqrt(static_cast<double>(s.units() + s.inputs()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto values = params.values();
  for (std::size_t bi = 0; bi < s.blocks().size(); ++bi) {
    const auto& b = s.blocks()[bi];
    const auto& idx = s.index(bi);
    for (auto col : idx.values) {
      if (b.is_weight()) {
        values[col] = dist(rng);
      } else {
        values[col] = (s.arch() == Arch::lstm && b.name == "b_f") ? 1.0 : 0.0;
      }
    }
  }
  return params;
}

struct CellState {
  std::vector<double> values;

  static CellState zeros(std::size_t state_size) { return {std::vector<double>(state_size, 0.0)}; }
  std::span<const double> all() const { return values; }
};

// Intermediates of one forward step, enough for D, Ĩ and the reverse step.
struct StepCache {
  std::vector<double> prev;
  std::vector<double> input;
  // [x; h_prev; 1], the source of every Ĩ column.
  std::vector<double> src;
  std::vector<double> lin;
  // [sensitivities (maps * row_blocks * units); diagonal terms (n_diag * units)]
  std::vector<double> coef;
  std::vector<double> next;
};

struct CellStepOutput {
  CellState next_state;
  PatternedMatrix d;
  PatternedMatrix i_tilde;
};

// A cell bound to one structure: owns the structural Jacobian patterns and
// the contribution tables used to fill D and Ĩ each step.
class Cell {
 public:
  explicit Cell(StructurePtr structure) : structure_(std::move(structure)) { build_tables(); }

  const CellStructure& structure() const { return *structure_; }
  const StructurePtr& structure_ptr() const { return structure_; }
  std::size_t state_size() const { return structure_->state_size(); }
  std::size_t units() const { return structure_->units(); }

  const PatternPtr& d_pattern() const { return d_pattern_; }
  const PatternPtr& i_pattern() const { return i_pattern_; }
  std::size_t d_contributions() const { return d_coef_.size(); }

  void forward(const CellParams& params, std::span<const double> state, std::span<const double> x,
               StepCache& cache, OpCounter* counter = nullptr) const {
    const auto& s = *structure_;
    const std::size_t k = s.units();
    if (state.size() != s.state_size()) throw DimensionError("cell step: state has wrong length");
    if (x.size() != s.inputs()) throw DimensionError("cell step: input has wrong length");
    if (params.structure_ptr() != structure_ && params.values().size() != s.nonzero_param_count()) {
      throw DimensionError("cell step: parameters belong to a different structure");
    }
    cache.prev.assign(state.begin(), state.end());
    cache.input.assign(x.begin(), x.end());
    cache.src.assign(x.begin(), x.end());
    cache.src.insert(cache.src.end(), state.begin(), state.begin() + static_cast<std::ptrdiff_t>(k));
    cache.src.push_back(1.0);
    cache.lin.assign(s.shape().maps() * k, 0.0);
    auto w = params.values();
    std::uint64_t work = 0;
    for (std::size_t bi = 0; bi < s.blocks().size(); ++bi) {
      const auto& b = s.blocks()[bi];
      const auto& idx = s.index(bi);
      double* lin = cache.lin.data() + b.map * k;
      switch (b.source) {
        case Source::bias:
          for (std::size_t u = 0; u < k; ++u) lin[u] += w[idx.values[u]];
          break;
        case Source::hidden:
          for (std::size_t u = 0; u < k; ++u) {
            double acc = 0.0;
            for (std::size_t e = idx.row_ptr[u]; e < idx.row_ptr[u + 1]; ++e) acc += w[idx.values[e]] * state[idx.cols[e]];
            lin[u] += acc;
          }
          work += idx.cols.size();
          break;
        case Source::input:
          for (std::size_t j = 0; j < b.cols; ++j) {
            const double xj = x[j];
            if (xj == 0.0) continue;
            for (std::size_t e = idx.col_ptr[j]; e < idx.col_ptr[j + 1]; ++e) lin[idx.col_rows[e]] += w[idx.col_values[e]] * xj;
            work += idx.col_ptr[j + 1] - idx.col_ptr[j];
          }
          break;
      }
    }
    count(counter, work);
    if (!all_finite(cache.lin)) throw NumericError("non-finite value in pre-activations");
    combine(cache);
    if (!all_finite(cache.next)) throw NumericError("non-finite value in next state");
  }

  // Fills `d` (structural D pattern) from a forward cache.
  void dynamics(const CellParams& params, const StepCache& cache, PatternedMatrix& d,
                OpCounter* counter = nullptr) const {
    auto dv = d.values();
    auto w = params.values();
    const double* coef = cache.coef.data();
    for (std::size_t slot = 0; slot < dv.size(); ++slot) {
      double acc = 0.0;
      for (std::size_t e = d_offsets_[slot]; e < d_offsets_[slot + 1]; ++e) {
        const auto pi = d_param_[e];
        acc += pi == kNoParam ? coef[d_coef_[e]] : coef[d_coef_[e]] * w[pi];
      }
      dv[slot] = acc;
    }
    count(counter, d_coef_.size());
    if (!all_finite(dv)) throw NumericError("non-finite value in dynamics Jacobian D");
  }

  // Fills only the listed D slots; the others are left untouched.
  void dynamics(const CellParams& params, const StepCache& cache, PatternedMatrix& d,
                std::span<const std::uint32_t> slots, OpCounter* counter = nullptr) const {
    auto dv = d.values();
    auto w = params.values();
    const double* coef = cache.coef.data();
    std::uint64_t work = 0;
    for (const auto slot : slots) {
      double acc = 0.0;
      for (std::size_t e = d_offsets_[slot]; e < d_offsets_[slot + 1]; ++e) {
        const auto pi = d_param_[e];
        acc += pi == kNoParam ? coef[d_coef_[e]] : coef[d_coef_[e]] * w[pi];
      }
      work += d_offsets_[slot + 1] - d_offsets_[slot];
      if (!std::isfinite(acc)) throw NumericError("non-finite value in dynamics Jacobian D");
      dv[slot] = acc;
    }
    count(counter, work);
  }

  // Fills `i_tilde` (structural Ĩ pattern) from a forward cache.
  void immediate(const StepCache& cache, PatternedMatrix& i_tilde, OpCounter* counter = nullptr) const {
    auto iv = i_tilde.values();
    const double* coef = cache.coef.data();
    const double* src = cache.src.data();
    for (std::size_t slot = 0; slot < iv.size(); ++slot) iv[slot] = coef[i_coef_[slot]] * src[i_src_[slot]];
    count(counter, iv.size());
    if (!all_finite(iv)) throw NumericError("non-finite value in immediate Jacobian");
  }

  // Reverse step. Adds ∂L/∂θ̃ into `grad` and writes ∂L/∂state_{t-1} into
  // `delta_prev`, given ∂L/∂state_t in `delta`.
  void backward(const CellParams& params, const StepCache& cache, std::span<const double> delta,
                std::span<double> grad, std::span<double> delta_prev, OpCounter* counter = nullptr) const {
    const auto& s = *structure_;
    const std::size_t k = s.units();
    const std::size_t rbs = s.shape().row_blocks();
    const std::size_t maps = s.shape().maps();
    auto w = params.values();
    std::vector<double> dlin_buffer(maps * k, 0.0);
    for (std::size_t m = 0; m < maps; ++m)
      for (std::size_t rb = 0; rb < rbs; ++rb)
        for (std::size_t u = 0; u < k; ++u) dlin_buffer[m * k + u] += delta[rb * k + u] * cache.coef[(m * rbs + rb) * k + u];
    std::fill(delta_prev.begin(), delta_prev.end(), 0.0);
    const auto diags = detail::diag_terms(s.arch());
    const std::size_t diag_base = maps * rbs * k;
    for (std::size_t di = 0; di < diags.size(); ++di) {
      const auto [rb, cb] = diags[di];
      for (std::size_t u = 0; u < k; ++u) delta_prev[cb * k + u] += delta[rb * k + u] * cache.coef[diag_base + di * k + u];
    }
    std::uint64_t work = 0;
    for (std::size_t bi = 0; bi < s.blocks().size(); ++bi) {
      const auto& b = s.blocks()[bi];
      const auto& idx = s.index(bi);
      const double* dlin = dlin_buffer.data() + b.map * k;
      switch (b.source) {
        case Source::bias:
          for (std::size_t u = 0; u < k; ++u) grad[idx.values[u]] += dlin[u];
          break;
        case Source::hidden:
          for (std::size_t u = 0; u < k; ++u) {
            const double du = dlin[u];
            for (std::size_t e = idx.row_ptr[u]; e < idx.row_ptr[u + 1]; ++e) {
              grad[idx.values[e]] += du * cache.prev[idx.cols[e]];
              delta_prev[idx.cols[e]] += w[idx.values[e]] * du;
            }
          }
          work += 2 * idx.cols.size();
          break;
        case Source::input:
          for (std::size_t j = 0; j < b.cols; ++j) {
            const double xj = cache.input[j];
            if (xj == 0.0) continue;
            for (std::size_t e = idx.col_ptr[j]; e < idx.col_ptr[j + 1]; ++e) grad[idx.col_values[e]] += dlin[idx.col_rows[e]] * xj;
            work += idx.col_ptr[j + 1] - idx.col_ptr[j];
          }
          break;
      }
    }
    count(counter, work);
  }

  CellStepOutput step(const CellParams& params, const CellState& state, std::span<const double> x) const {
    StepCache cache;
    forward(params, state.values, x, cache);
    CellStepOutput out{CellState{cache.next}, PatternedMatrix(d_pattern_), PatternedMatrix(i_pattern_)};
    dynamics(params, cache, out.d);
    immediate(cache, out.i_tilde);
    return out;
  }

 private:
  static constexpr std::uint32_t kNoParam = 0xffffffffu;

  void combine(StepCache& cache) const {
    const auto& s = *structure_;
    const std::size_t k = s.units();
    const std::size_t rbs = s.shape().row_blocks();
    const std::size_t maps = s.shape().maps();
    const std::size_t n_diag = detail::diag_terms(s.arch()).size();
    cache.coef.assign(maps * rbs * k + n_diag * k, 0.0);
    cache.next.assign(s.state_size(), 0.0);
    const double* lin = cache.lin.data();
    const double* prev = cache.prev.data();
    double* coef = cache.coef.data();
    double* next = cache.next.data();
    auto sens = [&](std::size_t m, std::size_t rb) { return coef + (m * rbs + rb) * k; };
    double* diag = coef + maps * rbs * k;
    switch (s.arch()) {
      case Arch::vanilla:
        for (std::size_t u = 0; u < k; ++u) {
          const double h = std::tanh(lin[u]);
          next[u] = h;
          sens(0, 0)[u] = 1.0 - h * h;
        }
        break;
      case Arch::gru:
        for (std::size_t u = 0; u < k; ++u) {
          const double z = detail::sigmoid(lin[u]);
          const double r = detail::sigmoid(lin[k + u]);
          const double ah = lin[3 * k + u];
          const double a = std::tanh(lin[2 * k + u] + r * ah);
          const double h = prev[u];
          next[u] = (1.0 - z) * h + z * a;
          const double da = z * (1.0 - a * a);
          sens(0, 0)[u] = (a - h) * z * (1.0 - z);
          sens(1, 0)[u] = da * ah * r * (1.0 - r);
          sens(2, 0)[u] = da;
          sens(3, 0)[u] = da * r;
          diag[u] = 1.0 - z;
        }
        break;
      case Arch::lstm:
        for (std::size_t u = 0; u < k; ++u) {
          const double i = detail::sigmoid(lin[u]);
          const double f = detail::sigmoid(lin[k + u]);
          const double o = detail::sigmoid(lin[2 * k + u]);
          const double g = std::tanh(lin[3 * k + u]);
          const double c_prev = prev[k + u];
          const double c = f * c_prev + i * g;
          const double tc = std::tanh(c);
          next[u] = o * tc;
          next[k + u] = c;
          const double dh_dc = o * (1.0 - tc * tc);
          sens(0, 1)[u] = g * i * (1.0 - i);
          sens(1, 1)[u] = c_prev * f * (1.0 - f);
          sens(2, 1)[u] = 0.0;
          sens(3, 1)[u] = i * (1.0 - g * g);
          sens(0, 0)[u] = dh_dc * sens(0, 1)[u];
          sens(1, 0)[u] = dh_dc * sens(1, 1)[u];
          sens(2, 0)[u] = tc * o * (1.0 - o);
          sens(3, 0)[u] = dh_dc * sens(3, 1)[u];
          diag[u] = f;
          diag[k + u] = dh_dc * f;
        }
        break;
    }
  }

  void build_tables() {
    const auto& s = *structure_;
    const std::size_t k = s.units();
    const std::size_t rbs = s.shape().row_blocks();
    const std::size_t maps = s.shape().maps();
    const std::size_t kk = s.state_size();
    const auto diags = detail::diag_terms(s.arch());
    const std::size_t diag_base = maps * rbs * k;

    // D: one contribution per (position, source term).
    struct Contribution {
      Position pos;
      std::uint32_t coef;
      std::uint32_t param;
    };
    std::vector<Contribution> contributions;
    for (std::size_t bi = 0; bi < s.blocks().size(); ++bi) {
      const auto& b = s.blocks()[bi];
      if (b.source != Source::hidden) continue;
      const auto& idx = s.index(bi);
      for (std::size_t rb = 0; rb < rbs; ++rb) {
        if (!detail::map_reaches(s.arch(), b.map, rb)) continue;
        for (std::size_t u = 0; u < k; ++u) {
          for (std::size_t e = idx.row_ptr[u]; e < idx.row_ptr[u + 1]; ++e) {
            contributions.push_back({{static_cast<std::uint32_t>(rb * k + u), idx.cols[e]},
                                     static_cast<std::uint32_t>((b.map * rbs + rb) * k + u), idx.values[e]});
          }
        }
      }
    }
    for (std::size_t di = 0; di < diags.size(); ++di) {
      const auto [rb, cb] = diags[di];
      for (std::size_t u = 0; u < k; ++u) {
        contributions.push_back({{static_cast<std::uint32_t>(rb * k + u), static_cast<std::uint32_t>(cb * k + u)},
                                 static_cast<std::uint32_t>(diag_base + di * k + u), kNoParam});
      }
    }
    std::stable_sort(contributions.begin(), contributions.end(),
                     [](const Contribution& a, const Contribution& b) { return a.pos < b.pos; });
    std::vector<Position> d_positions;
    d_positions.reserve(contributions.size());
    for (const auto& c : contributions) d_positions.push_back(c.pos);
    d_pattern_ = share(SparsityPattern(kk, kk, d_positions));
    d_offsets_.assign(d_pattern_->nnz() + 1, 0);
    d_coef_.reserve(contributions.size());
    d_param_.reserve(contributions.size());
    std::size_t slot = 0;
    for (std::size_t e = 0; e < contributions.size(); ++e) {
      if (e > 0 && contributions[e].pos != contributions[e - 1].pos) ++slot;
      ++d_offsets_[slot + 1];
      d_coef_.push_back(contributions[e].coef);
      d_param_.push_back(contributions[e].param);
    }
    for (std::size_t i = 0; i < d_pattern_->nnz(); ++i) d_offsets_[i + 1] += d_offsets_[i];

    // Ĩ: each compressed column has one entry per row block, at its unit.
    const std::size_t p_tilde = s.nonzero_param_count();
    const std::size_t a = s.inputs();
    struct Entry {
      Position pos;
      std::uint32_t coef;
      std::uint32_t src;
    };
    std::vector<Entry> entries;
    entries.reserve(p_tilde * rbs);
    for (std::size_t c = 0; c < p_tilde; ++c) {
      const auto& info = s.column_info(c);
      const auto& b = s.blocks()[info.block];
      std::uint32_t src = 0;
      switch (b.source) {
        case Source::input: src = info.source_col; break;
        case Source::hidden: src = static_cast<std::uint32_t>(a + info.source_col); break;
        case Source::bias: src = static_cast<std::uint32_t>(a + k); break;
      }
      for (std::size_t rb = 0; rb < rbs; ++rb) {
        entries.push_back({{static_cast<std::uint32_t>(rb * k + info.unit), static_cast<std::uint32_t>(c)},
                           static_cast<std::uint32_t>((b.map * rbs + rb) * k + info.unit), src});
      }
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& x, const Entry& y) { return x.pos < y.pos; });
    std::vector<Position> i_positions;
    i_positions.reserve(entries.size());
    for (const auto& e : entries) {
      i_positions.push_back(e.pos);
      i_coef_.push_back(e.coef);
      i_src_.push_back(e.src);
    }
    i_pattern_ = share(SparsityPattern(kk, p_tilde, std::move(i_positions)));
  }

  StructurePtr structure_;
  PatternPtr d_pattern_;
  PatternPtr i_pattern_;
  std::vector<std::size_t> d_offsets_;
  std::vector<std::uint32_t> d_coef_;
  std::vector<std::uint32_t> d_param_;
  std::vector<std::uint32_t> i_coef_;
  std::vector<std::uint32_t> i_src_;
};

inline SparsityPattern structural_d_pattern(const CellStructure& structure) {
  return *Cell(std::make_shared<const CellStructure>(structure)).d_pattern();
}

inline SparsityPattern structural_i_pattern(const CellStructure& structure) {
  return *Cell(std::make_shared<const CellStructure>(structure)).i_pattern();
}

// Dynamics pattern of the original GRU (reset applied before W_ha). Only a
// structural illustration of how that variant densifies D; not trainable here.
inline SparsityPattern gru_variant1_d_pattern(const CellStructure& s) {
  if (s.arch() != Arch::gru) throw std::invalid_argument("gru_variant1_d_pattern needs a GRU structure");
  const std::size_t k = s.units();
  auto kept = [&](std::string_view name, std::size_t r, std::size_t c) {
    return s.keep()[s.flat_index(s.block_index(name), r, c)] != 0;
  };
  std::vector<Position> positions;
  for (std::uint32_t u = 0; u < k; ++u) {
    positions.push_back({u, u});
    for (std::uint32_t j = 0; j < k; ++j) {
      bool nz = kept("W_hz", u, j) || kept("W_ha", u, j);
      for (std::size_t m = 0; m < k && !nz; ++m) nz = kept("W_ha", u, m) && kept("W_hr", m, j);
      if (nz) positions.push_back({u, j});
    }
  }
  return {k, k, std::move(positions)};
}

}  // namespace snap
