#pragma once

// Dense and fixed-pattern sparse kernels used by the gradient engines.
//
// A SparsityPattern is an immutable, canonical (row-sorted, deduplicated)
// set of positions stored in compressed-row form with a companion column
// index. PatternedMatrix holds values only at the positions of a shared
// pattern. The masked product D * J evaluated on a fixed output support is
// the central operation: it is planned once per run (MaskedProduct) and
// executed every step.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace snap {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class PatternError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Multiply-add tally. Each engine owns one; kernels add to it when given.
struct OpCounter {
  std::uint64_t madds = 0;

  void add(std::uint64_t n) { madds += n; }
  void reset() { madds = 0; }
};

inline void count(OpCounter* counter, std::uint64_t n) {
  if (counter != nullptr) counter->add(n);
}

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw DimensionError("DenseMatrix: value count does not match shape");
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

// Row-major dense product; inner index ascending.
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b, OpCounter* counter = nullptr) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto out_row = out.row(r);
    for (std::size_t m = 0; m < a.cols(); ++m) {
      const double av = a(r, m);
      auto b_row = b.row(m);
      for (std::size_t c = 0; c < b.cols(); ++c) out_row[c] += av * b_row[c];
    }
  }
  count(counter, static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
  return out;
}

struct Position {
  std::uint32_t row = 0;
  std::uint32_t col = 0;

  friend auto operator<=>(const Position&, const Position&) = default;
};

class SparsityPattern {
 public:
  SparsityPattern() : row_ptr_(1, 0), col_ptr_(1, 0) {}

  // Canonicalizes: sorts lexicographically and drops duplicates.
  SparsityPattern(std::size_t rows, std::size_t cols, std::vector<Position> positions)
      : rows_(rows), cols_(cols) {
    for (const auto& p : positions) {
      if (p.row >= rows || p.col >= cols) {
        throw DimensionError("SparsityPattern: position (" + std::to_string(p.row) + ", " +
                             std::to_string(p.col) + ") outside " + std::to_string(rows) + "x" +
                             std::to_string(cols));
      }
    }
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
    row_ptr_.assign(rows + 1, 0);
    col_idx_.reserve(positions.size());
    for (const auto& p : positions) {
      ++row_ptr_[p.row + 1];
      col_idx_.push_back(p.col);
    }
    for (std::size_t r = 0; r < rows; ++r) row_ptr_[r + 1] += row_ptr_[r];
    build_column_index();
  }

  static SparsityPattern full(std::size_t rows, std::size_t cols) {
    std::vector<Position> positions;
    positions.reserve(rows * cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) positions.push_back({r, c});
    return {rows, cols, std::move(positions)};
  }

  static SparsityPattern empty(std::size_t rows, std::size_t cols) { return {rows, cols, {}}; }

  static SparsityPattern diagonal(std::size_t n) {
    std::vector<Position> positions;
    for (std::uint32_t i = 0; i < n; ++i) positions.push_back({i, i});
    return {n, n, std::move(positions)};
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return col_idx_.size(); }

  double density() const {
    if (rows_ == 0 || cols_ == 0) return 0.0;
    return static_cast<double>(nnz()) / (static_cast<double>(rows_) * static_cast<double>(cols_));
  }

  // Slots [row_begin(r), row_end(r)) hold row r, columns ascending.
  std::size_t row_begin(std::size_t r) const { return row_ptr_[r]; }
  std::size_t row_end(std::size_t r) const { return row_ptr_[r + 1]; }
  std::uint32_t col_of(std::size_t slot) const { return col_idx_[slot]; }

  // Column view: entries [col_begin(c), col_end(c)) give (row, slot), rows ascending.
  std::size_t col_begin(std::size_t c) const { return col_ptr_[c]; }
  std::size_t col_end(std::size_t c) const { return col_ptr_[c + 1]; }
  std::uint32_t col_entry_row(std::size_t e) const { return col_rows_[e]; }
  std::uint32_t col_entry_slot(std::size_t e) const { return col_slots_[e]; }

  std::optional<std::size_t> find(std::size_t r, std::size_t c) const {
    if (r >= rows_ || c >= cols_) return std::nullopt;
    auto first = col_idx_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[r]);
    auto last = col_idx_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[r + 1]);
    auto it = std::lower_bound(first, last, static_cast<std::uint32_t>(c));
    if (it == last || *it != c) return std::nullopt;
    return static_cast<std::size_t>(it - col_idx_.begin());
  }

  bool contains(std::size_t r, std::size_t c) const { return find(r, c).has_value(); }

  std::vector<Position> positions() const {
    std::vector<Position> out;
    out.reserve(nnz());
    for (std::uint32_t r = 0; r < rows_; ++r)
      for (std::size_t s = row_ptr_[r]; s < row_ptr_[r + 1]; ++s) out.push_back({r, col_idx_[s]});
    return out;
  }

  // True when every position of `other` is also in this pattern.
  bool includes(const SparsityPattern& other) const {
    if (other.rows_ != rows_ || other.cols_ != cols_) return false;
    for (std::size_t r = 0; r < rows_; ++r) {
      std::size_t a = row_ptr_[r];
      const std::size_t a_end = row_ptr_[r + 1];
      for (std::size_t b = other.row_ptr_[r]; b < other.row_ptr_[r + 1]; ++b) {
        while (a < a_end && col_idx_[a] < other.col_idx_[b]) ++a;
        if (a == a_end || col_idx_[a] != other.col_idx_[b]) return false;
      }
    }
    return true;
  }

  friend bool operator==(const SparsityPattern& a, const SparsityPattern& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.row_ptr_ == b.row_ptr_ &&
           a.col_idx_ == b.col_idx_;
  }

 private:
  void build_column_index() {
    col_ptr_.assign(cols_ + 1, 0);
    for (auto c : col_idx_) ++col_ptr_[c + 1];
    for (std::size_t c = 0; c < cols_; ++c) col_ptr_[c + 1] += col_ptr_[c];
    col_rows_.resize(col_idx_.size());
    col_slots_.resize(col_idx_.size());
    std::vector<std::size_t> fill(col_ptr_.begin(), col_ptr_.end() - 1);
    for (std::uint32_t r = 0; r < rows_; ++r) {
      for (std::size_t s = row_ptr_[r]; s < row_ptr_[r + 1]; ++s) {
        const std::size_t e = fill[col_idx_[s]]++;
        col_rows_[e] = r;
        col_slots_[e] = static_cast<std::uint32_t>(s);
      }
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> col_idx_;
  std::vector<std::size_t> col_ptr_;
  std::vector<std::uint32_t> col_rows_;
  std::vector<std::uint32_t> col_slots_;
};

using PatternPtr = std::shared_ptr<const SparsityPattern>;

inline PatternPtr share(SparsityPattern pattern) {
  return std::make_shared<const SparsityPattern>(std::move(pattern));
}

class PatternedMatrix {
 public:
  PatternedMatrix() : pattern_(share(SparsityPattern{})) {}
  explicit PatternedMatrix(PatternPtr pattern)
      : pattern_(std::move(pattern)), values_(pattern_->nnz(), 0.0) {}
  PatternedMatrix(PatternPtr pattern, std::vector<double> values)
      : pattern_(std::move(pattern)), values_(std::move(values)) {
    if (values_.size() != pattern_->nnz()) {
      throw DimensionError("PatternedMatrix: value count does not match pattern nnz");
    }
  }

  // Picks the entries of `dense` at the pattern positions.
  static PatternedMatrix from_dense(const DenseMatrix& dense, PatternPtr pattern) {
    if (dense.rows() != pattern->rows() || dense.cols() != pattern->cols()) {
      throw DimensionError("PatternedMatrix::from_dense: shape mismatch");
    }
    PatternedMatrix out(std::move(pattern));
    const auto& p = *out.pattern_;
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t s = p.row_begin(r); s < p.row_end(r); ++s) out.values_[s] = dense(r, p.col_of(s));
    return out;
  }

  const SparsityPattern& pattern() const { return *pattern_; }
  const PatternPtr& pattern_ptr() const { return pattern_; }
  std::size_t rows() const { return pattern_->rows(); }
  std::size_t cols() const { return pattern_->cols(); }
  std::size_t nnz() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  double at(std::size_t r, std::size_t c) const {
    auto slot = pattern_->find(r, c);
    return slot ? values_[*slot] : 0.0;
  }

  void set(std::size_t r, std::size_t c, double v) {
    auto slot = pattern_->find(r, c);
    if (!slot) {
      throw PatternError("PatternedMatrix::set: (" + std::to_string(r) + ", " + std::to_string(c) +
                         ") is outside the pattern");
    }
    values_[*slot] = v;
  }

  void zero() { std::fill(values_.begin(), values_.end(), 0.0); }

  DenseMatrix densify() const {
    DenseMatrix out(rows(), cols());
    const auto& p = *pattern_;
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t s = p.row_begin(r); s < p.row_end(r); ++s) out(r, p.col_of(s)) = values_[s];
    return out;
  }

 private:
  PatternPtr pattern_;
  std::vector<double> values_;
};

// Product D * J restricted to a fixed output support, planned once.
//
// For each output slot the plan lists the (D slot, J slot) pairs whose inner
// index m satisfies (r, m) in D and (m, c) in J, in ascending m. When the
// plan would exceed `max_plan_entries` it is not stored and apply() re-runs
// the same merge each call, producing bit-identical results.
class MaskedProduct {
 public:
  static constexpr std::size_t kDefaultMaxPlanEntries = std::size_t{1} << 26;

  MaskedProduct(PatternPtr d, PatternPtr j, PatternPtr out,
                std::size_t max_plan_entries = kDefaultMaxPlanEntries)
      : d_(std::move(d)), j_(std::move(j)), out_(std::move(out)) {
    if (d_->cols() != j_->rows() || d_->rows() != out_->rows() || j_->cols() != out_->cols()) {
      throw DimensionError("spmm_masked: operand shapes are not conformable");
    }
    std::vector<std::uint8_t> used(d_->nnz(), 0);
    madds_ = for_each_output([&](std::size_t, std::uint32_t ds, std::uint32_t) { used[ds] = 1; });
    for (std::size_t s = 0; s < used.size(); ++s)
      if (used[s]) used_d_slots_.push_back(static_cast<std::uint32_t>(s));
    if (madds_ <= max_plan_entries) {
      offsets_.assign(out_->nnz() + 1, 0);
      d_slots_.reserve(madds_);
      j_slots_.reserve(madds_);
      for_each_output([&](std::size_t o, std::uint32_t ds, std::uint32_t js) {
        ++offsets_[o + 1];
        d_slots_.push_back(ds);
        j_slots_.push_back(js);
      });
      for (std::size_t o = 0; o < out_->nnz(); ++o) offsets_[o + 1] += offsets_[o];
      planned_ = true;
    }
  }

  std::uint64_t madds() const { return madds_; }
  bool planned() const { return planned_; }
  const PatternPtr& out_pattern() const { return out_; }
  // D slots that take part in at least one product; the rest of D is unused.
  std::span<const std::uint32_t> used_d_slots() const { return used_d_slots_; }

  // Writes D * J into `out` (which must carry the output pattern).
  void apply(const PatternedMatrix& d, const PatternedMatrix& j, PatternedMatrix& out,
             OpCounter* counter = nullptr) const {
    check_operands(d, j, out);
    auto dv = d.values();
    auto jv = j.values();
    auto ov = out.values();
    if (planned_) {
      const std::size_t n_out = ov.size();
      for (std::size_t o = 0; o < n_out; ++o) {
        double acc = 0.0;
        for (std::size_t e = offsets_[o]; e < offsets_[o + 1]; ++e) acc += dv[d_slots_[e]] * jv[j_slots_[e]];
        ov[o] = acc;
      }
    } else {
      std::fill(ov.begin(), ov.end(), 0.0);
      for_each_output([&](std::size_t o, std::uint32_t ds, std::uint32_t js) { ov[o] += dv[ds] * jv[js]; });
    }
    count(counter, madds_);
  }

 private:
  void check_operands(const PatternedMatrix& d, const PatternedMatrix& j, const PatternedMatrix& out) const {
    if (!(d.pattern_ptr() == d_ || d.pattern() == *d_) || !(j.pattern_ptr() == j_ || j.pattern() == *j_) ||
        !(out.pattern_ptr() == out_ || out.pattern() == *out_)) {
      throw PatternError("MaskedProduct::apply: operand patterns differ from the planned ones");
    }
  }

  // Calls fn(out_slot, d_slot, j_slot) for every contributing pair in
  // output order, inner index ascending. Returns the pair count.
  template <typename Fn>
  std::uint64_t for_each_output(Fn&& fn) const {
    const auto& dp = *d_;
    const auto& jp = *j_;
    const auto& op = *out_;
    std::uint64_t total = 0;
    for (std::size_t r = 0; r < op.rows(); ++r) {
      const std::size_t d_begin = dp.row_begin(r);
      const std::size_t d_end = dp.row_end(r);
      if (d_begin == d_end) continue;
      for (std::size_t o = op.row_begin(r); o < op.row_end(r); ++o) {
        const std::uint32_t c = op.col_of(o);
        std::size_t a = d_begin;
        std::size_t b = jp.col_begin(c);
        const std::size_t b_end = jp.col_end(c);
        while (a < d_end && b < b_end) {
          const std::uint32_t ma = dp.col_of(a);
          const std::uint32_t mb = jp.col_entry_row(b);
          if (ma < mb) {
            ++a;
          } else if (mb < ma) {
            ++b;
          } else {
            fn(o, static_cast<std::uint32_t>(a), jp.col_entry_slot(b));
            ++total;
            ++a;
            ++b;
          }
        }
      }
    }
    return total;
  }

  PatternPtr d_;
  PatternPtr j_;
  PatternPtr out_;
  std::uint64_t madds_ = 0;
  bool planned_ = false;
  std::vector<std::size_t> offsets_;
  std::vector<std::uint32_t> d_slots_;
  std::vector<std::uint32_t> j_slots_;
  std::vector<std::uint32_t> used_d_slots_;
};

inline PatternedMatrix spmm_masked(const PatternedMatrix& d, const PatternedMatrix& j, PatternPtr out_pattern,
                                   OpCounter* counter = nullptr) {
  MaskedProduct product(d.pattern_ptr(), j.pattern_ptr(), out_pattern, 0);
  PatternedMatrix out(std::move(out_pattern));
  product.apply(d, j, out, counter);
  return out;
}

// a += b where b's support lies inside a's. Both patterns are row-sorted, so
// a single merge finds each target slot.
inline void add_in_place(PatternedMatrix& a, const PatternedMatrix& b, OpCounter* counter = nullptr) {
  const auto& ap = a.pattern();
  const auto& bp = b.pattern();
  if (ap.rows() != bp.rows() || ap.cols() != bp.cols()) throw DimensionError("add_into: shape mismatch");
  auto av = a.values();
  auto bv = b.values();
  if (&ap == &bp) {
    for (std::size_t s = 0; s < av.size(); ++s) av[s] += bv[s];
    count(counter, av.size());
    return;
  }
  for (std::size_t r = 0; r < bp.rows(); ++r) {
    std::size_t sa = ap.row_begin(r);
    const std::size_t sa_end = ap.row_end(r);
    for (std::size_t sb = bp.row_begin(r); sb < bp.row_end(r); ++sb) {
      const auto c = bp.col_of(sb);
      while (sa < sa_end && ap.col_of(sa) < c) ++sa;
      if (sa == sa_end || ap.col_of(sa) != c) {
        throw PatternError("add_into: (" + std::to_string(r) + ", " + std::to_string(c) +
                           ") is outside the accumulator pattern");
      }
      av[sa] += bv[sb];
    }
  }
  count(counter, bv.size());
}

inline PatternedMatrix add_into(PatternedMatrix a, const PatternedMatrix& b, OpCounter* counter = nullptr) {
  add_in_place(a, b, counter);
  return a;
}

// Precomputed slot map for repeated a += b with fixed patterns.
class SlotMap {
 public:
  SlotMap() = default;
  SlotMap(const SparsityPattern& target, const SparsityPattern& source) : slots_(source.nnz()) {
    if (target.rows() != source.rows() || target.cols() != source.cols()) {
      throw DimensionError("SlotMap: shape mismatch");
    }
    for (std::size_t r = 0; r < source.rows(); ++r) {
      for (std::size_t s = source.row_begin(r); s < source.row_end(r); ++s) {
        auto t = target.find(r, source.col_of(s));
        if (!t) throw PatternError("SlotMap: source support is not contained in the target");
        slots_[s] = static_cast<std::uint32_t>(*t);
      }
    }
  }

  void add(std::span<double> target, std::span<const double> source, OpCounter* counter = nullptr) const {
    for (std::size_t s = 0; s < slots_.size(); ++s) target[slots_[s]] += source[s];
    count(counter, slots_.size());
  }

  std::span<const std::uint32_t> slots() const { return slots_; }

 private:
  std::vector<std::uint32_t> slots_;
};

// vᵀ M. Rows with v[r] == 0 are skipped; each column accumulates in
// ascending row order.
inline std::vector<double> vec_mat(std::span<const double> v, const PatternedMatrix& m,
                                   OpCounter* counter = nullptr) {
  if (v.size() != m.rows()) throw DimensionError("vec_mat: vector length differs from row count");
  std::vector<double> out(m.cols(), 0.0);
  const auto& p = m.pattern();
  auto mv = m.values();
  std::uint64_t work = 0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const double vr = v[r];
    if (vr == 0.0) continue;
    for (std::size_t s = p.row_begin(r); s < p.row_end(r); ++s) out[p.col_of(s)] += vr * mv[s];
    work += p.row_end(r) - p.row_begin(r);
  }
  count(counter, work);
  return out;
}

// Copies src into dst_pattern: shared positions keep their value, positions
// only in dst are zero, positions only in src are dropped.
inline PatternedMatrix masked_assign(const PatternedMatrix& src, PatternPtr dst_pattern) {
  if (src.rows() != dst_pattern->rows() || src.cols() != dst_pattern->cols()) {
    throw DimensionError("masked_assign: shape mismatch");
  }
  if (src.pattern_ptr() == dst_pattern) return src;
  PatternedMatrix out(std::move(dst_pattern));
  const auto& sp = src.pattern();
  const auto& dp = out.pattern();
  auto sv = src.values();
  auto ov = out.values();
  for (std::size_t r = 0; r < dp.rows(); ++r) {
    std::size_t s = sp.row_begin(r);
    const std::size_t s_end = sp.row_end(r);
    for (std::size_t d = dp.row_begin(r); d < dp.row_end(r); ++d) {
      const auto c = dp.col_of(d);
      while (s < s_end && sp.col_of(s) < c) ++s;
      if (s < s_end && sp.col_of(s) == c) ov[d] = sv[s];
    }
  }
  return out;
}

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace snap
