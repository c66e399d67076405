#pragma once

// n-step influence patterns.
//
// The SnAp-n support of the influence matrix is the set of (unit, parameter)
// pairs for which the parameter can reach the unit within n steps of the
// recurrence: P_1 = support(I), P_n = P_1 ∪ support(D ∘ P_{n-1}) with a
// boolean product. Patterns are structural: they come from the masks, never
// from observed values.

#include <cstdint>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "snap/kernels.hpp"

namespace snap {

inline SparsityPattern n_step_pattern(const SparsityPattern& d_pat, const SparsityPattern& i_pat, std::size_t n) {
  if (n < 1) throw std::invalid_argument("n_step_pattern: n must be at least 1");
  if (d_pat.rows() != d_pat.cols() || d_pat.cols() != i_pat.rows()) {
    throw DimensionError("n_step_pattern: dynamics pattern must be KxK with K = rows of the immediate pattern");
  }
  const std::size_t k = d_pat.rows();
  const std::size_t cols = i_pat.cols();

  // Grow each column independently: frontier rows reach new rows through D.
  std::vector<Position> positions;
  positions.reserve(i_pat.nnz());
  std::vector<std::uint8_t> mark(k, 0);
  std::vector<std::uint32_t> members;
  std::vector<std::uint32_t> frontier;
  std::vector<std::uint32_t> next;
  for (std::size_t c = 0; c < cols; ++c) {
    members.clear();
    frontier.clear();
    for (std::size_t e = i_pat.col_begin(c); e < i_pat.col_end(c); ++e) {
      const auto r = i_pat.col_entry_row(e);
      mark[r] = 1;
      members.push_back(r);
      frontier.push_back(r);
    }
    for (std::size_t step = 1; step < n && !frontier.empty(); ++step) {
      next.clear();
      for (auto m : frontier) {
        for (std::size_t e = d_pat.col_begin(m); e < d_pat.col_end(m); ++e) {
          const auto r = d_pat.col_entry_row(e);
          if (!mark[r]) {
            mark[r] = 1;
            members.push_back(r);
            next.push_back(r);
          }
        }
      }
      frontier.swap(next);
    }
    for (auto r : members) {
      positions.push_back({r, static_cast<std::uint32_t>(c)});
      mark[r] = 0;
    }
  }
  return {k, cols, std::move(positions)};
}

struct PatternFixpoint {
  SparsityPattern pattern;
  std::size_t n_star = 1;
};

// Smallest n with P_n == P_{n+1}. Terminates by n = K since every column
// can only gain rows.
inline PatternFixpoint pattern_fixpoint(const SparsityPattern& d_pat, const SparsityPattern& i_pat) {
  std::size_t n = 1;
  SparsityPattern current = n_step_pattern(d_pat, i_pat, 1);
  while (true) {
    SparsityPattern next = n_step_pattern(d_pat, i_pat, n + 1);
    if (next.nnz() == current.nnz()) return {std::move(current), n};
    current = std::move(next);
    ++n;
  }
}

// 1 - density, with the numerator formed in integers.
inline double measure_sparsity(const SparsityPattern& p) {
  const std::uint64_t total = static_cast<std::uint64_t>(p.rows()) * p.cols();
  if (total == 0) return 0.0;
  return static_cast<double>(total - p.nnz()) / static_cast<double>(total);
}

// `row col` per line, sorted.
inline void write_pattern(std::ostream& os, const SparsityPattern& p) {
  os << "# rows " << p.rows() << " cols " << p.cols() << " nnz " << p.nnz() << '\n';
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t s = p.row_begin(r); s < p.row_end(r); ++s) os << r << ' ' << p.col_of(s) << '\n';
}

// Bijection between unmasked flat parameters and compressed columns [0, p̃).
class CompressedColumnMap {
 public:
  static constexpr std::int64_t kMasked = -1;

  CompressedColumnMap() = default;
  explicit CompressedColumnMap(std::span<const std::uint8_t> keep) : forward_(keep.size(), kMasked) {
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (keep[i]) {
        forward_[i] = static_cast<std::int64_t>(inverse_.size());
        inverse_.push_back(static_cast<std::uint32_t>(i));
      }
    }
  }

  std::size_t total() const { return forward_.size(); }
  std::size_t compressed() const { return inverse_.size(); }

  std::int64_t column_of(std::size_t flat) const { return forward_[flat]; }
  std::size_t flat_of(std::size_t column) const { return inverse_[column]; }
  bool masked(std::size_t flat) const { return forward_[flat] == kMasked; }

  std::vector<double> expand(std::span<const double> compressed_values) const {
    if (compressed_values.size() != compressed()) throw DimensionError("expand: length differs from p̃");
    std::vector<double> flat(total(), 0.0);
    for (std::size_t c = 0; c < inverse_.size(); ++c) flat[inverse_[c]] = compressed_values[c];
    return flat;
  }

  std::vector<double> compress(std::span<const double> flat_values) const {
    if (flat_values.size() != total()) throw DimensionError("compress: length differs from p");
    std::vector<double> out(compressed());
    for (std::size_t c = 0; c < inverse_.size(); ++c) out[c] = flat_values[inverse_[c]];
    return out;
  }

 private:
  std::vector<std::int64_t> forward_;
  std::vector<std::uint32_t> inverse_;
};

}  // namespace snap
