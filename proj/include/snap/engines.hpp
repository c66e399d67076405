#pragma once

// Gradient engines behind one stepping contract.
//
// An Engine instance follows one sequence stream (one batch element): it
// owns the recurrent state and the influence accumulator, consumes one
// (input, target) pair per step and adds the gradient contribution of that
// step into a GradientBuffer. Readout gradients are always exact and local;
// only the recurrent-core gradient goes through the influence machinery.
//
//   bptt         tape of step caches, reverse pass on flush()
//   rtrl_dense   J_t = I_t + D_t J_{t-1}, dense K x p
//   rtrl_sparse  J̃_t = Ĩ_t + D_t J̃_{t-1} on the full reachable support
//   snap (n)     the same update restricted to the n-step support
//   rflo         J̃_t = J̃_{t-1} + Ĩ_t
//   uoro         rank-one unbiased estimate h̃ w̃ᵀ

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "snap/cells.hpp"
#include "snap/kernels.hpp"
#include "snap/pattern.hpp"
#include "snap/readout.hpp"

namespace snap {

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class EngineKind { bptt, rtrl_dense, rtrl_sparse, snap, rflo, uoro };

struct EngineSpec {
  EngineKind kind = EngineKind::snap;
  std::size_t n = 1;  // SnAp order; ignored by other kinds
  std::uint64_t seed = 0;

  std::string name() const {
    switch (kind) {
      case EngineKind::bptt: return "bptt";
      case EngineKind::rtrl_dense: return "rtrl";
      case EngineKind::rtrl_sparse: return "rtrl_sparse";
      case EngineKind::snap: return "snap" + std::to_string(n);
      case EngineKind::rflo: return "rflo";
      case EngineKind::uoro: return "uoro";
    }
    return "unknown";
  }

  // Compressed-influence engines cannot follow a growing mask.
  bool compressed_influence() const { return kind != EngineKind::bptt; }
};

inline EngineSpec parse_engine(std::string_view name) {
  if (name == "bptt") return {EngineKind::bptt};
  if (name == "rtrl" || name == "rtrl_dense") return {EngineKind::rtrl_dense};
  if (name == "rtrl_sparse") return {EngineKind::rtrl_sparse};
  if (name == "rflo") return {EngineKind::rflo};
  if (name == "uoro") return {EngineKind::uoro};
  if (name.starts_with("snap")) {
    const auto digits = name.substr(4);
    std::size_t n = 0;
    if (digits.empty()) throw std::invalid_argument("snap engine needs an order, e.g. snap2");
    for (char ch : digits) {
      if (ch < '0' || ch > '9') throw std::invalid_argument("bad engine name '" + std::string(name) + "'");
      n = n * 10 + static_cast<std::size_t>(ch - '0');
    }
    if (n == 0) throw std::invalid_argument("snap order must be at least 1");
    return {EngineKind::snap, n};
  }
  throw std::invalid_argument("unknown engine '" + std::string(name) + "'");
}

struct GradientBuffer {
  std::vector<double> core;
  std::vector<double> readout;

  GradientBuffer() = default;
  GradientBuffer(std::size_t core_size, std::size_t readout_size)
      : core(core_size, 0.0), readout(readout_size, 0.0) {}

  void zero() {
    std::fill(core.begin(), core.end(), 0.0);
    std::fill(readout.begin(), readout.end(), 0.0);
  }
};

struct StepReport {
  double loss = 0.0;
  bool has_loss = false;
  std::uint64_t madds = 0;
  std::size_t accumulator_nnz = 0;
};

// Per-run structures shared by every stream of one engine: the bound cell
// and, for the SnAp family, the influence support and the product plan.
struct EngineContext {
  EngineSpec spec;
  std::shared_ptr<const Cell> cell;
  PatternPtr influence_pattern;
  std::shared_ptr<const MaskedProduct> product;
  SlotMap immediate_slots;
  std::size_t n_star = 0;
};

inline std::shared_ptr<const EngineContext> make_context(const EngineSpec& spec, std::shared_ptr<const Cell> cell) {
  auto ctx = std::make_shared<EngineContext>();
  ctx->spec = spec;
  ctx->cell = std::move(cell);
  const auto& c = *ctx->cell;
  switch (spec.kind) {
    case EngineKind::snap:
    case EngineKind::rtrl_sparse: {
      if (spec.kind == EngineKind::rtrl_sparse) {
        auto fix = pattern_fixpoint(*c.d_pattern(), *c.i_pattern());
        ctx->n_star = fix.n_star;
        ctx->influence_pattern = share(std::move(fix.pattern));
      } else if (spec.n == 1) {
        ctx->influence_pattern = c.i_pattern();
      } else {
        ctx->influence_pattern = share(n_step_pattern(*c.d_pattern(), *c.i_pattern(), spec.n));
      }
      ctx->product = std::make_shared<const MaskedProduct>(c.d_pattern(), ctx->influence_pattern, ctx->influence_pattern);
      ctx->immediate_slots = SlotMap(*ctx->influence_pattern, *c.i_pattern());
      break;
    }
    case EngineKind::rflo:
      ctx->influence_pattern = c.i_pattern();
      break;
    default:
      break;
  }
  return ctx;
}

class Engine {
 public:
  explicit Engine(std::shared_ptr<const EngineContext> ctx)
      : ctx_(std::move(ctx)), state_(CellState::zeros(ctx_->cell->state_size())) {}
  virtual ~Engine() = default;
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  const EngineSpec& spec() const { return ctx_->spec; }
  const Cell& cell() const { return *ctx_->cell; }
  const CellState& state() const { return state_; }
  OpCounter& counter() { return counter_; }
  const OpCounter& counter() const { return counter_; }

  // Sequence boundary: new initial state, zero accumulator.
  virtual void reset(const CellState& initial) {
    if (initial.values.size() != cell().state_size()) throw DimensionError("reset: state has wrong length");
    state_ = initial;
    clear_accumulator();
  }

  // One step. `target` < 0 means no loss at this step. Gradients are added
  // into `grads` (sized for the core's p̃ and the readout).
  virtual StepReport step(const CellParams& params, const Readout& readout, std::span<const double> x, int target,
                          GradientBuffer& grads) = 0;

  // Materializes pending gradient (BPTT window); other engines have none.
  virtual void flush(const CellParams& params, GradientBuffer& grads) {
    (void)params;
    (void)grads;
  }

  virtual std::size_t accumulator_nnz() const = 0;

 protected:
  virtual void clear_accumulator() = 0;

  void check_buffers(const CellParams& params, const Readout& readout, const GradientBuffer& grads) const {
    if (params.values().size() != cell().structure().nonzero_param_count()) {
      throw ContractError(spec().name() + ": parameters do not match the engine's cell structure");
    }
    if (grads.core.size() != params.values().size() || grads.readout.size() != readout.param_count()) {
      throw ContractError(spec().name() + ": gradient buffer does not match the parameter layout");
    }
  }

  // Readout loss at the new state; fills `dloss` (length K, zero in c rows).
  double readout_step(const Readout& readout, int target, GradientBuffer& grads, std::vector<double>& dloss) const {
    const std::size_t k = cell().units();
    dloss.assign(cell().state_size(), 0.0);
    return readout.loss_and_grad(std::span<const double>(state_.values).first(k), target, grads.readout,
                                 std::span<double>(dloss).first(k));
  }

  std::shared_ptr<const EngineContext> ctx_;
  CellState state_;
  OpCounter counter_;
  StepCache cache_;
};

namespace detail {

inline void check_finite_grad(std::span<const double> g, const std::string& engine) {
  if (!all_finite(g)) throw NumericError(engine + ": non-finite gradient");
}

}  // namespace detail

// SnAp-n, and sparse RTRL as SnAp at the fixpoint support.
class SparseInfluenceEngine final : public Engine {
 public:
  explicit SparseInfluenceEngine(std::shared_ptr<const EngineContext> ctx)
      : Engine(std::move(ctx)),
        d_(cell().d_pattern()),
        i_(cell().i_pattern()),
        j_(ctx_->influence_pattern),
        j_next_(ctx_->influence_pattern) {}

  StepReport step(const CellParams& params, const Readout& readout, std::span<const double> x, int target,
                  GradientBuffer& grads) override {
    check_buffers(params, readout, grads);
    const std::uint64_t before = counter_.madds;
    cell().forward(params, state_.values, x, cache_, &counter_);
    cell().dynamics(params, cache_, d_, ctx_->product->used_d_slots(), &counter_);
    cell().immediate(cache_, i_, &counter_);
    ctx_->product->apply(d_, j_, j_next_, &counter_);
    ctx_->immediate_slots.add(j_next_.values(), i_.values(), &counter_);
    std::swap(j_, j_next_);
    state_.values = cache_.next;

    StepReport report;
    if (target >= 0) {
      report.loss = readout_step(readout, target, grads, dloss_);
      report.has_loss = true;
      const auto g = vec_mat(dloss_, j_, &counter_);
      detail::check_finite_grad(g, spec().name());
      for (std::size_t c = 0; c < g.size(); ++c) grads.core[c] += g[c];
    }
    report.madds = counter_.madds - before;
    report.accumulator_nnz = j_.nnz();
    return report;
  }

  std::size_t accumulator_nnz() const override { return j_.nnz(); }
  const PatternedMatrix& influence() const { return j_; }

 protected:
  void clear_accumulator() override { j_.zero(); }

 private:
  PatternedMatrix d_;
  PatternedMatrix i_;
  PatternedMatrix j_;
  PatternedMatrix j_next_;
  std::vector<double> dloss_;
};

// Accumulates Ĩ and drops the D J̃ propagation term.
class RfloEngine final : public Engine {
 public:
  explicit RfloEngine(std::shared_ptr<const EngineContext> ctx)
      : Engine(std::move(ctx)), i_(cell().i_pattern()), j_(cell().i_pattern()) {}

  StepReport step(const CellParams& params, const Readout& readout, std::span<const double> x, int target,
                  GradientBuffer& grads) override {
    check_buffers(params, readout, grads);
    const std::uint64_t before = counter_.madds;
    cell().forward(params, state_.values, x, cache_, &counter_);
    cell().immediate(cache_, i_, &counter_);
    add_in_place(j_, i_, &counter_);
    state_.values = cache_.next;

    StepReport report;
    if (target >= 0) {
      report.loss = readout_step(readout, target, grads, dloss_);
      report.has_loss = true;
      const auto g = vec_mat(dloss_, j_, &counter_);
      detail::check_finite_grad(g, spec().name());
      for (std::size_t c = 0; c < g.size(); ++c) grads.core[c] += g[c];
    }
    report.madds = counter_.madds - before;
    report.accumulator_nnz = j_.nnz();
    return report;
  }

  std::size_t accumulator_nnz() const override { return j_.nnz(); }

 protected:
  void clear_accumulator() override { j_.zero(); }

 private:
  PatternedMatrix i_;
  PatternedMatrix j_;
  std::vector<double> dloss_;
};

// Full RTRL with dense K x p storage over every parameter, masked or not.
class DenseRtrlEngine final : public Engine {
 public:
  explicit DenseRtrlEngine(std::shared_ptr<const EngineContext> ctx)
      : Engine(std::move(ctx)),
        d_(cell().d_pattern()),
        i_(cell().i_pattern()),
        j_(cell().state_size(), cell().structure().param_count()) {}

  StepReport step(const CellParams& params, const Readout& readout, std::span<const double> x, int target,
                  GradientBuffer& grads) override {
    check_buffers(params, readout, grads);
    const std::uint64_t before = counter_.madds;
    const auto& s = cell().structure();
    cell().forward(params, state_.values, x, cache_, &counter_);
    cell().dynamics(params, cache_, d_, &counter_);
    cell().immediate(cache_, i_, &counter_);

    DenseMatrix next = matmul(d_.densify(), j_, &counter_);
    const auto& ip = i_.pattern();
    auto iv = i_.values();
    for (std::size_t r = 0; r < ip.rows(); ++r)
      for (std::size_t slot = ip.row_begin(r); slot < ip.row_end(r); ++slot)
        next(r, s.columns().flat_of(ip.col_of(slot))) += iv[slot];
    j_ = std::move(next);
    state_.values = cache_.next;

    StepReport report;
    if (target >= 0) {
      report.loss = readout_step(readout, target, grads, dloss_);
      report.has_loss = true;
      std::vector<double> flat(j_.cols(), 0.0);
      for (std::size_t r = 0; r < j_.rows(); ++r) {
        const double v = dloss_[r];
        if (v == 0.0) continue;
        auto row = j_.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) flat[c] += v * row[c];
        counter_.add(row.size());
      }
      const auto g = s.columns().compress(flat);
      detail::check_finite_grad(g, spec().name());
      for (std::size_t c = 0; c < g.size(); ++c) grads.core[c] += g[c];
    }
    report.madds = counter_.madds - before;
    report.accumulator_nnz = j_.rows() * j_.cols();
    return report;
  }

  std::size_t accumulator_nnz() const override { return j_.rows() * j_.cols(); }
  const DenseMatrix& influence() const { return j_; }

 protected:
  void clear_accumulator() override { j_.fill(0.0); }

 private:
  PatternedMatrix d_;
  PatternedMatrix i_;
  DenseMatrix j_;
  std::vector<double> dloss_;
};

// Rank-one unbiased influence estimate with sign probing and
// variance-minimizing rescaling:
//   h̃ ← ρ0 D h̃ + ρ1 ν,   w̃ ← w̃ / ρ0 + (νᵀ Ĩ) / ρ1
//   ρ0 = sqrt(|w̃| / |D h̃|), ρ1 = sqrt(|νᵀ Ĩ| / |ν|)
class UoroEngine final : public Engine {
 public:
  static constexpr double kEps = 1e-7;

  explicit UoroEngine(std::shared_ptr<const EngineContext> ctx)
      : Engine(std::move(ctx)),
        d_(cell().d_pattern()),
        i_(cell().i_pattern()),
        h_tilde_(cell().state_size(), 0.0),
        w_tilde_(cell().structure().nonzero_param_count(), 0.0),
        rng_(ctx_->spec.seed) {}

  void reseed(std::uint64_t seed) { rng_.seed(seed); }

  StepReport step(const CellParams& params, const Readout& readout, std::span<const double> x, int target,
                  GradientBuffer& grads) override {
    check_buffers(params, readout, grads);
    const std::uint64_t before = counter_.madds;
    const std::size_t kk = cell().state_size();
    cell().forward(params, state_.values, x, cache_, &counter_);
    cell().dynamics(params, cache_, d_, &counter_);
    cell().immediate(cache_, i_, &counter_);

    std::vector<double> dh(kk, 0.0);
    const auto& dp = d_.pattern();
    auto dv = d_.values();
    for (std::size_t r = 0; r < kk; ++r)
      for (std::size_t s = dp.row_begin(r); s < dp.row_end(r); ++s) dh[r] += dv[s] * h_tilde_[dp.col_of(s)];
    counter_.add(dv.size());

    std::vector<double> nu(kk);
    std::bernoulli_distribution coin(0.5);
    for (auto& v : nu) v = coin(rng_) ? 1.0 : -1.0;
    const auto nu_i = vec_mat(nu, i_, &counter_);

    const double rho0 = std::sqrt((norm(w_tilde_) + kEps) / (norm(dh) + kEps));
    const double rho1 = std::sqrt((norm(nu_i) + kEps) / (norm(nu) + kEps));
    for (std::size_t r = 0; r < kk; ++r) h_tilde_[r] = rho0 * dh[r] + rho1 * nu[r];
    for (std::size_t c = 0; c < w_tilde_.size(); ++c) w_tilde_[c] = w_tilde_[c] / rho0 + nu_i[c] / rho1;
    counter_.add(kk + w_tilde_.size());
    state_.values = cache_.next;

    StepReport report;
    if (target >= 0) {
      report.loss = readout_step(readout, target, grads, dloss_);
      report.has_loss = true;
      double scale = 0.0;
      for (std::size_t r = 0; r < kk; ++r) scale += dloss_[r] * h_tilde_[r];
      for (std::size_t c = 0; c < w_tilde_.size(); ++c) grads.core[c] += scale * w_tilde_[c];
      counter_.add(kk + w_tilde_.size());
      detail::check_finite_grad(grads.core, spec().name());
    }
    report.madds = counter_.madds - before;
    report.accumulator_nnz = kk + w_tilde_.size();
    return report;
  }

  std::size_t accumulator_nnz() const override { return h_tilde_.size() + w_tilde_.size(); }

 protected:
  void clear_accumulator() override {
    std::fill(h_tilde_.begin(), h_tilde_.end(), 0.0);
    std::fill(w_tilde_.begin(), w_tilde_.end(), 0.0);
  }

 private:
  static double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  }

  PatternedMatrix d_;
  PatternedMatrix i_;
  std::vector<double> h_tilde_;
  std::vector<double> w_tilde_;
  std::mt19937_64 rng_;
  std::vector<double> dloss_;
};

// Truncated/full BPTT. step() records the forward pass; flush() runs the
// reverse pass over the recorded window and clears it. The state carries
// over; nothing else does.
class BpttEngine final : public Engine {
 public:
  explicit BpttEngine(std::shared_ptr<const EngineContext> ctx) : Engine(std::move(ctx)) {}

  StepReport step(const CellParams& params, const Readout& readout, std::span<const double> x, int target,
                  GradientBuffer& grads) override {
    check_buffers(params, readout, grads);
    const std::uint64_t before = counter_.madds;
    Frame frame;
    cell().forward(params, state_.values, x, frame.cache, &counter_);
    state_.values = frame.cache.next;
    StepReport report;
    if (target >= 0) {
      report.loss = readout_step(readout, target, grads, frame.dloss);
      report.has_loss = true;
    }
    tape_.push_back(std::move(frame));
    report.madds = counter_.madds - before;
    report.accumulator_nnz = accumulator_nnz();
    return report;
  }

  void flush(const CellParams& params, GradientBuffer& grads) override {
    if (tape_.empty()) return;
    const std::size_t kk = cell().state_size();
    std::vector<double> delta(kk, 0.0);
    std::vector<double> delta_prev(kk, 0.0);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      if (!it->dloss.empty())
        for (std::size_t r = 0; r < kk; ++r) delta[r] += it->dloss[r];
      cell().backward(params, it->cache, delta, grads.core, delta_prev, &counter_);
      std::swap(delta, delta_prev);
    }
    detail::check_finite_grad(grads.core, spec().name());
    tape_.clear();
  }

  std::size_t tape_length() const { return tape_.size(); }
  std::size_t accumulator_nnz() const override { return tape_.size() * cell().state_size(); }

 protected:
  void clear_accumulator() override { tape_.clear(); }

 private:
  struct Frame {
    StepCache cache;
    std::vector<double> dloss;
  };
  std::vector<Frame> tape_;
};

inline std::unique_ptr<Engine> make_engine(std::shared_ptr<const EngineContext> ctx) {
  switch (ctx->spec.kind) {
    case EngineKind::bptt: return std::make_unique<BpttEngine>(std::move(ctx));
    case EngineKind::rtrl_dense: return std::make_unique<DenseRtrlEngine>(std::move(ctx));
    case EngineKind::rtrl_sparse:
    case EngineKind::snap: return std::make_unique<SparseInfluenceEngine>(std::move(ctx));
    case EngineKind::rflo: return std::make_unique<RfloEngine>(std::move(ctx));
    case EngineKind::uoro: return std::make_unique<UoroEngine>(std::move(ctx));
  }
  throw std::invalid_argument("unknown engine kind");
}

inline std::unique_ptr<Engine> make_engine(const EngineSpec& spec, std::shared_ptr<const Cell> cell) {
  return make_engine(make_context(spec, std::move(cell)));
}

// Single-step view: the loss and this step's gradient contribution alone.
struct EngineStepResult {
  double loss = 0.0;
  std::vector<double> grad_core;
  std::vector<double> grad_readout;
  std::uint64_t madds = 0;
  std::size_t accumulator_nnz = 0;
};

inline EngineStepResult engine_step(Engine& engine, const CellParams& params, const Readout& readout,
                                    std::span<const double> x, int target) {
  GradientBuffer grads(params.values().size(), readout.param_count());
  const auto report = engine.step(params, readout, x, target, grads);
  engine.flush(params, grads);
  return {report.loss, std::move(grads.core), std::move(grads.readout), report.madds, report.accumulator_nnz};
}

// Whole-sequence gradient with frozen weights; flush at the end only.
struct SequenceGradient {
  double loss = 0.0;
  std::vector<double> core;
  std::vector<double> readout;
  std::uint64_t madds = 0;
};

inline SequenceGradient sequence_gradient(Engine& engine, const CellParams& params, const Readout& readout,
                                          const std::vector<std::vector<double>>& inputs,
                                          const std::vector<int>& targets, const CellState* initial = nullptr) {
  if (inputs.size() != targets.size()) throw DimensionError("sequence_gradient: inputs and targets differ in length");
  engine.reset(initial ? *initial : CellState::zeros(engine.cell().state_size()));
  GradientBuffer grads(params.values().size(), readout.param_count());
  const std::uint64_t before = engine.counter().madds;
  double loss = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto report = engine.step(params, readout, inputs[t], targets[t], grads);
    loss += report.loss;
  }
  engine.flush(params, grads);
  return {loss, std::move(grads.core), std::move(grads.readout), engine.counter().madds - before};
}

// Forward-only total loss; the finite-difference target.
inline double sequence_loss(const Cell& cell, const CellParams& params, const Readout& readout,
                            const std::vector<std::vector<double>>& inputs, const std::vector<int>& targets,
                            const CellState* initial = nullptr) {
  std::vector<double> state = initial ? initial->values : std::vector<double>(cell.state_size(), 0.0);
  StepCache cache;
  double loss = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    cell.forward(params, state, inputs[t], cache);
    state = cache.next;
    if (targets[t] >= 0) loss += readout.loss(std::span<const double>(state).first(cell.units()), targets[t]);
  }
  return loss;
}

}  // namespace snap
