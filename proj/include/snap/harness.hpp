#pragma once

// Experiment orchestration: run configuration, the batched training loop
// with online updates, metrics output, learning-rate/seed sweeps and the
// influence-bias analyzer.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <atomic>
#include <mutex>
#include <vector>

#include "json.hpp"
#include "snap/cells.hpp"
#include "snap/engines.hpp"
#include "snap/optim.hpp"
#include "snap/readout.hpp"
#include "snap/tasks.hpp"

namespace snap {

enum class TaskKind { copy, copy_fixed, bytelm };

inline TaskKind parse_task(std::string_view name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "copy-fixed") return TaskKind::copy_fixed;
  if (name == "bytelm") return TaskKind::bytelm;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

inline std::string to_string(TaskKind task) {
  switch (task) {
    case TaskKind::copy: return "copy";
    case TaskKind::copy_fixed: return "copy-fixed";
    case TaskKind::bytelm: return "bytelm";
  }
  return "unknown";
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct RunConfig {
  TaskKind task = TaskKind::copy;
  Arch arch = Arch::gru;
  std::size_t units = 64;
  double sparsity = 0.0;
  std::string engine = "snap1";
  std::size_t update_period = 1;  // 0: once at the end of each batch
  std::size_t batch = 16;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t max_tokens = 2'000'000;
  std::uint64_t max_steps = 0;  // 0: no step limit
  std::uint64_t seed = 1;
  std::string out;
  std::size_t copy_length = 1;  // initial L, or the fixed length for copy-fixed
  double bpc_threshold = CopyCurriculum::kDefaultThreshold;
  std::string corpus;
  std::size_t crop = 128;
  double valid_fraction = 0.1;
  std::size_t valid_crops = 256;
  std::optional<std::size_t> readout_hidden;  // unset: 1024 for bytelm, linear otherwise
  std::size_t log_interval = 100;
  std::size_t eval_interval = 0;  // bytelm validation period; 0: at the end only
  double prune_sparsity = 0.0;
  std::size_t prune_interval = 1000;
  std::size_t prune_final_step = 350000;

  std::size_t resolved_readout_hidden() const {
    if (readout_hidden) return *readout_hidden;
    return task == TaskKind::bytelm ? 1024 : 0;
  }

  PruneSchedule prune_schedule() const { return {prune_interval, prune_sparsity, prune_final_step}; }

  std::size_t inputs() const { return task == TaskKind::bytelm ? kByteVocab : kCopyChannels; }
  std::size_t classes() const { return task == TaskKind::bytelm ? kByteVocab : kCopyClasses; }
};

namespace detail {

struct ConfigField {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto size_field = [&f](const char* key, std::size_t RunConfig::*member) {
      f.push_back({key, [member](const RunConfig& c) { return std::to_string(c.*member); },
                   [member, key](RunConfig& c, const std::string& v) {
                     c.*member = static_cast<std::size_t>(parse_uint(key, v));
                   }});
    };
    auto u64_field = [&f](const char* key, std::uint64_t RunConfig::*member) {
      f.push_back({key, [member](const RunConfig& c) { return std::to_string(c.*member); },
                   [member, key](RunConfig& c, const std::string& v) { c.*member = parse_uint(key, v); }});
    };
    auto real_field = [&f](const char* key, double RunConfig::*member) {
      f.push_back({key, [member](const RunConfig& c) { return format_real(c.*member); },
                   [member, key](RunConfig& c, const std::string& v) { c.*member = parse_real(key, v); }});
    };
    auto string_field = [&f](const char* key, std::string RunConfig::*member) {
      f.push_back({key, [member](const RunConfig& c) { return c.*member; },
                   [member](RunConfig& c, const std::string& v) { c.*member = v; }});
    };
    f.push_back({"task", [](const RunConfig& c) { return to_string(c.task); },
                 [](RunConfig& c, const std::string& v) { c.task = parse_task(v); }});
    f.push_back({"arch", [](const RunConfig& c) { return to_string(c.arch); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.arch = parse_arch(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 }});
    size_field("units", &RunConfig::units);
    real_field("sparsity", &RunConfig::sparsity);
    string_field("engine", &RunConfig::engine);
    size_field("update-period", &RunConfig::update_period);
    size_field("batch", &RunConfig::batch);
    real_field("lr", &RunConfig::lr);
    f.push_back({"optimizer", [](const RunConfig& c) { return to_string(c.optimizer); },
                 [](RunConfig& c, const std::string& v) { c.optimizer = parse_optimizer(v); }});
    u64_field("max-tokens", &RunConfig::max_tokens);
    u64_field("max-steps", &RunConfig::max_steps);
    u64_field("seed", &RunConfig::seed);
    string_field("out", &RunConfig::out);
    size_field("copy-length", &RunConfig::copy_length);
    real_field("bpc-threshold", &RunConfig::bpc_threshold);
    string_field("corpus", &RunConfig::corpus);
    size_field("crop", &RunConfig::crop);
    real_field("valid-fraction", &RunConfig::valid_fraction);
    size_field("valid-crops", &RunConfig::valid_crops);
    f.push_back({"readout-hidden", [](const RunConfig& c) { return std::to_string(c.resolved_readout_hidden()); },
                 [](RunConfig& c, const std::string& v) {
                   c.readout_hidden = static_cast<std::size_t>(parse_uint("readout-hidden", v));
                 }});
    size_field("log-interval", &RunConfig::log_interval);
    size_field("eval-interval", &RunConfig::eval_interval);
    real_field("prune-sparsity", &RunConfig::prune_sparsity);
    size_field("prune-interval", &RunConfig::prune_interval);
    size_field("prune-final-step", &RunConfig::prune_final_step);
    return f;
  }();
  return fields;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : detail::config_fields()) keys.emplace_back(f.key);
  return keys;
}

inline void set_config_value(RunConfig& config, std::string_view key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

inline std::string get_config_value(const RunConfig& config, std::string_view key) {
  for (const auto& f : detail::config_fields())
    if (key == f.key) return f.get(config);
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

// `key = value` per line; blank lines and lines starting with '#' skipped.
inline void apply_config_text(RunConfig& config, std::istream& in) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto text = detail::trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    set_config_value(config, detail::trim(std::string_view(text).substr(0, eq)),
                     detail::trim(std::string_view(text).substr(eq + 1)));
  }
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig config;
  std::istringstream in(text);
  apply_config_text(config, in);
  return config;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  RunConfig config;
  apply_config_text(config, in);
  return config;
}

inline std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : detail::config_fields()) {
    out += f.key;
    out += " = ";
    out += f.get(config);
    out += '\n';
  }
  return out;
}

// FNV-1a over the serialized config, excluding the output path.
inline std::string config_hash(const RunConfig& config) {
  RunConfig copy = config;
  copy.out.clear();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : serialize_config(copy)) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline void validate_config(const RunConfig& c) {
  if (c.units == 0) throw ConfigError("units must be at least 1");
  if (!(c.sparsity >= 0.0 && c.sparsity < 1.0)) throw ConfigError("sparsity must lie in [0, 1)");
  if (c.batch == 0) throw ConfigError("batch must be at least 1");
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ConfigError("learning rate must be finite and non-negative");
  if (c.max_tokens == 0 && c.max_steps == 0) throw ConfigError("set max-tokens or max-steps");
  if (c.copy_length == 0) throw ConfigError("copy-length must be at least 1");
  if (!(c.bpc_threshold > 0.0)) throw ConfigError("bpc-threshold must be positive");
  if (c.log_interval == 0) throw ConfigError("log-interval must be at least 1");
  if (!(c.prune_sparsity >= 0.0 && c.prune_sparsity < 1.0)) throw ConfigError("prune-sparsity must lie in [0, 1)");
  if (c.prune_sparsity > 0.0 && c.prune_interval == 0) throw ConfigError("prune-interval must be at least 1");
  if (c.prune_sparsity > 0.0 && c.prune_sparsity < c.sparsity) {
    throw ConfigError("prune-sparsity is below the initial sparsity");
  }
  EngineSpec spec;
  try {
    spec = parse_engine(c.engine);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  validate_pruning(spec, c.prune_schedule());
  if (c.task == TaskKind::bytelm) {
    if (c.corpus.empty()) throw ConfigError("bytelm needs a corpus path");
    if (c.crop == 0) throw ConfigError("crop must be at least 1");
    if (!(c.valid_fraction > 0.0 && c.valid_fraction < 1.0)) throw ConfigError("valid-fraction must lie in (0, 1)");
  }
}

struct MetricsRecord {
  std::uint64_t step = 0;
  std::uint64_t tokens = 0;
  double loss = 0.0;  // mean nats per target over the logging interval
  double bpc = 0.0;
  std::size_t curriculum_length = 0;
  double grad_norm = 0.0;
  std::size_t accumulator_nnz = 0;
  std::uint64_t madds = 0;
  double wall_ms = 0.0;
  std::optional<double> valid_bpc;
  std::size_t nonzero_params = 0;
  std::string config_hash;
};

inline nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["tokens"] = r.tokens;
  j["loss"] = r.loss;
  j["bpc"] = r.bpc;
  j["L"] = r.curriculum_length;
  j["grad_norm"] = r.grad_norm;
  j["acc_nnz"] = r.accumulator_nnz;
  j["madds"] = r.madds;
  j["wall_ms"] = r.wall_ms;
  if (r.valid_bpc) j["valid_bpc"] = *r.valid_bpc;
  j["nonzero_params"] = r.nonzero_params;
  j["config_hash"] = r.config_hash;
  return j;
}

struct RunSummary {
  std::string status = "ok";  // ok | diverged
  std::string message;
  std::uint64_t steps = 0;
  std::uint64_t tokens = 0;
  std::uint64_t updates = 0;
  std::uint64_t madds = 0;
  std::size_t final_length = 0;
  std::size_t max_length = 0;
  double final_bpc = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> valid_bpc;
  std::size_t nonzero_params = 0;
  std::string config_hash;
};

struct BatchStats {
  double loss_sum = 0.0;  // nats, summed over targets
  std::size_t targets = 0;
  std::uint64_t tokens = 0;
  std::size_t updates = 0;
  double grad_norm = 0.0;

  double mean_loss() const { return targets == 0 ? 0.0 : loss_sum / static_cast<double>(targets); }
  double bpc() const { return nats_to_bits(mean_loss()); }
};

// Model, optimizer and one engine per batch element; advances one batch at
// a time.
class Trainer {
 public:
  explicit Trainer(RunConfig config) : config_(std::move(config)), rng_(config_.seed) {
    validate_config(config_);
    spec_ = parse_engine(config_.engine);
    spec_.seed = config_.seed ^ 0x9e3779b97f4a7c15ull;
    schedule_ = config_.prune_schedule();
    const CellShape shape{config_.arch, config_.units, config_.inputs()};
    auto structure = make_structure(shape, config_.sparsity, rng_);
    params_ = init_params(structure, rng_);
    readout_ = Readout(config_.units, config_.resolved_readout_hidden(), config_.classes(), rng_);
    core_opt_ = Optimizer(config_.optimizer, params_.values().size(), config_.lr);
    readout_opt_ = Optimizer(config_.optimizer, readout_.param_count(), config_.lr);
    if (config_.task == TaskKind::bytelm) {
      auto [train, valid] = ByteCorpus::load(config_.corpus).split(config_.valid_fraction);
      if (train.size() <= config_.crop + 1 || valid.size() <= config_.crop + 1) {
        throw ConfigError("corpus is too short for the crop length");
      }
      train_ = std::move(train);
      valid_ = std::move(valid);
    }
    curriculum_ = CopyCurriculum(config_.task == TaskKind::copy ? config_.copy_length : 1, config_.bpc_threshold);
    rebuild_engines();
  }

  const RunConfig& config() const { return config_; }
  const CellParams& params() const { return params_; }
  const Readout& readout() const { return readout_; }
  const Cell& cell() const { return *cell_; }
  std::shared_ptr<const Cell> cell_ptr() const { return cell_; }
  const CopyCurriculum& curriculum() const { return curriculum_; }
  std::uint64_t steps() const { return steps_; }
  std::uint64_t tokens() const { return tokens_; }
  std::uint64_t updates() const { return updates_; }
  const std::vector<std::unique_ptr<Engine>>& engines() const { return engines_; }

  std::uint64_t madds() const {
    std::uint64_t total = retired_madds_;
    for (const auto& e : engines_) total += e->counter().madds;
    return total;
  }

  bool budget_left() const {
    if (config_.max_steps > 0 && steps_ >= config_.max_steps) return false;
    if (config_.max_tokens > 0 && tokens_ >= config_.max_tokens) return false;
    return true;
  }

  std::vector<Sequence> next_batch() {
    switch (config_.task) {
      case TaskKind::copy: return sample_copy_batch(curriculum_, config_.batch, rng_);
      case TaskKind::copy_fixed: return sample_copy_fixed_batch(config_.copy_length, config_.batch, rng_);
      case TaskKind::bytelm: return sample_lm_batch(train_, config_.batch, config_.crop, rng_);
    }
    throw ConfigError("unknown task");
  }

  BatchStats train_step() { return train_on(next_batch()); }

  // Lockstep over the batch: element b idles once its sequence has ended.
  // Every `update_period` timesteps (or once at the end when 0), pending
  // BPTT windows are flushed and the batch-averaged gradient is applied.
  BatchStats train_on(const std::vector<Sequence>& batch) {
    if (batch.size() != engines_.size()) throw DimensionError("batch size differs from the configured batch");
    BatchStats stats;
    for (auto& e : engines_) e->reset(CellState::zeros(cell_->state_size()));
    std::size_t longest = 0;
    for (const auto& s : batch) longest = std::max(longest, s.length());
    std::size_t since_update = 0;
    for (std::size_t t = 0; t < longest; ++t) {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        if (t >= batch[b].length()) continue;
        const auto report = engines_[b]->step(params_, readout_, batch[b].inputs[t], batch[b].targets[t], grads_);
        if (report.has_loss) {
          stats.loss_sum += report.loss;
          ++stats.targets;
        }
        ++stats.tokens;
      }
      ++since_update;
      if (config_.update_period > 0 && since_update == config_.update_period) {
        stats.grad_norm = apply_update();
        ++stats.updates;
        since_update = 0;
      }
    }
    if (since_update > 0) {
      stats.grad_norm = apply_update();
      ++stats.updates;
    }
    ++steps_;
    tokens_ += stats.tokens;
    updates_ += stats.updates;
    if (config_.task == TaskKind::copy) curriculum_.update(stats.bpc());
    maybe_prune();
    return stats;
  }

  // Validation bpc over evenly spaced crops of the held-out split.
  double validation_bpc() const {
    if (config_.task != TaskKind::bytelm) throw ConfigError("validation needs the bytelm task");
    const std::size_t max_offset = valid_.max_offset(config_.crop);
    const std::size_t n = std::max<std::size_t>(1, std::min(config_.valid_crops, max_offset + 1));
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t offset = n == 1 ? 0 : i * max_offset / (n - 1);
      const auto seq = valid_.crop(offset, config_.crop);
      total += sequence_loss(*cell_, params_, readout_, seq.inputs, seq.targets);
      count += seq.target_count();
    }
    return nats_to_bits(total / static_cast<double>(count));
  }

 private:
  double apply_update() {
    for (auto& e : engines_) e->flush(params_, grads_);
    const double scale = 1.0 / static_cast<double>(engines_.size());
    double sq = 0.0;
    for (auto& g : grads_.core) {
      g *= scale;
      sq += g * g;
    }
    for (auto& g : grads_.readout) {
      g *= scale;
      sq += g * g;
    }
    core_opt_.step(params_.values(), grads_.core);
    readout_opt_.step(readout_.params(), grads_.readout);
    grads_.zero();
    return std::sqrt(sq);
  }

  void maybe_prune() {
    if (!schedule_.is_event(steps_)) return;
    auto result = prune_step(schedule_, steps_, params_);
    if (!result.changed) return;
    core_opt_.remap(result.old_to_new, result.params.values().size());
    params_ = std::move(result.params);
    rebuild_engines();
  }

  void rebuild_engines() {
    for (const auto& e : engines_) retired_madds_ += e->counter().madds;
    cell_ = std::make_shared<const Cell>(params_.structure_ptr());
    auto ctx = make_context(spec_, cell_);
    engines_.clear();
    for (std::size_t b = 0; b < config_.batch; ++b) {
      engines_.push_back(make_engine(ctx));
      if (auto* uoro = dynamic_cast<UoroEngine*>(engines_.back().get())) uoro->reseed(spec_.seed + b);
    }
    grads_ = GradientBuffer(params_.values().size(), readout_.param_count());
  }

  RunConfig config_;
  Rng rng_;
  EngineSpec spec_;
  PruneSchedule schedule_;
  CellParams params_;
  Readout readout_;
  std::shared_ptr<const Cell> cell_;
  Optimizer core_opt_;
  Optimizer readout_opt_;
  std::vector<std::unique_ptr<Engine>> engines_;
  GradientBuffer grads_;
  ByteCorpus train_;
  ByteCorpus valid_;
  CopyCurriculum curriculum_;
  std::uint64_t steps_ = 0;
  std::uint64_t tokens_ = 0;
  std::uint64_t updates_ = 0;
  std::uint64_t retired_madds_ = 0;
};

inline const char* kSummaryHeader =
    "task,arch,units,sparsity,engine,update_period,batch,lr,seed,status,steps,tokens,updates,madds,final_L,max_L,"
    "final_bpc,valid_bpc,nonzero_params,config_hash";

inline std::string summary_csv_row(const RunConfig& c, const RunSummary& s) {
  std::ostringstream os;
  os << to_string(c.task) << ',' << to_string(c.arch) << ',' << c.units << ',' << format_real(c.sparsity) << ','
     << c.engine << ',' << c.update_period << ',' << c.batch << ',' << format_real(c.lr) << ',' << c.seed << ','
     << s.status << ',' << s.steps << ',' << s.tokens << ',' << s.updates << ',' << s.madds << ',' << s.final_length
     << ',' << s.max_length << ',' << format_real(s.final_bpc) << ',';
  if (s.valid_bpc) os << format_real(*s.valid_bpc);
  os << ',' << s.nonzero_params << ',' << s.config_hash;
  return os.str();
}

using RecordSink = std::function<void(const MetricsRecord&)>;

// Trains until the budget is spent. With config.out set, writes
// <out>/config.txt, <out>/metrics.jsonl and <out>/summary.csv. A numeric
// failure ends the run with status "diverged"; records logged so far stay.
inline RunSummary run_experiment(const RunConfig& config, const RecordSink& sink = {}) {
  validate_config(config);
  const auto hash = config_hash(config);
  std::ofstream metrics;
  if (!config.out.empty()) {
    std::filesystem::create_directories(config.out);
    std::ofstream(std::filesystem::path(config.out) / "config.txt") << serialize_config(config);
    metrics.open(std::filesystem::path(config.out) / "metrics.jsonl");
    if (!metrics) throw std::runtime_error("cannot write metrics under " + config.out);
  }
  Trainer trainer(config);
  RunSummary summary;
  summary.config_hash = hash;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  };
  double window_loss = 0.0;
  std::size_t window_targets = 0;
  double last_norm = 0.0;
  auto emit = [&](bool with_validation) {
    MetricsRecord r;
    r.step = trainer.steps();
    r.tokens = trainer.tokens();
    r.loss = window_targets == 0 ? 0.0 : window_loss / static_cast<double>(window_targets);
    r.bpc = nats_to_bits(r.loss);
    r.curriculum_length = trainer.curriculum().length();
    r.grad_norm = last_norm;
    r.accumulator_nnz = trainer.engines().front()->accumulator_nnz();
    r.madds = trainer.madds();
    if (with_validation) r.valid_bpc = trainer.validation_bpc();
    r.nonzero_params = trainer.params().structure().nonzero_param_count();
    r.config_hash = hash;
    r.wall_ms = elapsed_ms();
    if (metrics.is_open()) metrics << to_json(r).dump() << std::endl;
    if (sink) sink(r);
    summary.final_bpc = r.bpc;
    if (r.valid_bpc) summary.valid_bpc = r.valid_bpc;
    window_loss = 0.0;
    window_targets = 0;
  };
  const bool lm = config.task == TaskKind::bytelm;
  try {
    while (trainer.budget_left()) {
      const auto stats = trainer.train_step();
      window_loss += stats.loss_sum;
      window_targets += stats.targets;
      last_norm = stats.grad_norm;
      summary.max_length = std::max(summary.max_length, trainer.curriculum().length());
      const bool eval = lm && config.eval_interval > 0 && trainer.steps() % config.eval_interval == 0;
      const bool done = !trainer.budget_left();
      if (trainer.steps() % config.log_interval == 0 || eval || done) emit(eval || (lm && done));
    }
  } catch (const NumericError& e) {
    summary.status = "diverged";
    summary.message = e.what();
  }
  summary.steps = trainer.steps();
  summary.tokens = trainer.tokens();
  summary.updates = trainer.updates();
  summary.madds = trainer.madds();
  summary.final_length = trainer.curriculum().length();
  summary.max_length = std::max(summary.max_length, summary.final_length);
  summary.nonzero_params = trainer.params().structure().nonzero_param_count();
  if (!config.out.empty()) {
    std::ofstream csv(std::filesystem::path(config.out) / "summary.csv");
    csv << kSummaryHeader << '\n' << summary_csv_row(config, summary) << '\n';
  }
  return summary;
}

// Learning rates 1e-3, 10^-3.5, 1e-4.
inline std::vector<double> default_learning_rates() { return {1e-3, std::pow(10.0, -3.5), 1e-4}; }

struct SweepRun {
  RunConfig config;
  RunSummary summary;
};

struct SweepAggregate {
  double lr = 0.0;
  std::size_t runs = 0;
  double mean_final_length = 0.0;
  std::size_t min_final_length = 0;
  std::size_t max_final_length = 0;
  std::optional<double> mean_valid_bpc;
  std::optional<double> min_valid_bpc;
  std::optional<double> max_valid_bpc;
  double mean_final_bpc = 0.0;
  bool best = false;
};

struct SweepResult {
  std::vector<SweepRun> runs;
  std::vector<SweepAggregate> aggregates;
};

// Grid over learning rates x seeds; runs are independent and may execute on
// `jobs` worker threads. Outputs go to <out>/lr<i>_seed<s>/ plus
// <out>/runs.csv and <out>/aggregate.csv.
inline SweepResult run_sweep(const RunConfig& base, const std::vector<double>& lrs,
                             const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1) {
  if (lrs.empty() || seeds.empty()) throw ConfigError("sweep needs at least one learning rate and one seed");
  SweepResult result;
  for (std::size_t li = 0; li < lrs.size(); ++li) {
    for (auto seed : seeds) {
      RunConfig c = base;
      c.lr = lrs[li];
      c.seed = seed;
      if (!base.out.empty()) {
        c.out = (std::filesystem::path(base.out) / ("lr" + std::to_string(li) + "_seed" + std::to_string(seed))).string();
      }
      validate_config(c);
      result.runs.push_back({c, {}});
    }
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i = next++; i < result.runs.size(); i = next++) {
      try {
        result.runs[i].summary = run_experiment(result.runs[i].config);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < std::max<std::size_t>(1, jobs); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  const bool lm = base.task == TaskKind::bytelm;
  for (double lr : lrs) {
    SweepAggregate a;
    a.lr = lr;
    a.min_final_length = std::numeric_limits<std::size_t>::max();
    double valid_sum = 0.0;
    std::size_t valid_n = 0;
    for (const auto& r : result.runs) {
      if (r.config.lr != lr) continue;
      ++a.runs;
      a.mean_final_length += static_cast<double>(r.summary.final_length);
      a.min_final_length = std::min(a.min_final_length, r.summary.final_length);
      a.max_final_length = std::max(a.max_final_length, r.summary.final_length);
      a.mean_final_bpc += r.summary.final_bpc;
      if (r.summary.valid_bpc) {
        const double v = *r.summary.valid_bpc;
        valid_sum += v;
        ++valid_n;
        a.min_valid_bpc = a.min_valid_bpc ? std::min(*a.min_valid_bpc, v) : v;
        a.max_valid_bpc = a.max_valid_bpc ? std::max(*a.max_valid_bpc, v) : v;
      }
    }
    a.mean_final_length /= static_cast<double>(a.runs);
    a.mean_final_bpc /= static_cast<double>(a.runs);
    if (valid_n > 0) a.mean_valid_bpc = valid_sum / static_cast<double>(valid_n);
    result.aggregates.push_back(a);
  }
  // Best: highest mean final L for copy tasks, lowest mean validation bpc for bytelm.
  std::size_t best = 0;
  for (std::size_t i = 1; i < result.aggregates.size(); ++i) {
    const auto& a = result.aggregates[i];
    const auto& b = result.aggregates[best];
    const bool better = lm ? a.mean_valid_bpc.value_or(a.mean_final_bpc) < b.mean_valid_bpc.value_or(b.mean_final_bpc)
                           : a.mean_final_length > b.mean_final_length;
    if (better) best = i;
  }
  result.aggregates[best].best = true;

  if (!base.out.empty()) {
    std::filesystem::create_directories(base.out);
    std::ofstream runs(std::filesystem::path(base.out) / "runs.csv");
    runs << kSummaryHeader << '\n';
    for (const auto& r : result.runs) runs << summary_csv_row(r.config, r.summary) << '\n';
    std::ofstream agg(std::filesystem::path(base.out) / "aggregate.csv");
    agg << "lr,runs,mean_final_L,min_final_L,max_final_L,mean_final_bpc,mean_valid_bpc,min_valid_bpc,max_valid_bpc,best\n";
    auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
    for (const auto& a : result.aggregates) {
      agg << format_real(a.lr) << ',' << a.runs << ',' << format_real(a.mean_final_length) << ','
          << a.min_final_length << ',' << a.max_final_length << ',' << format_real(a.mean_final_bpc) << ','
          << opt(a.mean_valid_bpc) << ',' << opt(a.min_valid_bpc) << ',' << opt(a.max_valid_bpc) << ','
          << (a.best ? 1 : 0) << '\n';
    }
  }
  return result;
}

// ---- influence bias analysis ----

struct BiasConfig {
  std::size_t units = 8;
  double sparsity = 0.75;
  std::size_t length = 16;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::vector<std::size_t> checkpoints{100};
  std::string out;  // when set, one dump per checkpoint
};

struct BiasRow {
  std::size_t step = 0;
  std::size_t entries = 0;  // positions in the exact reachable support
  double total_mass = 0.0;
  std::size_t snap1_kept = 0;
  double snap1_mean_kept = 0.0;
  double snap1_mean_dropped = 0.0;
  double snap1_mass = 0.0;
  std::size_t snap2_kept = 0;
  double snap2_mean_kept = 0.0;
  double snap2_mean_dropped = 0.0;
  double snap2_mass = 0.0;
};

struct InfluencePartition {
  BiasRow row;
  std::vector<std::tuple<std::uint32_t, std::uint32_t, double, bool, bool>> entries;
};

inline InfluencePartition partition_influence(const PatternedMatrix& exact, const SparsityPattern& snap1,
                                              const SparsityPattern& snap2) {
  InfluencePartition out;
  auto& row = out.row;
  const auto& p = exact.pattern();
  auto values = exact.values();
  double kept1 = 0.0, kept2 = 0.0, total = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    for (std::size_t slot = p.row_begin(r); slot < p.row_end(r); ++slot) {
      const auto c = p.col_of(slot);
      const double m = std::abs(values[slot]);
      const bool in1 = snap1.contains(static_cast<std::uint32_t>(r), c);
      const bool in2 = snap2.contains(static_cast<std::uint32_t>(r), c);
      total += m;
      if (in1) {
        kept1 += m;
        ++row.snap1_kept;
      }
      if (in2) {
        kept2 += m;
        ++row.snap2_kept;
      }
      out.entries.emplace_back(static_cast<std::uint32_t>(r), c, values[slot], in1, in2);
    }
  }
  row.entries = p.nnz();
  row.total_mass = total;
  auto mean = [](double sum, std::size_t n) { return n == 0 ? 0.0 : sum / static_cast<double>(n); };
  row.snap1_mean_kept = mean(kept1, row.snap1_kept);
  row.snap1_mean_dropped = mean(total - kept1, row.entries - row.snap1_kept);
  row.snap2_mean_kept = mean(kept2, row.snap2_kept);
  row.snap2_mean_dropped = mean(total - kept2, row.entries - row.snap2_kept);
  row.snap1_mass = total > 0.0 ? kept1 / total : 1.0;
  row.snap2_mass = total > 0.0 ? kept2 / total : 1.0;
  return out;
}

inline void write_influence_dump(std::ostream& os, const InfluencePartition& part) {
  os << "# row col value kept_by_snap1 kept_by_snap2\n";
  const auto old_precision = os.precision(17);
  for (const auto& [r, c, v, k1, k2] : part.entries) os << r << ' ' << c << ' ' << v << ' ' << k1 << ' ' << k2 << '\n';
  os.precision(old_precision);
}

// Exact end-of-sequence influence via rtrl_sparse on one probe sequence.
inline InfluencePartition measure_influence(std::shared_ptr<const Cell> cell, const CellParams& params,
                                            const Readout& readout, const Sequence& probe) {
  const auto& c = *cell;
  if (c.state_size() * c.structure().nonzero_param_count() > 1'000'000) {
    throw ConfigError("bias analysis needs K * p~ <= 1e6 for the exact influence");
  }
  auto engine = make_engine({EngineKind::rtrl_sparse}, cell);
  sequence_gradient(*engine, params, readout, probe.inputs, probe.targets);
  const auto& exact = dynamic_cast<const SparseInfluenceEngine&>(*engine).influence();
  const auto snap2 = n_step_pattern(*c.d_pattern(), *c.i_pattern(), 2);
  return partition_influence(exact, *c.i_pattern(), snap2);
}

// Trains a GRU with full BPTT on fixed-length copy and measures the exact
// influence at each checkpoint (0 = before training).
inline std::vector<BiasRow> analyze_bias(const BiasConfig& config) {
  RunConfig rc;
  rc.task = TaskKind::copy_fixed;
  rc.arch = Arch::gru;
  rc.units = config.units;
  rc.sparsity = config.sparsity;
  rc.engine = "bptt";
  rc.update_period = 0;
  rc.batch = config.batch;
  rc.lr = config.lr;
  rc.seed = config.seed;
  rc.copy_length = config.length;
  rc.max_tokens = 0;
  rc.max_steps = std::numeric_limits<std::uint64_t>::max();
  Trainer trainer(rc);
  if (trainer.cell().state_size() * trainer.params().values().size() > 1'000'000) {
    throw ConfigError("bias analysis needs K * p~ <= 1e6 for the exact influence");
  }
  Rng probe_rng(config.seed ^ 0x5bd1e995ull);
  std::vector<std::size_t> checkpoints = config.checkpoints;
  std::sort(checkpoints.begin(), checkpoints.end());
  std::vector<BiasRow> rows;
  for (auto target : checkpoints) {
    while (trainer.steps() < target) trainer.train_step();
    const auto probe = sample_copy_sequence(config.length, probe_rng);
    auto part = measure_influence(trainer.cell_ptr(), trainer.params(), trainer.readout(), probe);
    part.row.step = target;
    if (!config.out.empty()) {
      std::filesystem::create_directories(config.out);
      std::ofstream dump(std::filesystem::path(config.out) / ("influence_step" + std::to_string(target) + ".txt"));
      write_influence_dump(dump, part);
    }
    rows.push_back(part.row);
  }
  if (!config.out.empty()) {
    std::ofstream csv(std::filesystem::path(config.out) / "bias.csv");
    csv << "step,entries,snap1_kept,snap1_mean_kept,snap1_mean_dropped,snap1_mass,snap2_kept,snap2_mean_kept,"
           "snap2_mean_dropped,snap2_mass\n";
    for (const auto& r : rows) {
      csv << r.step << ',' << r.entries << ',' << r.snap1_kept << ',' << format_real(r.snap1_mean_kept) << ','
          << format_real(r.snap1_mean_dropped) << ',' << format_real(r.snap1_mass) << ',' << r.snap2_kept << ','
          << format_real(r.snap2_mean_kept) << ',' << format_real(r.snap2_mean_dropped) << ','
          << format_real(r.snap2_mass) << '\n';
    }
  }
  return rows;
}

}  // namespace snap
