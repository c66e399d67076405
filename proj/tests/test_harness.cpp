#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "snap/harness.hpp"

using namespace snap;

namespace {

RunConfig small_copy(const std::string& engine = "snap1") {
  RunConfig c;
  c.units = 6;
  c.batch = 3;
  c.engine = engine;
  c.max_tokens = 0;
  c.max_steps = 20;
  c.log_interval = 5;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("snap_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::vector<Sequence> fixed_batch(std::size_t batch, std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_copy_fixed_batch(length, batch, rng);
}

}  // namespace

TEST(Config, RoundTripAndHash) {
  RunConfig c = small_copy("snap2");
  c.lr = std::pow(10.0, -3.5);
  c.sparsity = 0.9;
  c.readout_hidden = 32;
  const auto text = serialize_config(c);
  const auto back = parse_config(text);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 16u);

  RunConfig moved = c;
  moved.out = "/somewhere/else";
  EXPECT_EQ(config_hash(moved), config_hash(c));
  RunConfig other = c;
  other.lr = 1e-3;
  EXPECT_NE(config_hash(other), config_hash(c));
}

TEST(Config, TextFormat) {
  const auto c = parse_config("# comment\n engine = rflo \nupdate-period=0\n\nunits = 12\n");
  EXPECT_EQ(c.engine, "rflo");
  EXPECT_EQ(c.update_period, 0u);
  EXPECT_EQ(c.units, 12u);
  EXPECT_EQ(get_config_value(c, "units"), "12");
  EXPECT_THROW(parse_config("colour = blue\n"), ConfigError);
  EXPECT_THROW(parse_config("units = twelve\n"), ConfigError);
  EXPECT_THROW(parse_config("units 12\n"), ConfigError);
  RunConfig d;
  EXPECT_THROW(set_config_value(d, "nope", "1"), ConfigError);
}

TEST(Config, Validation) {
  auto bad = [](auto edit) {
    RunConfig c = small_copy();
    edit(c);
    return c;
  };
  EXPECT_NO_THROW(validate_config(small_copy()));
  EXPECT_THROW(validate_config(bad([](RunConfig& c) { c.units = 0; })), ConfigError);
  EXPECT_THROW(validate_config(bad([](RunConfig& c) { c.sparsity = 1.0; })), ConfigError);
  EXPECT_THROW(validate_config(bad([](RunConfig& c) { c.batch = 0; })), ConfigError);
  EXPECT_THROW(validate_config(bad([](RunConfig& c) { c.lr = -1; })), ConfigError);
  EXPECT_THROW(validate_config(bad([](RunConfig& c) { c.engine = "snap0"; })), ConfigError);
  EXPECT_THROW(validate_config(bad([](RunConfig& c) { c.max_steps = 0; })), ConfigError);
  EXPECT_THROW(validate_config(bad([](RunConfig& c) { c.prune_sparsity = 0.5; })), ConfigError);
  EXPECT_THROW(validate_config(bad([](RunConfig& c) {
                 c.engine = "bptt";
                 c.sparsity = 0.6;
                 c.prune_sparsity = 0.5;
               })),
               ConfigError);
  EXPECT_THROW(validate_config(bad([](RunConfig& c) { c.task = TaskKind::bytelm; })), ConfigError);
  EXPECT_NO_THROW(validate_config(bad([](RunConfig& c) {
    c.engine = "bptt";
    c.prune_sparsity = 0.5;
  })));
}

TEST(Trainer, ZeroLearningRateLeavesTheModelAlone) {
  RunConfig c = small_copy("snap2");
  c.lr = 0.0;
  Trainer t(c);
  const auto before = std::vector<double>(t.params().values().begin(), t.params().values().end());
  const auto batch = fixed_batch(3, 4, 9);
  const auto a = t.train_on(batch);
  const auto b = t.train_on(batch);
  EXPECT_EQ(a.loss_sum, b.loss_sum);
  EXPECT_EQ(std::vector<double>(t.params().values().begin(), t.params().values().end()), before);
}

TEST(Trainer, EndOfSequenceUpdateAppliesTheBatchMeanGradient) {
  // Oracle: per-element BPTT gradients, averaged, then one Adam step by hand.
  RunConfig c = small_copy("bptt");
  c.update_period = 0;
  c.lr = 0.01;
  Trainer t(c);
  const auto batch = fixed_batch(3, 5, 4);
  const CellParams p0 = t.params();
  const Readout r0 = t.readout();
  std::vector<double> mean(p0.values().size(), 0.0), rmean(r0.param_count(), 0.0);
  for (const auto& s : batch) {
    auto engine = make_engine(parse_engine("bptt"), t.cell_ptr());
    const auto g = sequence_gradient(*engine, p0, r0, s.inputs, s.targets);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += g.core[i] / 3.0;
    for (std::size_t i = 0; i < rmean.size(); ++i) rmean[i] += g.readout[i] / 3.0;
  }
  const auto stats = t.train_on(batch);
  EXPECT_EQ(stats.updates, 1u);
  EXPECT_EQ(stats.tokens, 3u * 12);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    // First Adam step: m̂ = g, v̂ = g², so the move is lr g / (|g| + ε).
    const double expected = p0.values()[i] - 0.01 * mean[i] / (std::abs(mean[i]) + 1e-8);
    EXPECT_NEAR(t.params().values()[i], expected, 1e-9) << i;
  }
  for (std::size_t i = 0; i < rmean.size(); ++i) {
    const double expected = r0.params()[i] - 0.01 * rmean[i] / (std::abs(rmean[i]) + 1e-8);
    EXPECT_NEAR(t.readout().params()[i], expected, 1e-9) << i;
  }
}

TEST(Trainer, UpdatePeriodOfSequenceLengthMatchesEndOfSequence) {
  for (const char* engine : {"bptt", "snap1", "rflo"}) {
    RunConfig a = small_copy(engine);
    a.update_period = 0;
    RunConfig b = a;
    b.update_period = 10;  // payload 4: 2 * 4 + 2 steps
    Trainer ta(a), tb(b);
    const auto batch = fixed_batch(3, 4, 5);
    const auto sa = ta.train_on(batch);
    const auto sb = tb.train_on(batch);
    EXPECT_EQ(sa.updates, 1u);
    EXPECT_EQ(sb.updates, 1u);
    EXPECT_EQ(std::vector<double>(ta.params().values().begin(), ta.params().values().end()),
              std::vector<double>(tb.params().values().begin(), tb.params().values().end()))
        << engine;
  }
}

TEST(Trainer, OnlineUpdatesCountTimesteps) {
  RunConfig c = small_copy("snap1");
  c.update_period = 3;
  Trainer t(c);
  EXPECT_EQ(t.train_on(fixed_batch(3, 4, 6)).updates, 4u);  // 10 steps: 3 + 3 + 3 + 1
  c.update_period = 1;
  Trainer u(c);
  EXPECT_EQ(u.train_on(fixed_batch(3, 4, 6)).updates, 10u);
}

TEST(RunExperiment, DeterministicRecords) {
  auto run = [] {
    std::vector<MetricsRecord> records;
    RunConfig c = small_copy("snap2");
    c.sparsity = 0.5;
    run_experiment(c, [&](const MetricsRecord& r) { records.push_back(r); });
    return records;
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto ja = to_json(a[i]);
    auto jb = to_json(b[i]);
    ja.erase("wall_ms");
    jb.erase("wall_ms");
    EXPECT_EQ(ja, jb) << i;
    if (i > 0) {
      EXPECT_GT(a[i].tokens, a[i - 1].tokens);
      EXPECT_GE(a[i].madds, a[i - 1].madds);
    }
  }
}

TEST(RunExperiment, WritesOutputs) {
  const auto dir = temp_dir("run");
  RunConfig c = small_copy("rflo");
  c.out = dir.string();
  const auto summary = run_experiment(c);
  EXPECT_EQ(summary.status, "ok");
  EXPECT_EQ(summary.steps, 20u);
  EXPECT_EQ(parse_config([&] {
              std::ifstream in(dir / "config.txt");
              return std::string(std::istreambuf_iterator<char>(in), {});
            }())
                .engine,
            "rflo");
  std::ifstream metrics(dir / "metrics.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "tokens", "loss", "bpc", "L", "grad_norm", "acc_nnz", "madds", "wall_ms",
                            "nonzero_params", "config_hash"})
      EXPECT_TRUE(j.contains(key)) << key;
    ++n;
  }
  EXPECT_EQ(n, 4u);
  std::ifstream csv(dir / "summary.csv");
  std::getline(csv, line);
  EXPECT_EQ(line, kSummaryHeader);
  std::filesystem::remove_all(dir);
}

TEST(RunExperiment, DivergenceIsReported) {
  RunConfig c = small_copy("snap1");
  c.lr = 1.7e308;
  c.optimizer = OptimizerKind::sgd;
  const auto summary = run_experiment(c);
  EXPECT_EQ(summary.status, "diverged");
  EXPECT_FALSE(summary.message.empty());
}

TEST(RunExperiment, TokenBudget) {
  RunConfig c = small_copy("bptt");
  c.max_steps = 0;
  c.max_tokens = 100;
  const auto s = run_experiment(c);
  EXPECT_GE(s.tokens, 100u);
  // Lengths start at 4 per element, so one batch adds at most 3 * (2L + 2) tokens.
  EXPECT_LT(s.tokens, 100u + 3u * (2 * s.max_length + 2));
}

TEST(RunExperiment, PruningReachesTheFinalSparsity) {
  RunConfig c = small_copy("bptt");
  c.units = 8;
  c.prune_sparsity = 0.75;
  c.prune_interval = 2;
  c.prune_final_step = 10;
  c.max_steps = 12;
  const auto s = run_experiment(c);
  const auto& shape = CellShape{Arch::gru, 8, kCopyChannels};
  std::size_t expected = 0;
  for (const auto& b : detail::make_blocks(shape))
    expected += b.is_weight() ? b.size() - static_cast<std::size_t>(std::llround(0.75 * double(b.size()))) : b.size();
  EXPECT_EQ(s.nonzero_params, expected);
}

TEST(Sweep, AggregatesAcrossSeeds) {
  const auto dir = temp_dir("sweep");
  RunConfig c = small_copy("snap1");
  c.max_steps = 6;
  c.out = dir.string();
  const auto result = run_sweep(c, {1e-2, 1e-3}, {1, 2}, 2);
  ASSERT_EQ(result.runs.size(), 4u);
  ASSERT_EQ(result.aggregates.size(), 2u);
  std::size_t best = 0;
  for (const auto& a : result.aggregates) {
    double sum = 0.0;
    for (const auto& r : result.runs)
      if (r.config.lr == a.lr) sum += static_cast<double>(r.summary.final_length);
    EXPECT_DOUBLE_EQ(a.mean_final_length, sum / 2.0);
    EXPECT_EQ(a.runs, 2u);
    best += a.best ? 1 : 0;
  }
  EXPECT_EQ(best, 1u);
  EXPECT_TRUE(std::filesystem::exists(dir / "aggregate.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "lr1_seed2" / "metrics.jsonl"));
  // A sweep run equals the same run launched alone.
  RunConfig alone = result.runs[3].config;
  alone.out.clear();
  EXPECT_EQ(run_experiment(alone).final_bpc, result.runs[3].summary.final_bpc);
  std::filesystem::remove_all(dir);
}

TEST(Bias, PartitionByHand) {
  const auto exact_pattern = share(SparsityPattern(2, 2, {{0, 0}, {1, 0}, {1, 1}}));
  PatternedMatrix exact(exact_pattern);
  exact.set(0, 0, 3.0);
  exact.set(1, 0, -1.0);
  exact.set(1, 1, 0.0);
  const SparsityPattern snap1(2, 2, {{0, 0}, {1, 1}});
  const SparsityPattern snap2(2, 2, {{0, 0}, {1, 0}, {1, 1}});
  const auto part = partition_influence(exact, snap1, snap2);
  EXPECT_EQ(part.row.entries, 3u);
  EXPECT_EQ(part.row.snap1_kept, 2u);
  EXPECT_DOUBLE_EQ(part.row.snap1_mass, 0.75);
  EXPECT_DOUBLE_EQ(part.row.snap1_mean_kept, 1.5);
  EXPECT_DOUBLE_EQ(part.row.snap1_mean_dropped, 1.0);
  EXPECT_DOUBLE_EQ(part.row.snap2_mass, 1.0);
  std::ostringstream os;
  write_influence_dump(os, part);
  EXPECT_EQ(os.str(), "# row col value kept_by_snap1 kept_by_snap2\n0 0 3 1 1\n1 0 -1 0 1\n1 1 0 1 1\n");
}

TEST(Bias, SnapTwoKeepsAtLeastSnapOne) {
  const auto dir = temp_dir("bias");
  BiasConfig c;
  c.length = 4;
  c.batch = 2;
  c.checkpoints = {0, 3};
  c.out = dir.string();
  const auto rows = analyze_bias(c);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_GE(r.snap2_mass, r.snap1_mass);
    EXPECT_GE(r.snap2_kept, r.snap1_kept);
    EXPECT_LE(r.snap2_mass, 1.0);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "influence_step3.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "bias.csv"));
  std::filesystem::remove_all(dir);
}
