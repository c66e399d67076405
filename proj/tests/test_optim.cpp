#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "snap/optim.hpp"

using namespace snap;

TEST(Adam, ZeroGradientLeavesParametersButAdvancesTime) {
  AdamState s(3, 1e-2);
  std::vector<double> p{1.0, -2.0, 0.5};
  const auto before = p;
  adam_step(s, p, std::vector<double>(3, 0.0));
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamState s(1, 0.1);
  std::vector<double> p{0.0};
  adam_step(s, p, std::vector<double>{1.0});
  EXPECT_NEAR(p[0], -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, TwoStepsByHand) {
  AdamState s(1, 0.01);
  std::vector<double> p{1.0};
  adam_step(s, p, std::vector<double>{2.0});
  adam_step(s, p, std::vector<double>{-1.0});
  const double m = 0.9 * (0.1 * 2.0) + 0.1 * -1.0;
  const double v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0;
  const double m_hat = m / (1 - 0.81);
  const double v_hat = v / (1 - 0.999 * 0.999);
  const double first = 0.01 * 2.0 / (2.0 + 1e-8);
  EXPECT_NEAR(p[0], 1.0 - first - 0.01 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-14);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  AdamState s(2, 0.0);
  std::vector<double> p{3.0, 4.0};
  for (int i = 0; i < 5; ++i) adam_step(s, p, std::vector<double>{0.3, -7.0});
  EXPECT_EQ(p, (std::vector<double>{3.0, 4.0}));
}

TEST(Adam, Deterministic) {
  auto run = [] {
    AdamState s(3, 1e-3);
    std::vector<double> p{0.1, 0.2, 0.3};
    for (int i = 0; i < 20; ++i) adam_step(s, p, std::vector<double>{std::sin(i), std::cos(i), 0.01 * i});
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, Errors) {
  AdamState s(2, 1e-3);
  std::vector<double> p{0.0, 0.0};
  EXPECT_THROW(adam_step(s, p, std::vector<double>{1.0}), DimensionError);
  EXPECT_THROW(adam_step(s, p, std::vector<double>{1.0, std::numeric_limits<double>::quiet_NaN()}), NumericError);
}

TEST(Sgd, PlainStep) {
  Optimizer opt(OptimizerKind::sgd, 2, 0.5);
  std::vector<double> p{1.0, 1.0};
  opt.step(p, std::vector<double>{2.0, -4.0});
  EXPECT_EQ(p, (std::vector<double>{0.0, 3.0}));
  EXPECT_THROW(parse_optimizer("rmsprop"), ConfigError);
}

TEST(Optimizer, RemapKeepsSurvivingMoments) {
  Optimizer opt(OptimizerKind::adam, 3, 0.1);
  std::vector<double> p{0.0, 0.0, 0.0};
  opt.step(p, std::vector<double>{1.0, 2.0, 3.0});
  const std::vector<std::int64_t> map{0, -1, 1};
  opt.remap(map, 2);
  EXPECT_EQ(opt.adam().m.size(), 2u);
  EXPECT_DOUBLE_EQ(opt.adam().m[0], 0.1);
  EXPECT_DOUBLE_EQ(opt.adam().m[1], 0.3);
}

TEST(PruneSchedule, CubicRamp) {
  PruneSchedule s{10, 0.8, 100};
  EXPECT_EQ(s.target(0), 0.0);
  EXPECT_NEAR(s.target(50), 0.8 * (1 - 0.125), 1e-15);
  EXPECT_EQ(s.target(100), 0.8);
  EXPECT_EQ(s.target(1000), 0.8);
  EXPECT_TRUE(s.is_event(20));
  EXPECT_FALSE(s.is_event(25));
  EXPECT_FALSE(s.is_event(0));
  EXPECT_FALSE(PruneSchedule{}.active());
}

TEST(Prune, SmallestMagnitudesGoFirst) {
  const CellShape shape{Arch::vanilla, 2, 1};
  auto structure = std::make_shared<const CellStructure>(shape, dense_mask(shape));
  CellParams params(structure);
  params.set("W_h", 0, 0, 0.5);
  params.set("W_h", 0, 1, -0.1);
  params.set("W_h", 1, 0, 0.3);
  params.set("W_h", 1, 1, -0.9);
  params.set("W_x", 0, 0, 1.0);
  params.set("W_x", 1, 0, -2.0);
  params.set("b", 0, 0, 0.0);
  params.set("b", 1, 0, 0.001);
  const auto r = prune_step(PruneSchedule{1, 0.5, 0}, 1, params);
  ASSERT_TRUE(r.changed);
  const auto& s = r.params.structure();
  const auto w_h = s.block_index("W_h");
  EXPECT_TRUE(s.keep()[s.flat_index(w_h, 0, 0)]);
  EXPECT_FALSE(s.keep()[s.flat_index(w_h, 0, 1)]);
  EXPECT_FALSE(s.keep()[s.flat_index(w_h, 1, 0)]);
  EXPECT_TRUE(s.keep()[s.flat_index(w_h, 1, 1)]);
  EXPECT_EQ(r.params.get("W_h", 1, 1), -0.9);
  EXPECT_EQ(r.params.get("W_x", 0, 0), 0.0);
  EXPECT_EQ(r.params.get("W_x", 1, 0), -2.0);
  // Biases survive even at zero magnitude.
  EXPECT_EQ(r.params.get("b", 1, 0), 0.001);
  EXPECT_EQ(r.params.values().size(), 5u);
  EXPECT_EQ(r.old_to_new, (std::vector<std::int64_t>{0, -1, -1, 1, -1, 2, 3, 4}));
}

TEST(Prune, NonzeroCountNeverIncreases) {
  Rng rng(3);
  auto structure = make_structure(CellShape{Arch::gru, 8, 4}, 0.0, rng);
  auto params = init_params(structure, rng);
  const PruneSchedule schedule{10, 0.9, 200};
  std::size_t prev = params.values().size();
  std::vector<std::uint8_t> prev_keep(structure->keep().begin(), structure->keep().end());
  for (std::size_t step = 10; step <= 300; step += 10) {
    auto r = prune_step(schedule, step, params);
    params = r.params;
    EXPECT_LE(params.values().size(), prev);
    prev = params.values().size();
    const auto keep = params.structure().keep();
    for (std::size_t i = 0; i < keep.size(); ++i) EXPECT_TRUE(prev_keep[i] || !keep[i]) << i;
    prev_keep.assign(keep.begin(), keep.end());
  }
  // Input blocks are 8x4 and keep round(3.2); recurrent blocks are 8x8 and keep round(6.4).
  EXPECT_EQ(params.structure().weight_nnz(), 3u * 3 + 3u * 6);
}

TEST(Prune, CompressedEnginesRejectPruning) {
  const PruneSchedule schedule{10, 0.5, 100};
  EXPECT_NO_THROW(validate_pruning(parse_engine("bptt"), schedule));
  for (const char* name : {"snap1", "snap2", "rtrl", "rflo", "uoro"}) {
    EXPECT_THROW(validate_pruning(parse_engine(name), schedule), ConfigError) << name;
  }
  EXPECT_NO_THROW(validate_pruning(parse_engine("snap1"), PruneSchedule{}));
}
