#include <gtest/gtest.h>

#include <sstream>

#include "snap/costmodel.hpp"

using namespace snap;

namespace {

const CostRow& row(const std::vector<CostRow>& rows, const std::string& engine) {
  for (const auto& r : rows)
    if (r.engine == engine) return r;
  throw std::runtime_error("missing row " + engine);
}

}  // namespace

TEST(AnalyticCost, HandValues) {
  // T = 10, k = 4, p = 40, d = 0.5
  EXPECT_EQ(analytic_cost("bptt", 10, 4, 40, 0.5).memory, 80.0);
  EXPECT_EQ(analytic_cost("bptt", 10, 4, 40, 0.5).time, 56.0);
  EXPECT_EQ(analytic_cost("uoro", 10, 4, 40, 0.5).memory, 44.0);
  EXPECT_EQ(analytic_cost("rtrl", 10, 4, 40, 0.5).memory, 164.0);
  EXPECT_EQ(analytic_cost("rtrl", 10, 4, 40, 0.5).time, 656.0);
  EXPECT_EQ(analytic_cost("sparse_bptt", 10, 4, 40, 0.5).memory, 60.0);
  EXPECT_EQ(analytic_cost("sparse_bptt", 10, 4, 40, 0.5).time, 28.0);
  EXPECT_EQ(analytic_cost("rtrl_sparse", 10, 4, 40, 0.5).memory, 84.0);
  EXPECT_EQ(analytic_cost("rtrl_sparse", 10, 4, 40, 0.5).time, 168.0);
  EXPECT_EQ(analytic_cost("snap1", 10, 4, 40, 0.5).memory, 24.0);
  EXPECT_EQ(analytic_cost("snap1", 10, 4, 40, 0.5).time, 28.0);
  EXPECT_EQ(analytic_cost("snap2", 10, 4, 40, 0.5).memory, 44.0);
  EXPECT_EQ(analytic_cost("snap2", 10, 4, 40, 0.5).time, 88.0);
}

TEST(AnalyticCost, DenseCoincidences) {
  for (double k : {4.0, 32.0}) {
    const double p = 3 * k * k;
    EXPECT_EQ(analytic_cost("snap1", 50, k, p, 1.0).time, analytic_cost("bptt", 50, k, p, 1.0).time);
    EXPECT_EQ(analytic_cost("snap2", 50, k, p, 1.0).time, analytic_cost("rtrl", 50, k, p, 1.0).time);
    EXPECT_EQ(analytic_cost("rtrl_sparse", 50, k, p, 1.0).memory, analytic_cost("rtrl", 50, k, p, 1.0).memory);
  }
}

TEST(AnalyticCost, SparseNeverCostsMore) {
  for (double d : {0.1, 0.25, 0.5, 0.9}) {
    EXPECT_LT(analytic_cost("rtrl_sparse", 20, 16, 512, d).time, analytic_cost("rtrl", 20, 16, 512, d).time);
    EXPECT_LE(analytic_cost("snap2", 20, 16, 512, d).time, analytic_cost("rtrl_sparse", 20, 16, 512, d).time);
    EXPECT_LE(analytic_cost("snap1", 20, 16, 512, d).time, analytic_cost("snap2", 20, 16, 512, d).time);
  }
  EXPECT_THROW(analytic_cost("snap1", 20, 16, 512, 0.0), std::invalid_argument);
  EXPECT_THROW(analytic_cost("snap9", 20, 16, 512, 0.5), std::invalid_argument);
}

TEST(MeasuredCost, GrowsWithOrder) {
  CostConfig config;
  config.arch = Arch::gru;
  config.units = 12;
  config.sparsity = 0.75;
  config.engines = {"bptt", "snap1", "snap2", "snap3", "rtrl_sparse", "rtrl"};
  const auto rows = measure_costs(config);
  EXPECT_LT(row(rows, "snap1").madds, row(rows, "snap2").madds);
  EXPECT_LE(row(rows, "snap2").madds, row(rows, "snap3").madds);
  EXPECT_LE(row(rows, "snap3").madds, row(rows, "rtrl_sparse").madds);
  EXPECT_LT(row(rows, "rtrl_sparse").madds, row(rows, "rtrl").madds);
  EXPECT_EQ(*row(rows, "bptt").ratio_vs_bptt, 1.0);
  EXPECT_EQ(*row(rows, "rtrl_sparse").ratio_vs_rtrl, 1.0);
  EXPECT_GE(*row(rows, "snap1").j_sparsity, *row(rows, "snap2").j_sparsity);
  EXPECT_EQ(row(rows, "bptt").tape_scalars, config.steps * 12);
}

TEST(MeasuredCost, SnapOneTracksOneScalarPerParameterRow) {
  for (auto arch : {Arch::vanilla, Arch::lstm}) {
    CostConfig config;
    config.arch = arch;
    config.units = 10;
    config.sparsity = 0.5;
    config.engines = {"snap1"};
    const auto rows = measure_costs(config);
    Rng rng(config.seed);
    const auto structure = make_structure(CellShape{arch, 10, 10}, 0.5, rng);
    const std::size_t per_column = arch == Arch::lstm ? 2 : 1;
    EXPECT_EQ(rows[0].influence_scalars, per_column * structure->nonzero_param_count()) << to_string(arch);
  }
}

TEST(MeasuredCost, DenseSnapTwoEqualsDenseRtrlWork) {
  CostConfig config;
  config.arch = Arch::vanilla;
  config.units = 6;
  config.sparsity = 0.0;
  config.engines = {"snap2", "rtrl_sparse"};
  const auto rows = measure_costs(config);
  EXPECT_EQ(row(rows, "snap2").madds, row(rows, "rtrl_sparse").madds);
  EXPECT_EQ(*row(rows, "snap2").j_sparsity, 0.0);
}

TEST(SnapSparsity, VanillaOneStepKeepsOneRowPerColumn) {
  EXPECT_NEAR(mean_snap_sparsity(Arch::vanilla, 16, 16, 0.75, 1, 1, 2), 1.0 - 1.0 / 16.0, 1e-12);
  EXPECT_EQ(mean_snap_sparsity(Arch::vanilla, 8, 8, 0.0, 2, 1, 1), 0.0);
}

TEST(CostCsv, Header) {
  CostConfig config;
  config.units = 4;
  config.engines = {"bptt", "snap1"};
  std::ostringstream os;
  write_cost_csv(os, measure_costs(config));
  std::istringstream in(os.str());
  std::string comment, header, line;
  std::getline(in, comment);
  std::getline(in, header);
  EXPECT_EQ(comment[0], '#');
  EXPECT_EQ(header, "engine,arch,k,param_sparsity,j_sparsity,madds,ratio_vs_bptt,ratio_vs_rtrl");
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 2);
}
