#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dii/experiments.hpp"
#include "dii/tasks.hpp"

using dii::Method;
using dii::SweepSpec;

namespace {

struct PlantedFixture {
  dii::PlantedTransformer pt = dii::make_planted_transformer(0);
  dii::PairSplit split = dii::gen_ioi_like(0, 400, 200, pt.task);
};

const PlantedFixture& planted() {
  static const PlantedFixture f;
  return f;
}

SweepSpec grid_spec(const dii::Model& model) {
  SweepSpec spec;
  const dii::Stream streams[] = {dii::Stream::kAttnOut, dii::Stream::kMlpOutput};
  spec.sites = dii::sweep_sites(model, streams);
  spec.das.rank = 1;
  spec.das.restarts = 3;
  return spec;
}

SweepSpec head_spec() {
  SweepSpec spec;
  spec.das.rank = 1;
  spec.das.restarts = 3;
  return spec;
}

}  // namespace

TEST(Sweep, SiteListOrderedByLayerThenStream) {
  const auto& f = planted();
  const dii::Stream streams[] = {dii::Stream::kAttnOut, dii::Stream::kMlpOutput};
  EXPECT_EQ(dii::sweep_sites(f.pt.model, streams),
            (std::vector<std::string>{"L0.attn_out", "L0.mlp_output", "L1.attn_out", "L1.mlp_output"}));
}

TEST(Sweep, LocalizesPlantedVariable) {
  const auto& f = planted();
  const auto result = dii::run_stream_sweep(f.pt.model, grid_spec(f.pt.model), f.split);
  ASSERT_EQ(result.cells.size(), 4u);
  EXPECT_EQ(result.best().site, f.pt.signal_site);
  EXPECT_GE(result.at(f.pt.signal_site).report.iia, 0.9);
  for (const auto& c : result.cells) {
    EXPECT_TRUE(c.complete);
    EXPECT_EQ(c.report.n_pairs, f.split.eval.size());
    if (c.site != f.pt.signal_site) {
      EXPECT_LE(c.report.iia, 0.2) << c.site;
    }
  }
}

TEST(Sweep, ThreadCountDoesNotChangeResults) {
  const auto& f = planted();
  SweepSpec one = grid_spec(f.pt.model);
  SweepSpec many = one;
  many.threads = 3;
  const auto a = dii::run_stream_sweep(f.pt.model, one, f.split);
  const auto b = dii::run_stream_sweep(f.pt.model, many, f.split);
  ASSERT_EQ(a.cells.size(), b.cells.size());
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    EXPECT_EQ(a.cells[i].site, b.cells[i].site);
    EXPECT_EQ(a.cells[i].report.iia, b.cells[i].report.iia);
    EXPECT_EQ(a.cells[i].subspace->basis.rows(), b.cells[i].subspace->basis.rows());
  }
}

TEST(Sweep, TinyBudgetMarksCellsIncomplete) {
  const auto& f = planted();
  SweepSpec spec = grid_spec(f.pt.model);
  spec.cell_budget_seconds = 1e-6;
  const auto r = dii::run_stream_sweep(f.pt.model, spec, f.split);
  for (const auto& c : r.cells) {
    EXPECT_FALSE(c.complete);
    EXPECT_NE(c.note.find("BudgetExceeded"), std::string::npos);
  }
}

TEST(Sweep, RejectsLeakAndEmptySpecs) {
  const auto& f = planted();
  dii::PairSplit leak{f.split.train, f.split.train};
  EXPECT_THROW((void)dii::run_stream_sweep(f.pt.model, grid_spec(f.pt.model), leak), dii::Error);
  EXPECT_THROW((void)dii::run_stream_sweep(f.pt.model, SweepSpec{}, f.split), dii::Error);
}

TEST(Heads, LeaveOneOutFindsPlantedHeads) {
  const auto& f = planted();
  const auto loo = dii::loo_head_alignment(f.pt.model, f.pt.planted_layer, head_spec(), f.split);
  ASSERT_EQ(loo.drop.size(), 4u);
  EXPECT_GE(loo.all_heads_iia, 0.9);
  for (int h : f.pt.planted_heads) EXPECT_GE(loo.drop[static_cast<std::size_t>(h)], 0.2);
  for (int h : {0, 2}) EXPECT_LE(std::abs(loo.drop[static_cast<std::size_t>(h)]), 0.05);
  const auto order = dii::rank_heads(loo.drop);
  std::vector<int> top{order[0], order[1]};
  std::sort(top.begin(), top.end());
  EXPECT_EQ(top, f.pt.planted_heads);
}

TEST(Heads, CumulativeCurveSaturatesAtPlantedCount) {
  const auto& f = planted();
  const std::vector<int> order{1, 3, 0, 2};
  const auto cum = dii::cumulative_head_alignment(f.pt.model, f.pt.planted_layer, order, head_spec(),
                                                  f.split);
  ASSERT_EQ(cum.iia.size(), 5u);
  // Every pair flips the label, so no intervention means no matches.
  EXPECT_EQ(cum.iia[0], 0.0);
  EXPECT_GE(cum.ceiling, 0.9);
  EXPECT_EQ(cum.first_reaching(0.9), static_cast<int>(f.pt.planted_heads.size()));
  const std::vector<int> short_order{1, 3};
  EXPECT_THROW((void)dii::cumulative_head_alignment(f.pt.model, 0, short_order, head_spec(), f.split),
               dii::Error);
}

TEST(Heads, RankingBreaksTiesByIndex) {
  const std::vector<double> drops{0.1, 0.5, 0.1, 0.5 + 1e-12, 0.0};
  EXPECT_EQ(dii::rank_heads(drops), (std::vector<int>{1, 3, 0, 2, 4}));
  EXPECT_TRUE(dii::rank_heads(std::vector<double>{}).empty());
}

TEST(Heads, CountRequiresPerHeadStream) {
  const auto& f = planted();
  EXPECT_EQ(dii::head_count(f.pt.model, "L0.attn_value_output"), 4);
  EXPECT_THROW((void)dii::head_count(f.pt.model, "L0.attn_out"), dii::Error);
}

TEST(CumulativeResult, FirstReaching) {
  dii::CumulativeResult r;
  r.iia = {0.0, 0.5, 0.95, 1.0};
  r.ceiling = 1.0;
  EXPECT_EQ(r.first_reaching(0.9), 2);
  EXPECT_EQ(r.first_reaching(0.0), 0);
  r.ceiling = 2.0;
  EXPECT_EQ(r.first_reaching(0.9), -1);
}

class MethodGap : public ::testing::TestWithParam<bool> {};

TEST_P(MethodGap, VanillaVersusLearnedSubspace) {
  const bool rotated = GetParam();
  const auto net = dii::make_planted_network(16, 1, 3, rotated);
  const auto split = net.split(3, 400, 200);
  SweepSpec spec;
  spec.sites = {net.site};
  spec.das.rank = 1;
  spec.das.restarts = 3;
  spec.das.seed = 3;
  const auto cmp = dii::compare_vanilla_vs_das(*net.model, spec, split);
  ASSERT_EQ(cmp.size(), 1u);
  EXPECT_GE(cmp[0].das_iia, 0.95);
  if (rotated) {
    EXPECT_GE(cmp[0].delta(), 0.30);
  } else {
    EXPECT_LE(std::abs(cmp[0].delta()), 0.05);
  }
}

INSTANTIATE_TEST_SUITE_P(Rotation, MethodGap, ::testing::Values(true, false));

TEST(Neurons, GreedyPicksPlantedAxes) {
  const auto net = dii::make_planted_network(12, 2, 4, /*rotated=*/false);
  const auto split = net.split(4, 200, 50);
  const auto view = dii::site_view(*net.model, net.site);
  EXPECT_EQ(dii::select_neurons(*net.model, view, split.train, 2), (std::vector<int>{0, 1}));
  EXPECT_EQ(dii::select_neurons(*net.model, view, split.train, 12).size(), 12u);
  EXPECT_THROW((void)dii::select_neurons(*net.model, view, split.train, 13), dii::Error);
}

TEST(Neurons, TiesGoToLowerIndex) {
  // Every neuron is useless on the toy network's swap task, so the first wins.
  const dii::ToyModel toy{dii::ToyNetwork{}};
  const auto view = dii::site_view(toy, "hidden");
  std::vector<dii::ExamplePair> pairs{{dii::Vector::Ones(1), dii::Vector::Ones(1), 0, 0, 0}};
  EXPECT_EQ(dii::select_neurons(toy, view, pairs, 1), (std::vector<int>{0}));
}

TEST(Methods, NamesRoundTrip) {
  for (Method m : {Method::kVanilla, Method::kDas, Method::kBoundless}) {
    EXPECT_EQ(dii::parse_method(dii::method_name(m)), m);
  }
  EXPECT_FALSE(dii::parse_method("gradient").has_value());
}

TEST(Sweep, ReproducibleAcrossRuns) {
  const auto net = dii::make_planted_network(16, 2, 8);
  const auto split = net.split(8, 200, 100);
  SweepSpec spec;
  spec.sites = {net.site};
  spec.method = Method::kBoundless;
  spec.boundless.epochs = 3;
  const auto a = dii::run_stream_sweep(*net.model, spec, split);
  const auto b = dii::run_stream_sweep(*net.model, spec, split);
  EXPECT_EQ(a.cells[0].report.iia, b.cells[0].report.iia);
  EXPECT_EQ(a.cells[0].subspace->rotation, b.cells[0].subspace->rotation);
  EXPECT_EQ(a.cells[0].subspace->boundary_dims, b.cells[0].subspace->boundary_dims);
}
