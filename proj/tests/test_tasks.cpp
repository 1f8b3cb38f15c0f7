#include <gtest/gtest.h>

#include <numeric>
#include <vector>

#include "dii/intervention.hpp"
#include "dii/metrics.hpp"
#include "dii/tasks.hpp"

using dii::ExamplePair;
using dii::IoiConfig;

namespace {

double exhaustive_iia(const dii::PlantedNetwork& net, const dii::SwapRule& rule) {
  const auto view = dii::site_view(*net.model, net.site);
  const auto pairs = net.all_pairs();
  std::size_t hit = 0;
  for (const ExamplePair& p : pairs) {
    hit += dii::argmax(dii::interchange(*net.model, view, p.base, p.source, rule)) == p.cf_label;
  }
  return static_cast<double>(hit) / static_cast<double>(pairs.size());
}

template <typename Fn>
void expect_code(dii::ErrorCode code, Fn&& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << dii::to_string(code);
  } catch (const dii::Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

TEST(Ioi, ExampleLayoutAndLabels) {
  const IoiConfig cfg;
  const auto ex = dii::make_ioi_example(0, 3, 5, true, cfg);
  EXPECT_EQ(ex.tokens.size(), static_cast<std::size_t>(cfg.seq_len));
  EXPECT_EQ(ex.tokens[dii::kFirstNamePos], 3);
  EXPECT_EQ(ex.tokens[dii::kSecondNamePos], 5);
  EXPECT_EQ(ex.tokens.back(), 5);
  EXPECT_EQ(dii::ioi_label(ex), 3);
  const auto back = dii::parse_ioi(ex.tokens);
  EXPECT_EQ(back.first, 3);
  EXPECT_EQ(back.second, 5);
  EXPECT_TRUE(back.io_first);
  for (std::size_t i = 0; i + 1 < ex.tokens.size(); ++i) {
    if (i == dii::kFirstNamePos || i == dii::kSecondNamePos) continue;
    EXPECT_GE(ex.tokens[i], cfg.n_names);
  }
  expect_code(dii::ErrorCode::kConfigInvalid, [&] { (void)dii::make_ioi_example(0, 2, 2, true, cfg); });
}

TEST(Ioi, CounterfactualByVariable) {
  const IoiConfig cfg;
  const auto base = dii::make_ioi_example(0, 3, 5, true, cfg);   // answer 3
  const auto src = dii::make_ioi_example(0, 7, 9, false, cfg);   // answer 9
  EXPECT_EQ(dii::ioi_counterfactual(base, src, dii::IoiVariable::kNamePosition), 5);
  EXPECT_EQ(dii::ioi_counterfactual(base, src, dii::IoiVariable::kIoName), 9);
  const auto same = dii::make_ioi_example(0, 7, 9, true, cfg);
  EXPECT_EQ(dii::ioi_counterfactual(base, same, dii::IoiVariable::kNamePosition), 3);
}

TEST(Ioi, PairsAlwaysFlipTheLabel) {
  for (auto var : {dii::IoiVariable::kNamePosition, dii::IoiVariable::kIoName}) {
    IoiConfig cfg;
    cfg.variable = var;
    const auto split = dii::gen_ioi_like(5, 300, 100, cfg);
    ASSERT_EQ(split.train.size(), 300u);
    ASSERT_EQ(split.eval.size(), 100u);
    for (const auto* list : {&split.train, &split.eval}) {
      for (const ExamplePair& p : *list) {
        EXPECT_NE(p.base_label, p.cf_label);
        const auto b = dii::parse_ioi(std::get<std::vector<int>>(p.base));
        const auto s = dii::parse_ioi(std::get<std::vector<int>>(p.source));
        EXPECT_EQ(p.base_label, b.io());
        EXPECT_EQ(p.cf_label, dii::ioi_counterfactual(b, s, var));
      }
    }
    EXPECT_EQ(dii::template_ids(split.train), (std::set<int>{0, 1}));
    EXPECT_EQ(dii::template_ids(split.eval), (std::set<int>{2}));
  }
}

TEST(Ioi, DeterministicPerSeed) {
  const IoiConfig cfg;
  const auto a = dii::gen_ioi_like(11, 50, 20, cfg);
  const auto b = dii::gen_ioi_like(11, 50, 20, cfg);
  const auto c = dii::gen_ioi_like(12, 50, 20, cfg);
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].base, b.train[i].base);
    EXPECT_EQ(a.train[i].source, b.train[i].source);
    differs = differs || a.train[i].base != c.train[i].base;
  }
  EXPECT_TRUE(differs);
}

TEST(Ioi, TemplateValidation) {
  IoiConfig few;
  few.n_templates = 2;
  few.train_templates = {0};
  few.eval_templates = {1};
  expect_code(dii::ErrorCode::kInsufficientTemplates, [&] { (void)dii::gen_ioi_like(0, 4, 4, few); });
  IoiConfig leak;
  leak.train_templates = {0, 2};
  leak.eval_templates = {2};
  expect_code(dii::ErrorCode::kTemplateLeak, [&] { (void)dii::gen_ioi_like(0, 4, 4, leak); });
  IoiConfig empty;
  empty.eval_templates = {};
  expect_code(dii::ErrorCode::kInsufficientTemplates, [&] { (void)dii::gen_ioi_like(0, 4, 4, empty); });
  IoiConfig range;
  range.eval_templates = {5};
  expect_code(dii::ErrorCode::kConfigInvalid, [&] { (void)dii::gen_ioi_like(0, 4, 4, range); });
}

TEST(Ioi, LeakBetweenPairListsDetected) {
  const IoiConfig cfg;
  const auto s = dii::gen_ioi_like(1, 10, 10, cfg);
  expect_code(dii::ErrorCode::kTemplateLeak, [&] { dii::require_disjoint_templates(s.train, s.train); });
  EXPECT_NO_THROW(dii::require_disjoint_templates(s.train, s.eval));
}

TEST(Equality, LabelsAndCounterfactuals) {
  using E = dii::EqualityTask;
  const std::vector<int> same_same{1, 1, 4, 4}, same_diff{2, 2, 3, 5}, diff_diff{0, 1, 2, 3};
  EXPECT_EQ(E::label(same_same), 1);
  EXPECT_EQ(E::label(same_diff), 0);
  EXPECT_EQ(E::label(diff_diff), 1);
  EXPECT_EQ(E::counterfactual(same_same, diff_diff, dii::EqualityVariable::kLeft), 0);
  EXPECT_EQ(E::counterfactual(same_diff, diff_diff, dii::EqualityVariable::kLeft), 1);
  EXPECT_EQ(E::counterfactual(same_diff, same_same, dii::EqualityVariable::kRight), 1);
  for (auto var : {dii::EqualityVariable::kLeft, dii::EqualityVariable::kRight}) {
    for (const ExamplePair& p : dii::gen_equality_task(3, 200, 6, var)) {
      const auto& b = std::get<std::vector<int>>(p.base);
      const auto& s = std::get<std::vector<int>>(p.source);
      EXPECT_EQ(p.base_label, E::label(b));
      EXPECT_EQ(p.cf_label, E::counterfactual(b, s, var));
      // The aligned equality always flips, so the label flips too.
      EXPECT_NE(p.base_label, p.cf_label);
    }
  }
  EXPECT_THROW((void)dii::gen_equality_task(0, 1, 1), dii::Error);
}

class PlantedShapes : public ::testing::TestWithParam<std::pair<int, int>> {};

TEST_P(PlantedShapes, ExhaustiveSwapIsPerfect) {
  const auto [width, rank] = GetParam();
  const auto net = dii::make_planted_network(width, rank, 4);
  EXPECT_EQ(net.planted.rank(), rank);
  EXPECT_EQ(net.model->site("hidden").width, width);
  EXPECT_DOUBLE_EQ(exhaustive_iia(net, net.planted), 1.0);
  // Clean accuracy over every input in the domain.
  for (const ExamplePair& p : net.all_pairs()) ASSERT_EQ(net.model->predict(p.base), p.base_label);
}

INSTANTIATE_TEST_SUITE_P(Shapes, PlantedShapes,
                         ::testing::Values(std::pair{4, 1}, std::pair{16, 1}, std::pair{16, 4},
                                           std::pair{32, 8}));

TEST(Planted, AxisAlignedPlantIsFoundByNeuronSwap) {
  const auto net = dii::make_planted_network(16, 2, 7, /*rotated=*/false);
  EXPECT_TRUE(net.rotation.isIdentity());
  EXPECT_DOUBLE_EQ(exhaustive_iia(net, std::vector<int>{0, 1}), 1.0);
  // The y-variable neurons carry the wrong variable.
  EXPECT_LT(exhaustive_iia(net, std::vector<int>{2, 3}), 0.5);
}

TEST(Planted, RotatedPlantDefeatsNeuronSwap) {
  const auto net = dii::make_planted_network(16, 1, 7);
  EXPECT_LT(exhaustive_iia(net, std::vector<int>{0}), 0.7);
  EXPECT_DOUBLE_EQ(exhaustive_iia(net, net.planted), 1.0);
}

TEST(Planted, PairsAndSplit) {
  const auto net = dii::make_planted_network(16, 2, 1);
  const auto split = net.split(3, 200, 50);
  EXPECT_EQ(dii::template_ids(split.train), (std::set<int>{0, 1}));
  EXPECT_EQ(dii::template_ids(split.eval), (std::set<int>{2}));
  for (const ExamplePair& p : split.train) EXPECT_NE(p.base_label, p.cf_label);
  const auto again = net.split(3, 200, 50);
  for (std::size_t i = 0; i < split.train.size(); ++i) EXPECT_EQ(split.train[i].base, again.train[i].base);
}

TEST(Planted, TooNarrowRejected) {
  expect_code(dii::ErrorCode::kSiteTooNarrow, [] { (void)dii::make_planted_network(3, 2, 0); });
  expect_code(dii::ErrorCode::kConfigInvalid, [] { (void)dii::make_planted_network(8, 0, 0); });
}

TEST(PlantedTransformer, SolvesHeldOutTemplate) {
  const auto pt = dii::make_planted_transformer(0);
  dii::Rng rng = dii::make_rng(0, "test.pt");
  for (int t = 0; t < 3; ++t) {
    for (int i = 0; i < 100; ++i) {
      const auto ex = dii::random_ioi_example(rng, t, pt.task);
      ASSERT_EQ(pt.model.predict(ex.tokens), dii::ioi_label(ex));
    }
  }
  EXPECT_EQ(pt.planted_heads, (std::vector<int>{1, 3}));
}

class TrainSeeds : public ::testing::TestWithParam<int> {};

TEST_P(TrainSeeds, ReachesHighHeldOutAccuracy) {
  const IoiConfig task;
  dii::TransformerConfig arch;
  arch.vocab = task.vocab();
  arch.max_seq = task.seq_len;
  const auto trained = dii::train_mini_transformer(task, static_cast<std::uint64_t>(GetParam()), arch);
  EXPECT_GE(trained.train_accuracy, 0.90);
  EXPECT_GE(trained.heldout_accuracy, 0.90);
  EXPECT_LT(trained.loss_curve.back(), trained.loss_curve.front());
}

INSTANTIATE_TEST_SUITE_P(Seeds, TrainSeeds, ::testing::Values(0, 1));

TEST(Training, ShuffledLabelsStayNearChance) {
  const IoiConfig task;
  dii::TransformerConfig arch;
  arch.vocab = task.vocab();
  arch.max_seq = task.seq_len;
  dii::TrainConfig tc;
  tc.shuffle_labels = true;
  tc.min_accuracy = 0.0;
  tc.steps = 300;
  const auto trained = dii::train_mini_transformer(task, 0, arch, tc);
  // Chance over names is 1/20; guessing one of the two names in context is 1/2.
  EXPECT_LT(trained.heldout_accuracy, 0.3);
}

TEST(Training, MinimumAccuracyEnforced) {
  const IoiConfig task;
  dii::TransformerConfig arch;
  arch.vocab = task.vocab();
  arch.max_seq = task.seq_len;
  dii::TrainConfig tc;
  tc.steps = 1;
  tc.n_train_examples = 64;
  tc.n_eval_examples = 64;
  tc.min_accuracy = 0.99;
  expect_code(dii::ErrorCode::kTrainingDiverged, [&] { (void)dii::train_mini_transformer(task, 0, arch, tc); });
  arch.vocab = 4;
  expect_code(dii::ErrorCode::kConfigInvalid, [&] { (void)dii::train_mini_transformer(task, 0, arch, tc); });
}
