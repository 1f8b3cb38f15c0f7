#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dii/intervention.hpp"
#include "dii/models.hpp"
#include "dii/rng.hpp"
#include "oracles.hpp"

using dii::Matrix;
using dii::SubspaceBasis;
using dii::Vector;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

SubspaceBasis random_basis(dii::Rng& rng, Eigen::Index d, Eigen::Index k) {
  const Matrix q = dii::random_orthogonal(rng, d);
  return SubspaceBasis::from_rows(q.topRows(k), 1e-9);
}

dii::MiniTransformer small_transformer(std::uint64_t seed) {
  dii::TransformerConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.vocab = 12;
  cfg.max_seq = 8;
  cfg.d_mlp = 32;
  return dii::MiniTransformer::random(cfg, seed, 0.5);
}

}  // namespace

TEST(Interchange, ToyNullspaceAxisSwap) {
  const std::vector<int> axis{2};
  const auto e3 = SubspaceBasis::axes(3, axis);
  const Vector r = dii::distributed_interchange(vec({1, 0, 1}), vec({5, 0, 5}), e3);
  EXPECT_EQ(r, vec({1, 0, 5}));
}

TEST(Interchange, FullAndEmptyBases) {
  const Vector a = vec({1, -2, 3, 0.5}), b = vec({4, 4, -1, 2});
  EXPECT_LE((dii::distributed_interchange(a, b, SubspaceBasis::identity(4)) - b).norm(), 1e-15);
  EXPECT_EQ(dii::distributed_interchange(a, b, SubspaceBasis::empty(4)), a);
}

TEST(Interchange, VanillaCopiesSelectedNeurons) {
  const std::vector<int> idx{1};
  EXPECT_EQ(dii::vanilla_interchange(vec({1, 2, 3}), vec({7, 9, 8}), idx), vec({1, 9, 3}));
  const std::vector<int> bad{3};
  try {
    (void)dii::vanilla_interchange(vec({1, 2, 3}), vec({7, 9, 8}), bad);
    FAIL();
  } catch (const dii::Error& e) {
    EXPECT_EQ(e.code(), dii::ErrorCode::kIndexOutOfRange);
  }
}

TEST(Interchange, ShapeMismatchRaises) {
  const auto b = SubspaceBasis::identity(3);
  try {
    (void)dii::distributed_interchange(vec({1, 2}), vec({1, 2}), b);
    FAIL();
  } catch (const dii::Error& e) {
    EXPECT_EQ(e.code(), dii::ErrorCode::kShapeMismatch);
  }
}

class InterchangeProperty : public ::testing::TestWithParam<int> {};

TEST_P(InterchangeProperty, AlgebraicLaws) {
  dii::Rng rng = dii::make_rng(static_cast<std::uint64_t>(GetParam()), "test.swap");
  const Eigen::Index d = std::uniform_int_distribution<int>(1, 24)(rng);
  const Eigen::Index k = std::uniform_int_distribution<int>(0, static_cast<int>(d))(rng);
  const SubspaceBasis basis = random_basis(rng, d, k);
  const Vector a = dii::gaussian(rng, d, 1, 2.0);
  const Vector b = dii::gaussian(rng, d, 1, 2.0);
  const Vector r = dii::distributed_interchange(a, b, basis);

  EXPECT_LE((r - oracle::swap(a, b, basis.rows())).norm(), 1e-12 * (1 + a.norm() + b.norm()));
  EXPECT_LE((dii::distributed_interchange(r, b, basis) - r).norm(), 1e-12 * (1 + r.norm()));
  EXPECT_LE((dii::distributed_interchange(a, a, basis) - a).norm(), 1e-15 * (1 + a.norm()));
  // The change lives in span(V).
  const Matrix off = Matrix::Identity(d, d) - basis.projector();
  EXPECT_LE((off * (r - a)).norm(), 1e-12 * (1 + (r - a).norm()));
  // And reproduces b's coordinates inside span(V).
  if (k > 0) {
    EXPECT_LE((basis.rows() * (r - b)).norm(), 1e-12 * (1 + b.norm()));
    // Any other orthonormal basis of the same span gives the same result.
    const Matrix mix = dii::random_orthogonal(rng, k);
    const auto other = SubspaceBasis::from_rows(mix * basis.rows(), 1e-9);
    EXPECT_LE((dii::distributed_interchange(a, b, other) - r).norm(), 1e-11 * (1 + r.norm()));
  }
}

TEST_P(InterchangeProperty, AxisAlignedEqualsVanilla) {
  dii::Rng rng = dii::make_rng(static_cast<std::uint64_t>(GetParam()), "test.axes");
  const int d = std::uniform_int_distribution<int>(1, 16)(rng);
  std::vector<int> idx;
  for (int i = 0; i < d; ++i) {
    if (std::bernoulli_distribution(0.4)(rng)) idx.push_back(i);
  }
  const Vector a = dii::gaussian(rng, d, 1), b = dii::gaussian(rng, d, 1);
  const Vector got = dii::distributed_interchange(a, b, SubspaceBasis::axes(d, idx));
  EXPECT_LE((got - dii::vanilla_interchange(a, b, idx)).cwiseAbs().maxCoeff(), 1e-15 * (1 + b.norm() + a.norm()));
}

INSTANTIATE_TEST_SUITE_P(Seeds, InterchangeProperty, ::testing::Range(0, 1000));

TEST(Interchange, ToyModelSwapsMatchSymbolicForms) {
  const dii::ToyModel plain{dii::ToyNetwork{}};
  const dii::ToyModel rotated{dii::RotatedToyNetwork{}};
  const auto pv = dii::site_view(plain, "hidden");
  const auto rv = dii::site_view(rotated, "hidden");
  const std::vector<int> h1{0}, h2{1}, h3{2};
  for (double x : {-3.0, 0.5, 2.0}) {
    for (double xp : {-1.0, 4.0, 7.5}) {
      const Vector in = Vector::Constant(1, x), src = Vector::Constant(1, xp);
      auto out = [&](const dii::Model& m, const dii::SiteView& v, const std::vector<int>& ax) {
        return dii::interchange(m, v, in, src, SubspaceBasis::axes(3, ax))(0);
      };
      EXPECT_NEAR(out(rotated, rv, h1), oracle::rotated_h1_swap(x, xp), 1e-12);
      EXPECT_NEAR(out(rotated, rv, h2), oracle::rotated_h2_swap(x, xp), 1e-12);
      EXPECT_NEAR(out(plain, pv, h2), oracle::original_h2_swap(x, xp), 1e-12);
      EXPECT_NEAR(out(plain, pv, h3), xp, 1e-12);
    }
  }
}

TEST(Interchange, FullBasisAtReadoutGivesSourceLogits) {
  const auto model = small_transformer(1);
  const std::vector<int> base{1, 2, 3, 4}, source{5, 6, 7, 8};
  const auto view = dii::site_view(model, "L1.block_out");
  const auto logits = dii::interchange(model, view, base, source, SubspaceBasis::identity(16));
  EXPECT_LE((logits - model.logits(source)).cwiseAbs().maxCoeff(), 1e-12);
  const auto none = dii::interchange(model, view, base, source, SubspaceBasis::empty(16));
  EXPECT_EQ(none, model.logits(base));
}

TEST(SiteViews, ReadWriteRoundTrip) {
  const auto model = small_transformer(2);
  const std::vector<int> heads{3, 1};
  const auto view = dii::head_view(model, "L0.attn_value_output", heads);
  EXPECT_EQ(view.width(), 8);
  Matrix stream = Matrix::Zero(3, 16);
  for (Eigen::Index j = 0; j < 16; ++j) stream(2, j) = static_cast<double>(j);
  const Vector got = dii::read_view(stream, view);
  for (int c = 0; c < 4; ++c) {
    EXPECT_EQ(got(c), 12 + c);
    EXPECT_EQ(got(4 + c), 4 + c);
  }
  Matrix copy = Matrix::Zero(3, 16);
  dii::write_view(copy, view, got);
  EXPECT_EQ(dii::read_view(copy, view), got);
  EXPECT_EQ(copy.row(2).segment(0, 4).norm(), 0.0);
  EXPECT_THROW(dii::write_view(copy, view, Vector::Zero(3)), dii::Error);
}

TEST(SiteViews, ConcatenationRules) {
  const auto model = small_transformer(3);
  const std::vector<int> h01{0, 1}, h12{1, 2}, h3{3};
  const auto a = dii::head_view(model, "L0.attn_value_output", h01);
  const auto b = dii::head_view(model, "L0.attn_value_output", h12);
  const auto c = dii::head_view(model, "L0.attn_value_output", h3);
  const std::vector<dii::SiteView> ok{a, c};
  EXPECT_EQ(dii::concat_site_view(model, ok).width(), 12);
  const std::vector<dii::SiteView> overlap{a, b};
  try {
    (void)dii::concat_site_view(model, overlap);
    FAIL();
  } catch (const dii::Error& e) {
    EXPECT_EQ(e.code(), dii::ErrorCode::kOverlappingSites);
  }
  // Same columns at different positions do not overlap.
  const auto early = dii::head_view(model, "L0.attn_value_output", h01, 0);
  const std::vector<dii::SiteView> spread{a, early};
  EXPECT_EQ(dii::concat_site_view(model, spread).width(), 16);
  // Mixed negative/positive positions are caught once the length is known.
  const auto first_of_two = dii::head_view(model, "L0.attn_value_output", h01, 0);
  const auto last_of_two = dii::head_view(model, "L0.attn_value_output", h01, -2);
  const std::vector<dii::SiteView> alias{first_of_two, last_of_two};
  const auto joined = dii::concat_site_view(model, alias);
  EXPECT_THROW((void)joined.segments(2), dii::Error);
  EXPECT_NO_THROW((void)joined.segments(3));
}

TEST(SiteViews, HeadViewNeedsPerHeadStream) {
  const auto model = small_transformer(4);
  const std::vector<int> h{0};
  try {
    (void)dii::head_view(model, "L0.attn_out", h);
    FAIL();
  } catch (const dii::Error& e) {
    EXPECT_EQ(e.code(), dii::ErrorCode::kPartitionMismatch);
  }
  const std::vector<int> bad{4};
  EXPECT_THROW((void)dii::head_view(model, "L0.attn_value_output", bad), dii::Error);
}

TEST(SiteViews, HeadSwapTouchesOnlyThatHead) {
  const auto model = small_transformer(5);
  const std::vector<int> base{1, 2, 3}, source{4, 5, 6};
  const std::vector<int> h{2};
  const auto view = dii::head_view(model, "L0.attn_value_output", h);
  const std::string names[] = {"L0.attn_value_output"};
  const Matrix src = dii::forward_with_capture(model, source, names).streams.at(names[0]);
  const Matrix bas = dii::forward_with_capture(model, base, names).streams.at(names[0]);
  Matrix expected = bas;
  expected.block(2, 8, 1, 4) = src.block(2, 8, 1, 4);
  const dii::PatchIntervention p{names[0], dii::kAllPositions, [&](const Matrix&) { return expected; }};
  const auto manual = dii::forward_with_intervention(model, base, std::span(&p, 1));
  const auto swapped = dii::interchange(model, view, base, source, SubspaceBasis::identity(4));
  EXPECT_LE((manual - swapped).cwiseAbs().maxCoeff(), 1e-12);
}
