#include <gtest/gtest.h>

#include <cmath>

#include "dii/linalg.hpp"
#include "dii/rng.hpp"
#include "oracles.hpp"

using dii::Matrix;
using dii::SubspaceBasis;
using dii::Vector;
namespace linalg = dii::linalg;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
  Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix toy_w2() { return rows({{0.0}, {2.0}, {1.0}}); }

}  // namespace

TEST(Orthonormalize, ScaledAxes) {
  const auto b = linalg::orthonormalize(rows({{2, 0, 0}, {0, 3, 0}}));
  EXPECT_TRUE(b.rows().isApprox(rows({{1, 0, 0}, {0, 1, 0}}), 1e-15));
}

TEST(Orthonormalize, SingleRowNormalized) {
  const auto b = linalg::orthonormalize(rows({{1, 1, 0}}));
  const double s = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(b.rows()(0, 0), s, 1e-15);
  EXPECT_NEAR(b.rows()(0, 1), s, 1e-15);
  EXPECT_EQ(b.rows()(0, 2), 0.0);
}

TEST(Orthonormalize, GramSchmidtByHand) {
  const auto b = linalg::orthonormalize(rows({{1, 0, 0}, {1, 1, 0}}));
  EXPECT_TRUE(b.rows().isApprox(rows({{1, 0, 0}, {0, 1, 0}}), 1e-15));
}

TEST(Orthonormalize, DependentRowsRejected) {
  try {
    linalg::orthonormalize(rows({{1, 2, 3}, {2, 4, 6}}));
    FAIL() << "expected RankDeficient";
  } catch (const dii::Error& e) {
    EXPECT_EQ(e.code(), dii::ErrorCode::kRankDeficient);
  }
}

TEST(SubspaceBasis, RejectsUnnormalizedRows) {
  EXPECT_THROW(SubspaceBasis::from_rows(rows({{1, 1, 0}})), dii::Error);
  EXPECT_THROW(SubspaceBasis::from_rows(rows({{1, 0}, {0.1, 1}})), dii::Error);
}

TEST(Nullspace, ToyWeightsPlane) {
  const SubspaceBasis null = linalg::nullspace_basis(toy_w2());
  ASSERT_EQ(null.rank(), 2);
  const double r3 = std::sqrt(3.0);
  const Matrix expected = oracle::span_projector(rows({{1, 0, 0}, {0, -1 / r3, 2 / r3}}));
  EXPECT_LE((null.projector() - expected).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Nullspace, FullRankAndZeroMaps) {
  EXPECT_EQ(linalg::nullspace_basis(Matrix::Identity(3, 3)).rank(), 0);
  EXPECT_EQ(linalg::nullspace_basis(Matrix::Zero(3, 3)).rank(), 3);
}

TEST(Nullspace, NonPositiveToleranceRejected) {
  EXPECT_THROW(linalg::nullspace_basis(toy_w2(), 0.0), dii::Error);
}

TEST(ProjectOnto, ToyNullspaceComponent) {
  const double r3 = std::sqrt(3.0);
  Matrix m(3, 2);
  m << 1, 0, 0, -1 / r3, 0, 2 / r3;
  const Vector p = linalg::project_onto(m, Vector::Unit(3, 2));
  EXPECT_NEAR(p(0), 0.0, 1e-12);
  EXPECT_NEAR(p(1), -0.4, 1e-12);
  EXPECT_NEAR(p(2), 0.8, 1e-12);
}

TEST(ProjectOnto, InSpanAndOrthogonalInputs) {
  Matrix m(3, 1);
  m << 1, 2, 3;
  const Vector in_span = 2.5 * m.col(0);
  EXPECT_LE((linalg::project_onto(m, in_span) - in_span).norm(), 1e-12);
  Vector orth(3);
  orth << 3, 0, -1;
  EXPECT_LE(linalg::project_onto(m, orth).norm(), 1e-12);
}

TEST(ProjectOnto, SingularSpanRejected) {
  Matrix m(3, 2);
  m << 1, 2, 1, 2, 1, 2;
  try {
    linalg::project_onto(m, Vector::Ones(3));
    FAIL();
  } catch (const dii::Error& e) {
    EXPECT_EQ(e.code(), dii::ErrorCode::kRankDeficient);
  }
}

class RandomLinalg : public ::testing::TestWithParam<int> {};

TEST_P(RandomLinalg, ProjectorIdempotentAndSymmetric) {
  dii::Rng rng = dii::make_rng(static_cast<std::uint64_t>(GetParam()), "test.projector");
  std::uniform_int_distribution<int> dim(2, 32);
  const int d = dim(rng);
  // Tall spans keep the Gram matrix well conditioned.
  const int k = std::uniform_int_distribution<int>(1, std::max(1, d / 2))(rng);
  const Matrix m = dii::gaussian(rng, d, k, 1.0);
  const Matrix p = linalg::projector(m);
  EXPECT_LE((p * p - p).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LE((p - p.transpose()).cwiseAbs().maxCoeff(), 1e-9);
  const Vector v = dii::gaussian(rng, d, 1, 1.0);
  const Vector r = linalg::project_onto(m, v);
  EXPECT_LE((m.transpose() * (v - r)).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + v.norm() * m.norm()));
}

TEST_P(RandomLinalg, NullspaceMatchesPseudoInverseOracle) {
  dii::Rng rng = dii::make_rng(static_cast<std::uint64_t>(GetParam()), "test.nullspace");
  const int d = std::uniform_int_distribution<int>(2, 32)(rng);
  const int o = std::uniform_int_distribution<int>(1, 16)(rng);
  const int r = std::uniform_int_distribution<int>(1, std::min(d, o))(rng);
  const Matrix w = dii::gaussian(rng, d, r, 1.0) * dii::gaussian(rng, r, o, 1.0);
  const SubspaceBasis null = linalg::nullspace_basis(w);
  EXPECT_EQ(null.rank(), d - r);
  EXPECT_LE((null.projector() - oracle::nullspace_projector(w)).cwiseAbs().maxCoeff(), 1e-8);
  // Orthogonal to every row of W^T.
  if (null.rank() > 0) {
    EXPECT_LE((null.rows() * w).cwiseAbs().maxCoeff(), 1e-8 * w.norm());
  }
  // Another factorization with the same nullspace gives the same projector.
  const Matrix mix = dii::gaussian(rng, o, o, 1.0) + 3.0 * Matrix::Identity(o, o);
  const SubspaceBasis other = linalg::nullspace_basis(w * mix);
  EXPECT_LE(linalg::projector_distance(null, other), 1e-8);
}

INSTANTIATE_TEST_SUITE_P(Seeds, RandomLinalg, ::testing::Range(0, 1000));

TEST(NumericalRank, CountsAboveRelativeThreshold) {
  Matrix w = Matrix::Zero(4, 3);
  w(0, 0) = 1.0;
  w(1, 1) = 1e-3;
  w(2, 2) = 1e-12;
  EXPECT_EQ(linalg::numerical_rank(w), 2);
  EXPECT_EQ(linalg::numerical_rank(Matrix::Zero(2, 2)), 0);
}
