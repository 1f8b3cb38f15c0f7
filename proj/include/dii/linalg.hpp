#pragma once

// Dense kernels used by the intervention and illusion code. Everything is
// 64-bit and deterministic; no state is shared between calls.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dii/error.hpp"

namespace dii {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace linalg {

inline constexpr double kRankTolerance = 1e-10;
inline constexpr double kOrthonormalTolerance = 1e-10;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline std::string shape_of(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace linalg

/// n orthonormal row vectors of length d. An empty basis (n = 0) is valid
/// and stands for the zero subspace.
class SubspaceBasis {
 public:
  SubspaceBasis() = default;

  /// Wraps rows that are already orthonormal. Rows that are not are
  /// rejected rather than fixed up.
  static SubspaceBasis from_rows(Matrix rows,
                                 double tol = linalg::kOrthonormalTolerance) {
    if (!rows.allFinite()) {
      fail(ErrorCode::kNotOrthonormal, "basis has non-finite entries");
    }
    const Matrix gram = rows * rows.transpose();
    for (Eigen::Index i = 0; i < gram.rows(); ++i) {
      for (Eigen::Index j = 0; j < gram.cols(); ++j) {
        const double target = i == j ? 1.0 : 0.0;
        const double slack = i == j ? 2.0 * tol + tol * tol : tol;
        if (std::abs(gram(i, j) - target) > slack) {
          fail(ErrorCode::kNotOrthonormal,
               "rows " + std::to_string(i) + "," + std::to_string(j) +
                   " have inner product " + std::to_string(gram(i, j)));
        }
      }
    }
    SubspaceBasis b;
    b.rows_ = std::move(rows);
    return b;
  }

  static SubspaceBasis empty(Eigen::Index dim) {
    SubspaceBasis b;
    b.rows_ = Matrix::Zero(0, dim);
    return b;
  }

  /// Standard basis vectors e_i for each i in `indices`.
  static SubspaceBasis axes(Eigen::Index dim, std::span<const int> indices) {
    Matrix rows = Matrix::Zero(static_cast<Eigen::Index>(indices.size()), dim);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      if (indices[k] < 0 || indices[k] >= dim) {
        fail(ErrorCode::kIndexOutOfRange,
             "axis " + std::to_string(indices[k]) + " outside [0, " +
                 std::to_string(dim) + ")");
      }
      rows(static_cast<Eigen::Index>(k), indices[k]) = 1.0;
    }
    return from_rows(std::move(rows));
  }

  static SubspaceBasis identity(Eigen::Index dim) {
    return from_rows(Matrix::Identity(dim, dim));
  }

  Eigen::Index rank() const { return rows_.rows(); }
  Eigen::Index dim() const { return rows_.cols(); }
  const Matrix& rows() const { return rows_; }
  Vector row(Eigen::Index i) const { return rows_.row(i).transpose(); }

  /// Orthogonal projector onto the span, d x d.
  Matrix projector() const { return rows_.transpose() * rows_; }

 private:
  Matrix rows_ = Matrix::Zero(0, 0);
};

namespace linalg {

/// Modified Gram-Schmidt with one re-orthogonalization pass over the rows.
inline SubspaceBasis orthonormalize(const Matrix& rows,
                                    double tol = kRankTolerance) {
  Matrix q = rows;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index j = 0; j < i; ++j) {
        q.row(i) -= q.row(i).dot(q.row(j)) * q.row(j);
      }
    }
    const double norm = q.row(i).norm();
    if (!(norm >= tol)) {
      fail(ErrorCode::kRankDeficient,
           "row " + std::to_string(i) + " has residual norm " +
               std::to_string(norm));
    }
    q.row(i) /= norm;
  }
  return SubspaceBasis::from_rows(std::move(q));
}

/// Numerical rank of `w` with threshold tol * (largest singular value).
inline Eigen::Index numerical_rank(const Matrix& w, double tol = kRankTolerance) {
  if (w.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(w);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > tol * s(0)) ++r;
  }
  return r;
}

/// Basis of {b in R^d : b W = 0} for W of shape d x o, i.e. the directions a
/// row activation can move along without changing its image under W.
inline SubspaceBasis nullspace_basis(const Matrix& w,
                                     double tol = kRankTolerance) {
  if (!(tol > 0.0)) {
    fail(ErrorCode::kShapeMismatch, "nullspace tolerance must be positive");
  }
  const Eigen::Index d = w.rows();
  if (w.cols() == 0 || w.isZero(0.0)) return SubspaceBasis::identity(d);
  Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeFullU);
  const auto& s = svd.singularValues();
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > tol * s(0)) ++r;
  }
  if (r == d) return SubspaceBasis::empty(d);
  Matrix rows = svd.matrixU().rightCols(d - r).transpose();
  // U is orthogonal to working precision; one cleanup pass keeps the
  // invariant tight enough for from_rows.
  return orthonormalize(rows);
}

/// Projector M (M^T M)^{-1} M^T onto the column space of `span`.
inline Matrix projector(const Matrix& span) {
  const Matrix gram = span.transpose() * span;
  if (gram.rows() == 0) return Matrix::Zero(span.rows(), span.rows());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  const auto& ev = eig.eigenvalues();
  const double largest = ev.cwiseAbs().maxCoeff();
  if (!(largest > 0.0) || ev.minCoeff() <= kRankTolerance * largest) {
    fail(ErrorCode::kRankDeficient,
         "span matrix " + shape_of(span) + " is not of full column rank");
  }
  const Matrix inv = eig.eigenvectors() * ev.cwiseInverse().asDiagonal() *
                     eig.eigenvectors().transpose();
  return span * inv * span.transpose();
}

inline Vector project_onto(const Matrix& span, const Vector& v) {
  if (span.rows() != v.size()) {
    fail(ErrorCode::kShapeMismatch,
         "span " + shape_of(span) + " vs vector of length " +
             std::to_string(v.size()));
  }
  const Matrix gram = span.transpose() * span;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  const auto& ev = eig.eigenvalues();
  if (ev.size() == 0) return Vector::Zero(v.size());
  const double largest = ev.cwiseAbs().maxCoeff();
  if (!(largest > 0.0) || ev.minCoeff() <= kRankTolerance * largest) {
    fail(ErrorCode::kRankDeficient,
         "span matrix " + shape_of(span) + " is not of full column rank");
  }
  const Vector coeffs = eig.eigenvectors() *
                        (ev.cwiseInverse().asDiagonal() *
                         (eig.eigenvectors().transpose() *
                          (span.transpose() * v)));
  return span * coeffs;
}

/// Frobenius distance between the projectors of two subspaces.
inline double projector_distance(const SubspaceBasis& a,
                                 const SubspaceBasis& b) {
  return (a.projector() - b.projector()).norm();
}

}  // namespace linalg
}  // namespace dii
