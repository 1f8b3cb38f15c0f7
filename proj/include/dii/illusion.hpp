#pragma once

// Splitting intervention directions against the nullspace of the weights
// that read them, and the effect difference between swapping along a
// direction and along its rowspace part alone.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dii/error.hpp"
#include "dii/intervention.hpp"
#include "dii/linalg.hpp"
#include "dii/models.hpp"

namespace dii {

/// Maps the output of the intervened layer (length o) to final predictions.
using DownstreamFn = std::function<Vector(const Vector&)>;

inline DownstreamFn phi_noop() {
  return [](const Vector& y) { return y; };
}

struct NullspaceDecomposition {
  Vector v;
  Vector null_part;   // inside the nullspace of w_out
  Vector range_part;  // v - null_part
  Matrix w_out;
};

inline NullspaceDecomposition decompose_direction(const Vector& v, const Matrix& w_out,
                                                  double tol = linalg::kRankTolerance) {
  if (v.size() != w_out.rows()) {
    fail(ErrorCode::kShapeMismatch, "direction of length " + std::to_string(v.size()) +
                                        " against weights " + linalg::shape_of(w_out));
  }
  const SubspaceBasis null = linalg::nullspace_basis(w_out, tol);
  NullspaceDecomposition d;
  d.v = v;
  d.null_part = null.rank() == 0 ? Vector::Zero(v.size())
                                 : Vector(null.rows().transpose() * (null.rows() * v));
  d.range_part = v - d.null_part;
  d.w_out = w_out;
  return d;
}

/// The intervened layer output split into the base term and the four
/// interaction terms obtained by expanding both copies of v = v_n + v_r.
struct ExpansionBreakdown {
  Vector base;            // u_A W
  Vector null_via_null;   // (dU . v_n) v_n W
  Vector range_via_null;  // (dU . v_r) v_n W
  Vector null_via_range;  // (dU . v_n) v_r W
  Vector range_via_range; // (dU . v_r) v_r W

  Vector total() const {
    return base + null_via_null + range_via_null + null_via_range + range_via_range;
  }
  /// Largest norm among the two terms that end in v_n W.
  double nullspace_terms_norm() const {
    return std::max(null_via_null.norm(), range_via_null.norm());
  }
};

inline ExpansionBreakdown expansion_breakdown(const Vector& u_a, const Vector& u_b,
                                              const NullspaceDecomposition& dec) {
  if (u_a.size() != dec.v.size() || u_b.size() != dec.v.size()) {
    fail(ErrorCode::kShapeMismatch, "activations do not match the decomposed direction");
  }
  const Vector diff = u_b - u_a;
  const Vector null_out = dec.w_out.transpose() * dec.null_part;
  const Vector range_out = dec.w_out.transpose() * dec.range_part;
  const double dn = diff.dot(dec.null_part);
  const double dr = diff.dot(dec.range_part);
  ExpansionBreakdown e;
  e.base = dec.w_out.transpose() * u_a;
  e.null_via_null = dn * null_out;
  e.range_via_null = dr * null_out;
  e.null_via_range = dn * range_out;
  e.range_via_range = dr * range_out;
  return e;
}

struct IllusionReport {
  Vector output_full;   // Phi(u^{v<-B} W)
  Vector output_range;  // Phi(u^{v_r<-B} W)
  Vector difference;    // output_full - output_range

  /// Scalarized effect: difference in the (target - competitor) logit gap.
  /// For single-output maps pass target = 0 and competitor = -1.
  double logit_difference(int target, int competitor = -1) const {
    const double c = competitor < 0 ? 0.0 : difference(competitor);
    return difference(target) - c;
  }
  double scalar() const { return logit_difference(0, difference.size() > 1 ? 1 : -1); }
};

/// Effect of swapping along v minus the effect of swapping along its raw
/// rowspace component, both read through `phi`.
inline IllusionReport illusion_effect(const DownstreamFn& phi, const Matrix& w_out,
                                      const Vector& v, const Vector& u_a, const Vector& u_b) {
  const NullspaceDecomposition dec = decompose_direction(v, w_out);
  const Matrix v_row = v.transpose();
  const Matrix r_row = dec.range_part.transpose();
  const Vector full = apply_rows_swap(u_a, u_b, v_row);
  const Vector range = apply_rows_swap(u_a, u_b, r_row);
  IllusionReport r;
  r.output_full = phi(w_out.transpose() * full);
  r.output_range = phi(w_out.transpose() * range);
  r.difference = r.output_full - r.output_range;
  return r;
}

/// Same quantity measured through a whole model: two interventions at an
/// mlp_act site, with everything after the site acting as the downstream map.
inline IllusionReport illusion_effect(const Model& model, const std::string& site,
                                      const Vector& v, const Input& base, const Input& source,
                                      int position = kLastPosition) {
  const SiteInfo& info = model.site(site);
  const Matrix* w_out = model.down_projection(site);
  if (info.stream != Stream::kMlpAct || w_out == nullptr) {
    fail(ErrorCode::kSiteNotMlpAct, site + " is not read by a single down-projection");
  }
  const NullspaceDecomposition dec = decompose_direction(v, *w_out);
  const SiteView view = site_view(model, site, position);
  const Vector u_b = source_activation(model, view, source);
  auto run = [&](const Matrix& rows) {
    HookMap hooks;
    hooks[site] = constant_view_hook(
        view, [&](const Vector& u_a) { return apply_rows_swap(u_a, u_b, rows); });
    ad::Tape tape;
    const auto params = model.bind(tape, false);
    return Vector(model.forward(tape, params, base, hooks).value().row(0).transpose());
  };
  IllusionReport r;
  r.output_full = run(v.transpose());
  r.output_range = run(dec.range_part.transpose());
  r.difference = r.output_full - r.output_range;
  return r;
}

/// Variant where both components are rescaled to unit length before use:
/// Phi(u_A W + (dU . n)(r W) + (dU . r)(r W)) - Phi(u_A W + (dU . r)(r W))
/// with n = v_n / |v_n| and r = v_r / |v_r|.
inline IllusionReport normalized_variant_effect(const DownstreamFn& phi, const Matrix& w_out,
                                                const Vector& v, const Vector& u_a,
                                                const Vector& u_b) {
  const NullspaceDecomposition dec = decompose_direction(v, w_out);
  const double nn = dec.null_part.norm(), rn = dec.range_part.norm();
  if (nn < 1e-12 || rn < 1e-12) {
    fail(ErrorCode::kZeroComponent, "component norms " + std::to_string(nn) + ", " +
                                        std::to_string(rn));
  }
  const Vector n_hat = dec.null_part / nn;
  const Vector r_hat = dec.range_part / rn;
  const Vector diff = u_b - u_a;
  const Vector base = w_out.transpose() * u_a;
  const Vector r_out = w_out.transpose() * r_hat;
  const Vector range_term = diff.dot(r_hat) * r_out;
  IllusionReport r;
  r.output_full = phi(base + diff.dot(n_hat) * r_out + range_term);
  r.output_range = phi(base + range_term);
  r.difference = r.output_full - r.output_range;
  return r;
}

/// Toy copy network with v = e_3: the illusory part of the swap effect.
inline double toy_illusion_effect(double x, double x_prime, const ToyNetwork& net = {}) {
  const Vector v = Vector::Unit(3, 2);
  const Matrix w2 = net.w2;
  const NullspaceDecomposition dec = decompose_direction(v, w2);
  const ExpansionBreakdown e =
      expansion_breakdown(Vector(x * net.w1), Vector(x_prime * net.w1), dec);
  return e.null_via_range(0);
}

/// Per-vector split of a multi-vector basis. The range rows are left as
/// computed unless `reorthonormalize` is set.
struct BasisDecomposition {
  Matrix null_rows;
  Matrix range_rows;
};

inline BasisDecomposition decompose_basis(const SubspaceBasis& basis, const Matrix& w_out,
                                          bool reorthonormalize = false) {
  BasisDecomposition out{Matrix(basis.rank(), basis.dim()), Matrix(basis.rank(), basis.dim())};
  for (Eigen::Index i = 0; i < basis.rank(); ++i) {
    const NullspaceDecomposition d = decompose_direction(basis.row(i), w_out);
    out.null_rows.row(i) = d.null_part.transpose();
    out.range_rows.row(i) = d.range_part.transpose();
  }
  if (reorthonormalize && basis.rank() > 0) {
    out.range_rows = linalg::orthonormalize(out.range_rows).rows();
  }
  return out;
}

}  // namespace dii
