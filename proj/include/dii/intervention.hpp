#pragma once

// Interchange interventions: neuron-aligned swaps, subspace swaps, and the
// site views (positions and column ranges of one stream) they act on.

#include <Eigen/Dense>

#include <algorithm>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dii/autodiff.hpp"
#include "dii/error.hpp"
#include "dii/linalg.hpp"
#include "dii/models.hpp"

namespace dii {

// ---------------------------------------------------------------------------
// Vector-level swaps

/// u_A + (u_B V^T - u_A V^T) V for rows V that need not be orthonormal.
/// Used where the caller deliberately works with raw components.
inline Vector apply_rows_swap(const Vector& u_a, const Vector& u_b, const Matrix& rows) {
  if (u_a.size() != u_b.size() || rows.cols() != u_a.size()) {
    fail(ErrorCode::kShapeMismatch, "swap of lengths " + std::to_string(u_a.size()) + "/" +
                                        std::to_string(u_b.size()) + " with basis " +
                                        linalg::shape_of(rows));
  }
  if (rows.rows() == 0) return u_a;
  const Eigen::RowVectorXd coeff = (u_b - u_a).transpose() * rows.transpose();
  return u_a + (coeff * rows).transpose();
}

inline Vector distributed_interchange(const Vector& u_a, const Vector& u_b,
                                      const SubspaceBasis& basis) {
  if (basis.dim() != u_a.size() && basis.rank() > 0) {
    fail(ErrorCode::kShapeMismatch, "basis of dimension " + std::to_string(basis.dim()) +
                                        " on activations of length " +
                                        std::to_string(u_a.size()));
  }
  if (basis.rank() == 0) {
    if (u_a.size() != u_b.size()) fail(ErrorCode::kShapeMismatch, "u_A and u_B differ in length");
    return u_a;
  }
  return apply_rows_swap(u_a, u_b, basis.rows());
}

inline Vector vanilla_interchange(const Vector& u_a, const Vector& u_b,
                                  std::span<const int> indices) {
  if (u_a.size() != u_b.size()) fail(ErrorCode::kShapeMismatch, "u_A and u_B differ in length");
  Vector out = u_a;
  for (int i : indices) {
    if (i < 0 || i >= u_a.size()) {
      fail(ErrorCode::kIndexOutOfRange, "neuron " + std::to_string(i) + " outside [0, " +
                                            std::to_string(u_a.size()) + ")");
    }
    out(i) = u_b(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Site views

/// One token position of a stream, restricted to columns [col_begin, col_end).
/// col_end < 0 means "through the last column".
struct ViewPart {
  int position = kLastPosition;
  Eigen::Index col_begin = 0;
  Eigen::Index col_end = -1;
};

/// A virtual intervention site: an ordered concatenation of parts of a single
/// stream, exposed as one flat vector.
struct SiteView {
  std::string site;
  std::vector<ViewPart> parts;
  Eigen::Index site_width = 0;

  Eigen::Index width() const {
    Eigen::Index w = 0;
    for (const ViewPart& p : parts) {
      w += (p.col_end < 0 ? site_width : p.col_end) - p.col_begin;
    }
    return w;
  }

  /// Concrete segments for a stream with `n_rows` positions.
  std::vector<ad::Segment> segments(Eigen::Index n_rows) const {
    std::vector<ad::Segment> segs;
    segs.reserve(parts.size());
    for (const ViewPart& p : parts) {
      const Eigen::Index end = p.col_end < 0 ? site_width : p.col_end;
      segs.push_back({resolve_position(p.position, n_rows), p.col_begin, end});
    }
    for (std::size_t i = 0; i < segs.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        if (segs[i].row == segs[j].row && segs[i].col_begin < segs[j].col_end &&
            segs[j].col_begin < segs[i].col_end) {
          fail(ErrorCode::kOverlappingSites, "view parts " + std::to_string(j) + " and " +
                                                 std::to_string(i) + " of " + site +
                                                 " overlap");
        }
      }
    }
    return segs;
  }
};

/// Whole stream at one position.
inline SiteView site_view(const Model& model, const std::string& site,
                          int position = kLastPosition) {
  const SiteInfo& info = model.site(site);
  return SiteView{site, {ViewPart{position, 0, info.width}}, info.width};
}

/// Selected head slices of a per-head stream at one position, in the given order.
inline SiteView head_view(const Model& model, const std::string& site,
                          std::span<const int> heads, int position = kLastPosition) {
  const SiteInfo& info = model.site(site);
  if (info.head_width <= 0) {
    fail(ErrorCode::kPartitionMismatch, site + " is not a per-head stream");
  }
  const Eigen::Index n_heads = info.width / info.head_width;
  SiteView v{site, {}, info.width};
  for (int h : heads) {
    if (h < 0 || h >= n_heads) {
      fail(ErrorCode::kIndexOutOfRange, "head " + std::to_string(h) + " of " +
                                            std::to_string(n_heads));
    }
    v.parts.push_back(ViewPart{position, h * info.head_width, (h + 1) * info.head_width});
  }
  return v;
}

/// Concatenates views of the same stream into one virtual site. Writing back
/// splits the vector by the original part widths.
inline SiteView concat_site_view(const Model& model, std::span<const SiteView> views) {
  if (views.empty()) fail(ErrorCode::kShapeMismatch, "no views to concatenate");
  SiteView out{views.front().site, {}, model.site(views.front().site).width};
  for (const SiteView& v : views) {
    if (v.site != out.site) {
      fail(ErrorCode::kUnknownSite, "cannot concatenate " + v.site + " with " + out.site +
                                        ": views must share one stream");
    }
    out.parts.insert(out.parts.end(), v.parts.begin(), v.parts.end());
  }
  // Overlap between explicit positions is detectable without a sequence;
  // mixed negative/positive positions are re-checked when resolved.
  for (std::size_t i = 0; i < out.parts.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const ViewPart& a = out.parts[i];
      const ViewPart& b = out.parts[j];
      const Eigen::Index ae = a.col_end < 0 ? out.site_width : a.col_end;
      const Eigen::Index be = b.col_end < 0 ? out.site_width : b.col_end;
      if (a.position == b.position && a.col_begin < be && b.col_begin < ae) {
        fail(ErrorCode::kOverlappingSites, "parts overlap in " + out.site);
      }
    }
  }
  return out;
}

/// Every position of a sequence of length `n`, whole width.
inline SiteView all_positions_view(const Model& model, const std::string& site, int n) {
  const SiteInfo& info = model.site(site);
  SiteView v{site, {}, info.width};
  for (int p = 0; p < n; ++p) v.parts.push_back(ViewPart{p, 0, info.width});
  return v;
}

inline Vector read_view(const Matrix& stream, const SiteView& view) {
  Vector out(view.width());
  Eigen::Index off = 0;
  for (const ad::Segment& s : view.segments(stream.rows())) {
    out.segment(off, s.width()) = stream.block(s.row, s.col_begin, 1, s.width()).transpose();
    off += s.width();
  }
  return out;
}

inline void write_view(Matrix& stream, const SiteView& view, const Vector& values) {
  if (values.size() != view.width()) {
    fail(ErrorCode::kShapeMismatch, "view of width " + std::to_string(view.width()) +
                                        " given " + std::to_string(values.size()) + " values");
  }
  Eigen::Index off = 0;
  for (const ad::Segment& s : view.segments(stream.rows())) {
    stream.block(s.row, s.col_begin, 1, s.width()) = values.segment(off, s.width()).transpose();
    off += s.width();
  }
}

// ---------------------------------------------------------------------------
// Model-level interchange

/// How the base and source view vectors are combined.
using SwapRule = std::variant<SubspaceBasis, std::vector<int>>;

inline Vector apply_swap(const Vector& u_a, const Vector& u_b, const SwapRule& rule) {
  if (const auto* basis = std::get_if<SubspaceBasis>(&rule)) {
    return distributed_interchange(u_a, u_b, *basis);
  }
  return vanilla_interchange(u_a, u_b, std::get<std::vector<int>>(rule));
}

/// The view vector a source input produces (no intervention).
inline Vector source_activation(const Model& model, const SiteView& view, const Input& source) {
  const std::string names[] = {view.site};
  const Activations acts = forward_with_capture(model, source, names);
  return read_view(acts.streams.at(view.site), view);
}

/// Hook that replaces the view of the base stream by `fn(u_A)`.
inline Hook constant_view_hook(const SiteView& view,
                               std::function<Vector(const Vector&)> fn) {
  return [view, fn = std::move(fn)](ad::Var x) {
    Matrix m = x.value();
    write_view(m, view, fn(read_view(m, view)));
    return x.tape()->constant(std::move(m));
  };
}

/// Logits of the base input with the view swapped against `u_b` under `rule`.
inline Eigen::RowVectorXd interchange_with_activation(const Model& model, const SiteView& view,
                                                      const Input& base, const Vector& u_b,
                                                      const SwapRule& rule) {
  HookMap hooks;
  hooks[view.site] = constant_view_hook(
      view, [&u_b, &rule](const Vector& u_a) { return apply_swap(u_a, u_b, rule); });
  ad::Tape tape;
  const auto params = model.bind(tape, false);
  return model.forward(tape, params, base, hooks).value().row(0);
}

inline Eigen::RowVectorXd interchange(const Model& model, const SiteView& view,
                                      const Input& base, const Input& source,
                                      const SwapRule& rule) {
  return interchange_with_activation(model, view, base, source_activation(model, view, source),
                                     rule);
}

// ---------------------------------------------------------------------------
// Differentiable hooks used by the trainers

/// Subspace swap with basis rows `basis` (n x w, on the tape) against a
/// constant source vector.
inline Hook subspace_swap_hook(const SiteView& view, ad::Var basis, Vector u_b) {
  return [view, basis, u_b = std::move(u_b)](ad::Var x) {
    ad::Tape& tape = *x.tape();
    const auto segs = view.segments(x.rows());
    const ad::Var u_a = ad::gather_segments(x, segs);
    const ad::Var diff = ad::sub(tape.constant(Matrix(u_b.transpose())), u_a);
    const ad::Var coeff = ad::matmul_nt(diff, basis);  // 1 x n
    const ad::Var r = ad::add(u_a, ad::matmul(coeff, basis));
    return ad::scatter_segments(x, segs, r);
  };
}

/// Soft-masked swap in a full learned basis: coordinates in the rotated basis
/// are mixed by `mask` (1 x w, entries in [0, 1]).
inline Hook masked_rotation_hook(const SiteView& view, ad::Var rotation, ad::Var mask,
                                 Vector u_b) {
  return [view, rotation, mask, u_b = std::move(u_b)](ad::Var x) {
    ad::Tape& tape = *x.tape();
    const auto segs = view.segments(x.rows());
    const ad::Var u_a = ad::gather_segments(x, segs);
    const ad::Var diff = ad::sub(tape.constant(Matrix(u_b.transpose())), u_a);
    const ad::Var coeff = ad::mul(ad::matmul_nt(diff, rotation), mask);
    const ad::Var r = ad::add(u_a, ad::matmul(coeff, rotation));
    return ad::scatter_segments(x, segs, r);
  };
}

}  // namespace dii
