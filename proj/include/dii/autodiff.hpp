#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Tape records every operation in order. Each node keeps its value, a
// lazily allocated gradient and a closure that pushes its gradient into its
// inputs. Nodes that do not depend on any parameter are never visited in the
// backward sweep.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dii/error.hpp"

namespace dii::ad {

using Mat = Eigen::MatrixXd;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

  inline const Mat& value() const;
  inline Eigen::Index rows() const;
  inline Eigen::Index cols() const;
  /// Scalar value of a 1x1 node.
  inline double item() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& grad)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value) { return add_node(std::move(value), false, {}); }

  Var parameter(Mat value) { return add_node(std::move(value), true, {}); }

  /// Records the result of an operation. The node needs a gradient only if
  /// one of its inputs does.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Var record(Mat value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    return add_node(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }

  /// Adds `g` into the gradient of node `id` if that node needs one.
  void accumulate(int id, const Mat& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards.
  void backward(const Var& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      fail(ErrorCode::kShapeMismatch, "backward() needs a scalar loss");
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || !n.backward || n.grad.size() == 0) continue;
      const Mat g = n.grad;
      n.backward(*this, g);
    }
  }

  /// Gradient of the last backward() loss with respect to `v`; zeros if the
  /// loss does not depend on it.
  Mat grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
  };

  Var add_node(Mat value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat(), needs_grad, std::move(backward)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }
inline Eigen::Index Var::rows() const { return value().rows(); }
inline Eigen::Index Var::cols() const { return value().cols(); }
inline double Var::item() const { return value()(0, 0); }

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorCode::kShapeMismatch,
         std::string(op) + ": " + std::to_string(a.rows()) + "x" +
             std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
             "x" + std::to_string(b.cols()));
  }
}

inline void require_scalar(const Var& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) {
    fail(ErrorCode::kShapeMismatch, std::string(op) + " expects a 1x1 scalar");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear ops

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {a, b},
                          [ia, ib](Tape& t, const Mat& g) {
                            t.accumulate(ia, g);
                            t.accumulate(ib, g);
                          });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {a, b},
                          [ia, ib](Tape& t, const Mat& g) {
                            t.accumulate(ia, g);
                            t.accumulate(ib, -g);
                          });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [ia, ib](Tape& t, const Mat& g) {
                            t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                            t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                          });
}

inline Var scale(const Var& a, double s) {
  const int ia = a.id();
  return a.tape()->record(a.value() * s, {a}, [ia, s](Tape& t, const Mat& g) {
    t.accumulate(ia, g * s);
  });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorCode::kShapeMismatch,
         "matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
             std::to_string(b.rows()));
  }
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() * b.value(), {a, b},
                          [ia, ib](Tape& t, const Mat& g) {
                            if (t.needs_grad(ia)) {
                              t.accumulate(ia, g * t.value(ib).transpose());
                            }
                            if (t.needs_grad(ib)) {
                              t.accumulate(ib, t.value(ia).transpose() * g);
                            }
                          });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) {
    fail(ErrorCode::kShapeMismatch, "matmul_nt: column counts differ");
  }
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() * b.value().transpose(), {a, b},
                          [ia, ib](Tape& t, const Mat& g) {
                            if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
                            if (t.needs_grad(ib)) {
                              t.accumulate(ib, g.transpose() * t.value(ia));
                            }
                          });
}

inline Var transpose(const Var& a) {
  const int ia = a.id();
  return a.tape()->record(a.value().transpose(), {a},
                          [ia](Tape& t, const Mat& g) {
                            t.accumulate(ia, g.transpose());
                          });
}

/// Adds a 1 x c row to every row of `a`.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    fail(ErrorCode::kShapeMismatch, "add_row: row width mismatch");
  }
  const int ia = a.id(), ir = row.id();
  Mat out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row},
                          [ia, ir](Tape& t, const Mat& g) {
                            t.accumulate(ia, g);
                            t.accumulate(ir, g.colwise().sum());
                          });
}

/// Multiplies every row of `a` elementwise by a 1 x c row.
inline Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    fail(ErrorCode::kShapeMismatch, "mul_row: row width mismatch");
  }
  const int ia = a.id(), ir = row.id();
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape()->record(std::move(out), {a, row},
                          [ia, ir](Tape& t, const Mat& g) {
                            const Mat& r = t.value(ir);
                            if (t.needs_grad(ia)) {
                              Mat ga = g.array().rowwise() * r.row(0).array();
                              t.accumulate(ia, ga);
                            }
                            if (t.needs_grad(ir)) {
                              t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
                            }
                          });
}

/// Multiplies `a` by a 1x1 scalar node.
inline Var mul_scalar(const Var& a, const Var& s) {
  detail::require_scalar(s, "mul_scalar");
  const int ia = a.id(), is = s.id();
  return a.tape()->record(a.value() * s.item(), {a, s},
                          [ia, is](Tape& t, const Mat& g) {
                            const double sv = t.value(is)(0, 0);
                            t.accumulate(ia, g * sv);
                            t.accumulate(is, Mat::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
                          });
}

inline Var div_scalar(const Var& a, const Var& s) {
  detail::require_scalar(s, "div_scalar");
  const int ia = a.id(), is = s.id();
  const double sv = s.item();
  Mat out = a.value() / sv;
  return a.tape()->record(std::move(out), {a, s},
                          [ia, is](Tape& t, const Mat& g) {
                            const double sv = t.value(is)(0, 0);
                            t.accumulate(ia, g / sv);
                            const double dot = g.cwiseProduct(t.value(ia)).sum();
                            t.accumulate(is, Mat::Constant(1, 1, -dot / (sv * sv)));
                          });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var relu(const Var& a) {
  const int ia = a.id();
  Mat out = a.value().cwiseMax(0.0);
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Mat& g) {
    const Mat& x = t.value(ia);
    t.accumulate(ia, (x.array() > 0.0).select(g, 0.0));
  });
}

/// tanh approximation of GELU.
inline Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double c = 0.044715;
  const int ia = a.id();
  Mat out = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x)));
  });
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Mat& g) {
    const Mat d = t.value(ia).unaryExpr([](double x) {
      const double th = std::tanh(k * (x + c * x * x * x));
      return 0.5 * (1.0 + th) +
             0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * c * x * x);
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

/// log(1 + exp(beta x)) / beta, computed without overflow.
inline Var softplus(const Var& a, double beta = 1.0) {
  const int ia = a.id();
  Mat out = a.value().unaryExpr([beta](double x) {
    const double z = beta * x;
    return (z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) / beta;
  });
  return a.tape()->record(std::move(out), {a}, [ia, beta](Tape& t, const Mat& g) {
    const Mat d = t.value(ia).unaryExpr([beta](double x) {
      const double z = beta * x;
      return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

inline Var sigmoid(const Var& a) {
  const int ia = a.id();
  Mat out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  const Mat y = out;
  return a.tape()->record(std::move(out), {a}, [ia, y](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

/// Row-wise softmax where entry (i, j) with j > i is masked out.
inline Var causal_softmax(const Var& a) {
  const int ia = a.id();
  const Mat& x = a.value();
  Mat y = Mat::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index n = std::min<Eigen::Index>(i + 1, x.cols());
    const double m = x.row(i).head(n).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      y(i, j) = std::exp(x(i, j) - m);
      z += y(i, j);
    }
    y.row(i).head(n) /= z;
  }
  const Mat yc = y;
  return a.tape()->record(std::move(y), {a}, [ia, yc](Tape& t, const Mat& g) {
    const Mat gy = g.cwiseProduct(yc);
    const Eigen::VectorXd s = gy.rowwise().sum();
    t.accumulate(ia, gy - (yc.array().colwise() * s.array()).matrix());
  });
}

/// Row-wise standardization (x - mean) / sqrt(var + eps), no affine part.
inline Var layer_norm(const Var& a, double eps = 1e-5) {
  const int ia = a.id();
  const Mat& x = a.value();
  const double c = static_cast<double>(x.cols());
  Mat y(x.rows(), x.cols());
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().sum() / c;
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    y.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  const Mat yc = y;
  return a.tape()->record(std::move(y), {a},
                          [ia, yc, inv_std, c](Tape& t, const Mat& g) {
                            Mat gx(g.rows(), g.cols());
                            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                              const double mg = g.row(i).sum() / c;
                              const double mgy = g.row(i).dot(yc.row(i)) / c;
                              gx.row(i) = inv_std(i) * (g.row(i).array() - mg -
                                                        yc.row(i).array() * mgy);
                            }
                            t.accumulate(ia, gx);
                          });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Var sum(const Var& a) {
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape()->record(Mat::Constant(1, 1, a.value().sum()), {a},
                          [ia, r, c](Tape& t, const Mat& g) {
                            t.accumulate(ia, Mat::Constant(r, c, g(0, 0)));
                          });
}

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

inline Var norm(const Var& a) {
  const int ia = a.id();
  const double n = a.value().norm();
  return a.tape()->record(Mat::Constant(1, 1, n), {a},
                          [ia, n](Tape& t, const Mat& g) {
                            if (n == 0.0) return;
                            t.accumulate(ia, t.value(ia) * (g(0, 0) / n));
                          });
}

/// Cross-entropy of a 1 x V logit row against class `label`.
inline Var cross_entropy(const Var& logits, int label) {
  if (logits.rows() != 1 || label < 0 || label >= logits.cols()) {
    fail(ErrorCode::kIndexOutOfRange, "cross_entropy: bad label or logit shape");
  }
  const int il = logits.id();
  const Mat& z = logits.value();
  const double m = z.maxCoeff();
  const Eigen::RowVectorXd e = (z.row(0).array() - m).exp().matrix();
  const double lse = m + std::log(e.sum());
  Eigen::RowVectorXd p = e / e.sum();
  return logits.tape()->record(Mat::Constant(1, 1, lse - z(0, label)), {logits},
                               [il, p, label](Tape& t, const Mat& g) {
                                 Mat d = p;
                                 d(0, label) -= 1.0;
                                 t.accumulate(il, d * g(0, 0));
                               });
}

/// Mean of scalar nodes, summed in index order.
inline Var mean(std::span<const Var> scalars) {
  if (scalars.empty()) fail(ErrorCode::kShapeMismatch, "mean of nothing");
  Var acc = scalars[0];
  for (std::size_t i = 1; i < scalars.size(); ++i) acc = add(acc, scalars[i]);
  return scale(acc, 1.0 / static_cast<double>(scalars.size()));
}

// ---------------------------------------------------------------------------
// Indexing

inline Var row(const Var& a, Eigen::Index i) {
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape()->record(a.value().row(i), {a}, [ia, i, r, c](Tape& t, const Mat& g) {
    Mat ga = Mat::Zero(r, c);
    ga.row(i) = g.row(0);
    t.accumulate(ia, ga);
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.cols()) {
    fail(ErrorCode::kIndexOutOfRange, "slice_cols out of range");
  }
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape()->record(a.value().middleCols(start, n), {a},
                          [ia, start, n, r, c](Tape& t, const Mat& g) {
                            Mat ga = Mat::Zero(r, c);
                            ga.middleCols(start, n) = g;
                            t.accumulate(ia, ga);
                          });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorCode::kShapeMismatch, "concat_cols of nothing");
  const Eigen::Index r = parts[0].rows();
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) fail(ErrorCode::kShapeMismatch, "concat_cols row mismatch");
    c += p.cols();
  }
  Mat out(r, c);
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  return parts[0].tape()->record(std::move(out), parts,
                                 [ids, widths](Tape& t, const Mat& g) {
                                   Eigen::Index o = 0;
                                   for (std::size_t k = 0; k < ids.size(); ++k) {
                                     t.accumulate(ids[k], g.middleCols(o, widths[k]));
                                     o += widths[k];
                                   }
                                 });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorCode::kShapeMismatch, "concat_rows of nothing");
  const Eigen::Index c = parts[0].cols();
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) fail(ErrorCode::kShapeMismatch, "concat_rows col mismatch");
    r += p.rows();
  }
  Mat out(r, c);
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
    ids.push_back(p.id());
    heights.push_back(p.rows());
  }
  return parts[0].tape()->record(std::move(out), parts,
                                 [ids, heights](Tape& t, const Mat& g) {
                                   Eigen::Index o = 0;
                                   for (std::size_t k = 0; k < ids.size(); ++k) {
                                     t.accumulate(ids[k], g.middleRows(o, heights[k]));
                                     o += heights[k];
                                   }
                                 });
}

/// Rows of `table` selected by `indices` (embedding lookup).
inline Var gather_rows(const Var& table, std::span<const int> indices) {
  const int it = table.id();
  const Eigen::Index n = static_cast<Eigen::Index>(indices.size());
  Mat out(n, table.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    const int idx = indices[static_cast<std::size_t>(k)];
    if (idx < 0 || idx >= table.rows()) {
      fail(ErrorCode::kIndexOutOfRange,
           "row index " + std::to_string(idx) + " outside table of " +
               std::to_string(table.rows()));
    }
    out.row(k) = table.value().row(idx);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  const Eigen::Index r = table.rows(), c = table.cols();
  return table.tape()->record(std::move(out), {table},
                              [it, idx, r, c](Tape& t, const Mat& g) {
                                Mat gt = Mat::Zero(r, c);
                                for (std::size_t k = 0; k < idx.size(); ++k) {
                                  gt.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
                                }
                                t.accumulate(it, gt);
                              });
}

/// One contiguous run of entries inside a matrix: row `row`, columns
/// [col_begin, col_end).
struct Segment {
  Eigen::Index row = 0;
  Eigen::Index col_begin = 0;
  Eigen::Index col_end = 0;
  Eigen::Index width() const { return col_end - col_begin; }
};

/// Concatenates the given segments of `a` into a single 1 x W row.
inline Var gather_segments(const Var& a, std::span<const Segment> segs) {
  Eigen::Index w = 0;
  for (const Segment& s : segs) w += s.width();
  Mat out(1, w);
  Eigen::Index off = 0;
  for (const Segment& s : segs) {
    out.block(0, off, 1, s.width()) = a.value().block(s.row, s.col_begin, 1, s.width());
    off += s.width();
  }
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  std::vector<Segment> sv(segs.begin(), segs.end());
  return a.tape()->record(std::move(out), {a}, [ia, sv, r, c](Tape& t, const Mat& g) {
    Mat ga = Mat::Zero(r, c);
    Eigen::Index o = 0;
    for (const Segment& s : sv) {
      ga.block(s.row, s.col_begin, 1, s.width()) += g.block(0, o, 1, s.width());
      o += s.width();
    }
    t.accumulate(ia, ga);
  });
}

/// Copy of `a` with the segments overwritten by consecutive entries of the
/// 1 x W row `values`.
inline Var scatter_segments(const Var& a, std::span<const Segment> segs,
                            const Var& values) {
  Mat out = a.value();
  Eigen::Index off = 0;
  for (const Segment& s : segs) {
    out.block(s.row, s.col_begin, 1, s.width()) = values.value().block(0, off, 1, s.width());
    off += s.width();
  }
  if (off != values.cols() || values.rows() != 1) {
    fail(ErrorCode::kShapeMismatch,
         "scatter_segments: " + std::to_string(values.cols()) +
             " values for width " + std::to_string(off));
  }
  const int ia = a.id(), iv = values.id();
  std::vector<Segment> sv(segs.begin(), segs.end());
  return a.tape()->record(std::move(out), {a, values},
                          [ia, iv, sv](Tape& t, const Mat& g) {
                            Mat ga = g;
                            Mat gv(1, t.value(iv).cols());
                            Eigen::Index o = 0;
                            for (const Segment& s : sv) {
                              gv.block(0, o, 1, s.width()) = g.block(s.row, s.col_begin, 1, s.width());
                              ga.block(s.row, s.col_begin, 1, s.width()).setZero();
                              o += s.width();
                            }
                            t.accumulate(ia, ga);
                            t.accumulate(iv, gv);
                          });
}

// ---------------------------------------------------------------------------
// Orthonormalization

/// Differentiable modified Gram-Schmidt over the rows of `p`, with the same
/// re-orthogonalization pass as linalg::orthonormalize.
inline Var gram_schmidt(const Var& p) {
  Tape& tape = *p.tape();
  std::vector<Var> q;
  q.reserve(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Var r = row(p, i);
    for (int pass = 0; pass < 2; ++pass) {
      for (const Var& qj : q) r = sub(r, mul_scalar(qj, dot(r, qj)));
    }
    const Var n = norm(r);
    if (!(n.item() > 1e-12)) {
      fail(ErrorCode::kRankDeficient, "gram_schmidt: row " + std::to_string(i) +
                                          " collapsed");
    }
    q.push_back(div_scalar(r, n));
  }
  if (q.empty()) return tape.constant(Mat::Zero(0, p.cols()));
  return concat_rows(q);
}

}  // namespace dii::ad
