#include <gtest/gtest.h>

#include <functional>
#include <string>
#include <vector>

#include "dii/autodiff.hpp"
#include "dii/das.hpp"
#include "dii/rng.hpp"

namespace ad = dii::ad;
using dii::Matrix;

namespace {

using LossFn = std::function<ad::Var(ad::Tape&, const ad::Var&)>;

struct OpCase {
  std::string name;
  int rows;
  int cols;
  LossFn fn;
};

// Fixed, non-trivial weights so every op sees a generic downstream gradient.
ad::Var weighted_sum(ad::Tape& t, const ad::Var& y) {
  dii::Rng rng = dii::make_rng(99, "test.ad.weights");
  return ad::sum(ad::mul(y, t.constant(dii::gaussian(rng, y.rows(), y.cols()))));
}

ad::Var fixed(ad::Tape& t, int r, int c, std::string_view tag) {
  dii::Rng rng = dii::make_rng(7, tag);
  return t.constant(dii::gaussian(rng, r, c));
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> c;
  c.push_back({"add_sub", 3, 4, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::sub(ad::add(x, x), fixed(t, 3, 4, "a")));
               }});
  c.push_back({"mul", 3, 4, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::mul(x, ad::mul(x, fixed(t, 3, 4, "b"))));
               }});
  c.push_back({"matmul", 3, 4, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::matmul(x, fixed(t, 4, 2, "c")));
               }});
  c.push_back({"matmul_nt", 3, 4, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::matmul_nt(x, x));
               }});
  c.push_back({"transpose", 2, 5, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::transpose(x));
               }});
  c.push_back({"add_mul_row", 1, 4, [](ad::Tape& t, const ad::Var& r) {
                 const ad::Var a = fixed(t, 3, 4, "d");
                 return weighted_sum(t, ad::mul_row(ad::add_row(a, r), r));
               }});
  c.push_back({"mul_div_scalar", 1, 1, [](ad::Tape& t, const ad::Var& s) {
                 const ad::Var a = fixed(t, 2, 3, "e");
                 return weighted_sum(t, ad::div_scalar(ad::mul_scalar(a, s), ad::add(ad::mul(s, s), t.constant(Matrix::Ones(1, 1)))));
               }});
  c.push_back({"relu", 3, 3, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::relu(x));
               }});
  c.push_back({"gelu", 3, 3, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::gelu(x));
               }});
  c.push_back({"softplus", 3, 3, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::softplus(x, 2.0));
               }});
  c.push_back({"sigmoid", 3, 3, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::sigmoid(x));
               }});
  c.push_back({"causal_softmax", 4, 4, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::causal_softmax(x));
               }});
  c.push_back({"layer_norm", 3, 5, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::layer_norm(x));
               }});
  c.push_back({"norm_dot", 1, 5, [](ad::Tape& t, const ad::Var& x) {
                 return ad::mul(ad::norm(x), ad::dot(x, fixed(t, 1, 5, "f")));
               }});
  c.push_back({"cross_entropy", 1, 6, [](ad::Tape&, const ad::Var& x) {
                 return ad::cross_entropy(x, 2);
               }});
  c.push_back({"row_slice_concat", 3, 4, [](ad::Tape& t, const ad::Var& x) {
                 const std::vector<ad::Var> parts{ad::slice_cols(x, 1, 2), ad::slice_cols(x, 0, 1)};
                 const std::vector<ad::Var> rows{ad::row(x, 2), ad::slice_cols(ad::row(x, 1), 0, 4)};
                 return ad::add(weighted_sum(t, ad::concat_cols(parts)),
                                weighted_sum(t, ad::concat_rows(rows)));
               }});
  c.push_back({"gather_rows", 5, 3, [](ad::Tape& t, const ad::Var& x) {
                 const std::vector<int> idx{4, 0, 4, 2};
                 return weighted_sum(t, ad::gather_rows(x, idx));
               }});
  c.push_back({"segments", 3, 6, [](ad::Tape& t, const ad::Var& x) {
                 const std::vector<ad::Segment> segs{{0, 1, 3}, {2, 4, 6}};
                 const ad::Var g = ad::gather_segments(x, segs);
                 const ad::Var s = ad::scatter_segments(x, segs, ad::scale(g, -0.5));
                 return weighted_sum(t, ad::mul(s, s));
               }});
  c.push_back({"gram_schmidt", 3, 6, [](ad::Tape& t, const ad::Var& x) {
                 return weighted_sum(t, ad::gram_schmidt(x));
               }});
  c.push_back({"mean", 2, 2, [](ad::Tape&, const ad::Var& x) {
                 const std::vector<ad::Var> s{ad::sum(x), ad::dot(x, x), ad::norm(x)};
                 return ad::mean(s);
               }});
  return c;
}

}  // namespace

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  dii::Rng rng = dii::make_rng(3, c.name);
  Matrix point = dii::gaussian(rng, c.rows, c.cols);
  // Keep relu/gelu inputs off the kink.
  point = point.unaryExpr([](double v) { return std::abs(v) < 0.05 ? v + 0.2 : v; });
  const dii::GradientCheck g = dii::gradient_check(c.fn, point, 1e-5);
  EXPECT_LE(g.max_rel_error, 1e-6) << c.name;
  EXPECT_GT(g.max_abs_analytic, 0.0) << c.name;
}

INSTANTIATE_TEST_SUITE_P(Ops, OpGradient, ::testing::ValuesIn(op_cases()),
                         [](const auto& info) { return info.param.name; });

TEST(Autodiff, QuadraticClosedForm) {
  // f(x) = x^T A x with symmetric A has gradient 2 A x.
  dii::Rng rng = dii::make_rng(1, "test.quad");
  const Matrix b = dii::gaussian(rng, 4, 4);
  const Matrix a = b + b.transpose();
  const Matrix x0 = dii::gaussian(rng, 1, 4);
  ad::Tape tape;
  const ad::Var x = tape.parameter(x0);
  const ad::Var f = ad::sum(ad::mul(ad::matmul(x, tape.constant(a)), x));
  tape.backward(f);
  const Matrix expected = 2.0 * x0 * a;
  EXPECT_LE((tape.grad(x) - expected).norm() / expected.norm(), 1e-12);
  const auto chk = dii::gradient_check(
      [&](ad::Tape& t, const ad::Var& v) { return ad::sum(ad::mul(ad::matmul(v, t.constant(a)), v)); },
      x0);
  EXPECT_LE(chk.max_rel_error, 1e-7);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  ad::Tape tape;
  const ad::Var c = tape.constant(Matrix::Ones(2, 2));
  const ad::Var p = tape.parameter(Matrix::Ones(2, 2));
  const ad::Var y = ad::sum(ad::mul(c, p));
  EXPECT_FALSE(tape.needs_grad(c));
  EXPECT_TRUE(tape.needs_grad(y));
  tape.backward(y);
  EXPECT_TRUE(tape.grad(p).isApprox(Matrix::Ones(2, 2)));
  EXPECT_TRUE(tape.grad(c).isZero());
}

TEST(Autodiff, GramSchmidtOutputOrthonormal) {
  dii::Rng rng = dii::make_rng(5, "test.gs");
  ad::Tape tape;
  const ad::Var q = ad::gram_schmidt(tape.parameter(dii::gaussian(rng, 4, 9)));
  EXPECT_LE((q.value() * q.value().transpose() - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(Autodiff, ShapeErrorsCarryCodes) {
  ad::Tape tape;
  const ad::Var a = tape.parameter(Matrix::Ones(2, 3));
  const ad::Var b = tape.parameter(Matrix::Ones(2, 2));
  try {
    (void)ad::add(a, b);
    FAIL();
  } catch (const dii::Error& e) {
    EXPECT_EQ(e.code(), dii::ErrorCode::kShapeMismatch);
  }
  EXPECT_THROW((void)ad::matmul(a, a), dii::Error);
  EXPECT_THROW((void)ad::cross_entropy(a, 0), dii::Error);
}
