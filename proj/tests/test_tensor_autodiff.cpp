#include <cmath>
#include <limits>
#include <string>

#include <gtest/gtest.h>

#include "seqj/autodiff.hpp"
#include "seqj/rng.hpp"

using namespace seqj;
using ad::Tape;
using ad::Var;

namespace {

Tensor randn(const Shape& s, Prng& rng) {
  Tensor t(s);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

void expect_values(const Tensor& t, std::initializer_list<double> want, double tol = 0.0) {
  ASSERT_EQ(t.size(), want.size());
  std::size_t i = 0;
  for (double w : want) {
    if (tol == 0.0) {
      EXPECT_EQ(t[i], w) << "index " << i;
    } else {
      EXPECT_NEAR(t[i], w, tol) << "index " << i;
    }
    ++i;
  }
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndSizeMismatch) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({4}).reshaped({3}), ShapeError);
}

TEST(Tensor, ReshapePreservesOrder) {
  Tensor t({6}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped({2, 3});
  EXPECT_EQ(r.at(1, 0), 4.0);
  EXPECT_EQ(r.reshaped({6}), t);
}

TEST(Matmul, IdentityAndSelector) {
  Tape tape;
  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var i2 = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  expect_values(ad::matmul(a, i2).value(), {1, 2, 3, 4});
  Var row = tape.constant(Tensor::matrix({{1, 0}}));
  Var col = tape.constant(Tensor::matrix({{2}, {5}}));
  Var r = ad::matmul(row, col);
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r.item(), 2.0);
}

TEST(Matmul, ShapeErrorReportsBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor({3, 4}));
  Var b = tape.constant(Tensor({3, 2}));
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3x4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Prng rng(11);
  const Tensor b = randn({4, 2}, rng);
  const Tensor w = randn({3, 2}, rng);
  auto r = ad::grad_check(
      [&](Tape& t, Var x) { return ad::sum(ad::mul(ad::matmul(x, t.constant(b)), t.constant(w))); }, randn({3, 4}, rng));
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_EQ(r.coordinates, 12u);
}

TEST(Softmax, Examples) {
  Tape tape;
  expect_values(ad::softmax_lastdim(tape.constant(Tensor({3}))).value(), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
  Tensor big({2}, std::vector<double>{1000.0, 0.0});
  Tensor s = ad::softmax_lastdim(tape.constant(big)).value();
  EXPECT_TRUE(std::isfinite(s[0]) && std::isfinite(s[1]));
  EXPECT_NEAR(s[0], 1.0, 1e-15);
  EXPECT_NEAR(s[1], 0.0, 1e-15);
  // Oracle: e^x / sum e^x evaluated directly.
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  Tensor t = ad::softmax_lastdim(tape.constant(Tensor({3}, std::vector<double>{1, 2, 3}))).value();
  expect_values(t, {std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z}, 1e-15);
  expect_values(t, {0.09003, 0.24473, 0.66524}, 1e-5);
}

TEST(Softmax, RowsSumToOneAndSumHasZeroGradient) {
  Prng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    Tensor x = randn({4, 7}, rng);
    for (double& v : x.data()) v *= 10.0;
    Var xv = tape.variable(x);
    Var s = ad::softmax_lastdim(xv);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 7; ++c) sum += s.value().at(r, c);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    tape.backward(ad::sum(s));
    for (double g : tape.grad(xv).data()) EXPECT_NEAR(g, 0.0, 1e-10);
  }
}

TEST(Relu, ValuesAndSubgradient) {
  Tape tape;
  expect_values(ad::relu(tape.constant(Tensor({2}, std::vector<double>{-1, 2}))).value(), {0, 2});
  expect_values(ad::relu(tape.constant(Tensor({3}, -4.0))).value(), {0, 0, 0});
  Var x = tape.variable(Tensor({3}, std::vector<double>{-1, 3, 0}));
  tape.backward(ad::sum(ad::relu(x)));
  expect_values(tape.grad(x), {0, 1, 0});
}

TEST(Broadcast, AddScalarAndAffine) {
  Tape tape;
  Var q = tape.constant(Tensor({2}, std::vector<double>{1, 2}));
  expect_values(ad::add(q, tape.constant(Tensor::scalar(3))).value(), {4, 5});
  expect_values(ad::scalar_affine(q, 1.0, 0.0).value(), {1, 2});
  EXPECT_THROW(ad::add(tape.constant(Tensor({3})), tape.constant(Tensor({2}))), ShapeError);
}

TEST(Broadcast, GradientReducesOverBroadcastAxes) {
  Tape tape;
  Var x = tape.variable(Tensor({5}, 0.5));
  Var s = tape.variable(Tensor::scalar(2.0));
  tape.backward(ad::sum(ad::add(x, s)));
  EXPECT_EQ(tape.grad(s)[0], 5.0);

  Tape t2;
  Var m = t2.variable(Tensor({3, 4}, 1.0));
  Var row = t2.variable(Tensor({4}, 2.0));
  t2.backward(ad::sum(ad::mul(m, row)));
  expect_values(t2.grad(row), {3, 3, 3, 3});
  expect_values(t2.grad(m), {2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2});
}

TEST(LayerNorm, Examples) {
  Tape tape;
  Var g = tape.constant(Tensor({2}, 1.0));
  Var b = tape.constant(Tensor({2}));
  expect_values(ad::layer_norm(tape.constant(Tensor({2}, 7.0)), g, b).value(), {0, 0});
  expect_values(ad::layer_norm(tape.constant(Tensor({2}, std::vector<double>{1, 3})), g, b, 1e-12).value(), {-1, 1},
                1e-10);
  EXPECT_THROW(ad::layer_norm(tape.constant(Tensor({3})), g, b), ShapeError);
}

TEST(LayerNorm, GradientsForInputScaleAndShift) {
  Prng rng(3);
  const Tensor x = randn({3, 5}, rng);
  const Tensor w = randn({3, 5}, rng);
  Parameter gamma("gamma", randn({5}, rng));
  Parameter beta("beta", randn({5}, rng));
  auto f = [&](Tape& t, Var xv) {
    return ad::sum(ad::mul(ad::layer_norm(xv, t.param(gamma), t.param(beta)), t.constant(w)));
  };
  EXPECT_LT(ad::grad_check(f, x).max_rel_error, 1e-6);
  EXPECT_LT(ad::grad_check_params([&](Tape& t) { return f(t, t.constant(x)); }, {&gamma, &beta}).max_rel_error, 1e-6);
}

TEST(Rearrange, RoundTripsAreBitExact) {
  Prng rng(8);
  Tape tape;
  Var x = tape.constant(randn({3, 7}, rng));
  std::vector<Var> parts = ad::split_lastdim(x, {2, 4, 1});
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[1].shape(), (Shape{3, 4}));
  EXPECT_EQ(ad::concat_lastdim(parts).value(), x.value());
  EXPECT_EQ(ad::reshape(ad::reshape(x, {21}), {3, 7}).value(), x.value());
  EXPECT_EQ(ad::transpose_2d(ad::transpose_2d(x)).value(), x.value());
  EXPECT_EQ(ad::concat_rows({ad::slice_rows(x, 0, 1), ad::slice_rows(x, 1, 2)}).value(), x.value());
  EXPECT_THROW(ad::split_lastdim(x, {2, 2}), ShapeError);
  EXPECT_THROW(ad::reshape(x, {4, 5}), ShapeError);
}

TEST(Rearrange, ConcatRoutesGradientsToSources) {
  Prng rng(9);
  const Tensor b = randn({2, 3}, rng);
  const Tensor w = randn({2, 7}, rng);
  auto r = ad::grad_check(
      [&](Tape& t, Var x) {
        return ad::sum(ad::mul(ad::concat_lastdim({t.constant(b), x, ad::scalar_affine(x, 2.0, 0.0)}), t.constant(w)));
      },
      randn({2, 2}, rng));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Backward, MeanAndDiamond) {
  Tape tape;
  Var x = tape.variable(Tensor({4}, 3.0));
  tape.backward(ad::mean(x));
  expect_values(tape.grad(x), {0.25, 0.25, 0.25, 0.25});

  Tape t2;
  Var y = t2.variable(Tensor::scalar(1.5));
  t2.backward(ad::add(y, y));
  EXPECT_EQ(t2.grad(y)[0], 2.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape tape;
  Var x = tape.variable(Tensor({2}));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Backward, ParameterGradientsAccumulateAcrossUses) {
  Parameter p("p", Tensor({2}, std::vector<double>{1, -2}));
  p.zero_grad();
  Tape tape;
  Var a = tape.param(p);
  Var b = tape.param(p);
  EXPECT_EQ(a.id(), b.id());
  tape.backward(ad::sum(ad::mul(a, b)));
  expect_values(p.grad, {2, -4});
}

TEST(Backward, InferenceTapeRecordsNoGradients) {
  Parameter p("p", Tensor({2}, 1.0));
  Tape tape(false);
  Var v = tape.param(p);
  EXPECT_FALSE(tape.requires_grad(v));
}

TEST(Backward, NonFiniteDetection) {
  Tape tape;
  tape.set_check_finite(true);
  EXPECT_THROW(tape.constant(Tensor({1}, std::numeric_limits<double>::infinity())), ad::NonFiniteError);
  Var x = tape.constant(Tensor({1}, 1e308));
  EXPECT_THROW(ad::scalar_affine(x, 10.0, 0.0), ad::NonFiniteError);
}

TEST(GradCheck, SumIsExactAndSoftmaxSumIsFlat) {
  Prng rng(1);
  auto r = ad::grad_check([](Tape&, Var x) { return ad::sum(x); }, randn({6}, rng));
  EXPECT_LT(r.max_rel_error, 1e-9);
  auto s = ad::grad_check([](Tape&, Var x) { return ad::sum(ad::softmax_lastdim(x)); }, randn({6}, rng));
  EXPECT_LT(s.max_abs_error, 1e-9);
}

TEST(GradCheck, PrimitivesOnRandomComposedGraphs) {
  // Three seeded random compositions of the primitive set.
  for (std::uint64_t seed : {101u, 202u, 303u}) {
    Prng rng(seed);
    const Tensor w1 = randn({4, 4}, rng), w2 = randn({4, 3}, rng), bias = randn({4}, rng), g = randn({4}, rng);
    const int order = static_cast<int>(rng.below(3));
    auto f = [&](Tape& t, Var x) {
      Var h = ad::matmul(x, t.constant(w1));
      if (order == 0) h = ad::sigmoid(ad::add(h, t.constant(bias)));
      if (order == 1) h = ad::softmax_lastdim(ad::mul(h, h));
      if (order == 2) h = ad::layer_norm(h, t.constant(g), t.constant(bias));
      h = ad::matmul(ad::transpose_2d(ad::concat_rows({h, x})), ad::concat_rows({x, h}));
      return ad::mean(ad::square(ad::matmul(h, t.constant(w2))));
    };
    EXPECT_LT(ad::grad_check(f, randn({3, 4}, rng)).max_rel_error, 1e-6) << "seed " << seed;
  }
}

TEST(Determinism, IdenticalSeedsGiveIdenticalGradients) {
  auto run = [] {
    Prng rng(42);
    Tape tape;
    Var x = tape.variable(randn({3, 3}, rng));
    Var y = ad::sum(ad::softmax_lastdim(ad::matmul(x, tape.constant(randn({3, 3}, rng)))));
    tape.backward(ad::square(y));
    return std::make_pair(tape.size(), tape.grad(x));
  };
  EXPECT_EQ(run(), run());
}
