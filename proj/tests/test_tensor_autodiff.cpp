#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gandef/autodiff.hpp"
#include "gandef/gradcheck.hpp"
#include "gandef/ops.hpp"

using namespace gandef;

namespace {

double direct_conv_at(const Tensor& x, const Tensor& w, std::size_t n, std::size_t oy, std::size_t ox,
                      std::size_t oc, long pad) {
  const std::size_t h = x.dim(1), wd = x.dim(2), c = x.dim(3), kh = w.dim(0), kw = w.dim(1), ocs = w.dim(3);
  double s = 0.0;
  for (std::size_t ky = 0; ky < kh; ++ky)
    for (std::size_t kx = 0; kx < kw; ++kx)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const long iy = static_cast<long>(oy + ky) - pad, ix = static_cast<long>(ox + kx) - pad;
        if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
        s += x[((n * h + iy) * wd + ix) * c + ci] * w[((ky * kw + kx) * c + ci) * ocs + oc];
      }
  return s;
}

}  // namespace

TEST(Tensor, RejectsMismatchedValueCount) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), Error);
  EXPECT_THROW(Tensor({0, 3}), Error);
}

TEST(Primitives, SoftmaxOfEqualLogitsIsUniform) {
  Graph g;
  auto y = ops::softmax(g.constant(Tensor({1, 2}, {0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Primitives, SoftmaxRowsSumToOneAndArePositive) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g;
    Tensor z({4, 7});
    for (auto& v : z.data()) v = uniform(rng, -40.0, 40.0);
    const Tensor& y = ops::softmax(g.constant(z)).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GT(y[r * 7 + j], 0.0);
        s += y[r * 7 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Primitives, MaxPoolTakesWindowMax) {
  Graph g;
  auto y = ops::maxpool2d(g.constant(Tensor({1, 2, 2, 1}, {1, 2, 3, 4})));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 4.0);
}

TEST(Primitives, MaxPoolTieRoutesGradientToFirstMaximum) {
  Graph g;
  auto x = g.variable(Tensor({1, 2, 2, 1}, {5, 5, 5, 5}));
  g.backward(ops::sum(ops::maxpool2d(x)));
  const Tensor gx = g.grad(x);
  EXPECT_EQ(gx.values(), (Storage{1, 0, 0, 0}));
}

TEST(Primitives, CrossEntropyOfZeroLogitsIsLogK) {
  Graph g;
  std::vector<int> labels{3};
  auto l = ops::cross_entropy(g.constant(Tensor({1, 10}, 0.0)), labels);
  EXPECT_NEAR(l.value()[0], std::log(10.0), 1e-12);
  EXPECT_NEAR(l.value()[0], 2.302585, 1e-6);
}

TEST(Primitives, IdentityKernelConvLeavesInputUnchanged) {
  Rng rng(11);
  Tensor x({1, 5, 5, 1});
  for (auto& v : x.data()) v = uniform(rng, -1, 1);
  Tensor w({1, 1, 1, 1}, {1.0});
  Graph g;
  const Tensor& y = ops::conv2d(g.constant(x), g.constant(w), g.constant(Tensor({1}, 0.0))).value();
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(y[i], direct_conv_at(x, w, 0, i / 5, i % 5, 0, 0));
    EXPECT_EQ(y[i], x[i]);
  }
}

TEST(Primitives, ConvMatchesDirectSumWithSamePadding) {
  Rng rng(12);
  Tensor x({2, 6, 6, 3}), w({3, 3, 3, 4});
  for (auto& v : x.data()) v = uniform(rng, -1, 1);
  for (auto& v : w.data()) v = uniform(rng, -1, 1);
  Graph g;
  const Tensor& y = ops::conv2d(g.constant(x), g.constant(w), g.constant(Tensor({4}, 0.0))).value();
  ASSERT_EQ(y.shape(), (Shape{2, 6, 6, 4}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t oy = 0; oy < 6; ++oy)
      for (std::size_t ox = 0; ox < 6; ++ox)
        for (std::size_t oc = 0; oc < 4; ++oc)
          EXPECT_NEAR(y[((n * 6 + oy) * 6 + ox) * 4 + oc], direct_conv_at(x, w, n, oy, ox, oc, 1), 1e-12);
}

TEST(Primitives, SamePaddingUsesCeilExtent) {
  Graph g;
  auto x = g.constant(Tensor({1, 7, 5, 1}, 1.0));
  auto y = ops::conv2d(x, g.constant(Tensor({2, 2, 1, 1}, 1.0)), g.constant(Tensor({1}, 0.0)), {2, 2, Padding::Same});
  EXPECT_EQ(y.shape(), (Shape{1, 4, 3, 1}));
  auto v = ops::conv2d(x, g.constant(Tensor({3, 3, 1, 1}, 1.0)), g.constant(Tensor({1}, 0.0)), {1, 1, Padding::Valid});
  EXPECT_EQ(v.shape(), (Shape{1, 5, 3, 1}));
}

TEST(Primitives, InvalidAttributesAndShapesThrow) {
  Graph g;
  auto x = g.constant(Tensor({1, 4, 4, 1}));
  auto w = g.constant(Tensor({3, 3, 1, 2}));
  auto b = g.constant(Tensor({2}));
  try {
    ops::conv2d(x, w, b, {0, 1, Padding::Same});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidAttribute);
  }
  try {
    ops::conv2d(x, g.constant(Tensor({3, 3, 2, 2})), b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
  Rng rng(1);
  EXPECT_THROW(ops::dropout(x, 1.0, rng, true), Error);
  EXPECT_THROW(ops::add(g.constant(Tensor({2})), g.constant(Tensor({3}))), Error);
}

TEST(Primitives, DropoutEvalModeIsIdentity) {
  Graph g;
  Rng rng(5);
  auto x = g.constant(Tensor({3, 3}, 0.7));
  auto y = ops::dropout(x, 0.5, rng, false);
  EXPECT_EQ(y.value(), x.value());
}

TEST(Primitives, DropoutPreservesExpectation) {
  // Over 1e5 samples per element the mean stays within 3 standard errors of the input.
  constexpr int samples = 100000;
  constexpr double rate = 0.3;
  Rng rng(21);
  Tensor x({4}, {0.5, -1.2, 2.0, 0.1});
  std::vector<double> sum(4, 0.0);
  for (int s = 0; s < samples; ++s) {
    Graph g;
    const Tensor& y = ops::dropout(g.constant(x), rate, rng, true).value();
    for (std::size_t i = 0; i < 4; ++i) sum[i] += y[i];
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const double sd = std::abs(x[i]) * std::sqrt(rate / (1.0 - rate));
    EXPECT_NEAR(sum[i] / samples, x[i], 3.0 * sd / std::sqrt(double(samples)));
  }
}

TEST(Backward, SquareHasDerivativeSix) {
  Graph g;
  auto x = g.variable(Tensor::scalar(3.0));
  g.backward(ops::multiply(x, x));
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 6.0);
}

TEST(Backward, ReluBlocksNegativeInput) {
  Graph g;
  auto x = g.variable(Tensor({1}, {-1.0}));
  g.backward(ops::sum(ops::relu(x)));
  EXPECT_EQ(g.grad(x)[0], 0.0);
}

TEST(Backward, FanOutSumsExactly) {
  Rng rng(4);
  Tensor x0({3, 4});
  for (auto& v : x0.data()) v = uniform(rng, -1, 1);
  auto g_of = [](Var x) { return ops::sigmoid(ops::relu(ops::scale(x, 1.7))); };

  Graph single;
  auto xs = single.variable(x0);
  single.backward(ops::sum(g_of(xs)));
  Graph twice;
  auto xt = twice.variable(x0);
  twice.backward(ops::sum(ops::add(g_of(xt), g_of(xt))));
  const Tensor a = single.grad(xs), b = twice.grad(xt);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i], 2.0 * a[i]);
}

TEST(Backward, UnreachedNodesGetZeroGradient) {
  Graph g;
  auto x = g.variable(Tensor({2}, {1.0, 2.0}));
  auto unused = g.variable(Tensor({2}, {3.0, 4.0}));
  ops::relu(unused);
  g.backward(ops::sum(x));
  EXPECT_EQ(g.grad(unused).values(), (Storage{0.0, 0.0}));
}

TEST(Backward, ErrorsOnNonScalarLossAndForeignGraph) {
  Graph g;
  auto x = g.variable(Tensor({2}, {1.0, 2.0}));
  try {
    g.backward(ops::relu(x));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonScalarLoss);
  }
  Graph other;
  auto y = other.variable(Tensor::scalar(1.0));
  try {
    g.backward(y);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::GraphNotFinalized);
  }
}

TEST(Backward, TwoLayerNetworkMatchesFiniteDifferences) {
  Rng rng(99);
  Tensor x({4, 3}), w1({3, 5}), b1({5}), w2({5, 2}), b2({2});
  for (Tensor* t : {&x, &w1, &b1, &w2, &b2})
    for (auto& v : t->data()) v = uniform(rng, -1, 1);
  auto loss_of = [&](Var vx, Var vw1, Var vb1, Var vw2, Var vb2) {
    return ops::sum(ops::dense(ops::relu(ops::dense(vx, vw1, vb1)), vw2, vb2));
  };
  Graph g;
  auto vx = g.variable(x), vw1 = g.variable(w1), vb1 = g.variable(b1), vw2 = g.variable(w2), vb2 = g.variable(b2);
  g.backward(loss_of(vx, vw1, vb1, vw2, vb2));

  std::vector<Tensor> params{x, w1, b1, w2, b2};
  std::vector<Var> vars{vx, vw1, vb1, vw2, vb2};
  for (std::size_t k = 0; k < params.size(); ++k) {
    ScalarFn f = [&](const Tensor& t) {
      auto p = params;
      p[k] = t;
      Graph fg;
      return loss_of(fg.constant(p[0]), fg.constant(p[1]), fg.constant(p[2]), fg.constant(p[3]), fg.constant(p[4]))
          .value()
          .item();
    };
    EXPECT_LT(relative_error(g.grad(vars[k]), finite_difference_gradient(f, params[k], 1e-5)), 1e-4) << k;
  }
}

TEST(FiniteDifference, QuadraticAndConstant) {
  ScalarFn sq = [](const Tensor& t) { return t[0] * t[0]; };
  EXPECT_NEAR(finite_difference_gradient(sq, Tensor({1}, {2.0}), 1e-3)[0], 4.0, 1e-6);
  ScalarFn c = [](const Tensor&) { return 3.5; };
  const Tensor z = finite_difference_gradient(c, Tensor({3}, {1.0, 2.0, 3.0}), 1e-3);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(finite_difference_gradient(sq, Tensor({1}), 0.0), Error);
  ScalarFn bad = [](const Tensor& t) { return std::log(t[0]); };
  EXPECT_THROW(finite_difference_gradient(bad, Tensor({1}, {0.0}), 1e-3), Error);
}

TEST(FiniteDifference, MatchesClosedFormSoftmaxCrossEntropyGradient) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor z({1, 3});
    for (auto& v : z.data()) v = uniform(rng, -3, 3);
    const int label = static_cast<int>(rng() % 3);
    std::vector<int> labels{label};
    ScalarFn f = [&](const Tensor& t) {
      Graph g;
      return ops::cross_entropy(g.constant(t), labels).value()[0];
    };
    const Tensor numeric = finite_difference_gradient(f, z, 1e-5);
    double m = std::max({z[0], z[1], z[2]}), s = 0.0;
    for (double v : z.data()) s += std::exp(v - m);
    for (std::size_t j = 0; j < 3; ++j) {
      const double closed = std::exp(z[j] - m) / s - (static_cast<int>(j) == label ? 1.0 : 0.0);
      EXPECT_NEAR(numeric[j], closed, 1e-5);
    }
  }
}

TEST(Determinism, ReplayIsBitIdentical) {
  auto run = [] {
    Rng rng(17);
    Tensor x({2, 6, 6, 2}), w({3, 3, 2, 4}), b({4});
    for (Tensor* t : {&x, &w, &b})
      for (auto& v : t->data()) v = uniform(rng, -1, 1);
    Graph g;
    auto vw = g.variable(w);
    auto h = ops::dropout(ops::relu(ops::conv2d(g.constant(x), vw, g.constant(b))), 0.3, rng, true);
    auto loss = ops::mean(ops::maxpool2d(h));
    g.backward(loss);
    return std::make_pair(loss.value().item(), g.grad(vw));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(GradcheckSuite, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& r : run_gradcheck_suite(100)) {
    EXPECT_TRUE(r.pass) << r.primitive << " max rel err " << r.max_relative_error;
    EXPECT_EQ(r.instances, 100);
  }
}
