#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../support/oracles.hpp"
#include "../support/primitive_cases.hpp"
#include "mpq/autodiff.hpp"
#include "mpq/errors.hpp"

namespace {

using namespace mpq;
using namespace mpq::ad;
using mpq::testing::random_tensor;

TEST(Matmul, IdentityAndDot) {
  Tape t;
  const Var a = t.constant(Tensor::from({2, 2}, {1, 2, 3, 4}));
  const Var eye = t.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(matmul(a, eye).value(), a.value());
  const Var r = t.constant(Tensor::from({1, 2}, {1, 2}));
  const Var c = t.constant(Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(matmul(r, c).value().item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(42);
  Tape t;
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  const Tensor got = matmul(t.constant(a), t.constant(b)).value();
  const Tensor want = mpq::testing::naive_matmul(a, b);
  for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-14);
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), DimensionError);
}

TEST(Conv2d, ScalarKernelDoubles) {
  Tape t;
  const Var y = conv2d(t.constant(Tensor({1, 1, 3, 3}, 1.0)), t.constant(Tensor::from({1, 1, 1, 1}, {2})), {1, 0});
  EXPECT_EQ(y.value(), Tensor({1, 1, 3, 3}, 2.0));
}

TEST(Conv2d, FullCoverKernelIsDot) {
  std::mt19937_64 rng(3);
  Tape t;
  const Tensor x = random_tensor({1, 1, 3, 3}, rng), k = random_tensor({1, 1, 3, 3}, rng);
  double dot = 0;
  for (std::size_t i = 0; i < 9; ++i) dot += x[i] * k[i];
  const Var y = conv2d(t.constant(x), t.constant(k), {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_NEAR(y.value().item(), dot, 1e-14);
}

TEST(Conv2d, MatchesNestedLoops) {
  std::mt19937_64 rng(7);
  Tape t;
  const Tensor x = random_tensor({2, 3, 8, 8}, rng), k = random_tensor({4, 3, 3, 3}, rng);
  const Tensor got = conv2d(t.constant(x), t.constant(k), {2, 1}).value();
  const Tensor want = mpq::testing::naive_conv2d(x, k, 2, 1);
  ASSERT_EQ(got.shape(), want.shape());
  ASSERT_EQ(got.shape(), (Shape{2, 4, 4, 4}));
  for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-13);
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  Tape t;
  EXPECT_THROW(conv2d(t.constant(Tensor({1, 1, 2, 2})), t.constant(Tensor({1, 1, 5, 5})), {1, 1}),
               DimensionError);
  EXPECT_THROW(conv2d(t.constant(Tensor({1, 2, 4, 4})), t.constant(Tensor({1, 3, 3, 3})), {1, 0}),
               DimensionError);
}

TEST(Elementwise, Definitions) {
  Tape t;
  EXPECT_EQ(relu(t.constant(Tensor::from({3}, {-1, 0, 2}))).value(), Tensor::from({3}, {0, 0, 2}));
  EXPECT_EQ(clamp(t.constant(Tensor::from({3}, {-3, 0.5, 9})), 0, 1).value(),
            Tensor::from({3}, {0, 0.5, 1}));
  EXPECT_THROW(add(t.constant(Tensor({2})), t.constant(Tensor({3}))), DimensionError);
  EXPECT_THROW(sub(t.constant(Tensor({2})), t.constant(Tensor({2, 1}))), DimensionError);
}

TEST(Elementwise, ReluBackwardZeroAtKink) {
  Tape t;
  const Var x = t.variable(Tensor::from({3}, {-1, 0, 2}));
  const Gradients g = backward(sum(relu(x)));
  EXPECT_EQ(g[x], Tensor::from({3}, {0, 0, 1}));
}

TEST(Elementwise, ClampBackwardStrictlyInside) {
  Tape t;
  const Var x = t.variable(Tensor::from({4}, {-3, 0, 0.5, 1}));
  const Gradients g = backward(sum(clamp(x, 0, 1)));
  EXPECT_EQ(g[x], Tensor::from({4}, {0, 0, 1, 0}));
}

TEST(Pool2d, MaxAndAvg) {
  Tape t;
  const Var x = t.constant(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(max_pool2d(x, 2, 2).value().item(), 4.0);
  EXPECT_EQ(avg_pool2d(x, 2, 2).value().item(), 2.5);
  EXPECT_THROW(max_pool2d(x, 3, 1), DimensionError);
}

TEST(Pool2d, MatchesNestedLoops) {
  std::mt19937_64 rng(11);
  Tape t;
  const Tensor x = random_tensor({1, 2, 6, 6}, rng);
  const Var v = t.constant(x);
  for (bool is_max : {true, false}) {
    const Tensor got = (is_max ? max_pool2d(v, 2, 2) : avg_pool2d(v, 2, 2)).value();
    const Tensor want = mpq::testing::naive_pool2d(x, is_max, 2, 2);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-15);
  }
}

TEST(Pool2d, MaxTieRoutesToFirst) {
  Tape t;
  const Var x = t.variable(Tensor({1, 1, 2, 2}, 5.0));
  const Gradients g = backward(sum(max_pool2d(x, 2, 2)));
  EXPECT_EQ(g[x], Tensor::from({1, 1, 2, 2}, {1, 0, 0, 0}));
}

TEST(CrossEntropy, UniformAndSaturated) {
  Tape t;
  EXPECT_NEAR(softmax_crossentropy(t.constant(Tensor::from({1, 2}, {0, 0})), Tensor::from({1, 2}, {0.5, 0.5}))
                  .value()
                  .item(),
              std::log(2.0), 1e-15);
  const double sat = softmax_crossentropy(t.constant(Tensor::from({1, 2}, {1000, 0})),
                                          Tensor::from({1, 2}, {1, 0}))
                         .value()
                         .item();
  EXPECT_TRUE(std::isfinite(sat));
  EXPECT_EQ(sat, 0.0);
}

TEST(CrossEntropy, MatchesExtendedPrecisionFormula) {
  std::mt19937_64 rng(5);
  const Tensor z = random_tensor({4, 5}, rng);
  const Tensor target = mpq::testing::soft_rows(4, 5, 9);
  long double want = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    long double denom = 0;
    for (std::size_t j = 0; j < 5; ++j) denom += std::exp((long double)z.at(i, j));
    for (std::size_t j = 0; j < 5; ++j)
      want -= target.at(i, j) * std::log(std::exp((long double)z.at(i, j)) / denom);
  }
  want /= 4;
  Tape t;
  EXPECT_NEAR(softmax_crossentropy(t.constant(z), target).value().item(), double(want), 1e-14);
}

TEST(CrossEntropy, RejectsNonNormalizedTargets) {
  Tape t;
  EXPECT_THROW(softmax_crossentropy(t.constant(Tensor({1, 2})), Tensor::from({1, 2}, {0.5, 0.6})),
               ValidationError);
  EXPECT_THROW(softmax_crossentropy(t.constant(Tensor({1, 2})), Tensor::from({1, 2}, {1.5, -0.5})),
               ValidationError);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(8);
  Tape t;
  const Tensor s = softmax(t.constant(random_tensor({6, 7}, rng, -30, 30))).value();
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < 7; ++j) sum += s.at(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(EuclideanLoss, Basics) {
  Tape t;
  const Var a = t.constant(Tensor::from({2}, {3, 0}));
  const Var b = t.constant(Tensor::from({2}, {0, 4}));
  EXPECT_EQ(euclidean_loss(a, b).value().item(), 5.0);
  EXPECT_EQ(euclidean_loss(a, a).value().item(), 0.0);
  EXPECT_THROW(euclidean_loss(a, t.constant(Tensor({3}))), DimensionError);

  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({3, 4}, rng), y = random_tensor({3, 4}, rng);
  double want = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += (x.at(i, j) - y.at(i, j)) * (x.at(i, j) - y.at(i, j));
    want += std::sqrt(s);
  }
  EXPECT_NEAR(euclidean_loss(t.constant(x), t.constant(y)).value().item(), want / 3, 1e-15);
}

TEST(EuclideanLoss, ZeroDistanceHasZeroGradient) {
  Tape t;
  const Var a = t.variable(Tensor::from({1, 3}, {1, 2, 3}));
  const Var b = t.constant(Tensor::from({1, 3}, {1, 2, 3}));
  const Gradients g = backward(euclidean_loss(a, b));
  EXPECT_EQ(g[a], Tensor({1, 3}, 0.0));
}

TEST(Backward, SumAndSquare) {
  Tape t;
  const Var x = t.variable(Tensor({2, 3}, 0.7));
  EXPECT_EQ(backward(sum(x))[x], Tensor({2, 3}, 1.0));
  const Var s = t.variable(Tensor::scalar(3.0));
  EXPECT_EQ(backward(mul(s, s))[s].item(), 6.0);
}

TEST(Backward, UnreachableIsZeroAndNonScalarRejected) {
  Tape t;
  const Var x = t.variable(Tensor({2}, 1.0));
  const Var y = t.variable(Tensor({3}, 1.0));
  const Gradients g = backward(sum(x));
  EXPECT_FALSE(g.reachable(y));
  EXPECT_EQ(g[y], Tensor({3}, 0.0));
  EXPECT_THROW(backward(x), ValidationError);
}

TEST(Backward, Linearity) {
  std::mt19937_64 rng(13);
  const Tensor w0 = random_tensor({3, 4}, rng), x0 = random_tensor({2, 3}, rng);
  auto grads = [&](double alpha, double beta) {
    Tape t;
    const Var w = t.variable(w0);
    const Var x = t.constant(x0);
    const Var h = matmul(x, w);
    const Var l1 = sum(relu(h));
    const Var l2 = sum(mul(h, h));
    return backward(add(scale(l1, alpha), scale(l2, beta)))[w];
  };
  const Tensor g1 = grads(1, 0), g2 = grads(0, 1), gc = grads(0.3, -1.7);
  for (std::size_t i = 0; i < gc.numel(); ++i) EXPECT_NEAR(gc[i], 0.3 * g1[i] - 1.7 * g2[i], 1e-10);
}

TEST(Backward, DeterministicAcrossPasses) {
  std::mt19937_64 rng(17);
  Tape t;
  const Var x = t.variable(random_tensor({1, 2, 6, 6}, rng));
  const Var k = t.variable(random_tensor({3, 2, 3, 3}, rng));
  const Var loss = sum(max_pool2d(relu(conv2d(x, k, {1, 1})), 2, 2));
  const Gradients a = backward(loss), b = backward(loss);
  EXPECT_EQ(a[x], b[x]);
  EXPECT_EQ(a[k], b[k]);
}

TEST(Backward, ConstantsDoNotReceiveGradients) {
  Tape t;
  const Var c = t.constant(Tensor({2}, 1.0));
  const Var x = t.variable(Tensor({2}, 2.0));
  const Gradients g = backward(sum(mul(c, x)));
  EXPECT_FALSE(g.reachable(c));
  EXPECT_EQ(g[x], Tensor({2}, 1.0));
}

TEST(Backward, NoGradGuardStopsRecording) {
  Tape t;
  const Var x = t.variable(Tensor({2}, 2.0));
  Var y;
  {
    NoGradGuard guard(t);
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(mul(x, x).requires_grad());
}

class PrimitiveGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const auto cases = mpq::testing::primitive_cases();
  const auto& c = cases.at(GetParam());
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::vector<Tensor> inputs;
    for (const auto& s : c.input_shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
    const auto r = mpq::testing::check_gradients(c.loss, inputs);
    EXPECT_EQ(r.failed, 0u) << c.name << " seed " << seed << " worst excess " << r.worst_excess;
  }
}

INSTANTIATE_TEST_SUITE_P(All, PrimitiveGradient,
                         ::testing::Range<std::size_t>(0, mpq::testing::primitive_cases().size()),
                         [](const auto& info) { return mpq::testing::primitive_cases()[info.param].name; });

// Hessian-vector products through a second backward pass agree with finite
// differences of first-order gradients.
TEST(DoubleBackward, HessianVectorProductMatchesGradientDifferences) {
  std::mt19937_64 rng(23);
  const Tensor x0 = random_tensor({3, 1, 6, 6}, rng, 0, 1);
  const Tensor k0 = random_tensor({2, 1, 3, 3}, rng, -1, 1);
  const Tensor w0 = random_tensor({3, 8}, rng, -1, 1);
  const Tensor target = mpq::testing::one_hot_rows(3, 3, 4);
  const Tensor v = random_tensor({2, 1, 3, 3}, rng, -1, 1);
  auto build = [&](Tape& t, const Var& k) {
    const Var h = max_pool2d(relu(conv2d(t.constant(x0), k, {1, 0})), 2, 1);
    const Var pooled = avg_pool2d(h, 2, 1);
    const Var flat = reshape(pooled, {3, 8});
    return softmax_crossentropy(matmul(flat, t.constant(w0), false, true), target);
  };
  Tape t;
  const Var k = t.variable(k0);
  const Var loss = build(t, k);
  const Gradients g = backward(loss, true);
  const Var gv = sum(mul(g.var(k), t.constant(v)));
  const Tensor hv = backward(gv)[k];

  auto grad_at = [&](double eps) {
    Tensor kk = k0;
    for (std::size_t i = 0; i < kk.numel(); ++i) kk[i] += eps * v[i];
    Tape tt;
    const Var kv = tt.variable(kk);
    return backward(build(tt, kv))[kv];
  };
  const double h = 1e-5;
  const Tensor gp = grad_at(h), gm = grad_at(-h);
  for (std::size_t i = 0; i < hv.numel(); ++i) {
    const double fd = (gp[i] - gm[i]) / (2 * h);
    EXPECT_TRUE(mpq::testing::close_abs_rel(hv[i], fd, 1e-6, 1e-4)) << i << ": " << hv[i] << " vs " << fd;
  }
}

}  // namespace
