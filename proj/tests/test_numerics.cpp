#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "molhf/autodiff.hpp"
#include "molhf/numerics.hpp"
#include "molhf/rng.hpp"

using namespace molhf;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// Compares tape gradients of scalar f(x) with central differences.
void expect_grad_matches(const std::function<Var<double>(Var<double>)>& f, const Tensor<double>& x0,
                         double tol = 1e-6) {
  Tape<double> tape;
  Var<double> x = tape.leaf(x0);
  Var<double> y = f(x);
  tape.backward(y);
  const Tensor<double> g = tape.grad(x);
  const Tensor<double> ref = fd_gradient<double>(
      [&](const Tensor<double>& p) {
        Tape<double> t2(false);
        return f(t2.constant(p)).value()[0];
      },
      x0, 1e-5);
  EXPECT_LE(max_relative_error(g, ref, 1e-6), tol);
}

}  // namespace

TEST(Tensor, MatmulIdentity) {
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(a, identity<double>(2)), a);
}

TEST(Tensor, LuSolveAndDeterminant) {
  Tensor<double> m({2, 2}, {2, 1, 1, 1});
  auto lu = LuFactors<double>::factor(m);
  EXPECT_NEAR(lu.log_abs_det(), 0.0, 1e-12);
  Tensor<double> inv = inverse(m);
  EXPECT_LE(max_abs_diff(matmul(m, inv), identity<double>(2)), 1e-12);
}

TEST(Tensor, RejectsNonPositiveExtent) {
  EXPECT_THROW(Tensor<double>({2, 0}), Error);
}

TEST(Autodiff, ScalarExamples) {
  Tape<double> tape;
  Var<double> one = tape.constant(Tensor<double>::scalar(1.0));
  EXPECT_DOUBLE_EQ(ad::softmax(one, 0).value()[0], 1.0);
  EXPECT_DOUBLE_EQ(ad::swish(tape.constant(Tensor<double>::scalar(0.0))).value()[0], 0.0);
}

TEST(Autodiff, SquareGradient) {
  Tape<double> tape;
  Var<double> x = tape.leaf(Tensor<double>::scalar(3.0));
  tape.backward(ad::mul(x, x));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 6.0);
}

TEST(Autodiff, ProductGradient) {
  Tape<double> tape;
  Var<double> x = tape.leaf(Tensor<double>::scalar(2.0));
  Var<double> y = tape.leaf(Tensor<double>::scalar(5.0));
  tape.backward(ad::mul(x, y));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 5.0);
  EXPECT_DOUBLE_EQ(tape.grad(y)[0], 2.0);
}

TEST(Autodiff, SigmoidChainMatchesFiniteDifference) {
  Rng rng(3);
  expect_grad_matches(
      [](Var<double> x) { return ad::sum(ad::sigmoid(ad::scale(ad::sigmoid(ad::sigmoid(x)), 3.0))); },
      random_tensor({5}, rng), 1e-5);
}

TEST(Autodiff, NonScalarBackwardThrows) {
  Tape<double> tape;
  Var<double> x = tape.leaf(Tensor<double>({3}));
  try {
    tape.backward(x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonScalarOutput);
  }
}

TEST(Autodiff, NonRecordingTapeHasNoGradients) {
  Tape<double> tape(false);
  Var<double> x = tape.leaf(Tensor<double>::scalar(3.0));
  EXPECT_FALSE(ad::mul(x, x).requires_grad());
}

TEST(Autodiff, ElementwiseOps) {
  Rng rng(11);
  Tensor<double> x0 = random_tensor({2, 3}, rng);
  Tensor<double> c = random_tensor({2, 3}, rng);
  for (auto& v : c.values()) v = std::abs(v) + 0.5;
  expect_grad_matches(
      [&](Var<double> x) {
        Tape<double>& t = *x.tape;
        Var<double> k = t.constant(c);
        Var<double> y = ad::add(ad::mul(ad::exp(ad::scale(x, 0.3)), ad::swish(x)), ad::div(x, k));
        y = ad::sub(y, ad::log(ad::add_scalar(ad::mul(x, x), 1.0)));
        return ad::mean(y);
      },
      x0);
}

TEST(Autodiff, MatrixOps) {
  Rng rng(12);
  Tensor<double> x0 = random_tensor({3, 4}, rng);
  Tensor<double> w = random_tensor({4, 2}, rng);
  Tensor<double> b = random_tensor({2}, rng);
  expect_grad_matches(
      [&](Var<double> x) {
        Tape<double>& t = *x.tape;
        Var<double> h = ad::add_bias(ad::matmul(x, t.constant(w)), t.constant(b), 1);
        Var<double> g = ad::matmul(ad::transpose(h), h);
        Var<double> r = ad::reshape(ad::slice(x, 1, 1, 3), Shape{2, 3});
        return ad::add(ad::sum(ad::mul(g, g)), ad::sum(ad::softmax(ad::mul(r, r), 0)));
      },
      x0);
}

TEST(Autodiff, BatchedMatmulAndChannelOps) {
  Rng rng(13);
  Tensor<double> x0 = random_tensor({2, 3, 3}, rng);
  Tensor<double> v = random_tensor({2}, rng);
  expect_grad_matches(
      [&](Var<double> x) {
        Tape<double>& t = *x.tape;
        Var<double> y = ad::bmm(x, ad::mul_channel(x, t.constant(v), 0));
        Var<double> z = ad::concat<double>({y, ad::softmax(x, 2)}, 1);
        return ad::sum(ad::mul(z, ad::sigmoid(z)));
      },
      x0);
}

TEST(Autodiff, ParameterGradientsAccumulate) {
  ParameterSet<double> ps;
  auto& p = ps.add("p", Tensor<double>({2}, {1.0, 2.0}));
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(ad::sum(ad::mul(tape.param(p), tape.param(p))));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 8.0);
  ps.zero_grad();
  EXPECT_DOUBLE_EQ(p.grad[1], 0.0);
  EXPECT_THROW(ps.add("p", Tensor<double>({1})), Error);
}

TEST(Autodiff, Conv3x3MatchesDirectLoopsAndFiniteDifference) {
  Rng rng(14);
  Tensor<double> x0 = random_tensor({2, 4, 4}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  Tensor<double> b = random_tensor({3}, rng);
  Tape<double> tape(false);
  Tensor<double> y = ad::conv2d_3x3(tape.constant(x0), tape.constant(w), tape.constant(b)).value();
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = b[static_cast<std::size_t>(o)];
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int si = i + ky - 1, sj = j + kx - 1;
              if (si < 0 || si >= 4 || sj < 0 || sj >= 4) continue;
              acc += w[static_cast<std::size_t>(((o * 2 + c) * 3 + ky) * 3 + kx)] * x0.at(c, si, sj);
            }
        EXPECT_NEAR(y.at(o, i, j), acc, 1e-12);
      }
  expect_grad_matches(
      [&](Var<double> x) {
        Tape<double>& t = *x.tape;
        Var<double> out = ad::conv2d_3x3(x, t.constant(w), t.constant(b));
        return ad::sum(ad::mul(out, out));
      },
      x0);
}

TEST(Autodiff, CrissCrossWeightsNormalize) {
  Rng rng(15);
  const int n = 5;
  Tensor<double> att = ad::criss_cross_weights(random_tensor({3, n, n}, rng), random_tensor({3, n, n}, rng));
  ASSERT_EQ(att.dim(0), 2 * n - 1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int m = 0; m < 2 * n - 1; ++m) s += att.at(m, i, j);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Autodiff, CrissCrossGradient) {
  Rng rng(16);
  const int n = 3;
  Tensor<double> q0 = random_tensor({2, n, n}, rng);
  Tensor<double> k0 = random_tensor({2, n, n}, rng);
  Tensor<double> v0 = random_tensor({3, n, n}, rng);
  Tensor<double> all({7, n, n});
  std::copy(q0.values().begin(), q0.values().end(), all.values().begin());
  std::copy(k0.values().begin(), k0.values().end(), all.values().begin() + 2 * n * n);
  std::copy(v0.values().begin(), v0.values().end(), all.values().begin() + 4 * n * n);
  expect_grad_matches(
      [](Var<double> x) {
        Var<double> out = ad::criss_cross(ad::slice(x, 0, 0, 2), ad::slice(x, 0, 2, 4), ad::slice(x, 0, 4, 7));
        return ad::sum(ad::mul(out, ad::sigmoid(out)));
      },
      all);
}

TEST(Autodiff, GaussianLogpGradient) {
  Rng rng(17);
  Tensor<double> x0 = random_tensor({3, 4}, rng);
  expect_grad_matches(
      [](Var<double> x) {
        return ad::gaussian_logp(ad::slice(x, 0, 0, 1), ad::slice(x, 0, 1, 2), ad::slice(x, 0, 2, 3));
      },
      x0);
}

TEST(FiniteDifference, SumHasUnitGradient) {
  Rng rng(4);
  Tensor<double> g = fd_gradient<double>([](const Tensor<double>& x) { return x.sum(); }, random_tensor({6}, rng),
                                         1e-5);
  for (double v : g.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, ProductGradient) {
  Tensor<double> g = fd_gradient<double>([](const Tensor<double>& x) { return x[0] * x[1]; },
                                         Tensor<double>({2}, {2.0, 5.0}), 1e-5);
  EXPECT_NEAR(g[0], 5.0, 1e-6);
  EXPECT_NEAR(g[1], 2.0, 1e-6);
}

TEST(FiniteDifference, NonconvexAgreesWithTape) {
  Rng rng(5);
  expect_grad_matches(
      [](Var<double> x) {
        Var<double> w = ad::add_scalar(ad::mul(x, x), -1.0);
        return ad::sum(ad::mul(ad::swish(w), ad::sigmoid(ad::scale(x, -2.0))));
      },
      random_tensor({4}, rng), 1e-4);
}

TEST(FiniteDifference, RejectsBadStep) {
  EXPECT_THROW(fd_gradient<double>([](const Tensor<double>& x) { return x[0]; }, Tensor<double>({1}), 0.0), Error);
}

TEST(FiniteDifference, JacobianLogdet) {
  Tensor<double> x({2}, {0.3, -0.7});
  EXPECT_NEAR(fd_jacobian_logdet<double>([](const Tensor<double>& v) { return v; }, x), 0.0, 1e-8);
  EXPECT_NEAR(fd_jacobian_logdet<double>([](const Tensor<double>& v) { return v * 2.0; }, x), 2.0 * std::log(2.0),
              1e-8);
  EXPECT_THROW(fd_jacobian_logdet<double>([](const Tensor<double>& v) { return v * 0.0; }, x), Error);
}

TEST(Gaussian, LogDensity) {
  Tensor<double> z({1});
  EXPECT_NEAR(gaussian_logp(z, z, z), -0.5 * std::log(2 * std::numbers::pi), 1e-12);
  Rng rng(6);
  Tensor<double> a = random_tensor({3}, rng);
  Tensor<double> zero({3});
  Tensor<double> aa({6});
  for (int i = 0; i < 6; ++i) aa[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i % 3)];
  EXPECT_NEAR(gaussian_logp(aa, Tensor<double>({6}), Tensor<double>({6})), 2 * gaussian_logp(a, zero, zero), 1e-12);
  Tensor<double> shifted = a;
  shifted[0] += 0.1;
  EXPECT_GT(gaussian_logp(a, a, zero), gaussian_logp(shifted, a, zero));
}

TEST(Gaussian, SamplingDeterminismAndVariance) {
  const Shape s{100000};
  Tensor<double> mean(s), log_std(s, std::log(1.5));
  Rng r1(9), r2(9);
  auto a = sample_gaussian(s, mean, log_std, 0.7, r1);
  auto b = sample_gaussian(s, mean, log_std, 0.7, r2);
  EXPECT_EQ(a, b);
  double sq = 0;
  for (double v : a.values()) sq += v * v;
  const double var = sq / static_cast<double>(a.size());
  EXPECT_NEAR(var / std::pow(0.7 * 1.5, 2), 1.0, 0.05);
  Tensor<double> m(Shape{4}, 2.5);
  auto c = sample_gaussian(Shape{4}, m, Tensor<double>(Shape{4}), 1e-300, r1);
  for (double v : c.values()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Rng, SplitStreamsAreIndependentAndRepeatable) {
  Rng a(42);
  Rng s1 = a.split(1), s2 = a.split(2), s1b = Rng(42).split(1);
  EXPECT_EQ(s1.next_u64(), s1b.next_u64());
  EXPECT_NE(Rng(42).split(1).next_u64(), s2.next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}
