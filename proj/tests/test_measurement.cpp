#include <gtest/gtest.h>

#include <cmath>

#include "cdim/measurement.hpp"

using namespace cdim;

namespace {

void expect_adjoint(const LinearOperator& A, std::uint64_t seed, int probes = 100) {
  Rng rng(seed);
  for (int p = 0; p < probes; ++p) {
    const Vec x = rng.normal_vec(A.n()), y = rng.normal_vec(A.d());
    const double lhs = dot(A.apply(x), y), rhs = dot(x, A.adjoint(y));
    ASSERT_LE(std::abs(lhs - rhs), 1e-10 * norm2(x) * norm2(y)) << A.name() << " probe " << p;
  }
}

std::vector<LinearOperator> zoo() {
  Rng rng(77);
  return {identity_operator(9),
          mask_operator(12, {3, 0, 11, 7}),
          random_mask_operator(32, 0.5, 4, 4),
          half_mask_operator(15),
          box_mask_operator(20, 5, 6),
          downsample_operator(24, 3),
          blur_operator(16, gaussian_kernel(1.5)),
          blur_operator(8, {0.25, 0.5, 0.25}),
          matrix_operator(5, 7, rng.normal_vec(35)),
          compose(mask_operator(16, {1, 2, 5, 9, 15}), blur_operator(16, {0.25, 0.5, 0.25})),
          compose(downsample_operator(8, 2), compose(blur_operator(8, {0.2, 0.6, 0.2}), identity_operator(8)))};
}

}  // namespace

TEST(Operators, AdjointIdentityHoldsForEveryOperator) {
  std::uint64_t seed = 1;
  for (const auto& A : zoo()) expect_adjoint(A, seed++);
}

TEST(Mask, KeepingEverythingIsIdentity) {
  const auto A = mask_operator(5, {0, 1, 2, 3, 4});
  const Vec x{1.5, -2.0, 0.0, 3.25, 7.0};
  EXPECT_EQ(A.apply(x), x);
  EXPECT_EQ(A.adjoint(x), x);
}

TEST(Mask, ScattersBackWithZeros) {
  const auto A = mask_operator(5, {4, 1});
  EXPECT_EQ(A.apply(Vec{10, 11, 12, 13, 14}), (Vec{14, 11}));
  EXPECT_EQ(A.adjoint(Vec{1.0, 2.0}), (Vec{0, 2.0, 0, 0, 1.0}));
}

TEST(Mask, RejectsEmptyDuplicateAndOutOfRange) {
  EXPECT_THROW(mask_operator(4, {}), ParameterError);
  EXPECT_THROW(mask_operator(4, {1, 1}), ParameterError);
  EXPECT_THROW(mask_operator(4, {4}), ParameterError);
}

TEST(Mask, HeavyRandomMaskingRate) {
  // 92% of coordinates dropped at n=16. The raw kept count is Binomial(16, 0.08)
  // with mean 1.28; an empty draw (probability 0.92^16) is replaced by one
  // kept coordinate, which raises the mean of d by that probability.
  const int seeds = 20000;
  const double p_empty = std::pow(0.92, 16);
  const double expected = 16 * 0.08 + p_empty;
  double sum = 0.0, sumsq = 0.0;
  for (int s = 0; s < seeds; ++s) {
    const auto A = random_mask_operator(16, 0.92, static_cast<std::uint64_t>(s));
    const double d = static_cast<double>(A.d());
    sum += d;
    sumsq += d * d;
    if (s < 200) {
      // adjoint∘apply is a 0/1 diagonal
      for (std::size_t i = 0; i < 16; ++i) {
        Vec e(16, 0.0);
        e[i] = 1.0;
        const Vec col = A.adjoint(A.apply(e));
        for (std::size_t j = 0; j < 16; ++j) ASSERT_EQ(col[j], j == i ? col[i] : 0.0);
        ASSERT_TRUE(col[i] == 0.0 || col[i] == 1.0);
      }
    }
  }
  const double mean = sum / seeds;
  const double se = std::sqrt((sumsq / seeds - mean * mean) / seeds);
  EXPECT_NEAR(mean, expected, 3.0 * se);
  EXPECT_NEAR(mean, 1.3, 0.3);
}

TEST(Mask, GroupedMaskingDropsWholeGroups) {
  const auto A = random_mask_operator(30, 0.5, 3, 3);
  EXPECT_EQ(A.d() % 3, 0u);
  const Vec back = A.adjoint(A.apply(Vec(30, 1.0)));
  for (std::size_t g = 0; g < 10; ++g) {
    EXPECT_EQ(back[3 * g], back[3 * g + 1]);
    EXPECT_EQ(back[3 * g], back[3 * g + 2]);
  }
  EXPECT_THROW(random_mask_operator(10, 0.5, 1, 3), ParameterError);
}

TEST(Downsample, BlockAverages) {
  const auto A = downsample_operator(8, 4);
  EXPECT_EQ(A.apply(Vec{1, 2, 3, 4, 5, 6, 7, 8}), (Vec{2.5, 6.5}));
  EXPECT_EQ(A.adjoint(Vec{4.0, 8.0}), (Vec{1, 1, 1, 1, 2, 2, 2, 2}));
}

TEST(Downsample, PreservesConstantsAndFactorOneIsIdentity) {
  for (double v : downsample_operator(12, 3).apply(Vec(12, 0.7))) EXPECT_DOUBLE_EQ(v, 0.7);
  const Vec x{3.0, -1.0, 2.0};
  EXPECT_EQ(downsample_operator(3, 1).apply(x), x);
  EXPECT_THROW(downsample_operator(10, 3), ParameterError);
}

TEST(Blur, UnitKernelIsIdentity) {
  const Vec x{1.0, 2.0, -3.0, 4.0};
  EXPECT_EQ(blur_operator(4, {1.0}).apply(x), x);
}

TEST(Blur, ConstantInteriorPreserved) {
  const auto k = gaussian_kernel(1.0);
  const std::size_t r = k.size() / 2;
  const Vec y = blur_operator(20, k).apply(Vec(20, 2.0));
  for (std::size_t i = r; i + r < 20; ++i) EXPECT_NEAR(y[i], 2.0, 1e-14);
  EXPECT_LT(y[0], 2.0);  // zero padding at the edge
}

TEST(Blur, RejectsInvalidKernels) {
  EXPECT_THROW(blur_operator(8, {0.5, 0.5}), ParameterError);
  EXPECT_THROW(blur_operator(8, {0.2, 0.2, 0.2}), ParameterError);
  EXPECT_THROW(blur_operator(2, {0.25, 0.5, 0.25}), ParameterError);
  EXPECT_THROW(blur_operator(8, {}), ParameterError);
}

TEST(Compose, IdentityOuterIsTransparent) {
  const auto A = blur_operator(10, {0.1, 0.8, 0.1});
  const auto C = compose(identity_operator(10), A);
  Rng rng(3);
  for (int p = 0; p < 20; ++p) {
    const Vec x = rng.normal_vec(10);
    EXPECT_EQ(C.apply(x), A.apply(x));
  }
}

TEST(Compose, AssociativeOnThreeOperators) {
  Rng rng(4);
  const auto A = matrix_operator(4, 6, rng.normal_vec(24));
  const auto B = blur_operator(6, {0.25, 0.5, 0.25});
  const auto C = downsample_operator(12, 2);
  const auto left = compose(compose(A, B), C), right = compose(A, compose(B, C));
  for (int p = 0; p < 20; ++p) {
    const Vec x = rng.normal_vec(12);
    const Vec a = left.apply(x), b = right.apply(x);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Compose, DimensionMismatchRejected) {
  EXPECT_THROW(compose(identity_operator(3), identity_operator(4)), ParameterError);
}

TEST(Observe, NoNoiseIsExact) {
  const auto A = downsample_operator(6, 2);
  const Vec x{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(observe(A, x, NoiseModel::none(), 7), A.apply(x));
}

TEST(Observe, GaussianNoiseVariance) {
  const std::size_t d = 100000;
  const Vec x(d, 0.3);
  const Vec y = observe(identity_operator(d), x, NoiseModel::gaussian(0.05), 11);
  double s = 0.0, ss = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    s += y[i] - x[i];
    ss += (y[i] - x[i]) * (y[i] - x[i]);
  }
  const double mean = s / d, var = (ss - d * mean * mean) / (d - 1);
  EXPECT_GE(var, 0.0024);
  EXPECT_LE(var, 0.0026);
}

TEST(Observe, BimodalNoiseHasTwoEqualModes) {
  const std::size_t d = 100000;
  const Vec x(d, -0.2);
  const Vec y = observe(identity_operator(d), x, NoiseModel::bimodal(0.75, 0.5), 12);
  std::size_t plus = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const double r = y[i] - x[i];
    ASSERT_NEAR(std::abs(r), 0.75, 1e-12);
    if (r > 0) ++plus;
  }
  EXPECT_NEAR(static_cast<double>(plus) / d, 0.5, 3.0 * std::sqrt(0.25 / d));
}

TEST(Observe, PoissonMomentsMatchRate) {
  const double s = 0.5;
  const Vec x{0.2, 1.0, 4.0};
  const auto A = identity_operator(3);
  const int draws = 100000;
  Vec sum(3, 0.0), sumsq(3, 0.0);
  for (int k = 0; k < draws; ++k) {
    const Vec y = observe(A, x, NoiseModel::poisson(s), static_cast<std::uint64_t>(k));
    for (int i = 0; i < 3; ++i) {
      sum[i] += y[i];
      sumsq[i] += y[i] * y[i];
    }
  }
  for (int i = 0; i < 3; ++i) {
    const double mean = sum[i] / draws;
    const double var = (sumsq[i] - draws * mean * mean) / (draws - 1);
    const double v = x[i] / s;  // Var(Poisson(s·a)/s) = a/s
    EXPECT_NEAR(mean, x[i], 3.0 * std::sqrt(v / draws));
    // Var of the sample variance ≈ (μ4 − v²)/N; for Poisson(λ)/s, μ4 = (λ + 3λ²)/s⁴.
    const double lambda = s * x[i];
    const double mu4 = (lambda + 3 * lambda * lambda) / std::pow(s, 4);
    EXPECT_NEAR(var, v, 3.0 * std::sqrt((mu4 - v * v) / draws));
  }
}

TEST(Observe, PoissonRejectsNegativeRate) {
  EXPECT_THROW(observe(identity_operator(2), Vec{0.5, -0.1}, NoiseModel::poisson(1.0), 1), DomainError);
}

TEST(Observe, ReproducibleForFixedSeed) {
  const auto A = blur_operator(32, gaussian_kernel(2.0));
  Rng rng(1);
  const Vec x = rng.normal_vec(32);
  for (const auto& nm : {NoiseModel::gaussian(0.1), NoiseModel::bimodal(0.5, 0.3)}) {
    EXPECT_EQ(observe(A, x, nm, 99), observe(A, x, nm, 99));
    EXPECT_NE(observe(A, x, nm, 99), observe(A, x, nm, 100));
  }
}

TEST(Observe, NoiseParametersValidated) {
  const auto A = identity_operator(2);
  const Vec x{0.0, 0.0};
  EXPECT_THROW(observe(A, x, NoiseModel::gaussian(-1.0), 1), ParameterError);
  EXPECT_THROW(observe(A, x, NoiseModel::bimodal(0.5, 1.5), 1), ParameterError);
  EXPECT_THROW(observe(A, x, NoiseModel::poisson(0.0), 1), ParameterError);
}
