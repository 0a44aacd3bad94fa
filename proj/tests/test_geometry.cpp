#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mioflow/geometry.hpp"
#include "test_support.hpp"

namespace mioflow {
namespace {

using testing::random_cloud;

Matrix chain_kernel() {
  Matrix k(3, 3);
  k << 1, 1, 0, 1, 1, 1, 0, 1, 1;
  return k;
}

TEST(BuildKernel, GaussianSelfAffinityIsOne) {
  Matrix x(2, 2);
  x << 0.3, -1.2, 0.3, -1.2;
  const Matrix k = build_kernel(x, GaussianKernel{1.0});
  EXPECT_DOUBLE_EQ(k(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(k(0, 0), 1.0);
}

TEST(BuildKernel, GaussianClosedForm) {
  Matrix x(2, 1);
  x << 0.0, 2.0;
  const Matrix k = build_kernel(x, GaussianKernel{2.0});
  EXPECT_NEAR(k(0, 1), std::exp(-2.0), 1e-15);
  EXPECT_NEAR(k(0, 1), 0.135335, 1e-6);
  EXPECT_DOUBLE_EQ(k(1, 0), k(0, 1));
}

// Oracle: direct double loop with a fully sorted neighbor list per point.
TEST(BuildKernel, AlphaDecayMatchesDirectDefinition) {
  const Matrix x = random_cloud(10, 2, 11);
  const int knn = 3;
  const double decay = 2.0;
  const Matrix k = build_kernel(x, AlphaDecayKernel{knn, decay});

  std::vector<double> eps(10);
  for (int i = 0; i < 10; ++i) {
    std::vector<double> ds;
    for (int j = 0; j < 10; ++j)
      if (j != i) ds.push_back(std::sqrt(std::pow(x(i, 0) - x(j, 0), 2) + std::pow(x(i, 1) - x(j, 1), 2)));
    std::sort(ds.begin(), ds.end());
    eps[i] = ds[knn - 1];
  }
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      const double dij = std::sqrt(std::pow(x(i, 0) - x(j, 0), 2) + std::pow(x(i, 1) - x(j, 1), 2));
      const double expected =
          0.5 * std::exp(-std::pow(dij / eps[i], decay)) + 0.5 * std::exp(-std::pow(dij / eps[j], decay));
      EXPECT_NEAR(k(i, j), expected, 1e-14) << i << "," << j;
    }
  }
}

TEST(BuildKernel, AlphaDecayRejectsKnnAtLeastN) {
  const Matrix x = random_cloud(5, 2, 3);
  EXPECT_THROW(build_kernel(x, AlphaDecayKernel{5, 10.0}), ParameterError);
  EXPECT_THROW(build_kernel(x, AlphaDecayKernel{2, 0.5}), ParameterError);
}

TEST(BuildKernel, AlphaDecayDuplicatePointsGetPositiveBandwidth) {
  Matrix x(4, 1);
  x << 0.0, 0.0, 0.0, 1.0;
  const Matrix k = build_kernel(x, AlphaDecayKernel{1, 2.0});
  EXPECT_TRUE(k.allFinite());
  EXPECT_DOUBLE_EQ(k(0, 1), 1.0);
  EXPECT_GT(k(0, 3), 0.0);
}

TEST(BuildKernel, RejectsBadClouds) {
  EXPECT_THROW(build_kernel(Matrix(0, 2), GaussianKernel{1.0}), ParameterError);
  Matrix x = Matrix::Zero(2, 2);
  x(0, 0) = std::nan("");
  EXPECT_THROW(build_kernel(x, GaussianKernel{1.0}), ParameterError);
  EXPECT_THROW(build_kernel(Matrix::Zero(2, 2), GaussianKernel{0.0}), ParameterError);
}

TEST(MarkovNormalize, AllOnes) {
  const DiffusionOperator op = markov_normalize(Matrix::Ones(2, 2));
  EXPECT_NEAR((op.p - Matrix::Constant(2, 2, 0.5)).cwiseAbs().maxCoeff(), 0.0, 1e-15);
  EXPECT_NEAR(op.pi(0), 0.5, 1e-15);
  EXPECT_NEAR(op.pi(1), 0.5, 1e-15);
}

// Hand computation: Q = (2,3,2), M = Q^-1 K Q^-1, D = (5/12, 4/9, 5/12).
TEST(MarkovNormalize, ChainByHand) {
  const DiffusionOperator op = markov_normalize(chain_kernel());
  Matrix expected(3, 3);
  expected << 3.0 / 5, 2.0 / 5, 0, 3.0 / 8, 1.0 / 4, 3.0 / 8, 0, 2.0 / 5, 3.0 / 5;
  EXPECT_LT((op.p - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(op.pi(0), 15.0 / 46, 1e-15);
  EXPECT_NEAR(op.pi(1), 16.0 / 46, 1e-15);
  EXPECT_NEAR(op.pi(2), 15.0 / 46, 1e-15);
}

TEST(MarkovNormalize, StationaryOnRandomKernels) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix x = random_cloud(25, 3, seed);
    const DiffusionOperator op = markov_normalize(build_kernel(x, GaussianKernel{0.5}));
    EXPECT_LT((op.p.rowwise().sum() - Vector::Ones(25)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_GE(op.p.minCoeff(), 0.0);
    EXPECT_NEAR(op.pi.sum(), 1.0, 1e-10);
    EXPECT_LT((op.pi.transpose() * op.p - op.pi.transpose()).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(MarkovNormalize, IsolatedPointIsNamed) {
  Matrix k = Matrix::Identity(3, 3);
  k(1, 1) = 0.0;
  try {
    markov_normalize(k);
    FAIL() << "expected an error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("isolated point 1"), std::string::npos);
  }
}

TEST(MarkovNormalize, RejectsAsymmetricKernel) {
  Matrix k = Matrix::Ones(2, 2);
  k(0, 1) = 0.5;
  EXPECT_THROW(markov_normalize(k), ParameterError);
}

TEST(DiffusionGeodesic, ZeroDiagonal) {
  const Matrix x = random_cloud(20, 2, 5);
  const DistanceMatrix g = geodesic_distance(x, GaussianKernel{0.3}, GeodesicParams{0.49, 4});
  EXPECT_EQ(g.diagonal().cwiseAbs().maxCoeff(), 0.0);
}

// Oracle: explicit P, P^2 = P P, P^4 = P P P P and the definition summed directly.
TEST(DiffusionGeodesic, ChainMatchesNaiveEvaluation) {
  const DiffusionOperator op = markov_normalize(chain_kernel());
  const GeodesicParams params{0.5, 2};
  const DistanceMatrix g = diffusion_geodesic(op, params);

  const Matrix& p = op.p;
  const Matrix p2 = p * p;
  const Matrix p4 = p * p * p * p;
  const Matrix* powers[3] = {&p, &p2, &p4};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double expected = 0.0;
      for (int k = 0; k <= 2; ++k) {
        double l1 = 0.0;
        for (int c = 0; c < 3; ++c) l1 += std::abs((*powers[k])(i, c) - (*powers[k])(j, c));
        expected += std::pow(2.0, -(2 - k) * 0.5) * l1;
      }
      expected += std::pow(2.0, -1.5) * std::abs(op.pi(i) - op.pi(j));
      EXPECT_NEAR(g(i, j), expected, 1e-14);
    }
  }
}

TEST(DiffusionGeodesic, RejectsInvalidParams) {
  const DiffusionOperator op = markov_normalize(chain_kernel());
  EXPECT_THROW(diffusion_geodesic(op, GeodesicParams{0.0, 2}), ParameterError);
  EXPECT_THROW(diffusion_geodesic(op, GeodesicParams{0.6, 2}), ParameterError);
  EXPECT_THROW(diffusion_geodesic(op, GeodesicParams{0.4, -1}), ParameterError);
}

TEST(DiffusionGeodesicProperty, MetricAxiomsOnRandomInputs) {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const int n = 8 + static_cast<int>(seed % 13);
    const Matrix x = random_cloud(n, 2 + static_cast<int>(seed % 3), seed);
    const DistanceMatrix g = geodesic_distance(x, GaussianKernel{0.4}, GeodesicParams{0.49, static_cast<int>(seed % 6)});
    EXPECT_LT((g - g.transpose()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_GE(g.minCoeff(), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) ASSERT_LE(g(i, j), g(i, k) + g(k, j) + 1e-9);
  }
}

TEST(DiffusionGeodesicProperty, SquaringAgreesWithIteratedProduct) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const int n = 10 + 8 * static_cast<int>(seed);
    const Matrix x = random_cloud(n, 2, seed + 40);
    const DiffusionOperator op = markov_normalize(build_kernel(x, GaussianKernel{0.2}));
    const auto powers = dyadic_powers(op.p, 5);
    Matrix naive = op.p;
    int exponent = 1;
    for (int k = 0; k <= 5; ++k) {
      while (exponent < (1 << k)) {
        naive = naive * op.p;
        ++exponent;
      }
      EXPECT_LT((powers[k] - naive).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LT((powers[k].rowwise().sum() - Vector::Ones(n)).cwiseAbs().maxCoeff(), 1e-8);
    }
  }
}

TEST(DiffusionGeodesicProperty, PermutationEquivariance) {
  const int n = 15;
  const Matrix x = random_cloud(n, 2, 77);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(3);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix xp(n, 2);
  for (int i = 0; i < n; ++i) xp.row(i) = x.row(perm[i]);

  const GeodesicParams params{0.49, 3};
  const DistanceMatrix g = geodesic_distance(x, GaussianKernel{0.3}, params);
  const DistanceMatrix gp = geodesic_distance(xp, GaussianKernel{0.3}, params);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) EXPECT_NEAR(gp(i, j), g(perm[i], perm[j]), 1e-12);
}

TEST(DiffusionGeodesic, CircleRanksFollowArcLength) {
  const int n = 200;
  Rng rng(2024);
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  std::vector<double> theta(n);
  for (auto& t : theta) t = u(rng);
  Matrix x(n, 2);
  for (int i = 0; i < n; ++i) x.row(i) << std::cos(theta[i]), std::sin(theta[i]);

  const DistanceMatrix g = geodesic_distance(x, GaussianKernel{0.05}, GeodesicParams{0.49, 6});
  std::vector<double> geo, arc;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double diff = std::abs(theta[i] - theta[j]);
      arc.push_back(std::min(diff, 2.0 * std::numbers::pi - diff));
      geo.push_back(g(i, j));
    }
  EXPECT_GE(testing::spearman(geo, arc), 0.95);
}

}  // namespace
}  // namespace mioflow
