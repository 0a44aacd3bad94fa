#ifndef MIOFLOW_GEOMETRY_HPP
#define MIOFLOW_GEOMETRY_HPP

// Graph kernels, the density-normalized diffusion operator and the multiscale
// diffusion geodesic distance built from its dyadic powers.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "mioflow/common.hpp"

namespace mioflow {

/// n observations (rows) by d ambient coordinates (columns).
using PointCloud = Matrix;

/// n x n symmetric, zero-diagonal distance matrix.
using DistanceMatrix = Matrix;

inline void check_cloud(const PointCloud& cloud, std::string_view what = "point cloud") {
  if (cloud.rows() < 1 || cloud.cols() < 1)
    throw ParameterError(std::string(what) + ": needs at least one point and one coordinate");
  if (!cloud.allFinite()) throw ParameterError(std::string(what) + ": non-finite coordinate");
}

/// k(x, y) = exp(-|x - y|^2 / epsilon).
struct GaussianKernel {
  double epsilon = 1.0;
};

/// Adaptive-bandwidth kernel: the bandwidth at x is the distance to its knn-th neighbor.
struct AlphaDecayKernel {
  int knn = 5;
  double decay = 40.0;
};

using KernelSpec = std::variant<GaussianKernel, AlphaDecayKernel>;

inline std::string kernel_name(const KernelSpec& spec) {
  return std::holds_alternative<GaussianKernel>(spec) ? "gaussian" : "alpha_decay";
}

/// Row-stochastic transition matrix with its stationary distribution.
struct DiffusionOperator {
  Matrix p;
  Vector pi;
};

struct GeodesicParams {
  double alpha = 0.49;
  int max_scale = 5;  // K: powers P^1, P^2, ..., P^(2^K)

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 0.5))
      throw ParameterError("geodesic alpha must lie in (0, 0.5]");
    if (max_scale < 0) throw ParameterError("geodesic max_scale must be >= 0");
  }
};

/// Euclidean distances between the rows of a and the rows of b.
inline Matrix cross_distances(const Matrix& a, const Matrix& b) {
  Matrix d(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).norm();
  return d;
}

inline Matrix pairwise_distances(const Matrix& x) {
  const Eigen::Index n = x.rows();
  Matrix d = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (x.row(i) - x.row(j)).norm();
  return d;
}

namespace detail {

inline Matrix gaussian_affinity(const Matrix& dist, double epsilon) {
  if (!(epsilon > 0.0)) throw ParameterError("Gaussian kernel bandwidth must be positive");
  return (-dist.array().square() / epsilon).exp().matrix();
}

inline Matrix alpha_decay_affinity(const Matrix& dist, const AlphaDecayKernel& spec) {
  const Eigen::Index n = dist.rows();
  if (spec.knn < 1 || spec.knn >= n)
    throw ParameterError("alpha-decay knn=" + std::to_string(spec.knn) +
                         " must satisfy 1 <= knn < n=" + std::to_string(n));
  if (!(spec.decay >= 1.0)) throw ParameterError("alpha-decay exponent must be >= 1");

  double smallest_positive = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if (dist(i, j) > 0.0) smallest_positive = std::min(smallest_positive, dist(i, j));
  if (!std::isfinite(smallest_positive)) smallest_positive = 1.0;

  Vector bandwidth(n);
  std::vector<double> row;
  for (Eigen::Index i = 0; i < n; ++i) {
    row.clear();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) row.push_back(dist(i, j));
    std::nth_element(row.begin(), row.begin() + (spec.knn - 1), row.end());
    bandwidth(i) = row[static_cast<std::size_t>(spec.knn - 1)];
    if (bandwidth(i) <= 0.0) {
      logger()->info("alpha-decay: point {} has zero local bandwidth, using {}", i,
                     smallest_positive);
      bandwidth(i) = smallest_positive;
    }
  }

  Matrix k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double di = std::pow(dist(i, j) / bandwidth(i), spec.decay);
      const double dj = std::pow(dist(i, j) / bandwidth(j), spec.decay);
      k(i, j) = 0.5 * std::exp(-di) + 0.5 * std::exp(-dj);
    }
  }
  return k;
}

}  // namespace detail

/// Symmetric non-negative affinity matrix of a point cloud.
inline Matrix build_kernel(const PointCloud& cloud, const KernelSpec& spec) {
  check_cloud(cloud);
  const Matrix dist = pairwise_distances(cloud);
  return std::visit(
      [&](const auto& k) -> Matrix {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, GaussianKernel>)
          return detail::gaussian_affinity(dist, k.epsilon);
        else
          return detail::alpha_decay_affinity(dist, k);
      },
      spec);
}

/// Q-normalizes the kernel (M = Q^-1 K Q^-1), then row-normalizes M into P.
/// The stationary distribution is pi_i = D_ii / sum_j D_jj with D the row sums of M.
inline DiffusionOperator markov_normalize(const Matrix& kernel) {
  const Eigen::Index n = kernel.rows();
  if (n < 1 || kernel.cols() != n) throw ParameterError("kernel must be a non-empty square matrix");
  if (!kernel.allFinite() || (kernel.array() < 0.0).any())
    throw ParameterError("kernel entries must be finite and non-negative");
  if ((kernel - kernel.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, kernel.cwiseAbs().maxCoeff()))
    throw ParameterError("kernel must be symmetric");

  const Vector q = kernel.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(q(i) > 0.0)) throw NumericalError("isolated point " + std::to_string(i) + ": zero kernel row sum");

  const Vector q_inv = q.cwiseInverse();
  const Matrix m = q_inv.asDiagonal() * kernel * q_inv.asDiagonal();
  const Vector d = m.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(d(i) > 0.0)) throw NumericalError("isolated point " + std::to_string(i) + ": zero normalized row sum");

  DiffusionOperator op;
  op.p = d.cwiseInverse().asDiagonal() * m;
  op.pi = d / d.sum();
  return op;
}

/// Sum over rows of |a_i - a_j| for every pair (i, j).
inline Matrix pairwise_l1(const Matrix& rows) {
  const Eigen::Index n = rows.rows();
  Matrix d = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      d(i, j) = d(j, i) = (rows.row(i) - rows.row(j)).cwiseAbs().sum();
  return d;
}

/// Dyadic powers P^(2^k), k = 0..max_scale, by repeated squaring.
inline std::vector<Matrix> dyadic_powers(const Matrix& p, int max_scale) {
  std::vector<Matrix> powers;
  powers.reserve(static_cast<std::size_t>(max_scale) + 1);
  powers.push_back(p);
  for (int k = 1; k <= max_scale; ++k) {
    const Matrix& prev = powers.back();
    powers.push_back(prev * prev);
  }
  return powers;
}

/// G(i, j) = sum_k 2^{-(K-k) alpha} |P^(2^k)_i - P^(2^k)_j|_1 + 2^{-(K+1)/2} |pi_i - pi_j|.
inline DistanceMatrix diffusion_geodesic(const DiffusionOperator& op, const GeodesicParams& params) {
  params.validate();
  const int K = params.max_scale;
  const std::vector<Matrix> powers = dyadic_powers(op.p, K);

  const Eigen::Index n = op.p.rows();
  DistanceMatrix g = Matrix::Zero(n, n);
  for (int k = 0; k <= K; ++k)
    g += std::pow(2.0, -(K - k) * params.alpha) * pairwise_l1(powers[static_cast<std::size_t>(k)]);

  const double pi_weight = std::pow(2.0, -(K + 1) / 2.0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) += pi_weight * std::abs(op.pi(i) - op.pi(j));
  return g;
}

/// Kernel, diffusion operator and geodesic distance in one call.
inline DistanceMatrix geodesic_distance(const PointCloud& cloud, const KernelSpec& kernel,
                                        const GeodesicParams& params) {
  return diffusion_geodesic(markov_normalize(build_kernel(cloud, kernel)), params);
}

}  // namespace mioflow

#endif  // MIOFLOW_GEOMETRY_HPP
