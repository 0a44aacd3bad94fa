#ifndef MIOFLOW_TRANSPORT_HPP
#define MIOFLOW_TRANSPORT_HPP

// Exact discrete optimal transport (network simplex on the bipartite
// transportation graph) and the two-sample statistics used for evaluation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mioflow/common.hpp"
#include "mioflow/geometry.hpp"

namespace mioflow {

struct DiscreteDistribution {
  Matrix support;  // m x d
  Vector weights;  // length m, on the simplex

  static DiscreteDistribution uniform(Matrix points) {
    const auto m = points.rows();
    return {std::move(points), Vector::Constant(m, 1.0 / static_cast<double>(m))};
  }

  void validate() const {
    if (support.rows() < 1 || support.cols() < 1) throw ParameterError("distribution needs a non-empty support");
    if (weights.size() != support.rows()) throw ParameterError("distribution weight count differs from support size");
    if (!support.allFinite() || !weights.allFinite()) throw ParameterError("distribution has non-finite entries");
    if ((weights.array() < 0.0).any()) throw ParameterError("distribution has negative weights");
    if (std::abs(weights.sum() - 1.0) > 1e-12) throw ParameterError("distribution weights do not sum to 1");
  }

  bool is_uniform() const {
    const double w = 1.0 / static_cast<double>(weights.size());
    return ((weights.array() - w).abs() <= 1e-15).all();
  }
};

struct TransportPlan {
  Matrix plan;  // m x m'
  double cost = 0.0;
};

struct EmdResult {
  double distance = 0.0;  // W_p = cost^(1/p)
  TransportPlan plan;
};

namespace detail {

/// Primal network simplex for the uncapacitated transportation problem.
/// Nodes [0, m) are sources, [m, m+n) sinks, m+n the artificial root.
/// Entering arcs are chosen by block search; the leaving-arc tie rule keeps
/// the spanning tree strongly feasible, which rules out cycling.
class TransportSimplex {
 public:
  TransportSimplex(std::vector<double> supply, std::vector<double> demand, std::vector<double> cost)
      : m_(static_cast<long>(supply.size())),
        n_(static_cast<long>(demand.size())),
        nodes_(m_ + n_ + 1),
        real_arcs_(m_ * n_),
        cost_(std::move(cost)) {
    const long arcs = real_arcs_ + m_ + n_;
    cost_.resize(static_cast<std::size_t>(arcs));
    flow_.assign(static_cast<std::size_t>(arcs), 0.0);
    state_.assign(static_cast<std::size_t>(arcs), kLower);
    src_.resize(static_cast<std::size_t>(arcs));
    tgt_.resize(static_cast<std::size_t>(arcs));
    for (long a = 0; a < real_arcs_; ++a) {
      src_[a] = a / n_;
      tgt_[a] = m_ + a % n_;
    }

    double max_cost = 0.0;
    for (long a = 0; a < real_arcs_; ++a) max_cost = std::max(max_cost, cost_[a]);
    const double artificial = (max_cost + 1.0) * static_cast<double>(nodes_);
    const long root = m_ + n_;

    tree_arcs_.clear();
    for (long u = 0; u < m_ + n_; ++u) {
      const long a = real_arcs_ + u;
      state_[a] = kTree;
      tree_arcs_.push_back(a);
      if (u < m_) {
        src_[a] = u;
        tgt_[a] = root;
        flow_[a] = supply[static_cast<std::size_t>(u)];
        cost_[a] = 0.0;
      } else {
        src_[a] = root;
        tgt_[a] = u;
        flow_[a] = demand[static_cast<std::size_t>(u - m_)];
        cost_[a] = artificial;
      }
    }
    for (long i = 0; i < m_; ++i) total_supply_ += flow_[real_arcs_ + i];
    block_ = std::max<long>(static_cast<long>(std::sqrt(static_cast<double>(real_arcs_))), 10);
    rebuild_tree();
  }

  void solve() {
    const long max_pivots = 50 * (real_arcs_ + nodes_) + 1000;
    long pivots = 0;
    long entering = -1;
    while ((entering = find_entering()) >= 0) {
      if (++pivots > max_pivots) throw NumericalError("network simplex: pivot limit exceeded");
      pivot(entering);
    }
    for (long a = real_arcs_; a < static_cast<long>(flow_.size()); ++a) {
      const double scale = std::max(1.0, total_supply_);
      if (std::abs(flow_[a]) > 1e-9 * scale)
        throw NumericalError("network simplex: infeasible transport instance");
    }
  }

  double flow(long i, long j) const { return flow_[static_cast<std::size_t>(i * n_ + j)]; }

 private:
  static constexpr signed char kTree = 0;
  static constexpr signed char kLower = 1;

  double reduced_cost(long a) const { return cost_[a] + pot_[src_[a]] - pot_[tgt_[a]]; }

  long find_entering() {
    double best = 0.0;
    long best_arc = -1;
    long a = next_arc_;
    long count = block_;
    for (long k = 0; k < real_arcs_; ++k, ++a) {
      if (a == real_arcs_) a = 0;
      if (state_[a] == kLower) {
        const double rc = reduced_cost(a);
        if (rc < best) {
          const double scale = std::max({std::abs(pot_[src_[a]]), std::abs(pot_[tgt_[a]]), std::abs(cost_[a])});
          if (rc < -kTolerance * scale) {
            best = rc;
            best_arc = a;
          }
        }
      }
      if (--count == 0) {
        if (best_arc >= 0) {
          next_arc_ = a + 1 == real_arcs_ ? 0 : a + 1;
          return best_arc;
        }
        count = block_;
      }
    }
    return best_arc;
  }

  void pivot(long in_arc) {
    const long first = src_[in_arc];
    const long second = tgt_[in_arc];

    long u = first, v = second;
    while (u != v) {
      if (depth_[u] >= depth_[v]) u = parent_[u];
      else v = parent_[v];
    }
    const long join = u;

    const double inf = std::numeric_limits<double>::infinity();
    double delta = inf;
    long u_out = -1;
    for (long w = first; w != join; w = parent_[w]) {
      const double d = forward_[w] ? flow_[pred_[w]] : inf;
      if (d < delta) {
        delta = d;
        u_out = w;
      }
    }
    for (long w = second; w != join; w = parent_[w]) {
      const double d = forward_[w] ? inf : flow_[pred_[w]];
      if (d <= delta) {
        delta = d;
        u_out = w;
      }
    }
    if (u_out < 0 || !std::isfinite(delta)) throw NumericalError("network simplex: unbounded cycle");

    if (delta > 0.0) {
      flow_[in_arc] += delta;
      for (long w = first; w != join; w = parent_[w]) flow_[pred_[w]] += forward_[w] ? -delta : delta;
      for (long w = second; w != join; w = parent_[w]) flow_[pred_[w]] += forward_[w] ? delta : -delta;
    }

    const long out_arc = pred_[u_out];
    flow_[out_arc] = 0.0;
    state_[out_arc] = kLower;
    state_[in_arc] = kTree;
    *std::find(tree_arcs_.begin(), tree_arcs_.end(), out_arc) = in_arc;
    rebuild_tree();
  }

  // Re-derives parent/pred/orientation/depth/potentials from the tree arc set.
  void rebuild_tree() {
    const long root = m_ + n_;
    head_.assign(static_cast<std::size_t>(nodes_), -1);
    next_.assign(2 * tree_arcs_.size(), -1);
    adj_arc_.assign(2 * tree_arcs_.size(), -1);
    for (std::size_t k = 0; k < tree_arcs_.size(); ++k) {
      const long a = tree_arcs_[k];
      for (int side = 0; side < 2; ++side) {
        const long node = side == 0 ? src_[a] : tgt_[a];
        const std::size_t slot = 2 * k + static_cast<std::size_t>(side);
        adj_arc_[slot] = a;
        next_[slot] = head_[node];
        head_[node] = static_cast<long>(slot);
      }
    }
    parent_.assign(static_cast<std::size_t>(nodes_), -1);
    pred_.assign(static_cast<std::size_t>(nodes_), -1);
    forward_.assign(static_cast<std::size_t>(nodes_), 0);
    depth_.assign(static_cast<std::size_t>(nodes_), 0);
    pot_.assign(static_cast<std::size_t>(nodes_), 0.0);
    std::vector<char> seen(static_cast<std::size_t>(nodes_), 0);
    queue_.clear();
    queue_.push_back(root);
    seen[root] = 1;
    for (std::size_t qi = 0; qi < queue_.size(); ++qi) {
      const long x = queue_[qi];
      for (long s = head_[x]; s >= 0; s = next_[s]) {
        const long a = adj_arc_[s];
        const long y = src_[a] == x ? tgt_[a] : src_[a];
        if (seen[y]) continue;
        seen[y] = 1;
        parent_[y] = x;
        pred_[y] = a;
        forward_[y] = src_[a] == y;
        depth_[y] = depth_[x] + 1;
        pot_[y] = forward_[y] ? pot_[x] - cost_[a] : pot_[x] + cost_[a];
        queue_.push_back(y);
      }
    }
    if (static_cast<long>(queue_.size()) != nodes_) throw NumericalError("network simplex: basis is not a spanning tree");
  }

  static constexpr double kTolerance = 1e-13;

  long m_, n_, nodes_, real_arcs_;
  std::vector<double> cost_, flow_, pot_;
  std::vector<signed char> state_;
  std::vector<long> src_, tgt_, parent_, pred_, depth_, head_, next_, adj_arc_, queue_, tree_arcs_;
  std::vector<char> forward_;
  long block_ = 10;
  long next_arc_ = 0;
  double total_supply_ = 0.0;
};

inline void check_marginals(const Matrix& plan, const Vector& a, const Vector& b) {
  const double row_err = (plan.rowwise().sum() - a).cwiseAbs().maxCoeff();
  const double col_err = (plan.colwise().sum().transpose() - b).cwiseAbs().maxCoeff();
  if (row_err > 1e-9 || col_err > 1e-9)
    throw NumericalError("transport plan marginals violated (row " + std::to_string(row_err) + ", col " +
                         std::to_string(col_err) + ")");
}

}  // namespace detail

/// Ground cost |x - y|^p between supports.
inline Matrix ground_cost(const Matrix& x, const Matrix& y, int p) {
  Matrix c = cross_distances(x, y);
  if (p == 2) c = c.array().square().matrix();
  return c;
}

/// Exact W_p between two discrete distributions with ground cost |x - y|_2^p.
inline EmdResult emd(const DiscreteDistribution& a, const DiscreteDistribution& b, int p) {
  if (p != 1 && p != 2) throw ParameterError("emd: p must be 1 or 2");
  a.validate();
  b.validate();
  if (a.support.cols() != b.support.cols()) throw ParameterError("emd: supports have different dimensions");

  const Matrix cost = ground_cost(a.support, b.support, p);
  EmdResult result;
  result.plan.plan = Matrix::Zero(a.support.rows(), b.support.rows());

  if (cost.maxCoeff() == 0.0) {
    logger()->info("emd: all support points coincide, returning zero cost");
    result.plan.plan = a.weights * b.weights.transpose();
    return result;
  }

  // Zero-weight points take no part in the solve.
  std::vector<Eigen::Index> rows, cols;
  for (Eigen::Index i = 0; i < a.weights.size(); ++i)
    if (a.weights(i) > 0.0) rows.push_back(i);
  for (Eigen::Index j = 0; j < b.weights.size(); ++j)
    if (b.weights(j) > 0.0) cols.push_back(j);

  // Uniform marginals are scaled to integers so that every flow is exact.
  const bool integral = a.is_uniform() && b.is_uniform();
  const double m = static_cast<double>(rows.size());
  const double n = static_cast<double>(cols.size());
  std::vector<double> supply, demand, flat_cost;
  for (auto i : rows) supply.push_back(integral ? n : a.weights(i));
  for (auto j : cols) demand.push_back(integral ? m : b.weights(j));
  flat_cost.reserve(rows.size() * cols.size());
  for (auto i : rows)
    for (auto j : cols) flat_cost.push_back(cost(i, j));

  detail::TransportSimplex solver(std::move(supply), std::move(demand), std::move(flat_cost));
  solver.solve();

  const double scale = integral ? 1.0 / (m * n) : 1.0;
  double total = 0.0;
  for (std::size_t ii = 0; ii < rows.size(); ++ii) {
    for (std::size_t jj = 0; jj < cols.size(); ++jj) {
      const double f = solver.flow(static_cast<long>(ii), static_cast<long>(jj));
      if (f == 0.0) continue;
      total += f * cost(rows[ii], cols[jj]);
      result.plan.plan(rows[ii], cols[jj]) = f * scale;
    }
  }
  result.plan.cost = total * scale;
  detail::check_marginals(result.plan.plan, a.weights, b.weights);
  result.distance = p == 1 ? result.plan.cost : std::sqrt(std::max(0.0, result.plan.cost));
  return result;
}

/// Convenience overload for uniformly weighted point sets.
inline EmdResult emd(const Matrix& a, const Matrix& b, int p) {
  return emd(DiscreteDistribution::uniform(a), DiscreteDistribution::uniform(b), p);
}

/// Gradient of the fixed-plan squared-W2 cost w.r.t. the support of a:
/// row i is 2 sum_j plan_ij (x_i - y_j).
inline Matrix emd_gradient(const DiscreteDistribution& a, const DiscreteDistribution& b, const TransportPlan& plan) {
  const Vector mass = plan.plan.rowwise().sum();
  return 2.0 * (mass.asDiagonal() * a.support - plan.plan * b.support);
}

/// Biased squared MMD with kernels exp(-|x-y|^2 / (2 s^2)) averaged over the
/// scales, clamped at zero, then square-rooted.
inline double mmd_gaussian(const Matrix& a, const Matrix& b, const std::vector<double>& scales) {
  if (a.rows() < 1 || b.rows() < 1) throw ParameterError("mmd: empty point set");
  if (scales.empty()) throw ParameterError("mmd: no kernel scales given");
  const auto mean_kernel = [](const Matrix& x, const Matrix& y, double s) {
    const double inv = 1.0 / (2.0 * s * s);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < y.rows(); ++j) acc += std::exp(-(x.row(i) - y.row(j)).squaredNorm() * inv);
    return acc / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
  };
  double total = 0.0;
  for (double s : scales) {
    if (!(s > 0.0)) throw ParameterError("mmd: kernel scales must be positive");
    total += mean_kernel(a, a, s) + mean_kernel(b, b, s) - 2.0 * mean_kernel(a, b, s);
  }
  return std::sqrt(std::max(0.0, total / static_cast<double>(scales.size())));
}

/// Distance between sample means; squared by default.
inline double mmd_mean(const Matrix& a, const Matrix& b, bool squared = true) {
  if (a.rows() < 1 || b.rows() < 1) throw ParameterError("mmd: empty point set");
  const double d2 = (a.colwise().mean() - b.colwise().mean()).squaredNorm();
  return squared ? d2 : std::sqrt(d2);
}

enum class NnAggregate { Mean, WorstQuartile };

/// Per predicted point, the distance to its nearest truth point, aggregated.
/// WorstQuartile averages the largest ceil(n/4) distances.
inline double one_nn_distance(const Matrix& pred, const Matrix& truth, NnAggregate aggregate) {
  if (truth.rows() < 1) throw ParameterError("1-NN: empty ground truth");
  if (pred.rows() < 1) return 0.0;
  std::vector<double> nearest(static_cast<std::size_t>(pred.rows()));
  for (Eigen::Index i = 0; i < pred.rows(); ++i)
    nearest[static_cast<std::size_t>(i)] = (truth.rowwise() - pred.row(i)).rowwise().norm().minCoeff();
  if (aggregate == NnAggregate::Mean)
    return std::accumulate(nearest.begin(), nearest.end(), 0.0) / static_cast<double>(nearest.size());
  std::sort(nearest.begin(), nearest.end(), std::greater<>());
  const std::size_t q = (nearest.size() + 3) / 4;
  return std::accumulate(nearest.begin(), nearest.begin() + static_cast<long>(q), 0.0) / static_cast<double>(q);
}

}  // namespace mioflow

#endif  // MIOFLOW_TRANSPORT_HPP
