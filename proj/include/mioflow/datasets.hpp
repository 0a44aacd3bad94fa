#ifndef MIOFLOW_DATASETS_HPP
#define MIOFLOW_DATASETS_HPP

// Snapshot datasets: synthetic generators, CSV ingestion and leave-one-out splits.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "mioflow/common.hpp"

namespace mioflow {

/// Time-labelled point clouds. Labels are model times (unit spacing); after a
/// holdout split they may skip the held label.
struct SnapshotDataset {
  std::vector<int> times;
  std::vector<Matrix> snapshots;

  std::size_t size() const { return snapshots.size(); }
  Eigen::Index dim() const { return snapshots.empty() ? 0 : snapshots.front().cols(); }

  Eigen::Index total_points() const {
    Eigen::Index n = 0;
    for (const auto& s : snapshots) n += s.rows();
    return n;
  }

  /// Index of a time label, or -1.
  long index_of(int t) const {
    const auto it = std::find(times.begin(), times.end(), t);
    return it == times.end() ? -1 : static_cast<long>(it - times.begin());
  }

  const Matrix& at_time(int t) const {
    const long i = index_of(t);
    if (i < 0) throw ParameterError("dataset has no snapshot at time " + std::to_string(t));
    return snapshots[static_cast<std::size_t>(i)];
  }

  /// All snapshots stacked in time order.
  Matrix pooled() const {
    Matrix all(total_points(), dim());
    Eigen::Index r = 0;
    for (const auto& s : snapshots) {
      all.middleRows(r, s.rows()) = s;
      r += s.rows();
    }
    return all;
  }

  void validate() const {
    if (snapshots.size() < 2) throw ParameterError("dataset needs at least two snapshots");
    if (times.size() != snapshots.size()) throw ParameterError("dataset time labels and snapshots differ in count");
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
      if (snapshots[i].rows() < 1) throw ParameterError("snapshot at time " + std::to_string(times[i]) + " is empty");
      if (snapshots[i].cols() != dim()) throw ParameterError("snapshots have different dimensions");
      if (!snapshots[i].allFinite()) throw ParameterError("snapshot has non-finite coordinates");
      if (times[i] < 0 || (i > 0 && times[i] <= times[i - 1]))
        throw ParameterError("snapshot times must be non-negative and strictly increasing");
    }
  }

  bool operator==(const SnapshotDataset& o) const { return times == o.times && snapshots == o.snapshots; }
};

struct PetalSpec {
  int n_lobes = 4;
  int points_per_time = 100;
  int timepoints = 5;
  double noise = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_lobes < 2) throw ParameterError("petal: n_lobes must be >= 2");
    if (timepoints < 2) throw ParameterError("petal: timepoints must be >= 2");
    if (points_per_time < 1) throw ParameterError("petal: points_per_time must be >= 1");
    if (noise < 0.0) throw ParameterError("petal: noise must be >= 0");
  }
};

/// Radius of the rose curve r = |sin(n theta / 2)|.
inline double petal_radius(int n_lobes, double theta) { return std::abs(std::sin(0.5 * n_lobes * theta)); }

/// Each lobe is traversed from the origin to its tip along both sides; time
/// t covers the parameter band [t/T, (t+1)/T]. Points are dealt round-robin
/// over the lobes, alternating sides on each pass.
inline SnapshotDataset gen_petal(const PetalSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double width = 2.0 * std::numbers::pi / spec.n_lobes;

  SnapshotDataset ds;
  for (int t = 0; t < spec.timepoints; ++t) {
    std::uniform_real_distribution<double> band(static_cast<double>(t) / spec.timepoints,
                                                static_cast<double>(t + 1) / spec.timepoints);
    Matrix x(spec.points_per_time, 2);
    for (int k = 0; k < spec.points_per_time; ++k) {
      const int lobe = k % spec.n_lobes;
      const bool first_side = (k / spec.n_lobes) % 2 == 0;
      const double u = band(rng);
      const double theta = first_side ? lobe * width + 0.5 * u * width : (lobe + 1) * width - 0.5 * u * width;
      const double r = petal_radius(spec.n_lobes, theta);
      x(k, 0) = r * std::cos(theta);
      x(k, 1) = r * std::sin(theta);
      if (spec.noise > 0.0) {
        x(k, 0) += spec.noise * jitter(rng);
        x(k, 1) += spec.noise * jitter(rng);
      }
    }
    ds.times.push_back(t);
    ds.snapshots.push_back(std::move(x));
  }
  return ds;
}

struct BifurcationSpec {
  int dim = 5;
  std::vector<int> counts{140, 120, 100, 80, 60};
  double asymmetry = 0.5;  // lower branch curvature = (1 - asymmetry) * upper
  double noise = 0.05;
  std::uint64_t seed = 0;
  std::uint64_t embedding_seed = 7;

  void validate() const {
    if (dim < 2) throw ParameterError("bifurcation: dim must be >= 2");
    if (counts.size() < 2) throw ParameterError("bifurcation: needs at least two timepoints");
    for (int c : counts)
      if (c < 1) throw ParameterError("bifurcation: counts must be positive");
    if (noise < 0.0) throw ParameterError("bifurcation: noise must be >= 0");
  }
};

struct BifurcationSample {
  SnapshotDataset ambient;
  SnapshotDataset latent;  // noise-free 2-D coordinates
  Matrix embedding;        // dim x 2, orthonormal columns
};

namespace detail {
inline constexpr double kStemLength = 4.0;
inline constexpr double kBranchStart = 0.4;  // fraction of progress where the stem splits
inline constexpr double kUpperCurvature = 0.5;
}  // namespace detail

/// Latent y-coordinate of a branch at x (0 on the stem).
inline double bifurcation_branch_y(double x, bool upper, double asymmetry) {
  const double x0 = detail::kBranchStart * detail::kStemLength;
  if (x <= x0) return 0.0;
  const double c = upper ? detail::kUpperCurvature : -detail::kUpperCurvature * (1.0 - asymmetry);
  return c * (x - x0) * (x - x0);
}

/// A 2-D stem splitting into two branches of unequal curvature, embedded in
/// dim dimensions through a seeded orthonormal map.
inline BifurcationSample gen_bifurcation_with_latent(const BifurcationSpec& spec) {
  spec.validate();
  Rng embed_rng = make_rng(spec.embedding_seed);
  const Matrix gauss = standard_normal(spec.dim, 2, embed_rng);
  Eigen::HouseholderQR<Matrix> qr(gauss);
  const Matrix q = qr.householderQ() * Matrix::Identity(spec.dim, 2);

  Rng rng = make_rng(spec.seed);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const int T = static_cast<int>(spec.counts.size());
  BifurcationSample out;
  out.embedding = q;
  for (int t = 0; t < T; ++t) {
    std::uniform_real_distribution<double> band(static_cast<double>(t) / T, static_cast<double>(t + 1) / T);
    const int n = spec.counts[static_cast<std::size_t>(t)];
    Matrix latent(n, 2);
    for (int k = 0; k < n; ++k) {
      const double x = detail::kStemLength * band(rng);
      latent(k, 0) = x;
      latent(k, 1) = bifurcation_branch_y(x, k % 2 == 0, spec.asymmetry);
    }
    Matrix ambient = latent * q.transpose();
    if (spec.noise > 0.0)
      for (Eigen::Index i = 0; i < ambient.rows(); ++i)
        for (Eigen::Index j = 0; j < ambient.cols(); ++j) ambient(i, j) += spec.noise * jitter(rng);
    out.latent.times.push_back(t);
    out.latent.snapshots.push_back(std::move(latent));
    out.ambient.times.push_back(t);
    out.ambient.snapshots.push_back(std::move(ambient));
  }
  return out;
}

inline SnapshotDataset gen_bifurcation(const BifurcationSpec& spec) {
  return gen_bifurcation_with_latent(spec).ambient;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Header "t,x0,...,x{d-1}", one row per point, 17 significant digits.
inline void write_csv(const SnapshotDataset& ds, std::ostream& os) {
  os << "t";
  for (Eigen::Index j = 0; j < ds.dim(); ++j) os << ",x" << j;
  os << "\n";
  for (std::size_t s = 0; s < ds.size(); ++s) {
    const Matrix& x = ds.snapshots[s];
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      os << ds.times[s];
      for (Eigen::Index j = 0; j < x.cols(); ++j) os << ',' << format_double(x(i, j));
      os << '\n';
    }
  }
}

inline void save_csv(const SnapshotDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_csv(ds, os);
  if (!os) throw Error("failed writing '" + path + "'");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_number(const std::string& cell, std::size_t line_no) {
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  while (begin < end && *begin == ' ') ++begin;
  while (end > begin && (end[-1] == ' ' || end[-1] == '\r')) --end;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end || begin == end)
    throw ParseError("line " + std::to_string(line_no) + ": non-numeric cell '" + cell + "'");
  return v;
}

}  // namespace detail

inline SnapshotDataset read_csv(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(is, line)) throw ParseError("line 1: missing header");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "t") throw ParseError("line 1: header must be t,x0,...,x{d-1}");
  for (std::size_t j = 1; j < header.size(); ++j)
    if (header[j] != "x" + std::to_string(j - 1)) throw ParseError("line 1: unexpected header column '" + header[j] + "'");
  const std::size_t d = header.size() - 1;

  std::map<int, std::vector<std::vector<double>>> groups;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != d + 1)
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(d + 1) + " cells, found " +
                       std::to_string(cells.size()));
    const double t = detail::parse_number(cells[0], line_no);
    if (t < 0 || t != std::floor(t) || t > 1e9)
      throw ParseError("line " + std::to_string(line_no) + ": time label must be a non-negative integer");
    std::vector<double> row(d);
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = detail::parse_number(cells[j + 1], line_no);
      if (!std::isfinite(row[j])) throw ParseError("line " + std::to_string(line_no) + ": non-finite coordinate");
    }
    groups[static_cast<int>(t)].push_back(std::move(row));
  }
  if (groups.empty()) throw ParseError("no data rows");

  SnapshotDataset ds;
  for (auto& [t, rows] : groups) {
    Matrix x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    ds.times.push_back(t);
    ds.snapshots.push_back(std::move(x));
  }
  return ds;
}

inline SnapshotDataset load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path + "'");
  return read_csv(is);
}

struct HoldoutSplit {
  int held_time = 0;
  SnapshotDataset train;
  Matrix truth;
};

/// Removes an interior snapshot; the remaining snapshots keep their labels.
inline HoldoutSplit make_holdout(const SnapshotDataset& ds, int held_time) {
  const long idx = ds.index_of(held_time);
  if (idx < 0) throw ParameterError("held time " + std::to_string(held_time) + " is not in the dataset");
  if (idx == 0 || idx + 1 == static_cast<long>(ds.size()))
    throw ParameterError("held time " + std::to_string(held_time) + " is a boundary time; hold out an interior one");
  HoldoutSplit split;
  split.held_time = held_time;
  split.truth = ds.snapshots[static_cast<std::size_t>(idx)];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (static_cast<long>(i) == idx) continue;
    split.train.times.push_back(ds.times[i]);
    split.train.snapshots.push_back(ds.snapshots[i]);
  }
  return split;
}

}  // namespace mioflow

#endif  // MIOFLOW_DATASETS_HPP
