#ifndef MIOFLOW_PLOT_HPP
#define MIOFLOW_PLOT_HPP

// Minimal SVG scatter/line plot: snapshot points as faint markers, trajectories
// as polylines whose segments are colored by time.

#include <array>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include <spdlog/fmt/fmt.h>

#include "mioflow/datasets.hpp"

namespace mioflow {

/// Maps d-dimensional points to the plane: first two coordinates or a d x 2 matrix.
struct Projection {
  std::optional<Matrix> matrix;

  Matrix apply(const Matrix& x) const {
    if (matrix) {
      if (matrix->rows() != x.cols() || matrix->cols() != 2)
        throw ParameterError(fmt::format("projection matrix must be {} x 2, got {} x {}", x.cols(), matrix->rows(),
                                         matrix->cols()));
      return x * *matrix;
    }
    if (x.cols() < 2) throw ParameterError("plot needs at least two coordinates");
    return x.leftCols(2);
  }
};

/// A headerless CSV of d rows with two columns each.
inline Matrix load_projection(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open projection " + path);
  std::vector<std::array<double, 2>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 2) throw ParseError(fmt::format("projection line {}: expected 2 columns", line_no));
    rows.push_back({detail::parse_number(cells[0], line_no), detail::parse_number(cells[1], line_no)});
  }
  if (rows.empty()) throw ParseError("projection " + path + ": no rows");
  Matrix m(static_cast<Eigen::Index>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) << rows[i][0], rows[i][1];
  return m;
}

/// Linear interpolation through a small blue-green-yellow ramp; u in [0, 1].
inline std::string time_color(double u) {
  static constexpr std::array<std::array<double, 3>, 5> ramp{
      {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  u = std::clamp(u, 0.0, 1.0) * (ramp.size() - 1);
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(u), ramp.size() - 2);
  const double f = u - static_cast<double>(i);
  const auto c = [&](int k) { return static_cast<int>(std::lround(ramp[i][k] + f * (ramp[i + 1][k] - ramp[i][k]))); };
  return fmt::format("#{:02x}{:02x}{:02x}", c(0), c(1), c(2));
}

struct PlotPath {
  std::vector<double> times;
  Matrix points;  // already projected, one row per time
};

inline void write_svg(const SnapshotDataset& background, const std::vector<PlotPath>& paths, std::ostream& os,
                      int size = 600) {
  double lo_x = INFINITY, lo_y = INFINITY, hi_x = -INFINITY, hi_y = -INFINITY;
  const auto extend = [&](const Matrix& p) {
    if (p.rows() == 0) return;
    lo_x = std::min(lo_x, p.col(0).minCoeff());
    hi_x = std::max(hi_x, p.col(0).maxCoeff());
    lo_y = std::min(lo_y, p.col(1).minCoeff());
    hi_y = std::max(hi_y, p.col(1).maxCoeff());
  };
  for (const auto& s : background.snapshots) extend(s);
  for (const auto& p : paths) extend(p.points);
  if (!std::isfinite(lo_x)) lo_x = lo_y = 0.0, hi_x = hi_y = 1.0;
  const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-12});
  const double margin = 20.0, scale = (size - 2 * margin) / span;
  const auto px = [&](double x) { return margin + (x - lo_x) * scale; };
  const auto py = [&](double y) { return size - margin - (y - lo_y) * scale; };  // y axis up

  const double t0 = background.times.empty() ? 0.0 : background.times.front();
  const double t1 = background.times.empty() ? 1.0 : background.times.back();
  const auto unit = [&](double t) { return t1 > t0 ? (t - t0) / (t1 - t0) : 0.0; };

  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n",
                    size);
  os << fmt::format("<rect width=\"{0}\" height=\"{0}\" fill=\"white\"/>\n", size);
  os << "<g id=\"snapshots\" fill-opacity=\"0.35\">\n";
  for (std::size_t k = 0; k < background.size(); ++k) {
    const std::string color = time_color(unit(background.times[k]));
    const Matrix& s = background.snapshots[k];
    for (Eigen::Index i = 0; i < s.rows(); ++i)
      os << fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"2.5\" fill=\"{}\"/>\n", px(s(i, 0)), py(s(i, 1)),
                        color);
  }
  os << "</g>\n<g id=\"trajectories\" fill=\"none\" stroke-width=\"1.2\">\n";
  for (const auto& p : paths) {
    for (Eigen::Index i = 0; i + 1 < p.points.rows(); ++i) {
      const double tm = 0.5 * (p.times[static_cast<std::size_t>(i)] + p.times[static_cast<std::size_t>(i) + 1]);
      os << fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"{}\"/>\n",
                        px(p.points(i, 0)), py(p.points(i, 1)), px(p.points(i + 1, 0)), py(p.points(i + 1, 1)),
                        time_color(unit(tm)));
    }
  }
  os << "</g>\n</svg>\n";
}

}  // namespace mioflow

#endif  // MIOFLOW_PLOT_HPP
