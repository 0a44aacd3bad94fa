#ifndef MIOFLOW_COMMON_HPP
#define MIOFLOW_COMMON_HPP

#include <cstdint>
#include <cstdlib>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace mioflow {

/// Dense row-major storage keeps one observation per contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Every library failure derives from this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument or configuration (maps to CLI exit code 2).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure while running (non-finite state, infeasible solve).
class NumericalError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng{seed}; }

/// Matrix of iid standard normal draws, filled row by row.
inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) z(i, j) = normal(rng);
  return z;
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

/// Shared logger; level taken from MIOFLOW_LOG={error|info|debug} (default: warn).
inline std::shared_ptr<spdlog::logger> logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto lg = spdlog::stderr_color_mt("mioflow");
    lg->set_pattern("[%l] %v");
    lg->set_level(spdlog::level::warn);
    if (const char* env = std::getenv("MIOFLOW_LOG")) {
      std::string_view v(env);
      if (v == "error") lg->set_level(spdlog::level::err);
      else if (v == "info") lg->set_level(spdlog::level::info);
      else if (v == "debug") lg->set_level(spdlog::level::debug);
    }
    return lg;
  }();
  return instance;
}

}  // namespace mioflow

#endif  // MIOFLOW_COMMON_HPP
