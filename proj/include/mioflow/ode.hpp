#ifndef MIOFLOW_ODE_HPP
#define MIOFLOW_ODE_HPP

// Fixed-step integration of the learned vector field with optional Gaussian
// kicks between steps, and exact reverse-mode gradients through every step.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mioflow/common.hpp"
#include "mioflow/net.hpp"

namespace mioflow {

/// f(x, a, t) -> (dx/dt, da/dt) where a are two augmentation coordinates
/// that start at zero on every trajectory.
class VectorField {
 public:
  static constexpr int kAugment = 2;

  VectorField() = default;

  VectorField(MultilayerNet net, int ambient_dim) : net_(std::move(net)), dim_(ambient_dim) {
    if (net_.input_dim() != dim_ + kAugment + 1 || net_.output_dim() != dim_ + kAugment)
      throw ParameterError("vector field network must map d+3 inputs to d+2 outputs");
  }

  static VectorField create(int ambient_dim, const std::vector<int>& hidden, Activation activation, Rng& rng) {
    if (ambient_dim < 1) throw ParameterError("vector field dimension must be positive");
    std::vector<int> dims{ambient_dim + kAugment + 1};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(ambient_dim + kAugment);
    return VectorField(MultilayerNet::create(dims, activation, rng), ambient_dim);
  }

  int ambient_dim() const { return dim_; }
  int state_dim() const { return dim_ + kAugment; }
  const MultilayerNet& net() const { return net_; }
  MultilayerNet& net() { return net_; }

  /// z is batch x (d+2).
  Matrix eval(const Matrix& z, double t, GradientTape* tape = nullptr) const {
    Matrix input(z.rows(), z.cols() + 1);
    input.leftCols(z.cols()) = z;
    input.col(z.cols()).setConstant(t);
    return tape ? net_.forward(input, *tape) : net_.forward(input);
  }

 private:
  MultilayerNet net_;
  int dim_ = 0;
};

/// One signed noise scale per unit interval [i, i+1).
struct SdeParams {
  Vector sigma;
};

enum class Scheme { RK4, EulerMaruyama };

struct SolverConfig {
  int substeps = 10;  // steps per unit of model time
  Scheme scheme = Scheme::RK4;
  bool reset_augment = true;  // zero the augmentation coordinates at every integer time

  void validate() const {
    if (substeps < 1) throw ParameterError("solver substeps must be >= 1");
  }
};

inline std::string scheme_name(Scheme s) { return s == Scheme::RK4 ? "rk4" : "euler_maruyama"; }

inline Scheme parse_scheme(const std::string& name) {
  if (name == "rk4") return Scheme::RK4;
  if (name == "euler_maruyama" || name == "em") return Scheme::EulerMaruyama;
  throw ParameterError("unknown solver scheme '" + name + "'");
}

struct TrajectoryBundle {
  std::vector<double> times;   // times[0] is the start time
  std::vector<Matrix> states;  // batch x d at each entry of times
  std::vector<double> dense_times;
  std::vector<Matrix> dense;   // per-substep states when requested
  Vector energy;               // per-trajectory integral of |f|^2 dt
};

/// Loss value and its gradient with respect to a bundle's outputs.
struct BundleLoss {
  double loss = 0.0;
  std::vector<Matrix> d_states;  // same shapes as bundle.states (empty entries allowed)
  Vector d_energy;               // may be empty
};

struct TrajectoryGradients {
  double loss = 0.0;
  Vector d_params;  // flat layout of the field network
  Vector d_sigma;
  Matrix d_x0;
  TrajectoryBundle bundle;
};

namespace detail {

struct StepRecord {
  double t = 0.0;
  Matrix z;  // state before the step
  GradientTape tapes[4];
  Matrix k[4];
  Matrix noise;  // batch x d, empty without noise
  Eigen::Index sigma_index = -1;
  bool reset_before = false;  // augmentation zeroed before this step
};

inline std::vector<long> grid_steps(const std::vector<double>& times, int substeps) {
  if (times.size() < 2) throw ParameterError("integration needs a start time and at least one target time");
  std::vector<long> steps;
  for (std::size_t i = 1; i < times.size(); ++i) {
    const double span = (times[i] - times[i - 1]) * substeps;
    const long n = std::lround(span);
    if (!(times[i] > times[i - 1])) throw ParameterError("integration times must be strictly increasing");
    if (std::abs(span - static_cast<double>(n)) > 1e-9)
      throw ParameterError("integration times must lie on the solver grid");
    steps.push_back(n);
  }
  return steps;
}

inline TrajectoryBundle simulate(const VectorField& field, const Matrix& x0, const std::vector<double>& times,
                                 const SdeParams* sde, const SolverConfig& cfg, std::uint64_t seed, bool dense,
                                 std::vector<StepRecord>* record) {
  cfg.validate();
  const int d = field.ambient_dim();
  if (x0.cols() != d) throw ParameterError("initial points have the wrong dimension");
  const std::vector<long> steps = grid_steps(times, cfg.substeps);
  const double h = 1.0 / cfg.substeps;
  const double sqrt_h = std::sqrt(h);
  const Eigen::Index batch = x0.rows();
  Rng rng = make_rng(seed);

  Matrix z = Matrix::Zero(batch, field.state_dim());
  z.leftCols(d) = x0;

  TrajectoryBundle out;
  out.times = times;
  out.states.push_back(x0);
  out.energy = Vector::Zero(batch);
  if (dense) {
    out.dense_times.push_back(times.front());
    out.dense.push_back(x0);
  }

  long global_step = 0;
  for (std::size_t seg = 0; seg < steps.size(); ++seg) {
    for (long s = 0; s < steps[seg]; ++s, ++global_step) {
      const double t = times[seg] + static_cast<double>(s) * h;
      StepRecord rec;
      rec.t = t;
      if (cfg.reset_augment && global_step > 0 && std::abs(t - std::round(t)) < 1e-9) {
        z.rightCols(VectorField::kAugment).setZero();
        rec.reset_before = true;
      }
      GradientTape* tp[4] = {nullptr, nullptr, nullptr, nullptr};
      if (record) {
        rec.z = z;
        for (int i = 0; i < 4; ++i) tp[i] = &rec.tapes[i];
      }
      Matrix next;
      if (cfg.scheme == Scheme::RK4) {
        const Matrix k1 = field.eval(z, t, tp[0]);
        const Matrix k2 = field.eval(z + 0.5 * h * k1, t + 0.5 * h, tp[1]);
        const Matrix k3 = field.eval(z + 0.5 * h * k2, t + 0.5 * h, tp[2]);
        const Matrix k4 = field.eval(z + h * k3, t + h, tp[3]);
        next = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out.energy += 0.5 * h * (k2.rowwise().squaredNorm() + k3.rowwise().squaredNorm());
        if (record) rec.k[0] = k1, rec.k[1] = k2, rec.k[2] = k3, rec.k[3] = k4;
      } else {
        const Matrix k1 = field.eval(z, t, tp[0]);
        next = z + h * k1;
        out.energy += h * k1.rowwise().squaredNorm();
        if (record) rec.k[0] = k1;
      }

      if (sde && sde->sigma.size() > 0) {
        const auto idx = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::floor(t + 1e-9)), 0,
                                                  sde->sigma.size() - 1);
        Matrix noise = standard_normal(batch, d, rng);
        next.leftCols(d) += (sde->sigma(idx) * sqrt_h) * noise;
        if (record) {
          rec.noise = std::move(noise);
          rec.sigma_index = idx;
        }
      }

      if (!next.allFinite())
        throw NumericalError("non-finite state at integration step " + std::to_string(global_step) + " (t=" +
                             std::to_string(t) + ")");
      z = std::move(next);
      if (record) record->push_back(std::move(rec));
      if (dense) {
        out.dense_times.push_back(times[seg] + static_cast<double>(s + 1) * h);
        out.dense.push_back(z.leftCols(d));
      }
    }
    out.states.push_back(z.leftCols(d));
  }
  return out;
}

}  // namespace detail

/// Integrates from times[0] to every later entry of times. Noise (when sde
/// is given) is drawn from an RNG seeded with seed, one batch x d block per step.
inline TrajectoryBundle integrate(const VectorField& field, const Matrix& x0, const std::vector<double>& times,
                                  const SdeParams* sde, const SolverConfig& cfg, std::uint64_t seed,
                                  bool dense = false) {
  return detail::simulate(field, x0, times, sde, cfg, seed, dense, nullptr);
}

/// Integration over a single span [t_a, t_b].
inline TrajectoryBundle integrate(const VectorField& field, const Matrix& x0, double t_a, double t_b,
                                  const SdeParams* sde, const SolverConfig& cfg, std::uint64_t seed,
                                  bool dense = false) {
  return integrate(field, x0, std::vector<double>{t_a, t_b}, sde, cfg, seed, dense);
}

/// Forward integration, loss evaluation and backpropagation through every
/// solver stage. Noise draws are held fixed, so sigma enters linearly.
inline TrajectoryGradients integrate_with_gradients(
    const VectorField& field, const Matrix& x0, const std::vector<double>& times, const SdeParams* sde,
    const SolverConfig& cfg, std::uint64_t seed, const std::function<BundleLoss(const TrajectoryBundle&)>& loss_fn) {
  std::vector<detail::StepRecord> records;
  TrajectoryGradients out;
  out.bundle = detail::simulate(field, x0, times, sde, cfg, seed, false, &records);
  const BundleLoss loss = loss_fn(out.bundle);
  out.loss = loss.loss;

  const int d = field.ambient_dim();
  const double h = 1.0 / cfg.substeps;
  const double sqrt_h = std::sqrt(h);
  const std::vector<long> steps = detail::grid_steps(times, cfg.substeps);
  const MultilayerNet& net = field.net();

  out.d_params = Vector::Zero(net.parameter_count());
  out.d_sigma = Vector::Zero(sde ? sde->sigma.size() : 0);
  Matrix g = Matrix::Zero(x0.rows(), field.state_dim());
  const bool has_energy = loss.d_energy.size() == x0.rows();

  const auto add_state_grad = [&](std::size_t snapshot) {
    if (snapshot < loss.d_states.size() && loss.d_states[snapshot].size() > 0) g.leftCols(d) += loss.d_states[snapshot];
  };

  // Map each step to the snapshot that closes it.
  std::vector<long> closes(records.size(), -1);
  {
    long acc = 0;
    for (std::size_t seg = 0; seg < steps.size(); ++seg) {
      acc += steps[seg];
      closes[static_cast<std::size_t>(acc - 1)] = static_cast<long>(seg + 1);
    }
  }

  const auto through_net = [&](const detail::StepRecord& rec, int stage, const Matrix& upstream) {
    const Matrix gin = net.backward(rec.tapes[stage], upstream, out.d_params);
    return Matrix(gin.leftCols(field.state_dim()));
  };

  for (std::size_t s = records.size(); s-- > 0;) {
    const detail::StepRecord& rec = records[s];
    if (closes[s] >= 0) add_state_grad(static_cast<std::size_t>(closes[s]));

    if (rec.sigma_index >= 0)
      out.d_sigma(rec.sigma_index) += sqrt_h * (g.leftCols(d).array() * rec.noise.array()).sum();

    if (cfg.scheme == Scheme::RK4) {
      Matrix gk1 = (h / 6.0) * g;
      Matrix gk2 = (h / 3.0) * g;
      Matrix gk3 = (h / 3.0) * g;
      const Matrix gk4 = (h / 6.0) * g;
      if (has_energy) {
        gk2 += h * (loss.d_energy.asDiagonal() * rec.k[1]);
        gk3 += h * (loss.d_energy.asDiagonal() * rec.k[2]);
      }
      Matrix gz = g;
      const Matrix gu4 = through_net(rec, 3, gk4);
      gz += gu4;
      gk3 += h * gu4;
      const Matrix gu3 = through_net(rec, 2, gk3);
      gz += gu3;
      gk2 += 0.5 * h * gu3;
      const Matrix gu2 = through_net(rec, 1, gk2);
      gz += gu2;
      gk1 += 0.5 * h * gu2;
      gz += through_net(rec, 0, gk1);
      g = std::move(gz);
    } else {
      Matrix gk1 = h * g;
      if (has_energy) gk1 += 2.0 * h * (loss.d_energy.asDiagonal() * rec.k[0]);
      g += through_net(rec, 0, gk1);
    }
    if (rec.reset_before) g.rightCols(VectorField::kAugment).setZero();
  }
  add_state_grad(0);
  out.d_x0 = g.leftCols(d);
  return out;
}

}  // namespace mioflow

#endif  // MIOFLOW_ODE_HPP
