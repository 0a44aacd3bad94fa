#ifndef MIOFLOW_TRAINING_HPP
#define MIOFLOW_TRAINING_HPP

// Loss assembly and the local/global training schedule for the flow model.

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mioflow/datasets.hpp"
#include "mioflow/gae.hpp"
#include "mioflow/ode.hpp"
#include "mioflow/transport.hpp"

namespace mioflow {

/// Sum: the hinge terms summed over predicted points and neighbors.
/// Mean: their average, which keeps the term on the scale of the uniformly
/// weighted transport cost.
enum class DensityReduction { Mean, Sum };

struct MioflowConfig {
  double lambda_density = 1.0;
  double lambda_energy = 0.0;
  double density_floor = 0.01;  // h
  int density_knn = 5;
  DensityReduction density_reduction = DensityReduction::Mean;
  int n_local = 30;
  int n_global = 15;
  int batches_per_epoch = 20;
  int batch_size = 60;  // per time
  bool use_gae = false;
  bool use_density = true;
  bool use_noise = true;
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  std::vector<int> hidden{16, 32, 16};
  Activation activation = Activation::LeakyReLU;
  double sigma_init = 0.1;
  SolverConfig solver{};
  std::uint64_t seed = 0;

  void validate() const {
    if (lambda_density < 0.0 || lambda_energy < 0.0) throw ParameterError("loss weights must be >= 0");
    if (!(density_floor > 0.0)) throw ParameterError("density floor h must be positive");
    if (density_knn < 1) throw ParameterError("density knn must be >= 1");
    if (n_local < 0 || n_global < 0) throw ParameterError("epoch counts must be >= 0");
    if (batches_per_epoch < 1) throw ParameterError("batches_per_epoch must be >= 1");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ParameterError("learning rate must be positive");
    if (weight_decay < 0.0) throw ParameterError("weight decay must be >= 0");
    for (int h : hidden)
      if (h < 1) throw ParameterError("hidden widths must be positive");
    solver.validate();
  }
};

struct LossBreakdown {
  double l_m = 0.0;
  double l_e = 0.0;
  double l_d = 0.0;
  double total = 0.0;
};

/// Sum over times of the squared-W2 transport cost between predicted and
/// observed sets. grads (optional) receives the fixed-plan gradient per prediction.
inline double marginal_loss(const std::vector<Matrix>& preds, const std::vector<Matrix>& data,
                            std::vector<Matrix>* grads = nullptr) {
  if (preds.size() != data.size()) throw ParameterError("marginal loss: prediction and data counts differ");
  if (grads) grads->assign(preds.size(), Matrix());
  double total = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].rows() < 1) throw ParameterError("marginal loss: empty predicted set");
    const auto a = DiscreteDistribution::uniform(preds[i]);
    const auto b = DiscreteDistribution::uniform(data[i]);
    const EmdResult r = emd(a, b, 2);
    total += r.plan.cost;
    if (grads) (*grads)[i] = emd_gradient(a, b, r.plan);
  }
  return total;
}

/// lambda_e times the mean accumulated squared speed over trajectories.
inline double energy_loss(const TrajectoryBundle& bundle, double lambda_e) {
  if (lambda_e == 0.0 || bundle.energy.size() == 0) return 0.0;
  return lambda_e * bundle.energy.mean();
}

/// lambda_d * reduce_{x, i<=k} max(0, d_(i)(x) - h) with d_(i) the i-th
/// smallest distance from x to the observed points.
inline double density_loss(const Matrix& pred, const Matrix& data, int k, double h, double lambda_d,
                           Matrix* grad = nullptr, DensityReduction reduction = DensityReduction::Mean) {
  if (data.rows() < k) throw ParameterError("density loss: observed set has fewer than k points");
  if (grad) *grad = Matrix::Zero(pred.rows(), pred.cols());
  if (lambda_d == 0.0 || pred.rows() == 0) return 0.0;
  const double weight =
      reduction == DensityReduction::Mean ? lambda_d / static_cast<double>(pred.rows() * k) : lambda_d;
  double total = 0.0;
  std::vector<std::pair<double, Eigen::Index>> dist(static_cast<std::size_t>(data.rows()));
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.rows(); ++j)
      dist[static_cast<std::size_t>(j)] = {(pred.row(i) - data.row(j)).norm(), j};
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int q = 0; q < k; ++q) {
      const auto [d, j] = dist[static_cast<std::size_t>(q)];
      if (d <= h) continue;
      total += d - h;
      if (grad) grad->row(i) += weight * (pred.row(i) - data.row(j)) / d;
    }
  }
  return weight * total;
}

/// Vector field and noise scales, in the coordinates training ran in.
struct MioflowModel {
  VectorField field;
  SdeParams sde;
  bool use_gae = false;

  static MioflowModel create(int dim, int intervals, const MioflowConfig& cfg, Rng& rng) {
    MioflowModel m;
    m.field = VectorField::create(dim, cfg.hidden, cfg.activation, rng);
    m.sde.sigma = Vector::Constant(std::max(1, intervals), cfg.sigma_init);
    m.use_gae = cfg.use_gae;
    return m;
  }

  int dim() const { return field.ambient_dim(); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["kind"] = "mioflow";
    j["dim"] = dim();
    j["use_gae"] = use_gae;
    j["sigma"] = std::vector<double>(sde.sigma.data(), sde.sigma.data() + sde.sigma.size());
    j["field"] = field.net().to_json();
    return j;
  }

  static MioflowModel from_json(const nlohmann::json& j) {
    try {
      if (j.at("format_version").get<int>() != 1 || j.at("kind").get<std::string>() != "mioflow")
        throw ParseError("not a version 1 flow checkpoint");
      MioflowModel m;
      m.field = VectorField(MultilayerNet::from_json(j.at("field")), j.at("dim").get<int>());
      const auto sigma = j.at("sigma").get<std::vector<double>>();
      if (sigma.empty()) throw ParseError("flow checkpoint has no noise scales");
      m.sde.sigma = Eigen::Map<const Vector>(sigma.data(), static_cast<Eigen::Index>(sigma.size()));
      m.use_gae = j.at("use_gae").get<bool>();
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed flow checkpoint: ") + e.what());
    } catch (const ParameterError& e) {
      throw ParseError(std::string("malformed flow checkpoint: ") + e.what());
    }
  }
};

/// One supervised integration: start batch at times[0], targets at times[1..].
struct StepProblem {
  std::vector<double> times;
  Matrix x0;
  std::vector<Matrix> targets;      // batches compared by transport
  std::vector<Matrix> references;   // full observed snapshots for the density term
};

struct StepResult {
  LossBreakdown loss;
  Vector d_params;
  Vector d_sigma;
};

namespace detail {

inline BundleLoss assemble_loss(const TrajectoryBundle& b, const StepProblem& p, const MioflowConfig& cfg,
                                LossBreakdown& out) {
  const std::vector<Matrix> preds(b.states.begin() + 1, b.states.end());
  std::vector<Matrix> grads;
  BundleLoss bl;
  out.l_m = marginal_loss(preds, p.targets, &grads);
  bl.d_states.assign(b.states.size(), Matrix());
  for (std::size_t i = 0; i < grads.size(); ++i) bl.d_states[i + 1] = std::move(grads[i]);

  out.l_d = 0.0;
  if (cfg.use_density && cfg.lambda_density > 0.0) {
    for (std::size_t i = 0; i < preds.size(); ++i) {
      Matrix g;
      out.l_d += density_loss(preds[i], p.references[i], cfg.density_knn, cfg.density_floor, cfg.lambda_density, &g,
                                cfg.density_reduction);
      bl.d_states[i + 1] += g;
    }
  }

  out.l_e = energy_loss(b, cfg.lambda_energy);
  if (cfg.lambda_energy > 0.0)
    bl.d_energy = Vector::Constant(b.energy.size(), cfg.lambda_energy / static_cast<double>(b.energy.size()));
  out.total = out.l_m + out.l_e + out.l_d;
  bl.loss = out.total;
  return bl;
}

}  // namespace detail

/// Composite loss only (no gradients), with noise drawn from noise_seed.
inline LossBreakdown composite_loss(const MioflowModel& model, const StepProblem& p, const MioflowConfig& cfg,
                                    std::uint64_t noise_seed) {
  const SdeParams* sde = cfg.use_noise ? &model.sde : nullptr;
  const TrajectoryBundle b = integrate(model.field, p.x0, p.times, sde, cfg.solver, noise_seed);
  LossBreakdown out;
  detail::assemble_loss(b, p, cfg, out);
  return out;
}

/// Composite loss and its gradients with respect to the field parameters and sigma.
inline StepResult composite_gradients(const MioflowModel& model, const StepProblem& p, const MioflowConfig& cfg,
                                      std::uint64_t noise_seed) {
  const SdeParams* sde = cfg.use_noise ? &model.sde : nullptr;
  StepResult r;
  const TrajectoryGradients g =
      integrate_with_gradients(model.field, p.x0, p.times, sde, cfg.solver, noise_seed,
                               [&](const TrajectoryBundle& b) { return detail::assemble_loss(b, p, cfg, r.loss); });
  r.d_params = g.d_params;
  r.d_sigma = sde ? g.d_sigma : Vector::Zero(model.sde.sigma.size());
  return r;
}

struct TrainingLogEntry {
  int epoch = 0;
  std::string phase;  // "local" or "global"
  long step = 0;
  LossBreakdown loss;
  std::vector<double> sigma;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"phase", phase}, {"step", step}, {"l_m", loss.l_m},   {"l_e", loss.l_e},
            {"l_d", loss.l_d}, {"total", loss.total}, {"sigma", sigma}};
  }
};

inline void write_jsonl(const std::vector<TrainingLogEntry>& log, std::ostream& os) {
  for (const auto& e : log) os << e.to_json().dump() << '\n';
}

/// Called with a time label whenever training reads that snapshot.
struct TrainingHooks {
  std::function<void(int)> on_data_access;
};

/// Per-time batches without replacement: a shuffled permutation is consumed
/// in order and reshuffled when exhausted or at the start of an epoch.
class SnapshotSampler {
 public:
  explicit SnapshotSampler(Eigen::Index n) : perm_(static_cast<std::size_t>(n)) {
    std::iota(perm_.begin(), perm_.end(), Eigen::Index{0});
  }

  void reshuffle(Rng& rng) {
    std::shuffle(perm_.begin(), perm_.end(), rng);
    cursor_ = 0;
  }

  std::vector<Eigen::Index> draw(int batch, Rng& rng) {
    const auto n = perm_.size();
    if (static_cast<std::size_t>(batch) >= n) {
      std::vector<Eigen::Index> all(n);
      std::iota(all.begin(), all.end(), Eigen::Index{0});
      return all;
    }
    if (cursor_ + static_cast<std::size_t>(batch) > n) reshuffle(rng);
    std::vector<Eigen::Index> out(perm_.begin() + static_cast<long>(cursor_),
                                  perm_.begin() + static_cast<long>(cursor_) + batch);
    cursor_ += static_cast<std::size_t>(batch);
    return out;
  }

 private:
  std::vector<Eigen::Index> perm_;
  std::size_t cursor_ = 0;
};

/// Mutable state shared by the epochs of one run.
class MioflowTrainer {
 public:
  MioflowTrainer(const SnapshotDataset& data, MioflowModel& model, const MioflowConfig& cfg, TrainingHooks hooks = {})
      : data_(data), model_(model), cfg_(cfg), hooks_(std::move(hooks)), rng_(make_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL)),
        field_state_(cfg.learning_rate, cfg.weight_decay), sigma_state_(cfg.learning_rate, 0.0) {
    cfg_.validate();
    data_.validate();
    if (model_.dim() != data_.dim()) throw ParameterError("model dimension differs from data dimension");
    for (const auto& s : data_.snapshots) {
      samplers_.emplace_back(s.rows());
      if (cfg_.use_density && cfg_.lambda_density > 0.0 && s.rows() < cfg_.density_knn)
        throw ParameterError("density loss: a snapshot has fewer than k points");
    }
  }

  /// One AdamW step per (batch, interval) pair, predicting only the next time.
  std::vector<TrainingLogEntry> local_epoch(int epoch) {
    begin_epoch();
    std::vector<TrainingLogEntry> log;
    for (int b = 0; b < cfg_.batches_per_epoch; ++b) {
      for (std::size_t i = 0; i + 1 < data_.size(); ++i) {
        StepProblem p;
        p.times = {static_cast<double>(data_.times[i]), static_cast<double>(data_.times[i + 1])};
        p.x0 = batch(i);
        p.targets = {batch(i + 1)};
        p.references = {reference(i + 1)};
        log.push_back(step(p, epoch, "local"));
      }
    }
    return log;
  }

  /// One AdamW step per batch, integrating from the first time through all others.
  std::vector<TrainingLogEntry> global_epoch(int epoch) {
    begin_epoch();
    std::vector<TrainingLogEntry> log;
    for (int b = 0; b < cfg_.batches_per_epoch; ++b) {
      StepProblem p;
      for (int t : data_.times) p.times.push_back(static_cast<double>(t));
      p.x0 = batch(0);
      for (std::size_t i = 1; i < data_.size(); ++i) {
        p.targets.push_back(batch(i));
        p.references.push_back(reference(i));
      }
      log.push_back(step(p, epoch, "global"));
    }
    return log;
  }

 private:
  void begin_epoch() {
    for (auto& s : samplers_) s.reshuffle(rng_);
  }

  Matrix batch(std::size_t i) {
    touch(i);
    const Matrix& x = data_.snapshots[i];
    const auto idx = samplers_[i].draw(cfg_.batch_size, rng_);
    Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = x.row(idx[r]);
    return out;
  }

  const Matrix& reference(std::size_t i) {
    touch(i);
    return data_.snapshots[i];
  }

  void touch(std::size_t i) {
    if (hooks_.on_data_access) hooks_.on_data_access(data_.times[i]);
  }

  TrainingLogEntry step(const StepProblem& p, int epoch, const char* phase) {
    // Each phase runs its own optimizer.
    if (phase != phase_) {
      field_state_ = AdamWState(cfg_.learning_rate, cfg_.weight_decay);
      sigma_state_ = AdamWState(cfg_.learning_rate, 0.0);
      phase_ = phase;
    }
    const std::uint64_t noise_seed = rng_();
    const StepResult r = composite_gradients(model_, p, cfg_, noise_seed);
    if (!std::isfinite(r.loss.total))
      throw NumericalError(std::string(phase) + " step " + std::to_string(step_) + ": non-finite loss");
    adamw_step(field_state_, model_.field.net(), r.d_params);
    if (cfg_.use_noise) adamw_step(sigma_state_, model_.sde.sigma, r.d_sigma);
    TrainingLogEntry e;
    e.epoch = epoch;
    e.phase = phase;
    e.step = step_++;
    e.loss = r.loss;
    e.sigma.assign(model_.sde.sigma.data(), model_.sde.sigma.data() + model_.sde.sigma.size());
    return e;
  }

  const SnapshotDataset& data_;
  MioflowModel& model_;
  MioflowConfig cfg_;
  TrainingHooks hooks_;
  Rng rng_;
  AdamWState field_state_;
  AdamWState sigma_state_;
  std::vector<SnapshotSampler> samplers_;
  long step_ = 0;
  std::string phase_ = "local";
};

inline std::vector<TrainingLogEntry> train_local_epoch(MioflowModel& model, const SnapshotDataset& data,
                                                       const MioflowConfig& cfg, int epoch = 0) {
  return MioflowTrainer(data, model, cfg).local_epoch(epoch);
}

inline std::vector<TrainingLogEntry> train_global_epoch(MioflowModel& model, const SnapshotDataset& data,
                                                        const MioflowConfig& cfg, int epoch = 0) {
  return MioflowTrainer(data, model, cfg).global_epoch(epoch);
}

struct MioflowResult {
  MioflowModel model;
  std::vector<TrainingLogEntry> log;
  SnapshotDataset working;  // training data in the coordinates the flow lives in
};

/// Encodes the data once when use_gae is set, then runs the local epochs
/// followed by the global epochs.
inline MioflowResult train_mioflow(const SnapshotDataset& data, const GeodesicAutoencoder* gae,
                                   const MioflowConfig& cfg, TrainingHooks hooks = {}) {
  cfg.validate();
  data.validate();
  if (cfg.use_gae && gae == nullptr) throw ParameterError("use_gae is set but no trained encoder was supplied");
  MioflowResult result;
  result.working = cfg.use_gae ? gae->encode(data) : data;

  Rng rng = make_rng(cfg.seed);
  const int intervals = result.working.times.back();
  result.model = MioflowModel::create(static_cast<int>(result.working.dim()), intervals, cfg, rng);

  MioflowTrainer trainer(result.working, result.model, cfg, std::move(hooks));
  for (int e = 0; e < cfg.n_local; ++e) {
    auto log = trainer.local_epoch(e);
    result.log.insert(result.log.end(), log.begin(), log.end());
  }
  for (int e = 0; e < cfg.n_global; ++e) {
    auto log = trainer.global_epoch(cfg.n_local + e);
    result.log.insert(result.log.end(), log.begin(), log.end());
  }
  if (!result.log.empty())
    logger()->info("training finished: {} steps, final total loss {:.6g}", result.log.size(),
                   result.log.back().loss.total);
  return result;
}

/// Integrates x0 from t_start through the given times with the trained noise.
inline TrajectoryBundle predict(const MioflowModel& model, const Matrix& x0, const std::vector<double>& times,
                                const MioflowConfig& cfg, std::uint64_t seed, bool dense = false) {
  return integrate(model.field, x0, times, cfg.use_noise ? &model.sde : nullptr, cfg.solver, seed, dense);
}

}  // namespace mioflow

#endif  // MIOFLOW_TRAINING_HPP
