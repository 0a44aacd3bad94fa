#ifndef MIOFLOW_EVALUATION_HPP
#define MIOFLOW_EVALUATION_HPP

// Leave-one-out evaluation: train without one interior snapshot, push X_0
// forward to that time, and compare against the held points.

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/fmt/fmt.h>

#include "mioflow/config.hpp"
#include "mioflow/transport.hpp"

namespace mioflow {

struct MetricValues {
  double w1 = 0.0;
  double mmd_gaussian = 0.0;
  double mmd_mean = 0.0;     // |mean difference|
  double mmd_mean_sq = 0.0;  // its square
  double one_nn_mean = 0.0;
  double one_nn_worst_quartile = 0.0;

  json to_json() const {
    return {{"w1", w1},
            {"mmd_gaussian", mmd_gaussian},
            {"mmd_mean", mmd_mean},
            {"mmd_mean_sq", mmd_mean_sq},
            {"one_nn_mean", one_nn_mean},
            {"one_nn_worst_quartile", one_nn_worst_quartile}};
  }

  bool operator==(const MetricValues&) const = default;
};

inline MetricValues compute_metrics(const Matrix& pred, const Matrix& truth, const MetricSettings& settings) {
  if (pred.cols() != truth.cols()) throw ParameterError("metrics: dimension mismatch");
  MetricValues m;
  m.w1 = emd(pred, truth, 1).distance;
  m.mmd_gaussian = mmd_gaussian(pred, truth, settings.mmd_scales);
  m.mmd_mean = mmd_mean(pred, truth, false);
  m.mmd_mean_sq = mmd_mean(pred, truth, true);
  m.one_nn_mean = one_nn_distance(pred, truth, NnAggregate::Mean);
  m.one_nn_worst_quartile = one_nn_distance(pred, truth, NnAggregate::WorstQuartile);
  return m;
}

using PointSetMetric = std::function<double(const Matrix&, const Matrix&)>;

/// Mean of metric(X_{t-1}, X_t) and metric(X_{t+1}, X_t), neighbors by position.
inline double baseline_metric(const SnapshotDataset& data, int held_time, const PointSetMetric& metric) {
  const long pos = data.index_of(held_time);
  if (pos <= 0 || static_cast<std::size_t>(pos) + 1 >= data.size())
    throw ParameterError("baseline: held time must be interior");
  const auto i = static_cast<std::size_t>(pos);
  const Matrix& truth = data.snapshots[i];
  return 0.5 * (metric(data.snapshots[i - 1], truth) + metric(data.snapshots[i + 1], truth));
}

inline MetricValues baseline_metrics(const SnapshotDataset& data, int held_time, const MetricSettings& settings) {
  const long pos = data.index_of(held_time);
  if (pos <= 0 || static_cast<std::size_t>(pos) + 1 >= data.size())
    throw ParameterError("baseline: held time must be interior");
  const auto i = static_cast<std::size_t>(pos);
  const MetricValues a = compute_metrics(data.snapshots[i - 1], data.snapshots[i], settings);
  const MetricValues b = compute_metrics(data.snapshots[i + 1], data.snapshots[i], settings);
  return {0.5 * (a.w1 + b.w1),
          0.5 * (a.mmd_gaussian + b.mmd_gaussian),
          0.5 * (a.mmd_mean + b.mmd_mean),
          0.5 * (a.mmd_mean_sq + b.mmd_mean_sq),
          0.5 * (a.one_nn_mean + b.one_nn_mean),
          0.5 * (a.one_nn_worst_quartile + b.one_nn_worst_quartile)};
}

struct HoldoutRecord {
  std::string setting = "default";
  int held_time = 0;
  MetricValues metrics;
  MetricValues baseline;
  double runtime_seconds = 0.0;  // training wall clock

  json to_json(bool include_runtime = true) const {
    json j = metrics.to_json();
    j["setting"] = setting;
    j["held_time"] = held_time;
    j["baseline"] = baseline.to_json();
    if (include_runtime) j["runtime_seconds"] = runtime_seconds;
    return j;
  }
};

/// Predicted and held points, in ambient coordinates.
struct HoldoutArtifacts {
  Matrix prediction;
  Matrix truth;
};

struct MetricReport {
  std::uint64_t seed = 0;
  json config = json::object();
  std::vector<HoldoutRecord> records;

  json to_json(bool include_runtime = true) const {
    json recs = json::array();
    for (const auto& r : records) recs.push_back(r.to_json(include_runtime));
    return {{"seed", seed}, {"config", config}, {"records", recs}};
  }

  /// One row per record plus one baseline row per held time.
  std::string table() const {
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"setting", "held", "W1", "MMD(G)", "MMD(M)", "MMD(M)^2", "1NN mean", "1NN worst25", "runtime_s"});
    const auto cells = [](const std::string& name, int held, const MetricValues& m, std::optional<double> runtime) {
      return std::vector<std::string>{name,
                                      std::to_string(held),
                                      fmt::format("{:.4f}", m.w1),
                                      fmt::format("{:.4f}", m.mmd_gaussian),
                                      fmt::format("{:.4f}", m.mmd_mean),
                                      fmt::format("{:.4f}", m.mmd_mean_sq),
                                      fmt::format("{:.4f}", m.one_nn_mean),
                                      fmt::format("{:.4f}", m.one_nn_worst_quartile),
                                      runtime ? fmt::format("{:.2f}", *runtime) : std::string("-")};
    };
    std::vector<int> baseline_done;
    for (const auto& r : records) {
      if (std::find(baseline_done.begin(), baseline_done.end(), r.held_time) == baseline_done.end()) {
        rows.push_back(cells("baseline", r.held_time, r.baseline, std::nullopt));
        baseline_done.push_back(r.held_time);
      }
      rows.push_back(cells(r.setting, r.held_time, r.metrics, r.runtime_seconds));
    }
    std::vector<std::size_t> width(rows.front().size(), 0);
    for (const auto& row : rows)
      for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    std::string out;
    for (const auto& row : rows) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        if (c == 0) out += fmt::format("{:<{}}", row[c], width[c]);
        else out += fmt::format("  {:>{}}", row[c], width[c]);
      }
      out += '\n';
    }
    return out;
  }
};

namespace detail {

inline std::uint64_t prediction_seed(std::uint64_t seed) { return seed ^ 0x2545f4914f6cdd1dULL; }

}  // namespace detail

/// Trains on the split (the GAE first when gae_cfg is given), integrates X_0 to
/// the held time, decodes when needed and scores against the held snapshot.
inline HoldoutRecord evaluate_holdout(const SnapshotDataset& data, int held_time, const GaeConfig* gae_cfg,
                                      MioflowConfig cfg, std::uint64_t seed, const MetricSettings& settings = {},
                                      TrainingHooks hooks = {}, HoldoutArtifacts* artifacts = nullptr) {
  settings.validate();
  const HoldoutSplit split = make_holdout(data, held_time);
  cfg.seed = seed;
  cfg.use_gae = gae_cfg != nullptr;
  cfg.validate();

  const auto start = std::chrono::steady_clock::now();
  std::optional<GeodesicAutoencoder> gae;
  if (gae_cfg) {
    if (!gae_cfg->train_decoder) throw ParameterError("evaluation needs a decoder to map predictions back");
    gae = train_gae(split.train, *gae_cfg, seed).model;
  }
  const MioflowResult trained = train_mioflow(split.train, gae ? &*gae : nullptr, cfg, std::move(hooks));
  const double runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const std::vector<double> times{static_cast<double>(trained.working.times.front()), static_cast<double>(held_time)};
  const TrajectoryBundle b = predict(trained.model, trained.working.snapshots.front(), times, cfg,
                                     detail::prediction_seed(seed));
  const Matrix pred = gae ? gae->decode(b.states.back()) : b.states.back();
  if (!pred.allFinite()) throw NumericalError("evaluation: non-finite prediction");

  HoldoutRecord rec;
  rec.held_time = held_time;
  rec.metrics = compute_metrics(pred, split.truth, settings);
  rec.baseline = baseline_metrics(data, held_time, settings);
  rec.runtime_seconds = runtime;
  if (artifacts) *artifacts = {pred, split.truth};
  logger()->info("held t={} W1={:.4f} (baseline {:.4f}) in {:.1f}s", held_time, rec.metrics.w1, rec.baseline.w1,
                 runtime);
  return rec;
}

struct AblationAxes {
  std::vector<bool> gae{false};
  std::vector<KernelSpec> kernels;  // empty: the base GAE kernel only
  std::vector<bool> density{true};
};

struct AblationCell {
  bool gae = false;
  KernelSpec kernel;
  bool density = true;

  /// The kernel only matters with the GAE on.
  std::string label() const {
    return fmt::format("gae={} kernel={} density={}", gae ? "on" : "off", gae ? kernel_name(kernel) : "-",
                       density ? "on" : "off");
  }
};

inline std::vector<AblationCell> ablation_cells(const AblationAxes& axes, const GaeConfig& base_gae) {
  const std::vector<KernelSpec> kernels = axes.kernels.empty() ? std::vector<KernelSpec>{base_gae.kernel} : axes.kernels;
  if (axes.gae.empty() || axes.density.empty()) throw ParameterError("ablation: every axis needs at least one value");
  std::vector<AblationCell> cells;
  for (bool g : axes.gae)
    for (const auto& k : kernels)
      for (bool d : axes.density) cells.push_back({g, k, d});
  return cells;
}

/// Cartesian product of the axes for every held time. Cells that resolve to the
/// same setting are evaluated once. Results do not depend on jobs.
inline MetricReport ablation_suite(const SnapshotDataset& data, const std::vector<int>& held_times,
                                   const AblationAxes& axes, const GaeConfig& base_gae, const MioflowConfig& base,
                                   std::uint64_t seed, const MetricSettings& settings = {}, int jobs = 1,
                                   std::vector<HoldoutArtifacts>* artifacts = nullptr) {
  if (held_times.empty()) throw ParameterError("ablation: no held times given");
  if (jobs < 1) throw ParameterError("ablation: jobs must be >= 1");
  const std::vector<AblationCell> cells = ablation_cells(axes, base_gae);

  struct Job {
    int held;
    AblationCell cell;
    std::string key;
  };
  std::vector<Job> unique;
  std::vector<std::size_t> slot;  // record -> unique job
  for (int held : held_times) {
    make_holdout(data, held);  // fail fast on a boundary time
    for (const auto& c : cells) {
      const std::string key = std::to_string(held) + "|" + c.label() +
                              (c.gae ? "|" + detail::kernel_json(c.kernel).dump() : std::string());
      auto it = std::find_if(unique.begin(), unique.end(), [&](const Job& j) { return j.key == key; });
      if (it == unique.end()) {
        slot.push_back(unique.size());
        unique.push_back({held, c, key});
      } else {
        slot.push_back(static_cast<std::size_t>(it - unique.begin()));
      }
    }
  }

  std::vector<HoldoutRecord> results(unique.size());
  std::vector<HoldoutArtifacts> arts(unique.size());
  std::vector<std::exception_ptr> errors(unique.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < unique.size(); i = next++) {
      try {
        const Job& job = unique[i];
        GaeConfig g = base_gae;
        g.kernel = job.cell.kernel;
        MioflowConfig m = base;
        m.use_density = job.cell.density;
        results[i] = evaluate_holdout(data, job.held, job.cell.gae ? &g : nullptr, m, seed, settings, {}, &arts[i]);
        results[i].setting = job.cell.label();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int threads = std::min<int>(jobs, static_cast<int>(unique.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  MetricReport report;
  report.seed = seed;
  report.config = {{"gae", to_json(base_gae)},
                   {"mioflow", to_json(base)},
                   {"solver", to_json(base.solver)},
                   {"metrics", to_json(settings)}};
  for (std::size_t r = 0; r < slot.size(); ++r) {
    report.records.push_back(results[slot[r]]);
    if (artifacts) artifacts->push_back(arts[slot[r]]);
  }
  return report;
}

}  // namespace mioflow

#endif  // MIOFLOW_EVALUATION_HPP
