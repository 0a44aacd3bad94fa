#ifndef MIOFLOW_CONFIG_HPP
#define MIOFLOW_CONFIG_HPP

// JSON forms of every configuration struct. Readers reject unknown keys and
// wrong types before any work starts; missing keys keep their defaults.

#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mioflow/datasets.hpp"
#include "mioflow/gae.hpp"
#include "mioflow/training.hpp"

namespace mioflow {

using nlohmann::json;

struct MetricSettings {
  std::vector<double> mmd_scales{0.1, 0.5};

  void validate() const {
    if (mmd_scales.empty()) throw ParameterError("metrics: mmd_scales must be non-empty");
    for (double s : mmd_scales)
      if (!(s > 0.0)) throw ParameterError("metrics: mmd scales must be positive");
  }
};

namespace detail {

/// Walks one JSON object, remembering which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ParseError(context_ + ": expected a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ParseError(context_ + "." + key + ": wrong type");
    }
  }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ParseError(context_ + ": unknown key '" + it.key() + "'");
  }

  const std::string& context() const { return context_; }

 private:
  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

inline json kernel_json(const KernelSpec& k) {
  if (const auto* g = std::get_if<GaussianKernel>(&k)) return {{"type", "gaussian"}, {"epsilon", g->epsilon}};
  const auto& a = std::get<AlphaDecayKernel>(k);
  return {{"type", "alpha_decay"}, {"knn", a.knn}, {"decay", a.decay}};
}

inline KernelSpec kernel_from_json(const json& j, const std::string& ctx) {
  ObjectReader r(j, ctx);
  std::string type = "gaussian";
  r.get("type", type);
  if (type == "gaussian") {
    GaussianKernel g;
    r.get("epsilon", g.epsilon);
    r.finish();
    return g;
  }
  if (type == "alpha_decay") {
    AlphaDecayKernel a;
    r.get("knn", a.knn);
    r.get("decay", a.decay);
    r.finish();
    return a;
  }
  throw ParseError(ctx + ".type: unknown kernel '" + type + "'");
}

template <class F>
auto wrap_name(const std::string& ctx, F&& f) {
  try {
    return f();
  } catch (const ParameterError& e) {
    throw ParseError(ctx + ": " + e.what());
  }
}

}  // namespace detail

inline json to_json(const SolverConfig& c) {
  return {{"substeps", c.substeps}, {"scheme", scheme_name(c.scheme)}, {"reset_augment", c.reset_augment}};
}

inline void update_from_json(SolverConfig& c, const json& j, const std::string& ctx = "solver") {
  detail::ObjectReader r(j, ctx);
  r.get("substeps", c.substeps);
  std::string scheme = scheme_name(c.scheme);
  r.get("scheme", scheme);
  c.scheme = detail::wrap_name(ctx + ".scheme", [&] { return parse_scheme(scheme); });
  r.get("reset_augment", c.reset_augment);
  r.finish();
}

inline json to_json(const GaeConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"hidden", c.hidden},
          {"activation", activation_name(c.activation)},
          {"batch_size", c.batch_size},
          {"noise", c.noise},
          {"max_iterations", c.max_iterations},
          {"kernel", detail::kernel_json(c.kernel)},
          {"alpha", c.geodesic.alpha},
          {"max_scale", c.geodesic.max_scale},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"train_decoder", c.train_decoder},
          {"stratified", c.stratified}};
}

inline void update_from_json(GaeConfig& c, const json& j, const std::string& ctx = "gae") {
  detail::ObjectReader r(j, ctx);
  r.get("latent_dim", c.latent_dim);
  r.get("hidden", c.hidden);
  std::string act = activation_name(c.activation);
  r.get("activation", act);
  c.activation = detail::wrap_name(ctx + ".activation", [&] { return parse_activation(act); });
  r.get("batch_size", c.batch_size);
  r.get("noise", c.noise);
  r.get("max_iterations", c.max_iterations);
  if (const json* k = r.find("kernel")) c.kernel = detail::kernel_from_json(*k, ctx + ".kernel");
  r.get("alpha", c.geodesic.alpha);
  r.get("max_scale", c.geodesic.max_scale);
  r.get("learning_rate", c.learning_rate);
  r.get("weight_decay", c.weight_decay);
  r.get("train_decoder", c.train_decoder);
  r.get("stratified", c.stratified);
  r.finish();
}

inline json to_json(const MioflowConfig& c) {
  return {{"lambda_density", c.lambda_density},
          {"lambda_energy", c.lambda_energy},
          {"density_floor", c.density_floor},
          {"density_knn", c.density_knn},
          {"density_reduction", c.density_reduction == DensityReduction::Mean ? "mean" : "sum"},
          {"n_local", c.n_local},
          {"n_global", c.n_global},
          {"batches_per_epoch", c.batches_per_epoch},
          {"batch_size", c.batch_size},
          {"use_gae", c.use_gae},
          {"use_density", c.use_density},
          {"use_noise", c.use_noise},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"hidden", c.hidden},
          {"activation", activation_name(c.activation)},
          {"sigma_init", c.sigma_init}};
}

/// The solver block lives at the top level of a RunConfig, so it is not read here.
inline void update_from_json(MioflowConfig& c, const json& j, const std::string& ctx = "mioflow") {
  detail::ObjectReader r(j, ctx);
  r.get("lambda_density", c.lambda_density);
  r.get("lambda_energy", c.lambda_energy);
  r.get("density_floor", c.density_floor);
  r.get("density_knn", c.density_knn);
  std::string red = c.density_reduction == DensityReduction::Mean ? "mean" : "sum";
  r.get("density_reduction", red);
  if (red == "mean") c.density_reduction = DensityReduction::Mean;
  else if (red == "sum") c.density_reduction = DensityReduction::Sum;
  else throw ParseError(ctx + ".density_reduction: expected 'mean' or 'sum'");
  r.get("n_local", c.n_local);
  r.get("n_global", c.n_global);
  r.get("batches_per_epoch", c.batches_per_epoch);
  r.get("batch_size", c.batch_size);
  r.get("use_gae", c.use_gae);
  r.get("use_density", c.use_density);
  r.get("use_noise", c.use_noise);
  r.get("learning_rate", c.learning_rate);
  r.get("weight_decay", c.weight_decay);
  r.get("hidden", c.hidden);
  std::string act = activation_name(c.activation);
  r.get("activation", act);
  c.activation = detail::wrap_name(ctx + ".activation", [&] { return parse_activation(act); });
  r.get("sigma_init", c.sigma_init);
  r.finish();
}

inline json to_json(const PetalSpec& s) {
  return {{"n_lobes", s.n_lobes}, {"points_per_time", s.points_per_time}, {"timepoints", s.timepoints},
          {"noise", s.noise}};
}

inline void update_from_json(PetalSpec& s, const json& j, const std::string& ctx) {
  detail::ObjectReader r(j, ctx);
  r.get("n_lobes", s.n_lobes);
  r.get("points_per_time", s.points_per_time);
  r.get("timepoints", s.timepoints);
  r.get("noise", s.noise);
  r.finish();
}

inline json to_json(const BifurcationSpec& s) {
  return {{"dim", s.dim}, {"counts", s.counts}, {"asymmetry", s.asymmetry}, {"noise", s.noise},
          {"embedding_seed", s.embedding_seed}};
}

inline void update_from_json(BifurcationSpec& s, const json& j, const std::string& ctx) {
  detail::ObjectReader r(j, ctx);
  r.get("dim", s.dim);
  r.get("counts", s.counts);
  r.get("asymmetry", s.asymmetry);
  r.get("noise", s.noise);
  r.get("embedding_seed", s.embedding_seed);
  r.finish();
}

inline json to_json(const MetricSettings& m) { return {{"mmd_scales", m.mmd_scales}}; }

inline void update_from_json(MetricSettings& m, const json& j, const std::string& ctx = "metrics") {
  detail::ObjectReader r(j, ctx);
  r.get("mmd_scales", m.mmd_scales);
  r.finish();
}

/// Where the snapshots come from: a CSV path or one of the generators.
struct DataSource {
  std::string csv;
  std::string generator;  // "petal" | "bifurcation" | empty
  PetalSpec petal{};
  BifurcationSpec bifurcation{};

  bool empty() const { return csv.empty() && generator.empty(); }

  void validate() const {
    if (!csv.empty() && !generator.empty()) throw ParameterError("data: give either csv or generator, not both");
    if (!generator.empty() && generator != "petal" && generator != "bifurcation")
      throw ParameterError("data: unknown generator '" + generator + "'");
    petal.validate();
    bifurcation.validate();
  }

  /// Generators take the run seed so one seed fixes the whole pipeline.
  SnapshotDataset load(std::uint64_t seed) const {
    validate();
    if (!csv.empty()) return load_csv(csv);
    if (generator == "petal") {
      PetalSpec s = petal;
      s.seed = seed;
      return gen_petal(s);
    }
    if (generator == "bifurcation") {
      BifurcationSpec s = bifurcation;
      s.seed = seed;
      return gen_bifurcation(s);
    }
    throw ParameterError("data: no dataset source given");
  }
};

inline json to_json(const DataSource& d) {
  json j = json::object();
  if (!d.csv.empty()) j["csv"] = d.csv;
  if (!d.generator.empty()) {
    j["generator"] = d.generator;
    if (d.generator == "petal") j["petal"] = to_json(d.petal);
    else j["bifurcation"] = to_json(d.bifurcation);
  }
  return j;
}

inline void update_from_json(DataSource& d, const json& j, const std::string& ctx = "data") {
  detail::ObjectReader r(j, ctx);
  r.get("csv", d.csv);
  r.get("generator", d.generator);
  if (const json* p = r.find("petal")) update_from_json(d.petal, *p, ctx + ".petal");
  if (const json* b = r.find("bifurcation")) update_from_json(d.bifurcation, *b, ctx + ".bifurcation");
  r.finish();
}

struct RunConfig {
  DataSource data{};
  GaeConfig gae{};
  MioflowConfig mioflow{};
  MetricSettings metrics{};
  std::string output_dir = ".";
  std::uint64_t seed = 0;

  /// The solver settings are shared by the flow config.
  SolverConfig& solver() { return mioflow.solver; }

  void validate() const {
    data.validate();
    gae.validate();
    mioflow.validate();
    metrics.validate();
  }
};

inline json to_json(const RunConfig& c) {
  return {{"data", to_json(c.data)},       {"gae", to_json(c.gae)},
          {"mioflow", to_json(c.mioflow)}, {"solver", to_json(c.mioflow.solver)},
          {"metrics", to_json(c.metrics)}, {"output_dir", c.output_dir},
          {"seed", c.seed}};
}

inline void update_from_json(RunConfig& c, const json& j) {
  detail::ObjectReader r(j, "config");
  if (const json* d = r.find("data")) update_from_json(c.data, *d, "config.data");
  if (const json* g = r.find("gae")) update_from_json(c.gae, *g, "config.gae");
  if (const json* m = r.find("mioflow")) update_from_json(c.mioflow, *m, "config.mioflow");
  if (const json* s = r.find("solver")) update_from_json(c.mioflow.solver, *s, "config.solver");
  if (const json* m = r.find("metrics")) update_from_json(c.metrics, *m, "config.metrics");
  r.get("output_dir", c.output_dir);
  r.get("seed", c.seed);
  r.finish();
}

/// Parses and validates a full configuration.
inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  update_from_json(c, j);
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace mioflow

#endif  // MIOFLOW_CONFIG_HPP
