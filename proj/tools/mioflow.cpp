// mioflow: data generation, GAE and flow training, holdout evaluation and
// trajectory export from one binary.
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "mioflow/config.hpp"
#include "mioflow/evaluation.hpp"
#include "mioflow/plot.hpp"

namespace fs = std::filesystem;
using namespace mioflow;

namespace {

template <class T>
void set_if(const std::optional<T>& flag, T& target) {
  if (flag) target = *flag;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("failed writing " + path);
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(1) + "\n"); }

std::string join(const std::vector<long>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Shared flag groups. Each flag is optional so that a config file supplies the
// value unless the flag is given.

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration; flags override it")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "random seed");
  }

  RunConfig load() const {
    RunConfig rc = config.empty() ? RunConfig{} : load_run_config(config);
    set_if(seed, rc.seed);
    return rc;
  }
};

struct DataFlags {
  std::string csv;

  void add(CLI::App* app, bool required) {
    auto* o = app->add_option("--data,-d", csv, "snapshot CSV (t,x0,...)");
    if (required) o->required();
  }

  SnapshotDataset load(const RunConfig& rc) const {
    if (!csv.empty()) return load_csv(csv);
    if (rc.data.empty()) throw ParameterError("no dataset: pass --data or set data in the config");
    return rc.data.load(rc.seed);
  }
};

struct GaeFlags {
  std::optional<int> latent_dim, batch_size, iters, knn, max_scale;
  std::optional<std::vector<int>> hidden;
  std::optional<std::string> activation, kernel;
  std::optional<double> noise, epsilon, decay, alpha, lr, weight_decay;
  bool no_decoder = false, stratified = false;

  void add(CLI::App* app, const std::string& prefix = "") {
    app->add_option("--" + prefix + "latent-dim", latent_dim, "latent dimension");
    app->add_option("--" + prefix + "hidden", hidden, "encoder hidden widths")->delimiter(',');
    app->add_option("--" + prefix + "activation", activation, "relu|leaky_relu|celu");
    app->add_option("--" + prefix + "batch-size", batch_size, "points per batch");
    app->add_option("--" + prefix + "noise", noise, "denoising noise scale");
    app->add_option("--" + prefix + "iters", iters, "training iterations");
    app->add_option("--" + prefix + "kernel", kernel, "gaussian|alpha_decay");
    app->add_option("--" + prefix + "epsilon", epsilon, "Gaussian kernel bandwidth");
    app->add_option("--" + prefix + "knn", knn, "alpha-decay neighbor count");
    app->add_option("--" + prefix + "decay", decay, "alpha-decay exponent");
    app->add_option("--" + prefix + "alpha", alpha, "anisotropy exponent");
    app->add_option("--" + prefix + "max-scale", max_scale, "largest dyadic scale K");
    app->add_option("--" + prefix + "lr", lr, "learning rate");
    app->add_option("--" + prefix + "weight-decay", weight_decay, "AdamW weight decay");
    app->add_flag("--" + prefix + "no-decoder", no_decoder, "train the encoder only");
    app->add_flag("--" + prefix + "stratified", stratified, "draw batches evenly across times");
  }

  void apply_to(GaeConfig& g) const {
    set_if(latent_dim, g.latent_dim);
    set_if(hidden, g.hidden);
    if (activation) g.activation = parse_activation(*activation);
    set_if(batch_size, g.batch_size);
    set_if(noise, g.noise);
    set_if(iters, g.max_iterations);
    if (kernel) {
      if (*kernel == "gaussian") {
        if (!std::holds_alternative<GaussianKernel>(g.kernel)) g.kernel = GaussianKernel{};
      } else if (*kernel == "alpha_decay") {
        if (!std::holds_alternative<AlphaDecayKernel>(g.kernel)) g.kernel = AlphaDecayKernel{};
      } else {
        throw ParameterError("unknown kernel '" + *kernel + "'");
      }
    }
    if (auto* gk = std::get_if<GaussianKernel>(&g.kernel)) {
      set_if(epsilon, gk->epsilon);
    } else {
      auto& ak = std::get<AlphaDecayKernel>(g.kernel);
      set_if(knn, ak.knn);
      set_if(decay, ak.decay);
    }
    set_if(alpha, g.geodesic.alpha);
    set_if(max_scale, g.geodesic.max_scale);
    set_if(lr, g.learning_rate);
    set_if(weight_decay, g.weight_decay);
    if (no_decoder) g.train_decoder = false;
    if (stratified) g.stratified = true;
    g.validate();
  }
};

struct FlowFlags {
  std::optional<double> lambda_d, lambda_e, density_floor, lr, weight_decay, sigma_init;
  std::optional<int> density_knn, n_local, n_global, batches, batch_size, substeps;
  std::optional<std::string> density_reduction, activation, scheme;
  std::optional<std::vector<int>> hidden;
  bool no_density = false, no_noise = false;

  void add(CLI::App* app) {
    app->add_option("--lambda-d", lambda_d, "density loss weight");
    app->add_option("--lambda-e", lambda_e, "energy loss weight");
    app->add_option("--density-floor", density_floor, "density hinge floor h");
    app->add_option("--density-knn", density_knn, "neighbors in the density loss");
    app->add_option("--density-reduction", density_reduction, "mean|sum");
    app->add_option("--n-local", n_local, "local epochs");
    app->add_option("--n-global", n_global, "global epochs");
    app->add_option("--batches", batches, "batches per epoch");
    app->add_option("--flow-batch-size", batch_size, "points per time per batch");
    app->add_option("--flow-lr", lr, "learning rate");
    app->add_option("--flow-weight-decay", weight_decay, "AdamW weight decay");
    app->add_option("--flow-hidden", hidden, "vector field hidden widths")->delimiter(',');
    app->add_option("--flow-activation", activation, "relu|leaky_relu|celu");
    app->add_option("--sigma-init", sigma_init, "initial noise scale");
    app->add_option("--substeps", substeps, "solver steps per unit time");
    app->add_option("--scheme", scheme, "rk4|euler_maruyama");
    app->add_flag("--no-density", no_density, "disable the density loss");
    app->add_flag("--no-noise", no_noise, "deterministic flow");
  }

  void apply_to(MioflowConfig& c) const {
    set_if(lambda_d, c.lambda_density);
    set_if(lambda_e, c.lambda_energy);
    set_if(density_floor, c.density_floor);
    set_if(density_knn, c.density_knn);
    if (density_reduction) {
      if (*density_reduction == "mean") c.density_reduction = DensityReduction::Mean;
      else if (*density_reduction == "sum") c.density_reduction = DensityReduction::Sum;
      else throw ParameterError("--density-reduction must be mean or sum");
    }
    set_if(n_local, c.n_local);
    set_if(n_global, c.n_global);
    set_if(batches, c.batches_per_epoch);
    set_if(batch_size, c.batch_size);
    set_if(lr, c.learning_rate);
    set_if(weight_decay, c.weight_decay);
    set_if(hidden, c.hidden);
    if (activation) c.activation = parse_activation(*activation);
    set_if(sigma_init, c.sigma_init);
    set_if(substeps, c.solver.substeps);
    if (scheme) c.solver.scheme = parse_scheme(*scheme);
    if (no_density) c.use_density = false;
    if (no_noise) c.use_noise = false;
    c.validate();
  }
};

/// Drops one interior time from the training data when requested.
SnapshotDataset maybe_hold_out(const SnapshotDataset& ds, std::optional<int> held) {
  return held ? make_holdout(ds, *held).train : ds;
}

// ---------------------------------------------------------------------------

struct GenDataCmd {
  CommonFlags common;
  std::string generator, out;
  std::optional<int> lobes, points, timepoints, dim;
  std::optional<double> noise, asymmetry;
  std::optional<std::vector<int>> counts;
  std::optional<std::uint64_t> embedding_seed;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("gen-data", "write a synthetic snapshot dataset");
    common.add(app);
    app->add_option("generator", generator, "petal|bifurcation")->required()->check(CLI::IsMember({"petal", "bifurcation"}));
    app->add_option("-o,--out", out, "output CSV")->required();
    app->add_option("--lobes", lobes, "petal: number of lobes");
    app->add_option("--points", points, "petal: points per time");
    app->add_option("--timepoints", timepoints, "petal: number of times");
    app->add_option("--dim", dim, "bifurcation: ambient dimension");
    app->add_option("--counts", counts, "bifurcation: points per time")->delimiter(',');
    app->add_option("--asymmetry", asymmetry, "bifurcation: branch asymmetry");
    app->add_option("--embedding-seed", embedding_seed, "bifurcation: seed of the isometric embedding");
    app->add_option("--noise", noise, "isotropic noise scale");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig rc = common.load();
    DataSource src = rc.data;
    src.csv.clear();
    src.generator = generator;
    set_if(lobes, src.petal.n_lobes);
    set_if(points, src.petal.points_per_time);
    set_if(timepoints, src.petal.timepoints);
    set_if(dim, src.bifurcation.dim);
    set_if(counts, src.bifurcation.counts);
    set_if(asymmetry, src.bifurcation.asymmetry);
    set_if(embedding_seed, src.bifurcation.embedding_seed);
    set_if(noise, generator == "petal" ? src.petal.noise : src.bifurcation.noise);
    const SnapshotDataset ds = src.load(rc.seed);
    save_csv(ds, out);
    std::vector<long> sizes;
    for (const auto& s : ds.snapshots) sizes.push_back(static_cast<long>(s.rows()));
    std::cout << "T=" << ds.size() << " d=" << ds.dim() << " counts=" << join(sizes) << "\n";
  }
};

struct TrainGaeCmd {
  CommonFlags common;
  DataFlags data;
  GaeFlags gae;
  std::string out, log, distances;
  std::optional<int> hold_out;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("train-gae", "train the geodesic autoencoder");
    common.add(app);
    data.add(app, false);
    gae.add(app);
    app->add_option("-o,--out", out, "checkpoint JSON")->required();
    app->add_option("--log", log, "JSON-lines training log");
    app->add_option("--hold-out", hold_out, "exclude this interior time");
    app->add_option("--distances", distances, "write the full-data geodesic distance matrix (headerless CSV)");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig rc = common.load();
    gae.apply_to(rc.gae);
    const SnapshotDataset ds = maybe_hold_out(data.load(rc), hold_out);
    const GaeTrainingResult r = train_gae(ds, rc.gae, rc.seed);
    write_json(out, r.model.to_json());
    if (!log.empty()) {
      std::ostringstream os;
      for (const auto& e : r.log)
        os << json{{"iteration", e.iteration},
                   {"distance_loss", e.distance_loss},
                   {"reconstruction_loss", e.reconstruction_loss}}
                  .dump()
           << "\n";
      write_text(log, os.str());
    }
    if (!distances.empty()) {
      const Matrix g = geodesic_distance(ds.pooled(), rc.gae.kernel, rc.gae.geodesic);
      std::ostringstream os;
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        for (Eigen::Index j = 0; j < g.cols(); ++j) os << (j ? "," : "") << format_double(g(i, j));
        os << "\n";
      }
      write_text(distances, os.str());
    }
  }
};

struct TrainCmd {
  CommonFlags common;
  DataFlags data;
  FlowFlags flow;
  std::string out, log, gae_path;
  bool use_gae = false;
  std::optional<int> hold_out;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("train", "train the stochastic flow");
    common.add(app);
    data.add(app, false);
    flow.add(app);
    app->add_option("-o,--out", out, "checkpoint JSON")->required();
    app->add_option("--log", log, "JSON-lines loss log");
    app->add_flag("--use-gae", use_gae, "train in the latent space of --gae");
    app->add_option("--gae", gae_path, "autoencoder checkpoint");
    app->add_option("--hold-out", hold_out, "exclude this interior time");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig rc = common.load();
    flow.apply_to(rc.mioflow);
    rc.mioflow.seed = rc.seed;
    if (use_gae) rc.mioflow.use_gae = true;
    if (rc.mioflow.use_gae && gae_path.empty()) throw ParameterError("--use-gae needs a checkpoint via --gae");
    std::optional<GeodesicAutoencoder> gae;
    if (rc.mioflow.use_gae) gae = GeodesicAutoencoder::from_json(read_json_file(gae_path));
    const SnapshotDataset ds = maybe_hold_out(data.load(rc), hold_out);
    const MioflowResult r = train_mioflow(ds, gae ? &*gae : nullptr, rc.mioflow);
    json ckpt = r.model.to_json();
    ckpt["training"] = {{"mioflow", to_json(rc.mioflow)}, {"solver", to_json(rc.mioflow.solver)}, {"seed", rc.seed}};
    write_json(out, ckpt);
    if (!log.empty()) {
      std::ostringstream os;
      write_jsonl(r.log, os);
      write_text(log, os.str());
    }
  }
};

struct EvalCmd {
  CommonFlags common;
  DataFlags data;
  GaeFlags gae;
  FlowFlags flow;
  std::string generator, out, export_dir;
  std::vector<int> held;
  std::vector<std::string> ablate;
  bool use_gae = false;
  int jobs = 1;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("eval-holdout", "leave-one-out evaluation");
    common.add(app);
    data.add(app, false);
    gae.add(app, "gae-");
    flow.add(app);
    app->add_option("--generator", generator, "generate data instead of --data")
        ->check(CLI::IsMember({"petal", "bifurcation"}));
    app->add_option("--held", held, "interior time(s) to hold out")->required()->delimiter(',');
    app->add_option("-o,--out", out, "report JSON")->required();
    app->add_option("--export-dir", export_dir, "write predicted and held points as CSV");
    app->add_option("--ablate", ablate, "axes: gae, density, kernel")
        ->delimiter(',')
        ->check(CLI::IsMember({"gae", "density", "kernel"}));
    app->add_flag("--use-gae", use_gae, "evaluate with the autoencoder");
    app->add_option("--jobs", jobs, "parallel evaluations in an ablation")->check(CLI::PositiveNumber);
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig rc = common.load();
    gae.apply_to(rc.gae);
    flow.apply_to(rc.mioflow);
    if (!generator.empty()) {
      rc.data.csv.clear();
      rc.data.generator = generator;
    }
    if (use_gae) rc.mioflow.use_gae = true;
    const SnapshotDataset ds = data.load(rc);

    const auto has = [&](const char* axis) { return std::find(ablate.begin(), ablate.end(), axis) != ablate.end(); };
    AblationAxes axes;
    axes.gae = has("gae") ? std::vector<bool>{false, true} : std::vector<bool>{rc.mioflow.use_gae};
    axes.density = has("density") ? std::vector<bool>{true, false} : std::vector<bool>{rc.mioflow.use_density};
    if (has("kernel")) {
      const KernelSpec base = rc.gae.kernel;
      axes.kernels = {std::holds_alternative<GaussianKernel>(base) ? base : KernelSpec{GaussianKernel{}},
                      std::holds_alternative<AlphaDecayKernel>(base) ? base : KernelSpec{AlphaDecayKernel{}}};
    }

    std::vector<HoldoutArtifacts> arts;
    MetricReport report = ablation_suite(ds, held, axes, rc.gae, rc.mioflow, rc.seed, rc.metrics, jobs, &arts);
    report.config = to_json(rc);
    write_json(out, report.to_json());
    std::cout << report.table();

    if (!export_dir.empty()) {
      fs::create_directories(export_dir);
      for (std::size_t i = 0; i < arts.size(); ++i) {
        const int t = report.records[i].held_time;
        save_csv(SnapshotDataset{{t}, {arts[i].prediction}}, (fs::path(export_dir) / fmt::format("pred_{}.csv", i)).string());
        save_csv(SnapshotDataset{{t}, {arts[i].truth}}, (fs::path(export_dir) / fmt::format("truth_{}.csv", i)).string());
      }
    }
  }
};

struct TrajectoriesCmd {
  CommonFlags common;
  DataFlags data;
  std::string model_path, gae_path, out, svg, proj;
  std::optional<int> n_traj;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("trajectories", "export dense trajectories and an optional SVG");
    common.add(app);
    data.add(app, false);
    app->add_option("--model,-m", model_path, "flow checkpoint")->required();
    app->add_option("--gae", gae_path, "autoencoder checkpoint (required for latent models)");
    app->add_option("-o,--out", out, "trajectory CSV")->required();
    app->add_option("--svg", svg, "SVG plot path");
    app->add_option("--proj", proj, "'first2' or a d x 2 projection CSV (needed for SVG when d > 2)");
    app->add_option("--n-traj", n_traj, "number of trajectories (default: all of X_0)");
    app->callback([this] { run(); });
  }

  void run() {
    RunConfig rc = common.load();
    const json ckpt = read_json_file(model_path);
    const MioflowModel model = MioflowModel::from_json(ckpt);
    MioflowConfig cfg = rc.mioflow;
    if (ckpt.contains("training")) {
      update_from_json(cfg, ckpt.at("training").at("mioflow"), "checkpoint.mioflow");
      update_from_json(cfg.solver, ckpt.at("training").at("solver"), "checkpoint.solver");
    }
    std::optional<GeodesicAutoencoder> gae;
    if (model.use_gae) {
      if (gae_path.empty()) throw ParameterError("this checkpoint lives in a latent space; pass --gae");
      gae = GeodesicAutoencoder::from_json(read_json_file(gae_path));
      if (!gae->has_decoder()) throw ParameterError("the autoencoder has no decoder");
    }
    const SnapshotDataset ds = data.load(rc);
    if (!svg.empty() && ds.dim() > 2 && proj.empty())
      throw ParameterError("data has " + std::to_string(ds.dim()) +
                           " dimensions; choose a projection with --proj first2 or --proj <d x 2 CSV>");
    Projection projection;
    if (!proj.empty() && proj != "first2") projection.matrix = load_projection(proj);

    const Matrix& x0 = ds.snapshots.front();
    Eigen::Index n = x0.rows();
    if (n_traj) {
      if (*n_traj < 1) throw ParameterError("--n-traj must be >= 1");
      n = std::min<Eigen::Index>(n, *n_traj);
    }
    Rng rng = make_rng(rc.seed);
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(x0.rows()));
    std::iota(rows.begin(), rows.end(), 0);
    if (n < x0.rows()) {
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(static_cast<std::size_t>(n));
      std::sort(rows.begin(), rows.end());
    }
    Matrix seeds(n, x0.cols());
    for (Eigen::Index i = 0; i < n; ++i) seeds.row(i) = x0.row(rows[static_cast<std::size_t>(i)]);

    std::vector<double> times(ds.times.begin(), ds.times.end());
    const Matrix start = gae ? gae->encode(seeds) : seeds;
    const TrajectoryBundle b = predict(model, start, times, cfg, rng(), true);
    std::vector<Matrix> states;
    for (const auto& s : b.dense) states.push_back(gae ? gae->decode(s) : s);

    std::ostringstream os;
    os << "traj,t";
    for (Eigen::Index j = 0; j < ds.dim(); ++j) os << ",x" << j;
    os << "\n";
    for (Eigen::Index i = 0; i < n; ++i)
      for (std::size_t k = 0; k < states.size(); ++k) {
        os << i << "," << format_double(b.dense_times[k]);
        for (Eigen::Index j = 0; j < states[k].cols(); ++j) os << "," << format_double(states[k](i, j));
        os << "\n";
      }
    write_text(out, os.str());

    if (!svg.empty()) {
      SnapshotDataset background = ds;
      for (auto& s : background.snapshots) s = projection.apply(s);
      std::vector<PlotPath> paths;
      for (Eigen::Index i = 0; i < n; ++i) {
        Matrix p(static_cast<Eigen::Index>(states.size()), ds.dim());
        for (std::size_t k = 0; k < states.size(); ++k) p.row(static_cast<Eigen::Index>(k)) = states[k].row(i);
        paths.push_back({b.dense_times, projection.apply(p)});
      }
      std::ostringstream svg_os;
      write_svg(background, paths, svg_os);
      write_text(svg, svg_os.str());
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic population trajectories from snapshot data"};
  app.require_subcommand(1);
  GenDataCmd gen;
  TrainGaeCmd train_gae_cmd;
  TrainCmd train;
  EvalCmd eval;
  TrajectoriesCmd traj;
  gen.add(app);
  train_gae_cmd.add(app);
  train.add(app);
  eval.add(app);
  traj.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
