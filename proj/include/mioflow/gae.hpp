#ifndef MIOFLOW_GAE_HPP
#define MIOFLOW_GAE_HPP

// Geodesic autoencoder: an encoder whose latent Euclidean distances match the
// diffusion geodesic distance, plus an optional decoder back to ambient space.

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "mioflow/datasets.hpp"
#include "mioflow/geometry.hpp"
#include "mioflow/net.hpp"

namespace mioflow {

struct GaeConfig {
  int latent_dim = 8;
  std::vector<int> hidden{32};  // encoder d -> 32 -> latent
  Activation activation = Activation::ReLU;
  int batch_size = 100;
  double noise = 0.0;  // xi
  int max_iterations = 1000;
  KernelSpec kernel = GaussianKernel{0.5};
  GeodesicParams geodesic{};
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  bool train_decoder = true;
  bool stratified = false;  // draw batches evenly across time labels

  void validate() const {
    if (latent_dim < 1) throw ParameterError("gae: latent_dim must be >= 1");
    if (batch_size < 2) throw ParameterError("gae: batch_size must be >= 2");
    if (noise < 0.0) throw ParameterError("gae: noise must be >= 0");
    if (max_iterations < 0) throw ParameterError("gae: max_iterations must be >= 0");
    if (!(learning_rate > 0.0)) throw ParameterError("gae: learning rate must be positive");
    if (weight_decay < 0.0) throw ParameterError("gae: weight decay must be >= 0");
    for (int h : hidden)
      if (h < 1) throw ParameterError("gae: hidden widths must be positive");
    geodesic.validate();
  }
};

class GeodesicAutoencoder {
 public:
  GeodesicAutoencoder() = default;

  GeodesicAutoencoder(MultilayerNet encoder, std::optional<MultilayerNet> decoder)
      : encoder_(std::move(encoder)), decoder_(std::move(decoder)) {
    if (decoder_ && (decoder_->input_dim() != encoder_.output_dim() || decoder_->output_dim() != encoder_.input_dim()))
      throw ParameterError("decoder shape is not the inverse of the encoder shape");
  }

  /// Encoder d -> hidden -> latent; decoder mirrors it.
  static GeodesicAutoencoder create(int input_dim, const GaeConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<int> dims{input_dim};
    dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
    dims.push_back(cfg.latent_dim);
    MultilayerNet encoder = MultilayerNet::create(dims, cfg.activation, rng);
    std::optional<MultilayerNet> decoder;
    if (cfg.train_decoder) {
      std::reverse(dims.begin(), dims.end());
      decoder = MultilayerNet::create(dims, cfg.activation, rng);
    }
    return GeodesicAutoencoder(std::move(encoder), std::move(decoder));
  }

  int input_dim() const { return static_cast<int>(encoder_.input_dim()); }
  int latent_dim() const { return static_cast<int>(encoder_.output_dim()); }
  bool has_decoder() const { return decoder_.has_value(); }

  const MultilayerNet& encoder() const { return encoder_; }
  MultilayerNet& encoder() { return encoder_; }

  const MultilayerNet& decoder() const {
    if (!decoder_) throw ParameterError("autoencoder has no decoder");
    return *decoder_;
  }
  MultilayerNet& decoder() {
    if (!decoder_) throw ParameterError("autoencoder has no decoder");
    return *decoder_;
  }

  Matrix encode(const Matrix& x) const { return encoder_.forward(x); }
  Matrix decode(const Matrix& z) const { return decoder().forward(z); }

  SnapshotDataset encode(const SnapshotDataset& ds) const {
    SnapshotDataset out;
    out.times = ds.times;
    for (const auto& s : ds.snapshots) out.snapshots.push_back(encode(s));
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["kind"] = "gae";
    j["encoder"] = encoder_.to_json();
    j["decoder"] = decoder_ ? decoder_->to_json() : nlohmann::json(nullptr);
    return j;
  }

  static GeodesicAutoencoder from_json(const nlohmann::json& j) {
    try {
      if (j.at("format_version").get<int>() != 1 || j.at("kind").get<std::string>() != "gae")
        throw ParseError("not a version 1 autoencoder checkpoint");
      std::optional<MultilayerNet> decoder;
      if (!j.at("decoder").is_null()) decoder = MultilayerNet::from_json(j.at("decoder"));
      return GeodesicAutoencoder(MultilayerNet::from_json(j.at("encoder")), std::move(decoder));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed autoencoder checkpoint: ") + e.what());
    } catch (const ParameterError& e) {
      throw ParseError(std::string("malformed autoencoder checkpoint: ") + e.what());
    }
  }

 private:
  MultilayerNet encoder_;
  std::optional<MultilayerNet> decoder_;
};

namespace detail {

/// (2/N) sum_{i<j} (|z_i - z_j| - G_ij)^2 and, optionally, its gradient in z.
inline double distance_loss(const Matrix& z, const Matrix& target, Matrix* d_z) {
  const Eigen::Index n = z.rows();
  if (n < 2) throw ParameterError("distance loss needs a batch of at least 2 points");
  if (target.rows() != n || target.cols() != n) throw ParameterError("target distance matrix does not match batch");
  const double scale = 2.0 / static_cast<double>(n);
  if (d_z) *d_z = Matrix::Zero(n, z.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const RowVector diff = z.row(i) - z.row(j);
      const double dist = diff.norm();
      const double r = dist - target(i, j);
      loss += r * r;
      if (d_z && dist > 0.0) {
        const RowVector g = (scale * 2.0 * r / dist) * diff;
        d_z->row(i) += g;
        d_z->row(j) -= g;
      }
    }
  }
  return scale * loss;
}

/// sum_i |y_i - x_i| and, optionally, its gradient in y.
inline double reconstruction(const Matrix& y, const Matrix& x, Matrix* d_y) {
  if (y.rows() != x.rows() || y.cols() != x.cols()) throw ParameterError("reconstruction shape mismatch");
  if (d_y) *d_y = Matrix::Zero(y.rows(), y.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const RowVector diff = y.row(i) - x.row(i);
    const double norm = diff.norm();
    loss += norm;
    if (d_y && norm > 0.0) d_y->row(i) = diff / norm;
  }
  return loss;
}

}  // namespace detail

inline double gae_distance_loss(const GeodesicAutoencoder& model, const Matrix& batch, const Matrix& target) {
  if (batch.rows() < 2) throw ParameterError("distance loss needs a batch of at least 2 points");
  return detail::distance_loss(model.encode(batch), target, nullptr);
}

/// Flat encoder-parameter gradient of the distance loss.
inline Vector gae_distance_loss_gradient(const GeodesicAutoencoder& model, const Matrix& batch, const Matrix& target,
                                         double* loss = nullptr) {
  GradientTape tape;
  const Matrix z = model.encoder().forward(batch, tape);
  Matrix d_z;
  const double l = detail::distance_loss(z, target, &d_z);
  if (loss) *loss = l;
  Vector grad;
  model.encoder().backward(tape, d_z, grad);
  return grad;
}

/// sum_x |decode(encode(input_x)) - clean_x|; clean defaults to the input.
inline double reconstruction_loss(const GeodesicAutoencoder& model, const Matrix& input, const Matrix& clean) {
  if (!model.has_decoder()) throw ParameterError("reconstruction loss requires a decoder");
  return detail::reconstruction(model.decode(model.encode(input)), clean, nullptr);
}

inline double reconstruction_loss(const GeodesicAutoencoder& model, const Matrix& batch) {
  return reconstruction_loss(model, batch, batch);
}

/// Flat decoder-parameter gradient of the reconstruction loss (encoder held fixed).
inline Vector reconstruction_loss_gradient(const GeodesicAutoencoder& model, const Matrix& input, const Matrix& clean,
                                           double* loss = nullptr) {
  if (!model.has_decoder()) throw ParameterError("reconstruction loss requires a decoder");
  const Matrix z = model.encode(input);
  GradientTape tape;
  const Matrix y = model.decoder().forward(z, tape);
  Matrix d_y;
  const double l = detail::reconstruction(y, clean, &d_y);
  if (loss) *loss = l;
  Vector grad;
  model.decoder().backward(tape, d_y, grad);
  return grad;
}

struct GaeLogEntry {
  int iteration = 0;
  double distance_loss = 0.0;
  double reconstruction_loss = 0.0;  // 0 without a decoder
};

struct GaeTrainingResult {
  GeodesicAutoencoder model;
  std::vector<GaeLogEntry> log;
};

namespace detail {

/// Sorted row indices into the pooled dataset for one batch.
inline std::vector<Eigen::Index> sample_gae_batch(const SnapshotDataset& data, const GaeConfig& cfg, Rng& rng) {
  std::vector<Eigen::Index> chosen;
  const auto draw = [&rng, &chosen](Eigen::Index offset, Eigen::Index available, Eigen::Index count) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(available));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (Eigen::Index k = 0; k < count; ++k) {
      std::uniform_int_distribution<Eigen::Index> pick(k, available - 1);
      std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(pick(rng))]);
      chosen.push_back(offset + idx[static_cast<std::size_t>(k)]);
    }
  };
  if (!cfg.stratified) {
    draw(0, data.total_points(), cfg.batch_size);
  } else {
    const auto T = static_cast<Eigen::Index>(data.size());
    Eigen::Index offset = 0;
    for (Eigen::Index s = 0; s < T; ++s) {
      const Eigen::Index want = cfg.batch_size / T + (s < cfg.batch_size % T ? 1 : 0);
      const Eigen::Index have = data.snapshots[static_cast<std::size_t>(s)].rows();
      if (want > have)
        throw ParameterError("gae: stratified batch needs " + std::to_string(want) + " points at time " +
                             std::to_string(data.times[static_cast<std::size_t>(s)]) + ", snapshot has " +
                             std::to_string(have));
      draw(offset, have, want);
      offset += have;
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace detail

/// Each iteration samples a batch, computes the geodesic target on that batch,
/// perturbs the inputs with noise xi*z, and takes one AdamW step on the encoder
/// (distance loss) and one on the decoder (reconstruction of the clean batch).
inline GaeTrainingResult train_gae(const SnapshotDataset& data, const GaeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  const Matrix pooled = data.pooled();
  if (cfg.batch_size > pooled.rows())
    throw ParameterError("gae: batch size " + std::to_string(cfg.batch_size) + " exceeds dataset size " +
                         std::to_string(pooled.rows()));

  Rng rng = make_rng(seed);
  GaeTrainingResult result{GeodesicAutoencoder::create(static_cast<int>(pooled.cols()), cfg, rng), {}};
  GeodesicAutoencoder& model = result.model;
  AdamWState enc_state(cfg.learning_rate, cfg.weight_decay);
  AdamWState dec_state(cfg.learning_rate, cfg.weight_decay);

  std::vector<Eigen::Index> last_batch;
  Matrix target;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const std::vector<Eigen::Index> idx = detail::sample_gae_batch(data, cfg, rng);
    Matrix x(static_cast<Eigen::Index>(idx.size()), pooled.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) x.row(static_cast<Eigen::Index>(r)) = pooled.row(idx[r]);
    // The target is a pure function of the batch, so an identical batch reuses it.
    if (idx != last_batch) {
      target = geodesic_distance(x, cfg.kernel, cfg.geodesic);
      last_batch = idx;
    }
    Matrix noisy = x;
    if (cfg.noise > 0.0) noisy += cfg.noise * standard_normal(x.rows(), x.cols(), rng);

    GaeLogEntry entry;
    entry.iteration = it;
    const Vector enc_grad = gae_distance_loss_gradient(model, noisy, target, &entry.distance_loss);
    if (model.has_decoder()) {
      const Vector dec_grad = reconstruction_loss_gradient(model, noisy, x, &entry.reconstruction_loss);
      adamw_step(dec_state, model.decoder(), dec_grad);
    }
    adamw_step(enc_state, model.encoder(), enc_grad);
    if (!std::isfinite(entry.distance_loss) || !std::isfinite(entry.reconstruction_loss))
      throw NumericalError("gae: non-finite loss at iteration " + std::to_string(it));
    logger()->debug("gae iteration {}: L={:.6g} L_r={:.6g}", it, entry.distance_loss, entry.reconstruction_loss);
    result.log.push_back(entry);
  }
  return result;
}

}  // namespace mioflow

#endif  // MIOFLOW_GAE_HPP
