#ifndef MIOFLOW_NET_HPP
#define MIOFLOW_NET_HPP

// Small dense feed-forward network with taped reverse-mode gradients and AdamW.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "mioflow/common.hpp"

namespace mioflow {

enum class Activation { ReLU, LeakyReLU, CELU };

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kCeluAlpha = 1.0;

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::LeakyReLU: return "leaky_relu";
    case Activation::CELU: return "celu";
  }
  return "relu";
}

inline Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::ReLU;
  if (name == "leaky_relu" || name == "leakyrelu") return Activation::LeakyReLU;
  if (name == "celu") return Activation::CELU;
  throw ParameterError("unknown activation '" + name + "'");
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::ReLU: return x > 0.0 ? x : 0.0;
    case Activation::LeakyReLU: return x > 0.0 ? x : kLeakySlope * x;
    case Activation::CELU: return x > 0.0 ? x : kCeluAlpha * std::expm1(x / kCeluAlpha);
  }
  return x;
}

inline double activate_derivative(Activation a, double x) {
  switch (a) {
    case Activation::ReLU: return x > 0.0 ? 1.0 : 0.0;
    case Activation::LeakyReLU: return x > 0.0 ? 1.0 : kLeakySlope;
    case Activation::CELU: return x > 0.0 ? 1.0 : std::exp(x / kCeluAlpha);
  }
  return 1.0;
}

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Intermediates of one batched forward pass.
struct GradientTape {
  std::vector<Matrix> inputs;  // input to each layer (batch x in)
  std::vector<Matrix> pre;     // pre-activation of each hidden layer
};

class MultilayerNet {
 public:
  MultilayerNet() = default;

  MultilayerNet(std::vector<Layer> layers, Activation activation)
      : layers_(std::move(layers)), activation_(activation) {
    check_shapes();
  }

  /// Weights and biases uniform in +-1/sqrt(fan_in). dims = {in, hidden..., out}.
  static MultilayerNet create(const std::vector<int>& dims, Activation activation, Rng& rng) {
    if (dims.size() < 2) throw ParameterError("network needs at least input and output widths");
    std::vector<Layer> layers;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      if (dims[l] < 1 || dims[l + 1] < 1) throw ParameterError("layer widths must be positive");
      const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      Layer layer{Matrix(dims[l + 1], dims[l]), Vector(dims[l + 1])};
      for (Eigen::Index i = 0; i < layer.weight.rows(); ++i)
        for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) layer.weight(i, j) = u(rng);
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = u(rng);
      layers.push_back(std::move(layer));
    }
    return MultilayerNet(std::move(layers), activation);
  }

  Eigen::Index input_dim() const { return layers_.front().weight.cols(); }
  Eigen::Index output_dim() const { return layers_.back().weight.rows(); }
  Activation activation() const { return activation_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  bool empty() const { return layers_.empty(); }

  std::vector<int> dims() const {
    std::vector<int> d{static_cast<int>(input_dim())};
    for (const auto& l : layers_) d.push_back(static_cast<int>(l.weight.rows()));
    return d;
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Batched forward pass; x is batch x input_dim.
  Matrix forward(const Matrix& x) const { return run(x, nullptr); }

  Matrix forward(const Matrix& x, GradientTape& tape) const { return run(x, &tape); }

  /// Reverse pass. Adds parameter gradients (flat layout) into grad and
  /// returns the gradient with respect to the input batch.
  Matrix backward(const GradientTape& tape, const Matrix& upstream, Vector& grad) const {
    if (grad.size() != parameter_count()) grad = Vector::Zero(parameter_count());
    Matrix g = upstream;
    Eigen::Index offset = parameter_count();
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Layer& layer = layers_[l];
      if (l + 1 < layers_.size()) {
        const Matrix& pre = tape.pre[l];
        for (Eigen::Index i = 0; i < g.rows(); ++i)
          for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) *= activate_derivative(activation_, pre(i, j));
      }
      const Eigen::Index wsize = layer.weight.size();
      const Eigen::Index bsize = layer.bias.size();
      offset -= wsize + bsize;
      Matrix gw = g.transpose() * tape.inputs[l];
      grad.segment(offset, wsize) += Eigen::Map<const Vector>(gw.data(), wsize);
      grad.segment(offset + wsize, bsize) += g.colwise().sum().transpose();
      g = g * layer.weight;
    }
    return g;
  }

  /// Row-major weights then bias, layer by layer.
  Vector flat_parameters() const {
    Vector v(parameter_count());
    Eigen::Index o = 0;
    for (const auto& l : layers_) {
      v.segment(o, l.weight.size()) = Eigen::Map<const Vector>(l.weight.data(), l.weight.size());
      o += l.weight.size();
      v.segment(o, l.bias.size()) = l.bias;
      o += l.bias.size();
    }
    return v;
  }

  void set_flat_parameters(const Vector& v) {
    if (v.size() != parameter_count()) throw ParameterError("parameter vector has wrong length");
    Eigen::Index o = 0;
    for (auto& l : layers_) {
      Eigen::Map<Vector>(l.weight.data(), l.weight.size()) = v.segment(o, l.weight.size());
      o += l.weight.size();
      l.bias = v.segment(o, l.bias.size());
      o += l.bias.size();
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["dims"] = dims();
    j["activation"] = activation_name(activation_);
    nlohmann::json weights = nlohmann::json::array();
    nlohmann::json biases = nlohmann::json::array();
    for (const auto& l : layers_) {
      weights.push_back(std::vector<double>(l.weight.data(), l.weight.data() + l.weight.size()));
      biases.push_back(std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size()));
    }
    j["weights"] = std::move(weights);
    j["biases"] = std::move(biases);
    return j;
  }

  static MultilayerNet from_json(const nlohmann::json& j) {
    if (j.value("format_version", 0) != 1) throw ParseError("network checkpoint: unsupported format_version");
    const auto dims = j.at("dims").get<std::vector<int>>();
    const auto weights = j.at("weights").get<std::vector<std::vector<double>>>();
    const auto biases = j.at("biases").get<std::vector<std::vector<double>>>();
    if (dims.size() < 2 || weights.size() != dims.size() - 1 || biases.size() != weights.size())
      throw ParseError("network checkpoint: layer count mismatch");
    std::vector<Layer> layers;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const auto out = static_cast<std::size_t>(dims[l + 1]);
      const auto in = static_cast<std::size_t>(dims[l]);
      if (weights[l].size() != out * in || biases[l].size() != out)
        throw ParseError("network checkpoint: parameter array size mismatch in layer " + std::to_string(l));
      Layer layer{Matrix(dims[l + 1], dims[l]), Vector(dims[l + 1])};
      std::copy(weights[l].begin(), weights[l].end(), layer.weight.data());
      std::copy(biases[l].begin(), biases[l].end(), layer.bias.data());
      layers.push_back(std::move(layer));
    }
    return MultilayerNet(std::move(layers), parse_activation(j.at("activation").get<std::string>()));
  }

 private:
  void check_shapes() const {
    if (layers_.empty()) throw ParameterError("network has no layers");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].bias.size() != layers_[l].weight.rows())
        throw ParameterError("bias length does not match layer output width");
      if (l > 0 && layers_[l].weight.cols() != layers_[l - 1].weight.rows())
        throw ParameterError("consecutive layer widths do not chain");
      if (!layers_[l].weight.allFinite() || !layers_[l].bias.allFinite())
        throw ParameterError("network parameters must be finite");
    }
  }

  Matrix run(const Matrix& x, GradientTape* tape) const {
    if (x.cols() != input_dim())
      throw ParameterError("network input width " + std::to_string(x.cols()) + " does not match " +
                           std::to_string(input_dim()));
    if (tape) {
      tape->inputs.clear();
      tape->pre.clear();
    }
    Matrix h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (tape) tape->inputs.push_back(h);
      Matrix z = h * layers_[l].weight.transpose();
      z.rowwise() += layers_[l].bias.transpose();
      if (l + 1 < layers_.size()) {
        if (tape) tape->pre.push_back(z);
        h = z.unaryExpr([a = activation_](double v) { return activate(a, v); });
      } else {
        h = std::move(z);
      }
    }
    return h;
  }

  std::vector<Layer> layers_;
  Activation activation_ = Activation::ReLU;
};

/// Decoupled weight decay Adam over a flat parameter vector.
struct AdamWState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  long step = 0;
  Vector m;
  Vector v;

  AdamWState() = default;
  AdamWState(double learning_rate, double decay) : lr(learning_rate), weight_decay(decay) {}
};

inline void adamw_step(AdamWState& state, Vector& params, const Vector& grads) {
  if (grads.size() != params.size()) throw ParameterError("AdamW: gradient/parameter size mismatch");
  if (state.m.size() != params.size()) {
    state.m = Vector::Zero(params.size());
    state.v = Vector::Zero(params.size());
  }
  ++state.step;
  params *= 1.0 - state.lr * state.weight_decay;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

inline void adamw_step(AdamWState& state, MultilayerNet& net, const Vector& grads) {
  Vector p = net.flat_parameters();
  adamw_step(state, p, grads);
  net.set_flat_parameters(p);
}

}  // namespace mioflow

#endif  // MIOFLOW_NET_HPP
