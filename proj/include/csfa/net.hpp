#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "csfa/errors.hpp"
#include "csfa/linalg.hpp"
#include "csfa/rng.hpp"

namespace csfa {

enum class Activation : std::uint8_t { Identity = 0, Tanh = 1, Relu = 2 };

/// One affine layer followed by an elementwise nonlinearity.
struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::Identity;

  std::size_t param_count() const { return in * out + out; }
  bool operator==(const LayerSpec&) const = default;
};

/// Per-layer parameters in their natural shapes. `weight` is out x in.
struct LayerParams {
  Matrix weight;
  Vector bias;
};

class GradientTape;

/// Multilayer perceptron over a flat parameter vector. The object itself holds
/// only shape metadata; parameters travel separately so snapshots, restores
/// and perturbed evaluations are plain vector copies.
class Mlp {
public:
  Mlp() = default;
  explicit Mlp(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
      if (layers_[i].out != layers_[i + 1].in) {
        throw ConfigError("Mlp: layer " + std::to_string(i) + " out " +
                          std::to_string(layers_[i].out) + " != layer " +
                          std::to_string(i + 1) + " in " +
                          std::to_string(layers_[i + 1].in));
      }
    }
  }

  /// Stack of equal-width hidden layers, e.g. {16, {64, 64}} for the default
  /// two-hidden-layer extractor.
  static Mlp stack(std::size_t input_dim, const std::vector<std::size_t>& widths,
                   Activation hidden_act = Activation::Tanh) {
    std::vector<LayerSpec> layers;
    std::size_t in = input_dim;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      layers.push_back({in, widths[i], hidden_act});
      in = widths[i];
    }
    return Mlp(std::move(layers));
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t layer_count() const { return layers_.size(); }
  std::size_t input_dim() const { return layers_.empty() ? 0 : layers_.front().in; }
  std::size_t output_dim() const { return layers_.empty() ? 0 : layers_.back().out; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.param_count();
    return n;
  }

  /// Offset of layer `l`'s weight block within the flat parameter vector.
  std::size_t layer_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < l; ++i) off += layers_[i].param_count();
    return off;
  }

  /// Uniform init scaled by fan-in/fan-out, biases zero. Deterministic in seed.
  Vector init_params(std::uint64_t seed) const {
    Vector theta(param_count(), 0.0);
    Rng rng(derive_seed(seed, {0x1417u}));
    std::size_t off = 0;
    for (const auto& l : layers_) {
      const double bound = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
      for (std::size_t i = 0; i < l.in * l.out; ++i) {
        theta[off + i] = rng.uniform(-bound, bound);
      }
      off += l.param_count();
    }
    return theta;
  }

  Matrix forward(std::span<const double> theta, const Matrix& inputs,
                 GradientTape* tape = nullptr) const;
  Vector backward(std::span<const double> theta, GradientTape& tape,
                  const Matrix& upstream) const;

  bool operator==(const Mlp& other) const { return layers_ == other.layers_; }

private:
  void check_theta(std::span<const double> theta) const {
    if (theta.size() != param_count()) {
      throw DimensionError("Mlp: parameter vector length " +
                           std::to_string(theta.size()) + " != " +
                           std::to_string(param_count()));
    }
  }

  std::vector<LayerSpec> layers_;
};

/// Activations cached by one forward pass; feeds exactly one backward pass.
class GradientTape {
public:
  bool consumed() const { return consumed_; }

private:
  friend class Mlp;
  std::vector<Matrix> layer_inputs_;   // input to each layer
  std::vector<Matrix> preacts_;        // affine outputs before the nonlinearity
  std::vector<Matrix> postacts_;       // layer outputs
  bool consumed_ = true;               // valid only after a forward fills it
};

inline Matrix Mlp::forward(std::span<const double> theta, const Matrix& inputs,
                           GradientTape* tape) const {
  check_theta(theta);
  if (inputs.cols() != input_dim()) {
    throw DimensionError("Mlp::forward: input has " + std::to_string(inputs.cols()) +
                         " columns, extractor expects " + std::to_string(input_dim()));
  }
  if (tape) {
    tape->layer_inputs_.clear();
    tape->preacts_.clear();
    tape->postacts_.clear();
  }
  Matrix a = inputs;
  std::size_t off = 0;
  for (const auto& l : layers_) {
    Matrix w(l.out, l.in);
    std::copy(theta.begin() + off, theta.begin() + off + l.in * l.out, w.data());
    std::span<const double> b = theta.subspan(off + l.in * l.out, l.out);
    Matrix z = matmul_nt(a, w);
    add_row_inplace(z, b);
    if (tape) {
      tape->layer_inputs_.push_back(std::move(a));
      tape->preacts_.push_back(z);
    }
    a = std::move(z);
    switch (l.act) {
      case Activation::Identity:
        break;
      case Activation::Tanh:
        for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = std::tanh(a.data()[i]);
        break;
      case Activation::Relu:
        for (std::size_t i = 0; i < a.size(); ++i) {
          if (a.data()[i] < 0.0) a.data()[i] = 0.0;
        }
        break;
    }
    if (tape) tape->postacts_.push_back(a);
    off += l.param_count();
  }
  require_finite({a.data(), a.size()}, "Mlp::forward output");
  if (tape) tape->consumed_ = false;
  return a;
}

inline Vector Mlp::backward(std::span<const double> theta, GradientTape& tape,
                            const Matrix& upstream) const {
  check_theta(theta);
  if (tape.consumed_) {
    throw StateError("Mlp::backward: tape already consumed (run forward again)");
  }
  if (tape.postacts_.size() != layers_.size()) {
    throw StateError("Mlp::backward: tape does not match this network");
  }
  const Matrix& out = tape.postacts_.back();
  if (upstream.rows() != out.rows() || upstream.cols() != out.cols()) {
    throw DimensionError("Mlp::backward: upstream gradient shape mismatch");
  }
  tape.consumed_ = true;

  Vector grad(param_count(), 0.0);
  Matrix d = upstream;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const LayerSpec& l = layers_[li];
    // d currently holds dL/d(postact); fold in the activation derivative.
    switch (l.act) {
      case Activation::Identity:
        break;
      case Activation::Tanh: {
        const Matrix& a = tape.postacts_[li];
        for (std::size_t i = 0; i < d.size(); ++i) {
          d.data()[i] *= 1.0 - a.data()[i] * a.data()[i];
        }
        break;
      }
      case Activation::Relu: {
        const Matrix& z = tape.preacts_[li];
        for (std::size_t i = 0; i < d.size(); ++i) {
          if (z.data()[i] <= 0.0) d.data()[i] = 0.0;
        }
        break;
      }
    }
    const Matrix& x = tape.layer_inputs_[li];
    Matrix dw = matmul_tn(d, x);  // (out x in)
    Vector db = column_sums(d);
    const std::size_t off = layer_offset(li);
    std::copy(dw.data(), dw.data() + dw.size(), grad.begin() + off);
    std::copy(db.begin(), db.end(), grad.begin() + off + l.in * l.out);
    if (li > 0) {
      Matrix w(l.out, l.in);
      std::copy(theta.begin() + off, theta.begin() + off + l.in * l.out, w.data());
      d = matmul_nn(d, w);
    }
  }
  return grad;
}

/// Flat parameter vector plus the shape metadata needed to interpret it.
struct ModelParams {
  Mlp net;
  Vector theta;

  ModelParams() = default;
  ModelParams(Mlp n, Vector t) : net(std::move(n)), theta(std::move(t)) {
    if (theta.size() != net.param_count()) {
      throw DimensionError("ModelParams: theta length does not match network");
    }
  }

  static ModelParams init(Mlp n, std::uint64_t seed) {
    Vector t = n.init_params(seed);
    return ModelParams(std::move(n), std::move(t));
  }

  std::vector<LayerParams> unflatten() const {
    std::vector<LayerParams> out;
    std::size_t off = 0;
    for (const auto& l : net.layers()) {
      LayerParams p;
      p.weight = Matrix(l.out, l.in);
      std::copy(theta.begin() + off, theta.begin() + off + l.in * l.out,
                p.weight.data());
      p.bias.assign(theta.begin() + off + l.in * l.out,
                    theta.begin() + off + l.param_count());
      out.push_back(std::move(p));
      off += l.param_count();
    }
    return out;
  }

  static Vector flatten(const Mlp& net, const std::vector<LayerParams>& layers) {
    if (layers.size() != net.layer_count()) {
      throw DimensionError("ModelParams::flatten: layer count mismatch");
    }
    Vector theta;
    theta.reserve(net.param_count());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& spec = net.layers()[i];
      const LayerParams& p = layers[i];
      if (p.weight.rows() != spec.out || p.weight.cols() != spec.in ||
          p.bias.size() != spec.out) {
        throw DimensionError("ModelParams::flatten: layer " + std::to_string(i) +
                             " shape mismatch");
      }
      theta.insert(theta.end(), p.weight.data(), p.weight.data() + p.weight.size());
      theta.insert(theta.end(), p.bias.begin(), p.bias.end());
    }
    return theta;
  }

  Vector snapshot() const { return theta; }
  void restore(const Vector& snap) {
    if (snap.size() != theta.size()) {
      throw DimensionError("ModelParams::restore: snapshot length mismatch");
    }
    theta = snap;
  }
};

}  // namespace csfa
