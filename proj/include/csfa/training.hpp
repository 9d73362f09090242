#pragma once

// Supervised base-session training: the feature extractor plus a temporary
// linear classification head are trained jointly with SGD, momentum, and a
// cosine learning-rate schedule. Afterwards the head is set aside, base
// prototypes are computed from the final features, and the extractor is
// treated as frozen by everything downstream (adaptation snapshots before
// touching it).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "csfa/errors.hpp"
#include "csfa/linalg.hpp"
#include "csfa/net.hpp"
#include "csfa/prototypes.hpp"
#include "csfa/rng.hpp"
#include "csfa/streams.hpp"

namespace csfa {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double accuracy_floor = 0.95;  // training accuracy below this is a failure
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("momentum must lie in [0,1)");
    }
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(accuracy_floor >= 0.0 && accuracy_floor <= 1.0)) {
      throw ConfigError("accuracy_floor must lie in [0,1]");
    }
  }
};

// Mean cross-entropy and its gradient with respect to the logits:
// (softmax - onehot) / batch size.
struct CrossEntropy {
  double loss = 0.0;
  Matrix dlogits{0, 0};
};

inline CrossEntropy cross_entropy(const Matrix& logits,
                                  const std::vector<int>& labels) {
  if (logits.rows() == 0) throw ArgumentError("cross entropy of an empty batch");
  if (labels.size() != logits.rows()) {
    throw DimensionError("label count does not match logit rows");
  }
  const std::size_t n = logits.rows();
  const std::size_t k = logits.cols();
  CrossEntropy out;
  out.dlogits = Matrix(n, k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ArgumentError("label " + std::to_string(y) + " outside logit width");
    }
    auto z = logits.row(i);
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double expsum = 0.0;
    for (double v : z) expsum += std::exp(v - zmax);
    const double lse = zmax + std::log(expsum);
    total += lse - z[static_cast<std::size_t>(y)];
    for (std::size_t j = 0; j < k; ++j) {
      out.dlogits(i, j) = std::exp(z[j] - lse) / static_cast<double>(n);
    }
    out.dlogits(i, static_cast<std::size_t>(y)) -= 1.0 / static_cast<double>(n);
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

// Half-cosine decay from lr0 at step 0 to 0 at total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0 || step > total_steps) {
    throw ArgumentError("cosine_lr requires 0 <= step <= total_steps");
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * (1.0 + std::cos(std::acos(-1.0) * frac)) / 2.0;
}

// The temporary linear classifier used only during base training (and by the
// fine-tune-everything ablation variant).
struct LinearHead {
  Matrix w{0, 0};  // classes x feature dim
  Vector b;

  static LinearHead init(std::size_t classes, std::size_t dim,
                         std::uint64_t seed) {
    LinearHead h;
    h.w = Matrix(classes, dim);
    h.b.assign(classes, 0.0);
    Rng rng(derive_seed(seed, {0x4845'4144ull}));
    const double bound = std::sqrt(6.0 / static_cast<double>(classes + dim));
    for (std::size_t i = 0; i < h.w.size(); ++i) {
      h.w.data()[i] = rng.uniform(-bound, bound);
    }
    return h;
  }

  std::size_t classes() const { return w.rows(); }

  Matrix logits(const Matrix& features) const {
    Matrix z = matmul_nt(features, w);
    add_row_inplace(z, b);
    return z;
  }
};

inline double accuracy_against(const Matrix& logits,
                               const std::vector<int>& labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < z.size(); ++j) {
      if (z[j] > z[best]) best = j;
    }
    if (static_cast<int>(best) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

struct TrainResult {
  ModelParams params;      // trained extractor; frozen from here on
  LinearHead head;         // the discarded training head (kept for ablations)
  PrototypeBank bank;      // base prototypes from final features
  double train_accuracy = 0.0;
  double first_epoch_loss = 0.0;
  double final_epoch_loss = 0.0;
};

namespace detail {

// One joint SGD-with-momentum step over extractor + head on a batch slice.
struct TrainerState {
  Vector v_theta;
  Matrix v_w{0, 0};
  Vector v_b;
};

inline double train_step(const Matrix& inputs, const std::vector<int>& labels,
                         ModelParams& params, LinearHead& head,
                         TrainerState& state, double lr, double momentum,
                         double weight_decay) {
  GradientTape tape;
  Matrix features = params.net.forward(params.theta, inputs, &tape);
  Matrix logits = head.logits(features);
  CrossEntropy ce = cross_entropy(logits, labels);

  Matrix dw = matmul_tn(ce.dlogits, features);
  Vector db = column_sums(ce.dlogits);
  Matrix dfeatures = matmul_nn(ce.dlogits, head.w);
  Vector dtheta = params.net.backward(params.theta, tape, dfeatures);

  if (weight_decay > 0.0) {
    axpy(weight_decay, params.theta, dtheta);
    axpy(weight_decay, {head.w.data(), head.w.size()}, {dw.data(), dw.size()});
  }

  for (std::size_t i = 0; i < dtheta.size(); ++i) {
    state.v_theta[i] = momentum * state.v_theta[i] + dtheta[i];
    params.theta[i] -= lr * state.v_theta[i];
  }
  for (std::size_t i = 0; i < dw.size(); ++i) {
    state.v_w.data()[i] = momentum * state.v_w.data()[i] + dw.data()[i];
    head.w.data()[i] -= lr * state.v_w.data()[i];
  }
  for (std::size_t i = 0; i < db.size(); ++i) {
    state.v_b[i] = momentum * state.v_b[i] + db[i];
    head.b[i] -= lr * state.v_b[i];
  }
  return ce.loss;
}

}  // namespace detail

// Trains extractor + head on the labeled base session, checks the training
// accuracy floor, and returns the frozen extractor with its base prototypes.
// tau/alpha configure the returned bank.
inline TrainResult train_base(const Batch& base, ModelParams params,
                              const TrainConfig& cfg, double tau = 16.0,
                              double alpha = 0.1) {
  cfg.validate();
  if (!base.labels) throw ArgumentError("base session batch must be labeled");
  if (base.inputs.rows() == 0) throw ArgumentError("base session is empty");
  const std::vector<int>& labels = *base.labels;

  int max_label = 0;
  for (int y : labels) {
    if (y < 0) throw ArgumentError("negative class label");
    max_label = std::max(max_label, y);
  }
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;

  TrainResult out;
  out.params = std::move(params);
  out.head = LinearHead::init(classes, out.params.net.output_dim(), cfg.seed);
  out.bank = PrototypeBank(tau, alpha);

  detail::TrainerState state;
  state.v_theta.assign(out.params.theta.size(), 0.0);
  state.v_w = Matrix(out.head.w.rows(), out.head.w.cols(), 0.0);
  state.v_b.assign(out.head.b.size(), 0.0);

  const std::size_t n = base.inputs.rows();
  std::vector<std::size_t> order(n);
  const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, {0x5348'5546ull, epoch}));
    for (std::size_t i = n; i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }

    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, n);
      Matrix inputs(hi - lo, base.inputs.cols());
      std::vector<int> y(hi - lo);
      for (std::size_t r = lo; r < hi; ++r) {
        std::copy(base.inputs.row(order[r]).begin(),
                  base.inputs.row(order[r]).end(), inputs.row(r - lo).data());
        y[r - lo] = labels[order[r]];
      }
      const double lr = cosine_lr(step, total_steps, cfg.lr);
      epoch_loss += detail::train_step(inputs, y, out.params, out.head, state,
                                       lr, cfg.momentum, cfg.weight_decay);
      ++step;
    }
    epoch_loss /= static_cast<double>(batches_per_epoch);
    if (epoch == 0) out.first_epoch_loss = epoch_loss;
    if (epoch + 1 == cfg.epochs) out.final_epoch_loss = epoch_loss;
  }

  // Final pass: training accuracy gate, then prototypes from final features.
  Matrix features = out.params.net.forward(out.params.theta, base.inputs);
  out.train_accuracy = accuracy_against(out.head.logits(features), labels);
  if (out.train_accuracy < cfg.accuracy_floor) {
    throw RunError("base training accuracy " +
                   std::to_string(out.train_accuracy) + " below floor " +
                   std::to_string(cfg.accuracy_floor));
  }

  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t rows = 0;
    for (int y : labels) rows += (y == static_cast<int>(c)) ? 1 : 0;
    if (rows == 0) continue;  // class absent from the base batch
    Matrix of_class(rows, features.cols());
    std::size_t r = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == static_cast<int>(c)) {
        std::copy(features.row(i).begin(), features.row(i).end(),
                  of_class.row(r++).data());
      }
    }
    out.bank.add_base(static_cast<int>(c), compute_prototype(of_class));
  }
  return out;
}

}  // namespace csfa
