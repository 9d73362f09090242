#pragma once

// Source-free drift adaptation of the feature extractor against the frozen
// prototype bank. The full method minimizes prediction entropy over reliable
// (low-entropy) samples through a sharpness-aware two-step gradient, adds an
// ascent along the component of the plain entropy gradient orthogonal to the
// sharpness gradient, and guards against entropy collapse by snapshot reset.
//
// Every simpler adapter in the ladder is this same engine with terms switched
// off, which makes the reductions (rsgs -> sar -> sam -> entropy-min) exact
// to the bit on identical batches:
//
//   kind         reliability mask   collapse guard   perturbation   ascent
//   entropy_min        no                no             no            no
//   sam                no                no             yes           no
//   gsam               no                no             yes           yes
//   sar                yes               yes            yes           no
//   rsgs               yes               yes            yes           yes

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "csfa/errors.hpp"
#include "csfa/linalg.hpp"
#include "csfa/net.hpp"
#include "csfa/prototypes.hpp"
#include "csfa/streams.hpp"

namespace csfa {

enum class AdapterKind { None, EntropyMin, Sam, Gsam, Sar, Rsgs };

// Which parameters the adapter may move. BiasOnly restricts updates (and the
// perturbation) to bias coordinates, leaving all weights frozen.
enum class ParamSubset { All, BiasOnly };

inline AdapterKind adapter_kind_from_string(const std::string& s) {
  if (s == "none") return AdapterKind::None;
  if (s == "entropy_min" || s == "tent") return AdapterKind::EntropyMin;
  if (s == "sam") return AdapterKind::Sam;
  if (s == "gsam") return AdapterKind::Gsam;
  if (s == "sar") return AdapterKind::Sar;
  if (s == "rsgs") return AdapterKind::Rsgs;
  throw ConfigError("unknown adapter kind: " + s);
}

inline const char* adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::None: return "none";
    case AdapterKind::EntropyMin: return "entropy_min";
    case AdapterKind::Sam: return "sam";
    case AdapterKind::Gsam: return "gsam";
    case AdapterKind::Sar: return "sar";
    case AdapterKind::Rsgs: return "rsgs";
  }
  return "?";
}

// Entropy threshold scaling with the label-space size: 0.4 * ln(classes).
inline double default_entropy_threshold(std::size_t total_classes) {
  if (total_classes < 2) {
    throw ArgumentError("entropy threshold needs at least two classes");
  }
  return 0.4 * std::log(static_cast<double>(total_classes));
}

struct AdaptConfig {
  double rho = 0.05;        // perturbation radius (L2, parameter space)
  double beta = 0.001;      // ascent coefficient on the orthogonal component
  double entropy_threshold = 0.0;   // reliability cutoff E0; <= 0 resolves to
                                    // default_entropy_threshold(total classes)
  double collapse_threshold = 0.2;  // e0; reset when the entropy EMA sinks
                                    // below it (<= 0 disables the guard)
  double ema_decay = 0.9;
  double lr = 1e-4;
  double momentum = 0.9;
  std::size_t batch_size = 256;
  std::size_t passes = 1;  // epochs over a session's adaptation batches
  AdapterKind kind = AdapterKind::Rsgs;
  ParamSubset subset = ParamSubset::All;

  void validate() const {
    if (!(rho >= 0.0)) throw ConfigError("rho must be >= 0");
    if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
      throw ConfigError("ema_decay must lie in [0,1)");
    }
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("momentum must lie in [0,1)");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (passes == 0) throw ConfigError("passes must be positive");
  }

  double resolved_threshold(std::size_t total_classes) const {
    return entropy_threshold > 0.0 ? entropy_threshold
                                   : default_entropy_threshold(total_classes);
  }
};

// Mutable optimizer state for one adaptation phase. The snapshot is taken at
// phase start and is the reset point for the collapse guard.
struct AdaptState {
  Vector snapshot;
  Vector momentum;
  double entropy_ema = 0.0;
  bool ema_ready = false;  // EMA seeds from the first batch it sees
  std::size_t steps = 0;
  std::size_t resets = 0;

  static AdaptState begin(const ModelParams& params) {
    AdaptState s;
    s.snapshot = params.theta;
    s.momentum.assign(params.theta.size(), 0.0);
    return s;
  }
};

// One row of the adaptation diagnostics log.
struct StepDiag {
  std::size_t step = 0;
  double mean_entropy = 0.0;      // over the whole batch
  double reliable_fraction = 0.0; // retained samples / batch size
  double grad_norm = 0.0;         // norm of the gradient driving the update
  double h_proxy = 0.0;           // loss(theta + eps) - loss(theta)
  bool reset = false;
};

namespace detail {

struct EngineFlags {
  bool mask = false;
  bool guard = false;
  bool perturb = false;  // use rho
  bool ascent = false;   // use beta
};

inline EngineFlags engine_flags(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::None: return {};
    case AdapterKind::EntropyMin: return {false, false, false, false};
    case AdapterKind::Sam: return {false, false, true, false};
    case AdapterKind::Gsam: return {false, false, true, true};
    case AdapterKind::Sar: return {true, true, true, false};
    case AdapterKind::Rsgs: return {true, true, true, true};
  }
  throw ConfigError("unknown adapter kind");
}

// Zeroes gradient coordinates outside the adapted parameter subset.
inline void project_subset(Vector& grad, const Mlp& net, ParamSubset subset) {
  if (subset == ParamSubset::All) return;
  std::size_t off = 0;
  for (const auto& l : net.layers()) {
    for (std::size_t i = 0; i < l.in * l.out; ++i) grad[off + i] = 0.0;
    off += l.param_count();
  }
}

}  // namespace detail

// Per-sample prediction entropies (nats) of the bank's class posterior, plus
// everything needed for one gradient evaluation at the same parameters.
struct EntropyEval {
  Vector per_sample;      // entropy of each row
  double mean_all = 0.0;  // mean over every row
  double mean_retained = 0.0;  // mean over retained rows; 0 if none retained
  std::size_t retained = 0;
  Vector grad;  // d(mean retained entropy)/d(theta); empty unless requested
};

// Evaluates entropies and (optionally) the gradient of the retained-mean
// entropy with respect to the extractor parameters. `mask` selects the
// retained rows; null retains everything. Filtered rows carry exactly zero
// upstream gradient, so their values cannot influence the result.
inline EntropyEval entropy_eval(const Matrix& inputs, const ModelParams& params,
                                const PrototypeBank& bank,
                                const std::vector<std::uint8_t>* mask,
                                bool want_grad) {
  if (inputs.rows() == 0) throw ArgumentError("entropy of an empty batch");
  if (bank.empty()) throw StateError("prototype bank is empty");
  if (mask && mask->size() != inputs.rows()) {
    throw DimensionError("reliability mask length does not match batch");
  }

  GradientTape tape;
  Matrix features =
      params.net.forward(params.theta, inputs, want_grad ? &tape : nullptr);

  const std::size_t n = inputs.rows();
  const std::size_t k = bank.size();
  Matrix protos(k, bank.dim());
  for (std::size_t j = 0; j < k; ++j) {
    std::copy(bank.entries()[j].vector.begin(), bank.entries()[j].vector.end(),
              protos.row(j).data());
  }
  Matrix scores = matmul_nt(features, protos);

  EntropyEval out;
  out.per_sample.resize(n);
  // d(entropy)/d(score_j) = -p_j * (log p_j + H); filled only for retained
  // rows and only when a gradient is requested.
  Matrix dscores(want_grad ? n : 0, want_grad ? k : 0, 0.0);

  double sum_all = 0.0;
  double sum_retained = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto z = scores.row(i);
    double zmax = z[0];
    for (double v : z) zmax = std::max(zmax, v);
    double expsum = 0.0;
    for (double v : z) expsum += std::exp(v - zmax);
    const double lse = zmax + std::log(expsum);
    double h = 0.0;
    for (double v : z) {
      const double logp = v - lse;
      h -= std::exp(logp) * logp;
    }
    out.per_sample[i] = h;
    sum_all += h;
    const bool keep = !mask || (*mask)[i] != 0;
    if (keep) {
      ++out.retained;
      sum_retained += h;
      if (want_grad) {
        for (std::size_t j = 0; j < k; ++j) {
          const double logp = z[j] - lse;
          dscores(i, j) = -std::exp(logp) * (logp + h);
        }
      }
    }
  }
  out.mean_all = sum_all / static_cast<double>(n);
  out.mean_retained =
      out.retained ? sum_retained / static_cast<double>(out.retained) : 0.0;

  if (want_grad) {
    if (out.retained == 0) {
      out.grad.assign(params.theta.size(), 0.0);
      return out;
    }
    scale(1.0 / static_cast<double>(out.retained),
          {dscores.data(), dscores.size()});
    Matrix dfeatures = matmul_nn(dscores, protos);
    out.grad = params.net.backward(params.theta, tape, dfeatures);
  }
  return out;
}

// Per-sample entropies and the mean over retained rows (all rows when no mask
// is given).
inline std::pair<Vector, double> entropy_loss(
    const Batch& batch, const ModelParams& params, const PrototypeBank& bank,
    const std::vector<std::uint8_t>* mask = nullptr) {
  EntropyEval ev = entropy_eval(batch.inputs, params, bank, mask, false);
  return {std::move(ev.per_sample), ev.mean_retained};
}

// Retain samples whose entropy is strictly below the threshold.
inline std::vector<std::uint8_t> reliability_mask(const Vector& per_sample_entropy,
                                                  double threshold) {
  if (!(threshold > 0.0)) throw ArgumentError("entropy threshold must be positive");
  std::vector<std::uint8_t> mask(per_sample_entropy.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = per_sample_entropy[i] < threshold ? 1 : 0;
  }
  return mask;
}

// L2-normalized ascent offset of radius rho. A zero gradient has no ascent
// direction: the result is a zero vector and the step is flagged degenerate.
inline Vector perturbation(const Vector& grad, double rho,
                           bool* degenerate = nullptr) {
  if (!(rho >= 0.0)) throw ArgumentError("rho must be >= 0");
  const double n = norm(grad);
  if (degenerate) *degenerate = (n == 0.0);
  if (n == 0.0 || rho == 0.0) return Vector(grad.size(), 0.0);
  return scaled(grad, rho / n);
}

// The two-step gradient pair: g_e at theta and g_sa at theta + eps, both over
// the same retained set. theta is restored bit-exactly afterwards.
struct SharpnessGrads {
  Vector g_e;
  Vector g_sa;
  double loss_at_theta = 0.0;      // retained-mean entropy at theta
  double loss_at_perturbed = 0.0;  // same at theta + eps
  double mean_entropy = 0.0;       // whole-batch mean at theta
  std::size_t retained = 0;
  bool degenerate = false;         // no perturbation happened (zero g_e)
};

// Same two-step recipe over an arbitrary differentiable objective (returns
// {value, gradient}); the engine below is this specialized to the retained
// entropy loss. Kept generic so closed-form objectives can validate the
// perturb-then-regrad structure directly.
template <typename Objective>
SharpnessGrads sharpness_pair(Objective&& objective, Vector& x, double rho) {
  SharpnessGrads out;
  auto [value, grad] = objective(x);
  out.g_e = std::move(grad);
  out.loss_at_theta = value;
  Vector eps = perturbation(out.g_e, rho, &out.degenerate);
  if (out.degenerate || rho == 0.0) {
    out.g_sa = out.g_e;
    out.loss_at_perturbed = out.loss_at_theta;
    return out;
  }
  const Vector saved = x;
  axpy(1.0, eps, x);
  auto [pvalue, pgrad] = objective(x);
  x = saved;
  out.g_sa = std::move(pgrad);
  out.loss_at_perturbed = pvalue;
  return out;
}

inline SharpnessGrads sharpness_grad(const Matrix& inputs, ModelParams& params,
                                     const PrototypeBank& bank, double rho,
                                     const std::vector<std::uint8_t>* mask,
                                     ParamSubset subset = ParamSubset::All) {
  SharpnessGrads out;
  EntropyEval at_theta = entropy_eval(inputs, params, bank, mask, true);
  out.g_e = std::move(at_theta.grad);
  detail::project_subset(out.g_e, params.net, subset);
  out.loss_at_theta = at_theta.mean_retained;
  out.mean_entropy = at_theta.mean_all;
  out.retained = at_theta.retained;

  Vector eps = perturbation(out.g_e, rho, &out.degenerate);
  if (out.degenerate || rho == 0.0) {
    out.g_sa = out.g_e;
    out.loss_at_perturbed = out.loss_at_theta;
    return out;
  }

  const Vector saved = params.theta;
  axpy(1.0, eps, params.theta);
  EntropyEval at_pert = entropy_eval(inputs, params, bank, mask, true);
  params.theta = saved;  // bit-exact restore
  out.g_sa = std::move(at_pert.grad);
  detail::project_subset(out.g_sa, params.net, subset);
  out.loss_at_perturbed = at_pert.mean_retained;
  return out;
}

// Splits g_e into its component along g_sa and the orthogonal remainder.
struct Decomposition {
  Vector g_parallel;
  Vector g_perp;
  bool degenerate = false;  // g_sa ~ 0: parallel part is zero, perp = g_e
};

inline Decomposition decompose(const Vector& g_e, const Vector& g_sa) {
  detail::require_same_length(g_e.size(), g_sa.size(), "decompose");
  Decomposition d;
  const double denom = dot(g_sa, g_sa);
  if (denom == 0.0) {
    d.g_parallel.assign(g_e.size(), 0.0);
    d.g_perp = g_e;
    d.degenerate = true;
    return d;
  }
  const double coef = dot(g_e, g_sa) / denom;
  d.g_parallel = scaled(g_sa, coef);
  d.g_perp = g_e;
  axpy(-coef, g_sa, d.g_perp);
  return d;
}

// One optimizer step of the configured adapter over one batch. Applies the
// reliability mask, the two-step sharpness gradient, the orthogonal ascent
// term, an SGD-with-momentum update, and the collapse guard, each only when
// the adapter kind enables it.
inline StepDiag adapt_step(const Matrix& inputs, ModelParams& params,
                           const PrototypeBank& bank, const AdaptConfig& cfg,
                           AdaptState& state) {
  cfg.validate();
  const detail::EngineFlags flags = detail::engine_flags(cfg.kind);
  StepDiag diag;
  diag.step = state.steps;

  if (cfg.kind == AdapterKind::None) {
    EntropyEval ev = entropy_eval(inputs, params, bank, nullptr, false);
    diag.mean_entropy = ev.mean_all;
    diag.reliable_fraction = 1.0;
    ++state.steps;
    return diag;
  }

  // The mask is computed once, at theta, before any perturbation; both
  // gradient evaluations share it.
  std::vector<std::uint8_t> mask;
  const std::vector<std::uint8_t>* mask_ptr = nullptr;
  if (flags.mask) {
    EntropyEval probe = entropy_eval(inputs, params, bank, nullptr, false);
    mask = reliability_mask(probe.per_sample,
                            cfg.resolved_threshold(bank.size()));
    mask_ptr = &mask;
  }

  const double rho = flags.perturb ? cfg.rho : 0.0;
  SharpnessGrads sg =
      sharpness_grad(inputs, params, bank, rho, mask_ptr, cfg.subset);
  diag.mean_entropy = sg.mean_entropy;
  diag.reliable_fraction =
      static_cast<double>(sg.retained) / static_cast<double>(inputs.rows());
  diag.h_proxy = sg.loss_at_perturbed - sg.loss_at_theta;

  Vector direction = sg.g_sa;
  if (flags.ascent && cfg.beta > 0.0) {
    Decomposition d = decompose(sg.g_e, sg.g_sa);
    axpy(-cfg.beta, d.g_perp, direction);
  }
  diag.grad_norm = norm(direction);

  if (sg.retained > 0 && diag.grad_norm > 0.0) {
    for (std::size_t i = 0; i < direction.size(); ++i) {
      state.momentum[i] = cfg.momentum * state.momentum[i] + direction[i];
    }
    axpy(-cfg.lr, state.momentum, params.theta);
  }

  if (flags.guard && cfg.collapse_threshold > 0.0) {
    if (!state.ema_ready) {
      state.entropy_ema = sg.mean_entropy;
      state.ema_ready = true;
    } else {
      state.entropy_ema = cfg.ema_decay * state.entropy_ema +
                          (1.0 - cfg.ema_decay) * sg.mean_entropy;
    }
    if (state.entropy_ema < cfg.collapse_threshold) {
      params.theta = state.snapshot;  // bit-exact return to phase start
      state.momentum.assign(state.momentum.size(), 0.0);
      state.ema_ready = false;  // EMA re-seeds from the next batch
      ++state.resets;
      diag.reset = true;
    }
  }

  ++state.steps;
  return diag;
}

// The full method's step.
inline StepDiag rsgs_step(const Matrix& inputs, ModelParams& params,
                          const PrototypeBank& bank, const AdaptConfig& cfg,
                          AdaptState& state) {
  AdaptConfig c = cfg;
  c.kind = AdapterKind::Rsgs;
  return adapt_step(inputs, params, bank, c, state);
}

// A comparison adapter's step; the kind must name one of the baselines.
inline StepDiag baseline_step(AdapterKind kind, const Matrix& inputs,
                              ModelParams& params, const PrototypeBank& bank,
                              const AdaptConfig& cfg, AdaptState& state) {
  if (kind == AdapterKind::None || kind == AdapterKind::Rsgs) {
    throw ConfigError("baseline_step requires one of: entropy_min, sam, gsam, sar");
  }
  AdaptConfig c = cfg;
  c.kind = kind;
  return adapt_step(inputs, params, bank, c, state);
}

// Runs the configured adapter over a session's adaptation batches (cfg.passes
// epochs). Takes the phase snapshot at entry and returns the per-step
// diagnostics; with kind none the parameters stay untouched.
inline std::vector<StepDiag> adapt_session(const std::vector<Matrix>& batches,
                                           ModelParams& params,
                                           const PrototypeBank& bank,
                                           const AdaptConfig& cfg) {
  cfg.validate();
  AdaptState state = AdaptState::begin(params);
  std::vector<StepDiag> diags;
  diags.reserve(batches.size() * cfg.passes);
  for (std::size_t pass = 0; pass < cfg.passes; ++pass) {
    for (const Matrix& b : batches) {
      diags.push_back(adapt_step(b, params, bank, cfg, state));
    }
  }
  return diags;
}

}  // namespace csfa
