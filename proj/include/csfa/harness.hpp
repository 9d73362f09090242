#pragma once

// End-to-end experiment orchestration: base training, then per incremental
// session ingest the labeled few-shot batch (register calibrated prototypes),
// adapt on unlabeled drifted target batches, and evaluate on a held-out
// target batch over all seen classes. Also provides the ablation ladder, the
// hyperparameter grid, and deterministic CSV result emission.
//
// Method ladder:
//   csfa_v1  fine-tune the linear head (and extractor) on each few-shot batch
//   csfa_v2  prototype classifier, uncalibrated (alpha forced to 1), no adapt
//   csfa_v3  v2 plus the full adaptation strategy
//   csfa     v3 plus prototype calibration (the complete method)
//   +tent/+sam/+gsam/+sar: the csfa pipeline with a baseline adapter swapped in

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "csfa/adaptation.hpp"
#include "csfa/errors.hpp"
#include "csfa/prototypes.hpp"
#include "csfa/streams.hpp"
#include "csfa/training.hpp"

namespace csfa {

enum class Method {
  CsfaV1,
  CsfaV2,
  CsfaV3,
  Csfa,
  PlusTent,
  PlusSam,
  PlusGsam,
  PlusSar,
};

inline Method method_from_string(std::string s) {
  if (!s.empty() && s[0] == '+') s = s.substr(1);
  if (s == "csfa_v1" || s == "v1") return Method::CsfaV1;
  if (s == "csfa_v2" || s == "v2") return Method::CsfaV2;
  if (s == "csfa_v3" || s == "v3") return Method::CsfaV3;
  if (s == "csfa" || s == "full") return Method::Csfa;
  if (s == "tent") return Method::PlusTent;
  if (s == "sam") return Method::PlusSam;
  if (s == "gsam") return Method::PlusGsam;
  if (s == "sar") return Method::PlusSar;
  throw ConfigError("unknown method '" + s + "'");
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::CsfaV1: return "csfa_v1";
    case Method::CsfaV2: return "csfa_v2";
    case Method::CsfaV3: return "csfa_v3";
    case Method::Csfa: return "csfa";
    case Method::PlusTent: return "+tent";
    case Method::PlusSam: return "+sam";
    case Method::PlusGsam: return "+gsam";
    case Method::PlusSar: return "+sar";
  }
  return "?";
}

inline AdapterKind method_default_adapter(Method m) {
  switch (m) {
    case Method::CsfaV1: return AdapterKind::None;
    case Method::CsfaV2: return AdapterKind::None;
    case Method::CsfaV3: return AdapterKind::Rsgs;
    case Method::Csfa: return AdapterKind::Rsgs;
    case Method::PlusTent: return AdapterKind::EntropyMin;
    case Method::PlusSam: return AdapterKind::Sam;
    case Method::PlusGsam: return AdapterKind::Gsam;
    case Method::PlusSar: return AdapterKind::Sar;
  }
  return AdapterKind::None;
}

// Whether the method disables prototype calibration (forces alpha = 1).
inline bool method_uncalibrated(Method m) {
  return m == Method::CsfaV2 || m == Method::CsfaV3;
}

struct RunConfig {
  ScenarioSpec scenario;  // its seed field is replaced by the master seed
  Method method = Method::Csfa;
  TrainConfig train;
  AdaptConfig adapt;
  // When set, adapt.kind is used as given instead of the method's default
  // adapter (e.g. to run csfa_v3 with adaptation switched off).
  bool adapter_override = false;
  std::vector<std::size_t> hidden = {64, 64};  // extractor hidden widths
  double tau = 16.0;
  double alpha = 0.1;
  std::size_t adapt_batches = 0;  // per session; 0 = target budget / batch size
  std::size_t eval_count = 0;     // held-out eval batch; 0 = target budget
  std::uint64_t seed = 1;         // master seed; derives all stage seeds

  void validate() const {
    scenario.validate();
    train.validate();
    adapt.validate();
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0,1]");
    if (hidden.empty()) throw ConfigError("extractor needs at least one hidden layer");
    for (std::size_t w : hidden) {
      if (w == 0) throw ConfigError("hidden width must be positive");
    }
  }
};

struct ResultTable {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<double> session_accuracy;  // percent, indexed by session
  double average = 0.0;                  // arithmetic mean of the above
  std::uint64_t config_hash = 0;

  std::string to_csv() const {
    char buf[64];
    std::string out;
    std::snprintf(buf, sizeof(buf), "# config_hash=%016llx\n",
                  static_cast<unsigned long long>(config_hash));
    out += buf;
    out += "method,seed,session,accuracy\n";
    for (std::size_t i = 0; i < session_accuracy.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%llu,%zu,%.4f\n",
                    static_cast<unsigned long long>(seed), i,
                    session_accuracy[i]);
      out += method + ",";
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%llu,avg,%.4f\n",
                  static_cast<unsigned long long>(seed), average);
    out += method + ",";
    out += buf;
    return out;
  }
};

struct RunOutput {
  ResultTable table;
  std::string diagnostics;  // step,mean_entropy,reliable_fraction,grad_norm,h_proxy,reset
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline void hash_field(std::string& s, const char* key, double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s=%.17g;", key, v);
  s += buf;
}

inline void hash_field(std::string& s, const char* key, std::uint64_t v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s=%llu;", key,
                static_cast<unsigned long long>(v));
  s += buf;
}

inline std::uint64_t config_hash(const RunConfig& cfg) {
  std::string s;
  s += method_name(cfg.method);
  s += ";";
  hash_field(s, "seed", cfg.seed);
  hash_field(s, "dim", static_cast<std::uint64_t>(cfg.scenario.input_dim));
  hash_field(s, "base", static_cast<std::uint64_t>(cfg.scenario.base_classes));
  hash_field(s, "sessions", static_cast<std::uint64_t>(cfg.scenario.sessions));
  hash_field(s, "way", static_cast<std::uint64_t>(cfg.scenario.way));
  hash_field(s, "shot", static_cast<std::uint64_t>(cfg.scenario.shot));
  hash_field(s, "per_base",
             static_cast<std::uint64_t>(cfg.scenario.samples_per_base_class));
  hash_field(s, "budget",
             static_cast<std::uint64_t>(cfg.scenario.target_per_session));
  hash_field(s, "class_std", cfg.scenario.class_std);
  hash_field(s, "mean_radius", cfg.scenario.mean_radius);
  hash_field(s, "affinity", cfg.scenario.novel_affinity);
  hash_field(s, "shift0",
             static_cast<std::uint64_t>(cfg.scenario.shift_session0 ? 1 : 0));
  hash_field(s, "custom_drift",
             static_cast<std::uint64_t>(cfg.scenario.drift.size()));
  hash_field(s, "epochs", static_cast<std::uint64_t>(cfg.train.epochs));
  hash_field(s, "train_batch", static_cast<std::uint64_t>(cfg.train.batch_size));
  hash_field(s, "train_lr", cfg.train.lr);
  hash_field(s, "train_momentum", cfg.train.momentum);
  hash_field(s, "wd", cfg.train.weight_decay);
  hash_field(s, "floor", cfg.train.accuracy_floor);
  hash_field(s, "rho", cfg.adapt.rho);
  hash_field(s, "beta", cfg.adapt.beta);
  hash_field(s, "e0", cfg.adapt.entropy_threshold);
  hash_field(s, "collapse", cfg.adapt.collapse_threshold);
  hash_field(s, "decay", cfg.adapt.ema_decay);
  hash_field(s, "adapt_lr", cfg.adapt.lr);
  hash_field(s, "adapt_momentum", cfg.adapt.momentum);
  hash_field(s, "adapt_batch", static_cast<std::uint64_t>(cfg.adapt.batch_size));
  hash_field(s, "passes", static_cast<std::uint64_t>(cfg.adapt.passes));
  s += adapter_kind_name(cfg.adapter_override ? cfg.adapt.kind
                                              : method_default_adapter(cfg.method));
  s += ";";
  hash_field(s, "subset",
             static_cast<std::uint64_t>(cfg.adapt.subset == ParamSubset::All ? 0 : 1));
  for (std::size_t w : cfg.hidden) hash_field(s, "h", static_cast<std::uint64_t>(w));
  hash_field(s, "tau", cfg.tau);
  hash_field(s, "alpha", cfg.alpha);
  hash_field(s, "adapt_batches", static_cast<std::uint64_t>(cfg.adapt_batches));
  hash_field(s, "eval", static_cast<std::uint64_t>(cfg.eval_count));
  return fnv1a(s);
}

// Fine-tunes extractor + extended head on one few-shot batch. Deliberately
// naive: every parameter moves, and only the few new shots are in the loss,
// so earlier classes degrade. Internal constants, not exposed as config.
inline void finetune_on_shots(const Batch& shots, ModelParams& params,
                              LinearHead& head, std::uint64_t seed) {
  constexpr double kLr = 0.01;
  constexpr double kMomentum = 0.9;
  constexpr std::size_t kEpochs = 30;

  int max_label = 0;
  for (int y : *shots.labels) max_label = std::max(max_label, y);
  const std::size_t need = static_cast<std::size_t>(max_label) + 1;
  if (need > head.classes()) {
    LinearHead grown;
    grown.w = Matrix(need, head.w.cols());
    grown.b.assign(need, 0.0);
    std::copy(head.w.data(), head.w.data() + head.w.size(), grown.w.data());
    std::copy(head.b.begin(), head.b.end(), grown.b.begin());
    Rng rng(derive_seed(seed, {0x4E45'5752ull}));
    const double bound =
        std::sqrt(6.0 / static_cast<double>(need + head.w.cols()));
    for (std::size_t r = head.w.rows(); r < need; ++r) {
      for (std::size_t c = 0; c < grown.w.cols(); ++c) {
        grown.w(r, c) = rng.uniform(-bound, bound);
      }
    }
    head = std::move(grown);
  }

  detail::TrainerState state;
  state.v_theta.assign(params.theta.size(), 0.0);
  state.v_w = Matrix(head.w.rows(), head.w.cols(), 0.0);
  state.v_b.assign(head.b.size(), 0.0);
  for (std::size_t e = 0; e < kEpochs; ++e) {
    detail::train_step(shots.inputs, *shots.labels, params, head, state, kLr,
                       kMomentum, 0.0);
  }
}

inline double percent_accuracy(const std::vector<int>& predicted,
                               const std::vector<int>& truth) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    hits += predicted[i] == truth[i] ? 1 : 0;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(predicted.size());
}

}  // namespace detail

// Scenario plus one base-training result; every method variant of the same
// RunConfig seed shares this work.
struct PreparedBase {
  Scenario scenario;
  TrainResult trained;
};

inline PreparedBase prepare_base(const RunConfig& cfg) {
  cfg.validate();
  ScenarioSpec spec = cfg.scenario;
  spec.seed = derive_seed(cfg.seed, {0x5343'454Eull});
  Scenario scenario = Scenario::build(spec);

  TrainConfig tcfg = cfg.train;
  tcfg.seed = derive_seed(cfg.seed, {0x5452'4149ull});
  Mlp net = Mlp::stack(spec.input_dim, cfg.hidden);
  ModelParams params =
      ModelParams::init(std::move(net), derive_seed(cfg.seed, {0x494E'4954ull}));

  Batch base = scenario.sample_source(0, 0);
  TrainResult trained =
      train_base(base, std::move(params), tcfg, cfg.tau, cfg.alpha);
  return PreparedBase{std::move(scenario), std::move(trained)};
}

// Runs the incremental protocol for cfg.method on an already-prepared base.
inline RunOutput run_prepared(const RunConfig& cfg, const PreparedBase& base) {
  cfg.validate();
  const Scenario& sc = base.scenario;
  const ScenarioSpec& spec = sc.spec();

  const double alpha_eff = method_uncalibrated(cfg.method) ? 1.0 : cfg.alpha;
  PrototypeBank bank(cfg.tau, alpha_eff);
  for (const auto& e : base.trained.bank.entries()) {
    bank.add(e.class_id, e.vector, e.origin);
  }

  ModelParams params = base.trained.params;
  LinearHead head = base.trained.head;

  AdaptConfig acfg = cfg.adapt;
  if (!cfg.adapter_override) acfg.kind = method_default_adapter(cfg.method);
  if (acfg.entropy_threshold <= 0.0) {
    acfg.entropy_threshold = default_entropy_threshold(sc.total_classes());
  }
  const std::size_t eval_count =
      cfg.eval_count ? cfg.eval_count : spec.target_per_session;
  const std::size_t n_batches =
      cfg.adapt_batches
          ? cfg.adapt_batches
          : (spec.target_per_session + acfg.batch_size - 1) / acfg.batch_size;

  RunOutput out;
  out.table.method = method_name(cfg.method);
  out.table.seed = cfg.seed;
  out.table.config_hash = detail::config_hash(cfg);
  out.diagnostics =
      "step,mean_entropy,reliable_fraction,grad_norm,h_proxy,reset\n";
  std::size_t global_step = 0;

  for (std::size_t session = 0; session < sc.session_count(); ++session) {
    const std::string where = "session " + std::to_string(session);

    // Labeled few-shot ingest: new prototypes (or the fine-tune variant).
    if (session > 0) {
      try {
        Batch shots = sc.sample_source(session, 0);
        if (cfg.method == Method::CsfaV1) {
          detail::finetune_on_shots(shots, params, head,
                                    derive_seed(cfg.seed, {0x4654ull, session}));
        } else {
          Matrix features = params.net.forward(params.theta, shots.inputs);
          for (int id : sc.source_classes(session)) {
            std::size_t rows = 0;
            for (int y : *shots.labels) rows += (y == id) ? 1 : 0;
            Matrix of_class(rows, features.cols());
            std::size_t r = 0;
            for (std::size_t i = 0; i < features.rows(); ++i) {
              if ((*shots.labels)[i] == id) {
                std::copy(features.row(i).begin(), features.row(i).end(),
                          of_class.row(r++).data());
              }
            }
            register_calibrated(bank, id, compute_prototype(of_class));
          }
        }
      } catch (const std::exception& e) {
        throw RunError(where + ", few-shot ingest: " + e.what());
      }
    }

    // Unlabeled adaptation phase. Session 0 has no distribution shift by
    // default, so adaptation starts with the first drifted session unless
    // session-0 shift is switched on.
    if (acfg.kind != AdapterKind::None &&
        (session > 0 || spec.shift_session0)) {
      try {
        std::vector<Matrix> batches;
        batches.reserve(n_batches);
        for (std::size_t b = 0; b < n_batches; ++b) {
          const std::uint64_t window =
              (1ull << 20) + static_cast<std::uint64_t>(b) * acfg.batch_size;
          batches.push_back(
              sc.sample_target(session, acfg.batch_size, window).batch.inputs);
        }
        std::vector<StepDiag> diags = adapt_session(batches, params, bank, acfg);
        char buf[160];
        for (const StepDiag& d : diags) {
          std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6g,%.6g,%d\n",
                        global_step++, d.mean_entropy, d.reliable_fraction,
                        d.grad_norm, d.h_proxy, d.reset ? 1 : 0);
          out.diagnostics += buf;
        }
      } catch (const std::exception& e) {
        throw RunError(where + ", adaptation: " + e.what());
      }
    }

    // Held-out evaluation over all seen classes (draw window 0 never overlaps
    // the adaptation windows above).
    try {
      TargetDraw eval = sc.sample_target(session, eval_count, 0);
      std::vector<int> predicted;
      if (cfg.method == Method::CsfaV1) {
        Matrix features = params.net.forward(params.theta, eval.batch.inputs);
        Matrix logits = head.logits(features);
        predicted.reserve(logits.rows());
        for (std::size_t i = 0; i < logits.rows(); ++i) {
          auto z = logits.row(i);
          std::size_t best = 0;
          for (std::size_t j = 1; j < z.size(); ++j) {
            if (z[j] > z[best]) best = j;
          }
          predicted.push_back(static_cast<int>(best));
        }
      } else {
        predicted = predict(eval.batch, params, bank);
      }
      out.table.session_accuracy.push_back(
          detail::percent_accuracy(predicted, eval.truth));
    } catch (const std::exception& e) {
      throw RunError(where + ", evaluation: " + e.what());
    }
  }

  double sum = 0.0;
  for (double a : out.table.session_accuracy) sum += a;
  out.table.average = sum / static_cast<double>(out.table.session_accuracy.size());
  return out;
}

inline RunOutput run(const RunConfig& cfg) {
  PreparedBase base = prepare_base(cfg);
  return run_prepared(cfg, base);
}

// The four-variant ablation ladder on one shared scenario and base model.
inline std::vector<RunOutput> ablate(const RunConfig& cfg) {
  PreparedBase base = prepare_base(cfg);
  std::vector<RunOutput> out;
  for (Method m :
       {Method::CsfaV1, Method::CsfaV2, Method::CsfaV3, Method::Csfa}) {
    RunConfig c = cfg;
    c.method = m;
    out.push_back(run_prepared(c, base));
  }
  return out;
}

// One run per value of the swept parameter, shared seed.
inline std::vector<RunOutput> grid(const RunConfig& cfg,
                                   const std::string& parameter,
                                   const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("grid needs at least one value");
  std::vector<RunOutput> out;
  for (double v : values) {
    RunConfig c = cfg;
    if (parameter == "tau") {
      c.tau = v;
    } else if (parameter == "alpha") {
      c.alpha = v;
    } else if (parameter == "beta") {
      c.adapt.beta = v;
    } else if (parameter == "batch_size") {
      if (v < 1.0 || v != std::floor(v)) {
        throw ConfigError("batch_size grid values must be positive integers");
      }
      c.adapt.batch_size = static_cast<std::size_t>(v);
    } else if (parameter == "shot") {
      if (v < 1.0 || v != std::floor(v)) {
        throw ConfigError("shot grid values must be positive integers");
      }
      c.scenario.shot = static_cast<std::size_t>(v);
    } else {
      throw ConfigError("unknown grid parameter '" + parameter +
                        "' (expected tau, alpha, beta, batch_size, or shot)");
    }
    out.push_back(run(c));
  }
  return out;
}

}  // namespace csfa
