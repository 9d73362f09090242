#pragma once

// Training-free class-incremental classifier: one prototype per class, class
// scores are raw dot products against a frozen feature extractor, and novel
// prototypes estimated from few shots are calibrated by mixing in similar base
// prototypes. Base prototypes are append-only and never change afterwards.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "csfa/errors.hpp"
#include "csfa/linalg.hpp"
#include "csfa/net.hpp"
#include "csfa/streams.hpp"

namespace csfa {

enum class PrototypeOrigin : std::uint8_t { Base = 0, CalibratedNovel = 1 };

struct PrototypeEntry {
  int class_id = 0;
  PrototypeOrigin origin = PrototypeOrigin::Base;
  Vector vector;
};

// Mean feature of one class: the arithmetic mean of the rows.
inline Vector compute_prototype(const Matrix& features_of_class) {
  if (features_of_class.rows() == 0) {
    throw ArgumentError("cannot build a prototype from an empty class");
  }
  Vector mean(features_of_class.cols(), 0.0);
  for (std::size_t r = 0; r < features_of_class.rows(); ++r) {
    axpy(1.0, features_of_class.row(r), mean);
  }
  scale(1.0 / static_cast<double>(features_of_class.rows()), mean);
  return mean;
}

// Scaled cosine similarity between two prototypes; lives in [-tau, tau].
inline double similarity(std::span<const double> a, std::span<const double> b,
                         double tau) {
  if (!(tau > 0.0)) throw ArgumentError("similarity scale must be positive");
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) {
    throw ArgumentError("similarity undefined for a zero-norm vector");
  }
  return tau * dot(a, b) / (na * nb);
}

class PrototypeBank {
 public:
  explicit PrototypeBank(double tau = 16.0, double alpha = 0.1)
      : tau_(tau), alpha_(alpha) {
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0,1]");
  }

  double tau() const { return tau_; }
  double alpha() const { return alpha_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t dim() const { return entries_.empty() ? 0 : entries_[0].vector.size(); }
  const std::vector<PrototypeEntry>& entries() const { return entries_; }

  bool contains(int class_id) const {
    for (const auto& e : entries_) {
      if (e.class_id == class_id) return true;
    }
    return false;
  }

  const Vector& prototype(int class_id) const {
    for (const auto& e : entries_) {
      if (e.class_id == class_id) return e.vector;
    }
    throw ArgumentError("no prototype for class id " + std::to_string(class_id));
  }

  std::size_t base_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.origin == PrototypeOrigin::Base) ++n;
    }
    return n;
  }

  void add(int class_id, Vector proto, PrototypeOrigin origin) {
    if (contains(class_id)) {
      throw ArgumentError("duplicate prototype for class id " +
                          std::to_string(class_id));
    }
    if (!entries_.empty() && proto.size() != dim()) {
      throw DimensionError("prototype dimension does not match bank");
    }
    require_finite(proto, "prototype");
    entries_.push_back({class_id, origin, std::move(proto)});
  }

  void add_base(int class_id, Vector proto) {
    add(class_id, std::move(proto), PrototypeOrigin::Base);
  }

 private:
  double tau_;
  double alpha_;
  std::vector<PrototypeEntry> entries_;
};

// Raw per-class scores: the dot product of the feature with each prototype,
// in bank entry order.
inline Vector class_scores(std::span<const double> feature,
                           const PrototypeBank& bank) {
  if (bank.empty()) throw StateError("prototype bank is empty");
  Vector scores;
  scores.reserve(bank.size());
  for (const auto& e : bank.entries()) {
    scores.push_back(dot(feature, e.vector));
  }
  return scores;
}

// Numerically stable softmax; entries positive and summing to 1.
inline Vector softmax(std::span<const double> z) {
  if (z.empty()) throw ArgumentError("softmax of an empty vector");
  double zmax = z[0];
  for (double v : z) zmax = std::max(zmax, v);
  Vector p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - zmax);
    sum += p[i];
  }
  scale(1.0 / sum, p);
  return p;
}

// Class posterior: softmax over the raw prototype dot products.
inline Vector class_probabilities(std::span<const double> feature,
                                  const PrototypeBank& bank) {
  return softmax(class_scores(feature, bank));
}

// Softmax weights over the *base* prototypes by scaled cosine similarity to a
// novel prototype. Returned in bank entry order restricted to base entries.
inline Vector base_weights(std::span<const double> c_new,
                           const PrototypeBank& bank) {
  Vector sims;
  for (const auto& e : bank.entries()) {
    if (e.origin != PrototypeOrigin::Base) continue;
    sims.push_back(similarity(e.vector, c_new, bank.tau()));
  }
  if (sims.empty()) throw StateError("bank holds no base prototypes");
  return softmax(sims);
}

// Calibrated novel prototype: alpha keeps the few-shot estimate, (1 - alpha)
// redistributes onto base prototypes by similarity weight. The result is a
// convex combination of {c_new} and the base prototypes.
inline Vector calibrate(const Vector& c_new, const PrototypeBank& bank,
                        double alpha, double tau) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("alpha must lie in [0,1]");
  if (!(tau > 0.0)) throw ArgumentError("tau must be positive");
  Vector sims;
  for (const auto& e : bank.entries()) {
    if (e.origin != PrototypeOrigin::Base) continue;
    sims.push_back(similarity(e.vector, c_new, tau));
  }
  if (sims.empty()) throw StateError("bank holds no base prototypes");
  Vector weights = softmax(sims);
  Vector out = scaled(c_new, alpha);
  std::size_t b = 0;
  for (const auto& e : bank.entries()) {
    if (e.origin != PrototypeOrigin::Base) continue;
    axpy((1.0 - alpha) * weights[b], e.vector, out);
    ++b;
  }
  return out;
}

// Calibrates with the bank's own (tau, alpha) and registers the result as a
// calibrated-novel prototype. Returns the stored vector.
inline const Vector& register_calibrated(PrototypeBank& bank, int class_id,
                                         const Vector& c_new) {
  Vector adjusted = calibrate(c_new, bank, bank.alpha(), bank.tau());
  bank.add(class_id, std::move(adjusted), PrototypeOrigin::CalibratedNovel);
  return bank.prototype(class_id);
}

// Per-row argmax class under the bank's scores; ties go to the lowest id.
inline std::vector<int> predict(const Matrix& features, const PrototypeBank& bank) {
  if (bank.empty()) throw StateError("prototype bank is empty");
  if (features.cols() != bank.dim()) {
    throw DimensionError("feature dimension does not match prototype bank");
  }
  std::vector<int> labels;
  labels.reserve(features.rows());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    Vector scores = class_scores(features.row(r), bank);
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
      const int id = bank.entries()[i].class_id;
      const int best_id = bank.entries()[best].class_id;
      if (scores[i] > scores[best] ||
          (scores[i] == scores[best] && id < best_id)) {
        best = i;
      }
    }
    labels.push_back(bank.entries()[best].class_id);
  }
  return labels;
}

inline std::vector<int> predict(const Batch& batch, const ModelParams& params,
                                const PrototypeBank& bank) {
  return predict(params.net.forward(params.theta, batch.inputs), bank);
}

}  // namespace csfa
