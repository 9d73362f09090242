#pragma once

// Synthetic benchmark streams: a labeled source stream made of sessions with
// disjoint label spaces (one large base session plus few-shot increments), and
// an unlabeled target stream over the union of all classes seen so far, with a
// per-session drift transform applied on top.
//
// Classes are Gaussian blobs in R^D with means on a sphere. Every sample is
// addressed by (stream, class id, draw index), so any two draws with different
// addresses are independent and any repeated address is bit-identical. Batch
// disjointness (e.g. adaptation vs. evaluation data) is arranged by handing
// out non-overlapping draw-index windows, never by probabilistic seeding.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "csfa/errors.hpp"
#include "csfa/linalg.hpp"
#include "csfa/rng.hpp"

namespace csfa {

enum class DriftKind { Identity, Rotation, Translation, Scaling, Noise, Compose };

// A distribution-shift transform with a severity dial. Severity scales the
// magnitude of the shift (angle, offset, deviation from unit scale, noise
// std); severity 0 turns every kind into the identity.
struct DriftTransform {
  DriftKind kind = DriftKind::Identity;
  double angle = 0.0;      // rotation, radians, at severity 1
  Vector offset;           // translation at severity 1
  double factor = 1.0;     // scaling at severity 1
  double noise_std = 0.0;  // additive-noise std at severity 1
  double severity = 1.0;
  std::vector<DriftTransform> parts;  // composition, applied in order

  static DriftTransform identity() { return {}; }

  static DriftTransform rotation(double angle, double severity = 1.0) {
    DriftTransform t;
    t.kind = DriftKind::Rotation;
    t.angle = angle;
    t.severity = severity;
    return t;
  }

  static DriftTransform translation(Vector offset, double severity = 1.0) {
    DriftTransform t;
    t.kind = DriftKind::Translation;
    t.offset = std::move(offset);
    t.severity = severity;
    return t;
  }

  static DriftTransform scaling(double factor, double severity = 1.0) {
    DriftTransform t;
    t.kind = DriftKind::Scaling;
    t.factor = factor;
    t.severity = severity;
    return t;
  }

  static DriftTransform noise(double std, double severity = 1.0) {
    DriftTransform t;
    t.kind = DriftKind::Noise;
    t.noise_std = std;
    t.severity = severity;
    return t;
  }

  static DriftTransform compose(std::vector<DriftTransform> parts,
                                double severity = 1.0) {
    DriftTransform t;
    t.kind = DriftKind::Compose;
    t.parts = std::move(parts);
    t.severity = severity;
    return t;
  }
};

namespace detail {

inline void apply_transform_row(const DriftTransform& t, double* row,
                                std::size_t dim, Rng& rng,
                                double outer_severity) {
  const double sev = t.severity * outer_severity;
  switch (t.kind) {
    case DriftKind::Identity:
      return;
    case DriftKind::Rotation: {
      if (dim < 2) throw ConfigError("rotation transform requires dimension >= 2");
      if (sev == 0.0) return;
      // Block rotation: the same Givens angle on each consecutive coordinate
      // pair, so the angle between x and its image is exactly angle*severity.
      const double a = t.angle * sev;
      const double c = std::cos(a);
      const double s = std::sin(a);
      for (std::size_t i = 0; i + 1 < dim; i += 2) {
        const double x = row[i];
        const double y = row[i + 1];
        row[i] = c * x - s * y;
        row[i + 1] = s * x + c * y;
      }
      return;
    }
    case DriftKind::Translation: {
      if (t.offset.size() != dim) {
        throw ConfigError("translation offset length does not match input dimension");
      }
      if (sev == 0.0) return;
      for (std::size_t i = 0; i < dim; ++i) row[i] += sev * t.offset[i];
      return;
    }
    case DriftKind::Scaling: {
      if (sev == 0.0) return;
      const double f = 1.0 + (t.factor - 1.0) * sev;
      for (std::size_t i = 0; i < dim; ++i) row[i] *= f;
      return;
    }
    case DriftKind::Noise: {
      if (sev == 0.0) return;
      const double std_eff = t.noise_std * sev;
      for (std::size_t i = 0; i < dim; ++i) row[i] += std_eff * rng.gaussian();
      return;
    }
    case DriftKind::Compose: {
      for (const auto& part : t.parts) {
        apply_transform_row(part, row, dim, rng, sev);
      }
      return;
    }
  }
  throw ConfigError("unknown drift transform kind");
}

}  // namespace detail

// Applies a drift transform to every row. Stochastic kinds draw from an RNG
// derived from (seed, row), so the result is a pure function of its arguments.
inline Matrix apply_transform(const DriftTransform& t, const Matrix& inputs,
                              std::uint64_t seed = 0) {
  Matrix out = inputs;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    Rng rng(derive_seed(seed, {0x4452'4654ull, r}));
    detail::apply_transform_row(t, out.row(r).data(), out.cols(), rng, 1.0);
  }
  return out;
}

// One batch of samples. Labels are present exactly when the batch comes from
// the labeled source stream.
struct Batch {
  Matrix inputs{0, 0};
  std::optional<std::vector<int>> labels;
  std::size_t session = 0;
  int transform_id = -1;  // index of the drift transform applied; -1 = none
};

// Unlabeled target batch plus the ground truth kept aside for scoring only.
// Nothing on the adaptation path may read `truth`.
struct TargetDraw {
  Batch batch;
  std::vector<int> truth;
};

struct ScenarioSpec {
  std::size_t input_dim = 16;
  std::size_t base_classes = 6;           // classes in the base session
  std::size_t sessions = 4;               // incremental sessions after base
  std::size_t way = 2;                    // new classes per incremental session
  std::size_t shot = 5;                   // labeled samples per new class
  std::size_t samples_per_base_class = 500;
  std::size_t target_per_session = 1000;  // unlabeled budget per target session
  double class_std = 0.35;                // blob std around each class mean
  double mean_radius = 3.0;               // class means live on this sphere
  double novel_affinity = 0.0;  // 0 = novel means independent; ->1 = pulled
                                // toward a base-class mean
  bool shift_session0 = false;  // apply drift at session 0 too
  std::uint64_t seed = 1;
  // One transform per target session (sessions + 1 entries). Empty selects the
  // default schedule: session i rotates by i*(pi/12) and adds noise of std
  // 0.1*i.
  std::vector<DriftTransform> drift;

  std::size_t total_classes() const { return base_classes + sessions * way; }

  void validate() const {
    if (input_dim == 0) throw ConfigError("input_dim must be positive");
    if (base_classes == 0) throw ConfigError("base_classes must be positive");
    if (way == 0) throw ConfigError("way must be positive");
    if (shot == 0) throw ConfigError("shot must be positive");
    if (base_classes < way) {
      throw ConfigError("base_classes must be at least way");
    }
    if (samples_per_base_class == 0) {
      throw ConfigError("samples_per_base_class must be positive");
    }
    if (target_per_session == 0) {
      throw ConfigError("target_per_session must be positive");
    }
    if (!(class_std >= 0.0)) throw ConfigError("class_std must be >= 0");
    if (!(mean_radius > 0.0)) throw ConfigError("mean_radius must be > 0");
    if (!(novel_affinity >= 0.0 && novel_affinity <= 1.0)) {
      throw ConfigError("novel_affinity must lie in [0,1]");
    }
    if (!drift.empty() && drift.size() != sessions + 1) {
      throw ConfigError("drift schedule must list one transform per target session");
    }
  }
};

// Default per-session drift: a fixed rotation+noise recipe whose severity
// grows linearly with the session index (session 0 stays clean unless
// shift_session0 is set).
inline std::vector<DriftTransform> default_drift_schedule(const ScenarioSpec& spec) {
  std::vector<DriftTransform> out;
  out.reserve(spec.sessions + 1);
  for (std::size_t i = 0; i <= spec.sessions; ++i) {
    double severity = static_cast<double>(i);
    if (i == 0 && spec.shift_session0) severity = 1.0;
    out.push_back(DriftTransform::compose(
        {DriftTransform::rotation(std::acos(-1.0) / 12.0),
         DriftTransform::noise(0.1)},
        severity));
  }
  return out;
}

// An immutable generated benchmark: class means, session label layout, and the
// drift schedule. All sampling is a pure function of (scenario, arguments).
class Scenario {
 public:
  static Scenario build(const ScenarioSpec& spec) {
    spec.validate();
    Scenario sc;
    sc.spec_ = spec;
    sc.drift_ = spec.drift.empty() ? default_drift_schedule(spec) : spec.drift;
    const std::size_t total = spec.total_classes();
    sc.means_.reserve(total);
    for (std::size_t k = 0; k < total; ++k) {
      Vector dir(spec.input_dim);
      Rng rng(derive_seed(spec.seed, {0x4D45'414Eull, k}));
      for (double& x : dir) x = rng.gaussian();
      if (k >= spec.base_classes && spec.novel_affinity > 0.0) {
        // Pull novel-class means toward an existing base mean so novel classes
        // overlap the base manifold instead of landing in empty space.
        const Vector& anchor = sc.means_[k % spec.base_classes];
        const double a = spec.novel_affinity;
        double dn = norm(dir);
        if (dn < 1e-12) dn = 1.0;
        for (std::size_t i = 0; i < dir.size(); ++i) {
          dir[i] = (1.0 - a) * (dir[i] / dn) + a * (anchor[i] / spec.mean_radius);
        }
      }
      double n = norm(dir);
      if (n < 1e-12) {
        dir.assign(spec.input_dim, 0.0);
        dir[0] = 1.0;
        n = 1.0;
      }
      scale(spec.mean_radius / n, dir);
      sc.means_.push_back(std::move(dir));
    }
    return sc;
  }

  const ScenarioSpec& spec() const { return spec_; }

  // Source sessions are indexed 0..sessions: 0 is the base session, i >= 1 the
  // i-th few-shot increment. Target sessions use the same index range.
  std::size_t session_count() const { return spec_.sessions + 1; }
  std::size_t total_classes() const { return spec_.total_classes(); }

  std::vector<int> source_classes(std::size_t session) const {
    require_session(session);
    std::vector<int> ids;
    if (session == 0) {
      for (std::size_t k = 0; k < spec_.base_classes; ++k) {
        ids.push_back(static_cast<int>(k));
      }
    } else {
      const std::size_t first = spec_.base_classes + (session - 1) * spec_.way;
      for (std::size_t k = 0; k < spec_.way; ++k) {
        ids.push_back(static_cast<int>(first + k));
      }
    }
    return ids;
  }

  // All classes seen through `session`, i.e. the target-time label space.
  std::vector<int> target_classes(std::size_t session) const {
    require_session(session);
    const std::size_t count = spec_.base_classes + session * spec_.way;
    std::vector<int> ids;
    ids.reserve(count);
    for (std::size_t k = 0; k < count; ++k) ids.push_back(static_cast<int>(k));
    return ids;
  }

  const Vector& class_mean(int class_id) const {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= means_.size()) {
      throw ArgumentError("class id out of range");
    }
    return means_[static_cast<std::size_t>(class_id)];
  }

  const DriftTransform& transform(std::size_t session) const {
    require_session(session);
    return drift_[session];
  }

  // Labeled source batch. The base session returns samples_per_base_class per
  // base class; an incremental session returns way*shot samples. Distinct
  // draw_seed values give non-overlapping draws of fresh data.
  Batch sample_source(std::size_t session, std::uint64_t draw_seed = 0) const {
    require_session(session);
    const std::vector<int> ids = source_classes(session);
    const std::size_t per_class =
        session == 0 ? spec_.samples_per_base_class : spec_.shot;
    Batch b;
    b.session = session;
    b.inputs = Matrix(ids.size() * per_class, spec_.input_dim);
    b.labels.emplace();
    b.labels->reserve(ids.size() * per_class);
    std::size_t r = 0;
    for (int id : ids) {
      for (std::size_t j = 0; j < per_class; ++j, ++r) {
        draw_clean(kSourceStream, id, (draw_seed << 20) + j, b.inputs.row(r));
        b.labels->push_back(id);
      }
    }
    return b;
  }

  // Unlabeled drifted target batch of `count` samples, balanced over all seen
  // classes (round-robin), with ground truth returned separately for scoring.
  // Per-class draw indices start at draw_window; two calls whose windows are
  // at least ceil(count / seen-classes) apart share no underlying samples.
  TargetDraw sample_target(std::size_t session, std::size_t count,
                           std::uint64_t draw_window = 0) const {
    require_session(session);
    const std::vector<int> ids = target_classes(session);
    TargetDraw out;
    out.batch.session = session;
    out.batch.transform_id = static_cast<int>(session);
    out.batch.inputs = Matrix(count, spec_.input_dim);
    out.truth.reserve(count);
    for (std::size_t j = 0; j < count; ++j) {
      const int id = ids[j % ids.size()];
      const std::uint64_t draw = draw_window + j / ids.size();
      draw_clean(kTargetStream, id, draw, out.batch.inputs.row(j));
      out.truth.push_back(id);
    }
    out.batch.inputs = apply_transform(
        drift_[session], out.batch.inputs,
        derive_seed(spec_.seed, {0x5447'4E4Full, session, draw_window}));
    return out;
  }

  // Clean (undrifted) samples of one class; used for inspection and tests.
  Matrix sample_class(int class_id, std::uint64_t first_draw,
                      std::size_t count) const {
    class_mean(class_id);  // range check
    Matrix out(count, spec_.input_dim);
    for (std::size_t j = 0; j < count; ++j) {
      draw_clean(kTargetStream, class_id, first_draw + j, out.row(j));
    }
    return out;
  }

 private:
  // Stream tags keep source and target draw-index spaces fully separate.
  static constexpr std::uint64_t kSourceStream = 0x5352'4343ull;
  static constexpr std::uint64_t kTargetStream = 0x5447'4343ull;

  void require_session(std::size_t session) const {
    if (session > spec_.sessions) throw ArgumentError("session index out of range");
  }

  void draw_clean(std::uint64_t stream, int class_id, std::uint64_t draw,
                  std::span<double> row) const {
    const Vector& mean = means_[static_cast<std::size_t>(class_id)];
    Rng rng(derive_seed(spec_.seed,
                        {stream, static_cast<std::uint64_t>(class_id), draw}));
    for (std::size_t i = 0; i < row.size(); ++i) {
      row[i] = mean[i] + spec_.class_std * rng.gaussian();
    }
  }

  ScenarioSpec spec_;
  std::vector<Vector> means_;
  std::vector<DriftTransform> drift_;
};

}  // namespace csfa
