#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "csfa/adaptation.hpp"
#include "support/oracles.hpp"

using namespace csfa;

namespace {

const double kInf = std::numeric_limits<double>::infinity();

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                     double scale = 1.0) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.gaussian();
  return m;
}

Vector random_vector(std::size_t n, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = rng.gaussian();
  return v;
}

// A small extractor + random bank fixture giving batches with a usable spread
// of entropies.
struct Fixture {
  Mlp net = Mlp::stack(8, {10, 6});
  ModelParams params = ModelParams::init(net, 1001);
  PrototypeBank bank;

  Fixture() {
    Rng rng(1002);
    for (int i = 0; i < 5; ++i) {
      Vector p = random_vector(6, rng);
      scale(2.0, p);
      bank.add_base(i, p);
    }
  }

  Matrix batch(std::uint64_t seed, std::size_t rows = 32) const {
    return random_matrix(rows, 8, seed);
  }
};

AdaptConfig chain_config() {
  AdaptConfig cfg;
  cfg.rho = 0.05;
  cfg.beta = 0.01;
  cfg.entropy_threshold = 1.45;  // splits random batches into kept/filtered
  cfg.collapse_threshold = 0.2;
  cfg.lr = 1e-3;  // large enough that any mismatch would show in theta
  return cfg;
}

// Runs `kind` over the same three batches from the same initial parameters.
Vector run_chain(const Fixture& fx, AdaptConfig cfg, AdapterKind kind) {
  cfg.kind = kind;
  ModelParams params = fx.params;
  std::vector<Matrix> batches = {fx.batch(1), fx.batch(2), fx.batch(3)};
  adapt_session(batches, params, fx.bank, cfg);
  return params.theta;
}

}  // namespace

TEST(EntropyLoss, UniformAndConfidentClosedForms) {
  // Orthonormal prototypes; a feature orthogonal to all of them scores
  // uniformly; a huge multiple of one prototype is maximally confident.
  PrototypeBank bank;
  for (int i = 0; i < 4; ++i) {
    Vector e(6, 0.0);
    e[i] = 1.0;
    bank.add_base(i, e);
  }
  Mlp net({{6, 6, Activation::Identity}});
  Vector theta(net.param_count(), 0.0);
  for (int i = 0; i < 6; ++i) theta[i * 6 + i] = 1.0;  // identity weights
  ModelParams params(net, theta);

  Batch b;
  b.inputs = Matrix(2, 6, 0.0);
  b.inputs(0, 5) = 3.0;   // orthogonal to every prototype
  b.inputs(1, 0) = 50.0;  // squarely on prototype 0
  auto [per_sample, mean] = entropy_loss(b, params, bank);
  EXPECT_NEAR(per_sample[0], std::log(4.0), 1e-12);
  EXPECT_NEAR(per_sample[1], 0.0, 1e-12);
  EXPECT_NEAR(mean, 0.5 * std::log(4.0), 1e-9);
}

TEST(EntropyLoss, ThresholdFormulaAtThousandClasses) {
  EXPECT_EQ(default_entropy_threshold(1000), 0.4 * std::log(1000.0));
  EXPECT_NEAR(default_entropy_threshold(1000), 2.7631, 1e-4);
  EXPECT_THROW(default_entropy_threshold(1), ArgumentError);
}

TEST(EntropyLoss, EmptyBatchRejected) {
  Fixture fx;
  Batch b;
  b.inputs = Matrix(0, 8);
  EXPECT_THROW(entropy_loss(b, fx.params, fx.bank), ArgumentError);
}

TEST(ReliabilityMask, StrictInequalityAtThreshold) {
  Vector h{0.1, 0.2, 0.4, 0.39999};
  std::vector<std::uint8_t> mask = reliability_mask(h, 0.4);
  EXPECT_EQ(mask, (std::vector<std::uint8_t>{1, 1, 0, 1}));

  std::vector<std::uint8_t> all = reliability_mask(Vector{0.0, 0.1}, 0.4);
  EXPECT_EQ(all, (std::vector<std::uint8_t>{1, 1}));

  EXPECT_THROW(reliability_mask(h, 0.0), ArgumentError);
}

TEST(Perturbation, ClosedFormAndNormInvariant) {
  bool degenerate = true;
  Vector eps = perturbation(Vector{3.0, 4.0}, 0.05, &degenerate);
  EXPECT_FALSE(degenerate);
  EXPECT_NEAR(eps[0], 0.03, 1e-15);
  EXPECT_NEAR(eps[1], 0.04, 1e-15);

  Rng rng(51);
  for (int rep = 0; rep < 1000; ++rep) {
    Vector g = random_vector(20, rng);
    Vector e = perturbation(g, 0.05);
    EXPECT_NEAR(norm(e), 0.05, 1e-12);
  }
}

TEST(Perturbation, ZeroGradientDegenerate) {
  bool degenerate = false;
  Vector eps = perturbation(Vector(4, 0.0), 0.05, &degenerate);
  EXPECT_TRUE(degenerate);
  EXPECT_EQ(eps, Vector(4, 0.0));

  Vector zero_rho = perturbation(Vector{1.0, 2.0}, 0.0);
  EXPECT_EQ(zero_rho, Vector(2, 0.0));
}

TEST(SharpnessGrad, ZeroRadiusCollapsesToPlainGradient) {
  Fixture fx;
  ModelParams params = fx.params;
  Matrix inputs = fx.batch(61);
  SharpnessGrads sg = sharpness_grad(inputs, params, fx.bank, 0.0, nullptr);
  EXPECT_EQ(sg.g_sa, sg.g_e);
  EXPECT_EQ(sg.loss_at_perturbed, sg.loss_at_theta);
}

TEST(SharpnessGrad, ThetaRestoredBitExactly) {
  Fixture fx;
  ModelParams params = fx.params;
  Vector before = params.theta;
  sharpness_grad(fx.batch(62), params, fx.bank, 0.05, nullptr);
  EXPECT_EQ(params.theta, before);
}

TEST(SharpnessGrad, AllSamplesFilteredGivesZeroGradients) {
  Fixture fx;
  ModelParams params = fx.params;
  Matrix inputs = fx.batch(63, 8);
  std::vector<std::uint8_t> none(inputs.rows(), 0);
  SharpnessGrads sg = sharpness_grad(inputs, params, fx.bank, 0.05, &none);
  EXPECT_EQ(sg.retained, 0u);
  EXPECT_EQ(sg.g_e, Vector(params.theta.size(), 0.0));
  EXPECT_EQ(sg.g_sa, Vector(params.theta.size(), 0.0));
}

// Closed-form oracle: L(x) = 0.5 x'Ax with SPD A. The perturbed gradient must
// be exactly A(x + eps) with eps = rho * Ax / |Ax|, and the sharpness proxy is
// positive on a convex objective.
TEST(SharpnessGrad, QuadraticToyMatchesClosedForm) {
  const std::size_t d = 6;
  Rng rng(71);
  Matrix m = random_matrix(d, d, 72);
  Matrix a = matmul_tn(m, m);  // SPD (plus a ridge)
  for (std::size_t i = 0; i < d; ++i) a(i, i) += 0.1;

  auto apply_a = [&](const Vector& x) {
    Vector out(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) out[i] += a(i, j) * x[j];
    }
    return out;
  };
  auto objective = [&](const Vector& x) {
    Vector ax = apply_a(x);
    return std::make_pair(0.5 * dot(x, ax), ax);
  };

  for (int rep = 0; rep < 20; ++rep) {
    Vector x = random_vector(d, rng);
    Vector x_in = x;
    const double rho = 0.1;
    SharpnessGrads sg = sharpness_pair(objective, x_in, rho);
    EXPECT_EQ(x_in, x);  // restored

    Vector ax = apply_a(x);
    Vector eps = perturbation(ax, rho);
    Vector xp = x;
    axpy(1.0, eps, xp);
    Vector expect = apply_a(xp);
    for (std::size_t i = 0; i < d; ++i) {
      EXPECT_NEAR(sg.g_sa[i], expect[i], 1e-8);
    }
    EXPECT_GT(sg.loss_at_perturbed - sg.loss_at_theta, 0.0);
  }
}

TEST(Decompose, ClosedFormsAndOrthogonality) {
  Decomposition d = decompose(Vector{1.0, 1.0}, Vector{1.0, 0.0});
  EXPECT_EQ(d.g_parallel, (Vector{1.0, 0.0}));
  EXPECT_EQ(d.g_perp, (Vector{0.0, 1.0}));

  // g_e parallel to g_sa -> perp vanishes.
  Decomposition par = decompose(Vector{2.0, 4.0}, Vector{1.0, 2.0});
  EXPECT_NEAR(norm(par.g_perp), 0.0, 1e-12);

  // g_e orthogonal to g_sa -> parallel vanishes.
  Decomposition orth = decompose(Vector{0.0, 3.0}, Vector{1.0, 0.0});
  EXPECT_EQ(orth.g_parallel, (Vector{0.0, 0.0}));

  // Degenerate g_sa.
  Decomposition deg = decompose(Vector{1.0, 2.0}, Vector{0.0, 0.0});
  EXPECT_TRUE(deg.degenerate);
  EXPECT_EQ(deg.g_perp, (Vector{1.0, 2.0}));
}

TEST(Decompose, OrthogonalityPropertyOverRandomPairs) {
  Rng rng(81);
  for (int rep = 0; rep < 1000; ++rep) {
    Vector ge = random_vector(50, rng);
    Vector gsa = random_vector(50, rng);
    Decomposition d = decompose(ge, gsa);
    const double np = norm(d.g_perp);
    const double ns = norm(gsa);
    if (np > 1e-10 && ns > 1e-10) {
      EXPECT_LT(std::abs(dot(d.g_perp, gsa)) / (np * ns), 1e-7);
    }
    // Recomposition: parallel + perp = g_e.
    for (std::size_t i = 0; i < ge.size(); ++i) {
      EXPECT_NEAR(d.g_parallel[i] + d.g_perp[i], ge[i], 1e-9);
    }
  }
}

// The module's entropy gradient against central finite differences of the
// retained-mean entropy, computed through the public evaluation path only.
TEST(GradientPath, MatchesFiniteDifferences) {
  Fixture fx;
  Matrix inputs = fx.batch(91, 12);
  ModelParams probe = fx.params;
  EntropyEval ev = entropy_eval(inputs, probe, fx.bank, nullptr, false);
  std::vector<std::uint8_t> mask = reliability_mask(ev.per_sample, 1.5);

  ModelParams params = fx.params;
  SharpnessGrads sg = sharpness_grad(inputs, params, fx.bank, 0.0, &mask);

  Mlp net = fx.net;
  Vector fd = oracle::finite_difference(
      [&](const Vector& th) {
        ModelParams p(net, th);
        return entropy_eval(inputs, p, fx.bank, &mask, false).mean_retained;
      },
      fx.params.theta, 1e-5);
  EXPECT_LT(oracle::gradient_mismatch(sg.g_e, fd), 1e-4);
}

TEST(AdaptStep, EntirelyUnreliableBatchLeavesThetaUntouched) {
  Fixture fx;
  AdaptConfig cfg = chain_config();
  cfg.kind = AdapterKind::Rsgs;
  cfg.entropy_threshold = 1e-6;  // nothing passes
  ModelParams params = fx.params;
  AdaptState state = AdaptState::begin(params);
  StepDiag d = adapt_step(fx.batch(95), params, fx.bank, cfg, state);
  EXPECT_EQ(params.theta, fx.params.theta);
  EXPECT_EQ(d.reliable_fraction, 0.0);
}

TEST(AdaptStep, CollapseResetRestoresSnapshotBitExactly) {
  // Confident inputs: entropies near zero, so the EMA seeds below the
  // collapse threshold and the first step must restore the snapshot.
  PrototypeBank bank;
  for (int i = 0; i < 3; ++i) {
    Vector e(4, 0.0);
    e[i] = 10.0;
    bank.add_base(i, e);
  }
  Mlp net({{4, 4, Activation::Identity}});
  Vector theta(net.param_count(), 0.0);
  for (int i = 0; i < 4; ++i) theta[i * 4 + i] = 1.0;
  ModelParams params(net, theta);
  Vector initial = params.theta;

  Matrix inputs(6, 4, 0.0);
  for (int r = 0; r < 6; ++r) inputs(r, r % 3) = 5.0;

  AdaptConfig cfg;
  cfg.kind = AdapterKind::Rsgs;
  cfg.entropy_threshold = 1.0;  // confident rows are retained
  cfg.lr = 0.1;                 // move theta noticeably before the reset
  AdaptState state = AdaptState::begin(params);
  StepDiag d = adapt_step(inputs, params, bank, cfg, state);

  EXPECT_TRUE(d.reset);
  EXPECT_EQ(state.resets, 1u);
  EXPECT_EQ(params.theta, initial);
  EXPECT_EQ(state.momentum, Vector(params.theta.size(), 0.0));
  EXPECT_FALSE(state.ema_ready);  // EMA re-seeds from the next batch
}

TEST(AdaptStep, FilteredSampleHasZeroInfluence) {
  // Change a filtered row (keeping it filtered) and verify the update bits.
  PrototypeBank bank;
  for (int i = 0; i < 4; ++i) {
    Vector e(6, 0.0);
    e[i] = 1.0;
    bank.add_base(i, e);
  }
  Mlp net({{6, 6, Activation::Identity}});
  Vector theta(net.param_count(), 0.0);
  for (int i = 0; i < 6; ++i) theta[i * 6 + i] = 1.0;

  Matrix inputs(4, 6, 0.0);
  inputs(0, 0) = 8.0;   // confident -> retained
  inputs(1, 1) = 8.0;   // confident -> retained
  inputs(2, 5) = 1.0;   // orthogonal to all prototypes -> max entropy
  inputs(3, 4) = 2.0;   // likewise

  AdaptConfig cfg;
  cfg.kind = AdapterKind::Rsgs;
  cfg.entropy_threshold = 0.7;
  cfg.collapse_threshold = 0.0;  // isolate the filter
  cfg.lr = 0.05;

  ModelParams a(net, theta);
  AdaptState sa = AdaptState::begin(a);
  adapt_step(inputs, a, bank, cfg, sa);

  Matrix modified = inputs;
  modified(2, 5) = 42.0;   // still orthogonal to every prototype
  modified(3, 4) = -17.0;  // likewise
  ModelParams b(net, theta);
  AdaptState sb = AdaptState::begin(b);
  adapt_step(modified, b, bank, cfg, sb);

  EXPECT_NE(a.theta, Vector(net.param_count(), 0.0));
  EXPECT_EQ(a.theta, b.theta);
}

TEST(Reductions, FullMethodWithZeroBetaEqualsSar) {
  Fixture fx;
  AdaptConfig cfg = chain_config();
  cfg.beta = 0.0;
  Vector rsgs = run_chain(fx, cfg, AdapterKind::Rsgs);
  cfg.beta = 0.7;  // sar never reads beta
  Vector sar = run_chain(fx, cfg, AdapterKind::Sar);
  EXPECT_EQ(rsgs, sar);
}

TEST(Reductions, SarWithoutMaskOrGuardEqualsSam) {
  Fixture fx;
  AdaptConfig cfg = chain_config();
  cfg.entropy_threshold = kInf;  // mask retains everything
  cfg.collapse_threshold = 0.0;  // guard disabled
  Vector sar = run_chain(fx, cfg, AdapterKind::Sar);
  Vector sam = run_chain(fx, cfg, AdapterKind::Sam);
  EXPECT_EQ(sar, sam);
}

TEST(Reductions, SamWithZeroRadiusEqualsEntropyMin) {
  Fixture fx;
  AdaptConfig cfg = chain_config();
  cfg.rho = 0.0;
  Vector sam = run_chain(fx, cfg, AdapterKind::Sam);
  cfg.rho = 0.3;  // entropy-min never reads rho
  Vector em = run_chain(fx, cfg, AdapterKind::EntropyMin);
  EXPECT_EQ(sam, em);
}

TEST(Reductions, GsamEqualsFullMethodWhenMaskNeverFires) {
  Fixture fx;
  AdaptConfig cfg = chain_config();
  cfg.entropy_threshold = 1e9;  // every entropy is below the threshold
  Vector rsgs = run_chain(fx, cfg, AdapterKind::Rsgs);
  Vector gsam = run_chain(fx, cfg, AdapterKind::Gsam);
  EXPECT_EQ(rsgs, gsam);
}

TEST(AdaptSession, KindNoneEmitsDiagnosticsWithoutTouchingParams) {
  Fixture fx;
  AdaptConfig cfg;
  cfg.kind = AdapterKind::None;
  ModelParams params = fx.params;
  std::vector<Matrix> batches = {fx.batch(1), fx.batch(2)};
  std::vector<StepDiag> diags = adapt_session(batches, params, fx.bank, cfg);
  EXPECT_EQ(params.theta, fx.params.theta);
  ASSERT_EQ(diags.size(), 2u);
  EXPECT_GT(diags[0].mean_entropy, 0.0);
  EXPECT_EQ(diags[1].step, 1u);
}

TEST(AdaptSession, ConfidentModelBarelyMoves) {
  // Well-separated blobs with prototypes at the true means: with the default
  // learning rate the whole adaptation phase moves theta by less than 1e-3.
  ScenarioSpec spec;
  spec.input_dim = 16;
  spec.base_classes = 6;
  spec.sessions = 0;
  spec.way = 1;
  spec.shot = 1;
  spec.samples_per_base_class = 10;
  spec.class_std = 0.05;
  spec.seed = 3;
  Scenario sc = Scenario::build(spec);

  Mlp net({{16, 16, Activation::Identity}});
  Vector theta(net.param_count(), 0.0);
  for (int i = 0; i < 16; ++i) theta[i * 16 + i] = 1.0;
  ModelParams params(net, theta);
  PrototypeBank bank;
  for (int id = 0; id < 6; ++id) bank.add_base(id, sc.class_mean(id));

  AdaptConfig cfg;  // defaults: rsgs, lr 1e-4
  std::vector<Matrix> batches;
  for (int b = 0; b < 4; ++b) {
    batches.push_back(
        sc.sample_target(0, 256, (1u << 20) + 256u * static_cast<unsigned>(b))
            .batch.inputs);
  }
  Vector before = params.theta;
  adapt_session(batches, params, bank, cfg);
  Vector delta = params.theta;
  axpy(-1.0, before, delta);
  EXPECT_LT(norm(delta), 1e-3);
}

TEST(AdaptConfig, ValidationRejectsBadValues) {
  AdaptConfig cfg;
  cfg.rho = -0.1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.ema_decay = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  EXPECT_NO_THROW(cfg.validate());
}

TEST(BaselineStep, RejectsNonBaselineKinds) {
  Fixture fx;
  ModelParams params = fx.params;
  AdaptState state = AdaptState::begin(params);
  AdaptConfig cfg;
  EXPECT_THROW(
      baseline_step(AdapterKind::None, fx.batch(1), params, fx.bank, cfg, state),
      ConfigError);
  EXPECT_THROW(
      baseline_step(AdapterKind::Rsgs, fx.batch(1), params, fx.bank, cfg, state),
      ConfigError);
  EXPECT_NO_THROW(
      baseline_step(AdapterKind::Sam, fx.batch(1), params, fx.bank, cfg, state));
}
