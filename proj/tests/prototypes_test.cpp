#include <gtest/gtest.h>

#include <cmath>

#include "csfa/prototypes.hpp"
#include "csfa/streams.hpp"
#include "support/oracles.hpp"

using namespace csfa;

namespace {

Vector random_vector(std::size_t n, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = rng.gaussian();
  return v;
}

PrototypeBank orthonormal_bank(std::size_t k, std::size_t dim) {
  PrototypeBank bank;
  for (std::size_t i = 0; i < k; ++i) {
    Vector e(dim, 0.0);
    e[i] = 1.0;
    bank.add_base(static_cast<int>(i), e);
  }
  return bank;
}

}  // namespace

TEST(ComputePrototype, MeanOfRows) {
  Matrix m(2, 2);
  m(0, 0) = 1.0;
  m(0, 1) = 0.0;
  m(1, 0) = 3.0;
  m(1, 1) = 0.0;
  EXPECT_EQ(compute_prototype(m), (Vector{2.0, 0.0}));

  Matrix single(1, 3);
  single(0, 0) = 0.5;
  single(0, 1) = -2.0;
  single(0, 2) = 7.0;
  EXPECT_EQ(compute_prototype(single), (Vector{0.5, -2.0, 7.0}));
}

TEST(ComputePrototype, MatchesBruteForceSum) {
  Rng rng(101);
  Matrix shots(5, 12);
  for (std::size_t i = 0; i < shots.size(); ++i) shots.data()[i] = rng.gaussian();
  Vector got = compute_prototype(shots);
  for (std::size_t c = 0; c < 12; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < 5; ++r) s += shots(r, c);
    EXPECT_NEAR(got[c], s / 5.0, 1e-12);
  }
}

TEST(ComputePrototype, EmptyClassRejected) {
  EXPECT_THROW(compute_prototype(Matrix(0, 4)), ArgumentError);
}

TEST(ClassProbabilities, ClosedFormTwoOrthonormal) {
  PrototypeBank bank = orthonormal_bank(2, 2);
  Vector p = class_probabilities(Vector{1.0, 0.0}, bank);
  const double e = std::exp(1.0);
  EXPECT_NEAR(p[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(p[1], 1.0 / (e + 1.0), 1e-15);
}

TEST(ClassProbabilities, OrthogonalFeatureGivesUniform) {
  PrototypeBank bank = orthonormal_bank(3, 4);
  Vector p = class_probabilities(Vector{0.0, 0.0, 0.0, 5.0}, bank);
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(ClassProbabilities, PositiveAndNormalized) {
  Rng rng(201);
  PrototypeBank bank;
  for (int i = 0; i < 7; ++i) bank.add_base(i, random_vector(9, rng));
  for (int rep = 0; rep < 100; ++rep) {
    Vector p = class_probabilities(random_vector(9, rng), bank);
    double sum = 0.0;
    for (double v : p) {
      EXPECT_GT(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(ClassProbabilities, ArgmaxInvariantToOrthogonalComponent) {
  // Prototypes live in the first 4 coordinates; adding any vector supported
  // on the remaining coordinates cannot change the scores.
  Rng rng(202);
  PrototypeBank bank;
  for (int i = 0; i < 4; ++i) {
    Vector v(8, 0.0);
    for (int j = 0; j < 4; ++j) v[j] = rng.gaussian();
    bank.add_base(i, v);
  }
  for (int rep = 0; rep < 50; ++rep) {
    Vector f = random_vector(8, rng);
    Vector shifted = f;
    for (int j = 4; j < 8; ++j) shifted[j] += rng.gaussian() * 10.0;
    Matrix fm(1, 8);
    Matrix sm(1, 8);
    for (int j = 0; j < 8; ++j) {
      fm(0, j) = f[j];
      sm(0, j) = shifted[j];
    }
    EXPECT_EQ(predict(fm, bank), predict(sm, bank));
  }
}

TEST(ClassProbabilities, EmptyBankRejected) {
  PrototypeBank bank;
  EXPECT_THROW(class_probabilities(Vector{1.0}, bank), StateError);
}

TEST(Similarity, ClosedForms) {
  Vector a{2.0, 0.0};
  Vector b{5.0, 0.0};
  Vector c{0.0, 3.0};
  Vector d{-1.0, 0.0};
  EXPECT_NEAR(similarity(a, b, 16.0), 16.0, 1e-12);
  EXPECT_NEAR(similarity(a, c, 16.0), 0.0, 1e-12);
  EXPECT_NEAR(similarity(a, d, 16.0), -16.0, 1e-12);
  EXPECT_THROW(similarity(Vector{0.0, 0.0}, a, 16.0), ArgumentError);
}

TEST(BaseWeights, UniformWhenSimilaritiesEqual) {
  // All base prototypes identical: every similarity to any query ties.
  PrototypeBank bank;
  for (int i = 0; i < 5; ++i) bank.add_base(i, Vector{1.0, 1.0, 0.0});
  Vector w = base_weights(Vector{0.3, 0.9, -0.4}, bank);
  ASSERT_EQ(w.size(), 5u);
  for (double v : w) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(BaseWeights, LargeScaleConcentratesOnNearest) {
  PrototypeBank bank(500.0, 0.1);  // very sharp softmax
  bank.add_base(0, Vector{1.0, 0.0});
  bank.add_base(1, Vector{-1.0, 0.0});
  bank.add_base(2, Vector{0.0, 1.0});
  Vector w = base_weights(Vector{0.9, 0.1}, bank);
  EXPECT_GT(w[0], 1.0 - 1e-9);
}

TEST(BaseWeights, MatchesDirectSoftmaxOracle) {
  Rng rng(301);
  PrototypeBank bank;
  for (int i = 0; i < 6; ++i) bank.add_base(i, random_vector(10, rng));
  for (int rep = 0; rep < 200; ++rep) {
    Vector q = random_vector(10, rng);
    std::vector<double> sims;
    for (const auto& e : bank.entries()) {
      sims.push_back(similarity(e.vector, q, bank.tau()));
    }
    std::vector<double> expect = oracle::softmax_direct(sims);
    Vector got = base_weights(q, bank);
    ASSERT_EQ(got.size(), expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_NEAR(got[i], expect[i], 1e-12);
    }
  }
}

TEST(BaseWeights, ScaleInvarianceInQuery) {
  Rng rng(302);
  PrototypeBank bank;
  for (int i = 0; i < 4; ++i) bank.add_base(i, random_vector(7, rng));
  for (int rep = 0; rep < 50; ++rep) {
    Vector q = random_vector(7, rng);
    Vector w1 = base_weights(q, bank);
    Vector w2 = base_weights(scaled(q, 3.7), bank);
    for (std::size_t i = 0; i < w1.size(); ++i) {
      EXPECT_NEAR(w1[i], w2[i], 1e-12);
    }
  }
}

TEST(BaseWeights, NoBasePrototypesRejected) {
  PrototypeBank bank;
  EXPECT_THROW(base_weights(Vector{1.0}, bank), StateError);
  bank.add(9, Vector{1.0}, PrototypeOrigin::CalibratedNovel);
  EXPECT_THROW(base_weights(Vector{1.0}, bank), StateError);
}

TEST(Calibrate, AlphaOneIsExactIdentity) {
  Rng rng(401);
  PrototypeBank bank;
  for (int i = 0; i < 5; ++i) bank.add_base(i, random_vector(6, rng));
  Vector c_new = random_vector(6, rng);
  Vector got = calibrate(c_new, bank, 1.0, 16.0);
  EXPECT_EQ(got, c_new);
}

TEST(Calibrate, AlphaZeroSingleBaseReturnsBase) {
  PrototypeBank bank;
  Vector b{1.5, -2.0, 0.25};
  bank.add_base(0, b);
  Vector got = calibrate(Vector{9.0, 9.0, 9.0}, bank, 0.0, 16.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], b[i], 1e-15);
}

TEST(Calibrate, HalfAlphaEqualWeightsExpansion) {
  // Two base prototypes equally similar to the query: weights 0.5 each, so
  // the result is 0.5*c_new + 0.25*b1 + 0.25*b2.
  PrototypeBank bank;
  Vector b1{1.0, 1.0, 0.0};
  Vector b2{1.0, -1.0, 0.0};
  bank.add_base(0, b1);
  bank.add_base(1, b2);
  Vector c_new{1.0, 0.0, 0.0};  // same cosine to both
  Vector got = calibrate(c_new, bank, 0.5, 16.0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(got[i], 0.5 * c_new[i] + 0.25 * b1[i] + 0.25 * b2[i], 1e-12);
  }
}

TEST(Calibrate, ConvexHullCoefficients) {
  // The implied coefficients (alpha, (1-alpha)*w_b) are nonnegative and sum
  // to 1, and reassembling the combination reproduces the output.
  Rng rng(402);
  PrototypeBank bank;
  for (int i = 0; i < 6; ++i) bank.add_base(i, random_vector(8, rng));
  for (double alpha : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    Vector c_new = random_vector(8, rng);
    Vector w = base_weights(c_new, bank);
    double coeff_sum = alpha;
    Vector rebuilt = scaled(c_new, alpha);
    for (std::size_t b = 0; b < w.size(); ++b) {
      const double coeff = (1.0 - alpha) * w[b];
      EXPECT_GE(coeff, 0.0);
      coeff_sum += coeff;
      axpy(coeff, bank.entries()[b].vector, rebuilt);
    }
    EXPECT_NEAR(coeff_sum, 1.0, 1e-9);
    Vector got = calibrate(c_new, bank, alpha, bank.tau());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_NEAR(got[i], rebuilt[i], 1e-12);
    }
  }
}

TEST(Calibrate, RegisterTracksOriginAndRejectsDuplicates) {
  Rng rng(403);
  PrototypeBank bank;
  for (int i = 0; i < 3; ++i) bank.add_base(i, random_vector(5, rng));
  register_calibrated(bank, 7, random_vector(5, rng));
  EXPECT_EQ(bank.size(), 4u);
  EXPECT_EQ(bank.entries().back().origin, PrototypeOrigin::CalibratedNovel);
  EXPECT_EQ(bank.base_count(), 3u);
  EXPECT_THROW(register_calibrated(bank, 7, random_vector(5, rng)), ArgumentError);
}

TEST(Predict, ExactPrototypeWinsAgainstOthogonalRest) {
  PrototypeBank bank = orthonormal_bank(4, 4);
  Matrix f(1, 4, 0.0);
  f(0, 2) = 1.0;
  EXPECT_EQ(predict(f, bank), (std::vector<int>{2}));
}

TEST(Predict, TieBreaksToLowestClassId) {
  PrototypeBank bank;
  bank.add_base(5, Vector{1.0, 0.0});
  bank.add_base(3, Vector{1.0, 0.0});  // identical prototype, lower id
  Matrix f(1, 2, 0.0);
  f(0, 0) = 2.0;
  EXPECT_EQ(predict(f, bank), (std::vector<int>{3}));
}

TEST(Predict, DimensionMismatchRejected) {
  PrototypeBank bank = orthonormal_bank(2, 3);
  EXPECT_THROW(predict(Matrix(1, 5, 1.0), bank), DimensionError);
}

TEST(Predict, SeparableBlobScenarioIsPerfect) {
  // Tight blobs on a sphere with prototypes at the true means: every clean
  // sample lands with its own class.
  ScenarioSpec spec;
  spec.input_dim = 8;
  spec.base_classes = 3;
  spec.sessions = 0;
  spec.way = 1;
  spec.shot = 1;
  spec.samples_per_base_class = 200;
  spec.class_std = 0.01;
  spec.seed = 11;
  Scenario sc = Scenario::build(spec);
  PrototypeBank bank;
  for (int id = 0; id < 3; ++id) bank.add_base(id, sc.class_mean(id));
  Batch batch = sc.sample_source(0);
  std::vector<int> got = predict(batch.inputs, bank);
  ASSERT_EQ(got.size(), batch.labels->size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i], (*batch.labels)[i]);
  }
}
