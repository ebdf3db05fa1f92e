// Copyright 2026 The DDESeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ddeseg/core/grad_check.hpp"
#include "ddeseg/elimination.hpp"
#include "test_support.hpp"

namespace ddeseg {
namespace {

using nn::Tape;
using testing::max_abs_diff;
using testing::random_matrix;

constexpr EliminationScheme kAllSchemes[] = {EliminationScheme::none, EliminationScheme::fc, EliminationScheme::ca_fc,
                                             EliminationScheme::sk_ca_fc, EliminationScheme::gs_ca_fc};

double row_entropy(const Matrix<double>& P, std::size_t r) {
  double h = 0;
  for (std::size_t c = 0; c < P.cols; ++c)
    if (P(r, c) > 0) h -= P(r, c) * std::log(P(r, c));
  return h;
}

Matrix<double> softmax_reference(const Matrix<double>& logits, double tau) {
  Matrix<double> P(logits.rows, logits.cols);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    double mx = -INFINITY, z = 0;
    for (std::size_t c = 0; c < logits.cols; ++c) mx = std::max(mx, logits(r, c) / tau);
    for (std::size_t c = 0; c < logits.cols; ++c) z += std::exp(logits(r, c) / tau - mx);
    for (std::size_t c = 0; c < logits.cols; ++c) P(r, c) = std::exp(logits(r, c) / tau - mx) / z;
  }
  return P;
}

// ---------------------------------------------------------------------------
// Soft clustering

TEST(SoftCluster, MatchesScalarReferenceWithNoise) {
  Rng rng(1);
  const auto V = random_matrix(12, 5, rng), C = random_matrix(3, 5, rng);
  const auto g = sample_gumbel<double>(12, 3, rng);
  Matrix<double> logits(12, 3);
  for (std::size_t n = 0; n < 12; ++n)
    for (std::size_t k = 0; k < 3; ++k) {
      double s = g(n, k);
      for (std::size_t t = 0; t < 5; ++t) s += V(n, t) * C(k, t);
      logits(n, k) = s;
    }
  Tape<double> tape;
  const auto O = soft_cluster(tape, tape.constant(V), tape.constant(C), 0.7, &g).value();
  EXPECT_LT(max_abs_diff(O, softmax_reference(logits, 0.7)), 1e-12);
}

TEST(SoftCluster, LowTemperatureApproachesOneHot) {
  Rng rng(2);
  Matrix<double> C(3, 3);
  for (std::size_t k = 0; k < 3; ++k) C(k, k) = 1.0;
  Matrix<double> V(30, 3);
  for (std::size_t n = 0; n < 30; ++n) {
    V(n, n % 3) = 1.0;
    for (std::size_t t = 0; t < 3; ++t) V(n, t) += rng.uniform(-0.1, 0.1);
  }
  Tape<double> tape;
  const auto O = soft_cluster(tape, tape.constant(V), tape.constant(C), 0.01).value();
  for (std::size_t n = 0; n < 30; ++n) EXPECT_GT(O(n, n % 3), 0.99);
}

TEST(SoftCluster, EqualLogitsGiveUniformRows) {
  Rng rng(3);
  const auto V = random_matrix(8, 4, rng);
  Matrix<double> C(4, 4);
  const auto c0 = random_matrix(1, 4, rng);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t t = 0; t < 4; ++t) C(k, t) = c0(0, t);
  Tape<double> tape;
  const auto O = soft_cluster(tape, tape.constant(V), tape.constant(C), 0.3).value();
  for (double v : O.data) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(SoftCluster, RowsSumToOneAndEntropyGrowsWithTemperature) {
  Rng rng(4);
  const auto V = random_matrix(16, 6, rng), C = random_matrix(3, 6, rng, -2, 2);
  std::vector<double> prev(16, -1.0);
  for (double tau : {0.1, 0.5, 1.0, 5.0}) {
    Tape<double> tape;
    const auto O = soft_cluster(tape, tape.constant(V), tape.constant(C), tau).value();
    for (std::size_t n = 0; n < 16; ++n) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_GE(O(n, k), 0.0);
        s += O(n, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
      const double h = row_entropy(O, n);
      EXPECT_GE(h, prev[n] - 1e-12) << "tau " << tau;
      prev[n] = h;
    }
  }
}

TEST(SoftCluster, NonPositiveTemperatureIsError) {
  Tape<double> tape;
  const auto V = tape.constant(Matrix<double>(2, 2, 1.0)), C = tape.constant(Matrix<double>(2, 2, 1.0));
  EXPECT_THROW(soft_cluster(tape, V, C, 0.0), ContractError);
  EXPECT_THROW(soft_cluster(tape, V, C, -1.0), ContractError);
  EXPECT_THROW(soft_kmeans_assign(tape, V, C, 0.0), ContractError);
}

TEST(SoftKmeansAssign, EqualsSoftmaxOfNegativeSquaredDistance) {
  Rng rng(5);
  const auto V = random_matrix(10, 4, rng), C = random_matrix(3, 4, rng);
  Matrix<double> neg(10, 3);
  for (std::size_t n = 0; n < 10; ++n)
    for (std::size_t k = 0; k < 3; ++k) {
      double s = 0;
      for (std::size_t t = 0; t < 4; ++t) s += (V(n, t) - C(k, t)) * (V(n, t) - C(k, t));
      neg(n, k) = -s;
    }
  Tape<double> tape;
  const auto O = soft_kmeans_assign(tape, tape.constant(V), tape.constant(C), 0.5).value();
  EXPECT_LT(max_abs_diff(O, softmax_reference(neg, 0.5)), 1e-12);
}

// ---------------------------------------------------------------------------
// Center aggregation

TEST(AggregateCenters, OneHotAssignmentGivesClusterMeans) {
  Rng rng(6);
  const auto V = random_matrix(9, 3, rng);
  Matrix<double> O(9, 3);
  for (std::size_t n = 0; n < 9; ++n) O(n, n % 3) = 1.0;
  Tape<double> tape;
  const auto Cv = aggregate_centers(tape.constant(O), tape.constant(V)).value();
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t t = 0; t < 3; ++t) {
      const double mean = (V(k, t) + V(k + 3, t) + V(k + 6, t)) / 3.0;
      EXPECT_NEAR(Cv(k, t), mean, 1e-14);
    }
}

TEST(AggregateCenters, UniformAssignmentGivesGlobalMean) {
  Rng rng(7);
  const auto V = random_matrix(7, 4, rng);
  Tape<double> tape;
  const auto Cv = aggregate_centers(tape.constant(Matrix<double>(7, 2, 0.5)), tape.constant(V)).value();
  for (std::size_t t = 0; t < 4; ++t) {
    double mean = 0;
    for (std::size_t n = 0; n < 7; ++n) mean += V(n, t) / 7.0;
    EXPECT_NEAR(Cv(0, t), mean, 1e-14);
    EXPECT_NEAR(Cv(1, t), mean, 1e-14);
  }
}

TEST(AggregateCenters, UnusedCenterStaysFinite) {
  Rng rng(10);
  auto V = testing::random_parameter("V", 5, 3, rng);
  Matrix<double> O(5, 2);
  for (std::size_t n = 0; n < 5; ++n) O(n, 0) = 1.0;
  Tape<double> tape;
  const auto Cv = aggregate_centers(tape.constant(O), tape.parameter(V));
  tape.backward(nn::sum_all(Cv));
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(Cv.value()(1, t), 0.0);
  for (double g : V.grad.data) EXPECT_TRUE(std::isfinite(g));
}

TEST(AggregateCenters, MatchesWeightedMeanLoop) {
  Rng rng(8);
  const auto V = random_matrix(11, 5, rng), C = random_matrix(4, 5, rng);
  Tape<double> tape;
  const auto O = soft_cluster(tape, tape.constant(V), tape.constant(C), 1.0).value();
  const auto Cv = aggregate_centers(tape.constant(O), tape.constant(V)).value();
  for (std::size_t k = 0; k < 4; ++k) {
    double mass = 0;
    for (std::size_t n = 0; n < 11; ++n) mass += O(n, k);
    for (std::size_t t = 0; t < 5; ++t) {
      double s = 0;
      for (std::size_t n = 0; n < 11; ++n) s += O(n, k) * V(n, t);
      EXPECT_NEAR(Cv(k, t), s / mass, 1e-12);
    }
  }
}

TEST(AggregateCenters, GradientCheck) {
  Rng rng(9);
  auto V = testing::random_parameter("V", 6, 3, rng);
  auto C = testing::random_parameter("C", 2, 3, rng);
  const auto w = nn::random_weights(2, 3, rng);
  const auto rep = nn::grad_check(
      [&](Tape<double>& t) {
        auto v = t.parameter(V);
        return nn::weighted_sum(aggregate_centers(soft_cluster(t, v, t.parameter(C), 0.8), v), w);
      },
      {&V, &C});
  EXPECT_TRUE(rep.passed) << rep.summary();
}

// ---------------------------------------------------------------------------
// Scoring and elimination

EliminationParams<double> make_params(std::size_t K, std::size_t d, std::size_t visual_dim, std::uint64_t seed) {
  Rng rng(seed);
  return EliminationParams<double>("elim", K, d, visual_dim, 2, 1.0, rng);
}

TEST(Eliminate, ScoresInUnitIntervalAndRowsScaledExactly) {
  Rng rng(10);
  auto p = make_params(3, 4, 4, 10);
  const auto A = random_matrix(3, 4, rng, -2, 2), V = random_matrix(16, 4, rng);
  for (auto scheme : kAllSchemes) {
    Tape<double> t;
    Rng noise(11);
    const auto out = eliminate(t, t.constant(A), t.constant(V), p, scheme, &noise);
    const auto& S = out.scores.value();
    const auto& E = out.eliminated.value();
    ASSERT_EQ(S.rows, 3u);
    ASSERT_EQ(S.cols, 1u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_GE(S(i, 0), 0.0);
      EXPECT_LE(S(i, 0), 1.0);
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(E(i, c), S(i, 0) * A(i, c), 1e-12 * (1 + std::abs(A(i, c))));
    }
  }
}

TEST(Eliminate, LargeNegativeScorerBiasSuppressesEverything) {
  Rng rng(12);
  auto p = make_params(3, 4, 4, 12);
  p.scorer.fc2.bias->value.fill(-1000.0);
  const auto A = random_matrix(3, 4, rng), V = random_matrix(16, 4, rng);
  for (auto scheme : {EliminationScheme::fc, EliminationScheme::ca_fc, EliminationScheme::sk_ca_fc, EliminationScheme::gs_ca_fc}) {
    Tape<double> t;
    const auto out = eliminate(t, t.constant(A), t.constant(V), p, scheme);
    for (double s : out.scores.value().data) EXPECT_LT(s, 1e-100);
    for (double e : out.eliminated.value().data) EXPECT_LT(std::abs(e), 1e-100);
  }
}

TEST(Eliminate, InitialScoresFavourKeeping) {
  auto p = make_params(3, 4, 4, 13);
  EXPECT_EQ(p.scorer.fc2.bias->value(0, 0), kInitialScoreLogit);
}

TEST(Eliminate, NoneBypassesUnchanged) {
  Rng rng(14);
  auto p = make_params(2, 4, 4, 14);
  const auto A = random_matrix(2, 4, rng);
  Tape<double> t;
  const auto out = eliminate(t, t.constant(A), t.constant(random_matrix(4, 4, rng)), p, EliminationScheme::none);
  EXPECT_EQ(out.eliminated.value(), A);
  for (double s : out.scores.value().data) EXPECT_EQ(s, 1.0);
}

TEST(Eliminate, DeterministicWithoutNoise) {
  Rng rng(15);
  auto p = make_params(3, 4, 4, 15);
  const auto A = random_matrix(3, 4, rng), V = random_matrix(16, 4, rng);
  Tape<double> t1, t2;
  const auto a = eliminate(t1, t1.constant(A), t1.constant(V), p).eliminated.value();
  const auto b = eliminate(t2, t2.constant(A), t2.constant(V), p).eliminated.value();
  EXPECT_EQ(a, b);
}

TEST(Eliminate, SeededNoiseIsReproducible) {
  Rng rng(16);
  auto p = make_params(3, 4, 4, 16);
  const auto A = random_matrix(3, 4, rng), V = random_matrix(16, 4, rng, -3, 3);
  auto run = [&](std::uint64_t seed) {
    Rng noise(seed);
    Tape<double> t;
    return eliminate(t, t.constant(A), t.constant(V), p, EliminationScheme::gs_ca_fc, &noise).scores.value();
  };
  EXPECT_EQ(run(5), run(5));
  EXPECT_GT(max_abs_diff(run(5), run(6)), 0.0);
}

TEST(Eliminate, InvariantToVisualTokenOrder) {
  Rng rng(17);
  auto p = make_params(3, 4, 6, 17);
  const auto A = random_matrix(3, 4, rng), V = random_matrix(20, 6, rng);
  Matrix<double> Vp(20, 6);
  for (std::size_t n = 0; n < 20; ++n)
    for (std::size_t c = 0; c < 6; ++c) Vp(n, c) = V((n * 7 + 3) % 20, c);
  for (auto scheme : kAllSchemes) {
    Tape<double> t;
    const auto a = eliminate(t, t.constant(A), t.constant(V), p, scheme).eliminated.value();
    const auto b = eliminate(t, t.constant(A), t.constant(Vp), p, scheme).eliminated.value();
    EXPECT_LT(max_abs_diff(a, b), 1e-12) << to_string(scheme);
  }
}

TEST(Eliminate, VisualProjectionOnlyWhenWidthsDiffer) {
  EXPECT_FALSE(make_params(2, 4, 4, 18).visual_proj.has_value());
  auto p = make_params(2, 4, 8, 18);
  ASSERT_TRUE(p.visual_proj.has_value());
  EXPECT_EQ(p.visual_proj->in_dim(), 8u);
  EXPECT_EQ(p.visual_proj->out_dim(), 4u);
}

TEST(Eliminate, ShapeErrors) {
  Rng rng(19);
  auto p = make_params(3, 4, 4, 19);
  Tape<double> t;
  const auto V = t.constant(random_matrix(8, 4, rng));
  EXPECT_THROW(eliminate(t, t.constant(random_matrix(2, 4, rng)), V, p, EliminationScheme::gs_ca_fc), ContractError);
  EXPECT_THROW(eliminate(t, t.constant(random_matrix(2, 4, rng)), V, p, EliminationScheme::sk_ca_fc), ContractError);
  EXPECT_THROW(eliminate(t, t.constant(random_matrix(3, 4, rng)), t.constant(random_matrix(8, 5, rng)), p), ContractError);
}

TEST(Eliminate, GradientCheckAllSchemes) {
  Rng rng(20);
  auto p = make_params(2, 4, 4, 20);
  auto A = testing::random_parameter("A", 2, 4, rng);
  auto V = testing::random_parameter("V", 6, 4, rng);
  const auto w = nn::random_weights(2, 4, rng);
  std::vector<nn::Parameter<double>*> params{&A, &V};
  p.visit([&](nn::Parameter<double>& q) { params.push_back(&q); });
  for (auto scheme : kAllSchemes) {
    const auto rep = nn::grad_check(
        [&](Tape<double>& t) {
          Rng noise(21);
          return nn::weighted_sum(eliminate(t, t.parameter(A), t.parameter(V), p, scheme, &noise).eliminated, w);
        },
        params);
    EXPECT_TRUE(rep.passed) << to_string(scheme) << ": " << rep.summary();
  }
}

TEST(Scheme, ParseRoundTripAndUnknown) {
  for (auto s : kAllSchemes) EXPECT_EQ(parse_scheme(to_string(s)), s);
  EXPECT_THROW(parse_scheme("gumbel"), ContractError);
}

}  // namespace
}  // namespace ddeseg
