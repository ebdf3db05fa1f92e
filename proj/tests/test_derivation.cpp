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

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "ddeseg/core/grad_check.hpp"
#include "ddeseg/derivation.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace ddeseg {
namespace {

using nn::Tape;
using testing::derive_reference;
using testing::enhance_reference;
using testing::max_abs_diff;
using testing::random_matrix;
using testing::row_of;
using Vec = std::vector<double>;

DerivationParams<double> random_params(std::size_t d, Rng& rng, double bias_scale = 0.5) {
  DerivationParams<double> p("derivation", d, rng);
  p.visit([&](nn::Parameter<double>& q) {
    if (q.name.ends_with(".bias"))
      for (auto& v : q.value.data) v = rng.uniform(-bias_scale, bias_scale);
  });
  return p;
}

SemanticMemory planted_memory(std::size_t C, std::size_t d, std::uint64_t seed, std::size_t k = 3, std::size_t m = 3) {
  Rng rng(seed);
  std::map<std::uint32_t, Matrix<float>> feats;
  for (std::uint32_t c = 0; c < C; ++c) {
    Matrix<float> f(20, d);
    for (auto& v : f.data) v = static_cast<float>(rng.normal(c % 2 ? 1.0 : -1.0, 1.0));
    feats[c] = f;
  }
  MemoryBuildConfig cfg;
  cfg.k = k;
  cfg.m = m;
  return build_memory(feats, cfg);
}

// ---------------------------------------------------------------------------
// derive_prototypes

TEST(DerivePrototypes, MatchesScalarReference) {
  Rng rng(1);
  const std::size_t d = 6, K = 3;
  auto p = random_params(d, rng);
  const auto fa = random_matrix(1, d, rng), centers = random_matrix(K, d, rng, -2, 2);
  Tape<double> t;
  const auto A = derive_prototypes(t, t.constant(fa), t.constant(centers), p).value();
  EXPECT_LT(max_abs_diff(A, derive_reference(row_of(fa, 0), centers, p)), 1e-6);
}

TEST(DerivePrototypes, ZeroParametersGiveCopiesOfFeature) {
  Rng rng(2);
  const std::size_t d = 5;
  auto p = random_params(d, rng);
  p.zero();
  const auto fa = random_matrix(1, d, rng), centers = random_matrix(4, d, rng);
  Tape<double> t;
  const auto A = derive_prototypes(t, t.constant(fa), t.constant(centers), p).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(A(i, c), fa(0, c));
}

TEST(DerivePrototypes, ShiftBoundedByTanhRange) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_params(4, rng, 3.0);
    const auto fa = random_matrix(1, 4, rng, -5, 5), centers = random_matrix(3, 4, rng, -5, 5);
    Tape<double> t;
    const auto A = derive_prototypes(t, t.constant(fa), t.constant(centers), p).value();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 4; ++c) ASSERT_LT(std::abs(A(i, c) - fa(0, c)), 1.0);
  }
}

TEST(DerivePrototypes, PermutingCentersPermutesRows) {
  Rng rng(4);
  auto p = random_params(5, rng);
  const auto fa = random_matrix(1, 5, rng), centers = random_matrix(3, 5, rng);
  const std::vector<std::size_t> perm{2, 0, 1};
  Matrix<double> permuted(3, 5);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 5; ++c) permuted(i, c) = centers(perm[i], c);
  Tape<double> t;
  const auto A = derive_prototypes(t, t.constant(fa), t.constant(centers), p).value();
  const auto B = derive_prototypes(t, t.constant(fa), t.constant(permuted), p).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(B(i, c), A(perm[i], c), 1e-14);
}

TEST(DerivePrototypes, EmptyCenterSetIsError) {
  Rng rng(5);
  auto p = random_params(3, rng);
  Tape<double> t;
  EXPECT_THROW(derive_prototypes(t, t.constant(Matrix<double>(1, 3)), t.constant(Matrix<double>(0, 3)), p), ContractError);
}

TEST(DerivePrototypes, GradientCheck) {
  Rng rng(6);
  auto p = random_params(4, rng);
  auto fa = testing::random_parameter("fa", 1, 4, rng);
  auto centers = testing::random_parameter("centers", 3, 4, rng);
  const auto w = nn::random_weights(3, 4, rng);
  std::vector<nn::Parameter<double>*> params{&fa, &centers};
  p.visit([&](nn::Parameter<double>& q) { params.push_back(&q); });
  const auto rep = nn::grad_check(
      [&](Tape<double>& t) { return nn::weighted_sum(derive_prototypes(t, t.parameter(fa), t.parameter(centers), p), w); }, params);
  EXPECT_TRUE(rep.passed) << rep.summary();
}

// ---------------------------------------------------------------------------
// select_subcluster

TEST(SelectSubcluster, ExactSubcentroidIsChosen) {
  const auto mem = planted_memory(2, 4, 7);
  const auto& cm = mem.at(1);
  for (std::size_t j = 0; j < mem.k; ++j) {
    const auto a = cm.sub_centroids.row(j);
    EXPECT_EQ(select_subcluster<float>(a, cm).index, j);
  }
}

TEST(SelectSubcluster, SingleSubclusterAlwaysZero) {
  const auto mem = planted_memory(2, 3, 8, 1, 2);
  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto a = random_matrix(1, 3, rng, -5, 5);
    EXPECT_EQ(select_subcluster<double>(a.row(0), mem.at(0)).index, 0u);
  }
}

TEST(SelectSubcluster, MatchesBruteForceArgmin) {
  const auto mem = planted_memory(3, 4, 9);
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_matrix(1, 4, rng, -3, 3);
    const auto& cm = mem.at(trial % 3);
    std::size_t best = 0;
    double bd = INFINITY;
    for (std::size_t j = 0; j < cm.sub_centroids.rows; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < 4; ++t) s += (a(0, t) - cm.sub_centroids(j, t)) * (a(0, t) - cm.sub_centroids(j, t));
      if (s < bd) bd = s, best = j;
    }
    const auto choice = select_subcluster<double>(a.row(0), cm);
    EXPECT_EQ(choice.index, best);
    EXPECT_EQ(choice.representatives, &cm.representatives[best]);
  }
}

// ---------------------------------------------------------------------------
// enhance_discriminative

TEST(EnhanceDiscriminative, MatchesScalarReference) {
  Rng rng(10);
  const std::size_t d = 5;
  const auto mem = planted_memory(4, d, 10, 2, 3);
  auto p = random_params(d, rng);
  const auto A = random_matrix(2, d, rng, -2, 2);
  const std::vector<std::uint32_t> ids{3, 1};
  for (auto mode : {SubclusterMode::nearest, SubclusterMode::pooled}) {
    Tape<double> t;
    const auto out = enhance_discriminative(t, t.constant(A), ids, mem, p, mode).value();
    for (std::size_t i = 0; i < 2; ++i) {
      const auto a = row_of(A, i);
      const auto R = representatives_for<double>(A.row(i), mem.at(ids[i]), mode);
      EXPECT_EQ(R.rows, mode == SubclusterMode::nearest ? 3u : 6u);
      const auto ref = enhance_reference(a, R, p);
      for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out(i, c), ref[c], 1e-6);
    }
  }
}

TEST(EnhanceDiscriminative, ZeroParametersAreIdentity) {
  Rng rng(11);
  const auto mem = planted_memory(3, 4, 11);
  auto p = random_params(4, rng);
  p.zero();
  const auto A = random_matrix(3, 4, rng);
  Tape<double> t;
  const auto out = enhance_discriminative(t, t.constant(A), {0, 1, 2}, mem, p).value();
  EXPECT_EQ(out, A);
}

TEST(EnhanceDiscriminative, SignPreservingWithFactorBelowTwo) {
  Rng rng(12);
  const auto mem = planted_memory(3, 4, 12);
  int cases = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto p = random_params(4, rng, 2.0);
    const auto A = random_matrix(2, 4, rng, -3, 3);
    Tape<double> t;
    const auto out = enhance_discriminative(t, t.constant(A), {std::uint32_t(trial % 3), 2}, mem, p).value();
    for (std::size_t i = 0; i < A.size(); ++i) {
      const double a = A.data[i], b = out.data[i];
      ASSERT_TRUE((a > 0 && b > 0) || (a < 0 && b < 0) || (a == 0 && b == 0)) << a << " -> " << b;
      ASSERT_LT(std::abs(b), 2.0 * std::abs(a) + (a == 0 ? 1e-300 : 0.0));
    }
    ++cases;
  }
  EXPECT_EQ(cases, 1000);
}

TEST(EnhanceDiscriminative, MissingClassIsError) {
  Rng rng(13);
  const auto mem = planted_memory(2, 3, 13);
  auto p = random_params(3, rng);
  Tape<double> t;
  EXPECT_THROW(enhance_discriminative(t, t.constant(Matrix<double>(1, 3, 1.0)), {5}, mem, p), ContractError);
}

TEST(EnhanceDiscriminative, GradientCheck) {
  Rng rng(14);
  const auto mem = planted_memory(3, 4, 14);
  auto p = random_params(4, rng);
  auto A = testing::random_parameter("A", 3, 4, rng);
  const auto w = nn::random_weights(3, 4, rng);
  std::vector<nn::Parameter<double>*> params{&A};
  p.visit([&](nn::Parameter<double>& q) { params.push_back(&q); });
  const auto rep = nn::grad_check(
      [&](Tape<double>& t) { return nn::weighted_sum(enhance_discriminative(t, t.parameter(A), {2, 0, 1}, mem, p), w); }, params);
  EXPECT_TRUE(rep.passed) << rep.summary();
}

// ---------------------------------------------------------------------------
// derive

TEST(Derive, ZeroParametersGiveCopiesOfFeature) {
  Rng rng(15);
  const auto mem = planted_memory(5, 4, 15);
  auto p = random_params(4, rng);
  p.zero();
  const auto fa = random_matrix(1, 4, rng);
  Tape<double> t;
  const auto out = derive(t, t.constant(fa), mem, 3, p);
  for (const auto* m : {&out.raw.value(), &out.refined.value()})
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ((*m)(i, c), fa(0, c));
}

TEST(Derive, ClassIdsFollowRetrievalOrder) {
  Rng rng(16);
  const auto mem = planted_memory(6, 4, 16);
  auto p = random_params(4, rng);
  for (int trial = 0; trial < 30; ++trial) {
    const auto fa = random_matrix(1, 4, rng, -2, 2);
    std::vector<std::pair<double, std::uint32_t>> dist;
    for (std::uint32_t c = 0; c < 6; ++c) {
      double s = 0;
      for (std::size_t t = 0; t < 4; ++t) s += (fa(0, t) - mem.at(c).global_centroid[t]) * (fa(0, t) - mem.at(c).global_centroid[t]);
      dist.emplace_back(s, c);
    }
    std::sort(dist.begin(), dist.end());
    Tape<double> t;
    const auto out = derive(t, t.constant(fa), mem, 3, p);
    ASSERT_EQ(out.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out.class_ids[i], dist[i].second);
    for (std::size_t i = 1; i < 3; ++i) EXPECT_LE(out.distances[i - 1], out.distances[i]);
  }
}

TEST(Derive, AblationSwitches) {
  Rng rng(17);
  const auto mem = planted_memory(4, 4, 17);
  auto p = random_params(4, rng);
  const auto fa = random_matrix(1, 4, rng);
  Tape<double> t;
  DerivationOptions off;
  off.derive = false;
  const auto base = derive(t, t.constant(fa), mem, 2, p, off);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(base.refined.value()(i, c), fa(0, c));
  DerivationOptions no_enhance;
  no_enhance.enhance = false;
  const auto raw_only = derive(t, t.constant(fa), mem, 2, p, no_enhance);
  EXPECT_EQ(raw_only.refined.value(), raw_only.raw.value());
  const auto full = derive(t, t.constant(fa), mem, 2, p);
  EXPECT_EQ(full.raw.value(), raw_only.raw.value());
  EXPECT_GT(max_abs_diff(full.refined.value(), full.raw.value()), 0.0);
}

TEST(Derive, DimensionMismatchIsError) {
  Rng rng(18);
  const auto mem = planted_memory(3, 4, 18);
  auto p = random_params(4, rng);
  Tape<double> t;
  EXPECT_THROW(derive(t, t.constant(Matrix<double>(1, 5)), mem, 2, p), ContractError);
  EXPECT_THROW(derive(t, t.constant(Matrix<double>(1, 4)), mem, 4, p), ContractError);
}

TEST(Derive, GradientCheckThroughComposite) {
  Rng rng(19);
  const auto mem = planted_memory(4, 4, 19);
  auto p = random_params(4, rng);
  auto fa = testing::random_parameter("fa", 1, 4, rng);
  const auto w = nn::random_weights(3, 4, rng);
  std::vector<nn::Parameter<double>*> params{&fa};
  p.visit([&](nn::Parameter<double>& q) { params.push_back(&q); });
  const auto rep = nn::grad_check([&](Tape<double>& t) { return nn::weighted_sum(derive(t, t.parameter(fa), mem, 3, p).refined, w); },
                                  params);
  EXPECT_TRUE(rep.passed) << rep.summary();
}

}  // namespace
}  // namespace ddeseg
