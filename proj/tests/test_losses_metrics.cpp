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
#include <sstream>

#include "ddeseg/core/grad_check.hpp"
#include "ddeseg/losses_metrics.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace ddeseg {
namespace {

using testing::bce_ref;
using testing::dice_ref;
using testing::iou_ref;

using nn::Tape;

Matrix<double> random_probs(std::size_t n, Rng& rng) {
  Matrix<double> m(n, 1);
  for (auto& v : m.data) v = rng.uniform(0.01, 0.99);
  return m;
}

Matrix<double> random_binary(std::size_t n, Rng& rng) {
  Matrix<double> m(n, 1);
  for (auto& v : m.data) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  return m;
}

double eval_loss(nn::Var<double> (*fn)(nn::Var<double>, const Matrix<double>&), const Matrix<double>& p,
                 const Matrix<double>& t) {
  Tape<double> tape;
  return fn(tape.constant(p), t).scalar();
}

LabelMap mask_from(std::size_t h, std::size_t w, std::initializer_list<std::pair<std::size_t, std::size_t>> on,
                   std::uint8_t label = 1) {
  LabelMap m(h, w);
  for (auto [y, x] : on) m.at(y, x) = label;
  return m;
}

// ---------------------------------------------------------------------------
// Losses

TEST(DiceLoss, PerfectOverlapIsExactlyZero) {
  Rng rng(1);
  const auto t = random_binary(64, rng);
  EXPECT_EQ(eval_loss(dice_loss<double>, t, t), 0.0);
}

TEST(DiceLoss, DisjointClosedForm) {
  const std::size_t n = 50;
  EXPECT_NEAR(eval_loss(dice_loss<double>, Matrix<double>(n, 1), Matrix<double>(n, 1, 1.0)), 1.0 - 1.0 / (n + 1.0), 1e-15);
}

TEST(DiceLoss, MatchesScalarReference) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_probs(100, rng), t = random_binary(100, rng);
    EXPECT_LT(std::abs(eval_loss(dice_loss<double>, p, t) - dice_ref(p, t)), 1e-7);
  }
}

TEST(BceLoss, PerfectPredictionNearZero) {
  Rng rng(3);
  const auto t = random_binary(64, rng);
  const double v = eval_loss(bce_loss<double>, t, t);
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1e-6);
}

TEST(BceLoss, HalfEverywhereIsLogTwo) {
  Rng rng(4);
  EXPECT_NEAR(eval_loss(bce_loss<double>, Matrix<double>(30, 1, 0.5), random_binary(30, rng)), std::log(2.0), 1e-12);
}

TEST(BceLoss, MatchesScalarReference) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_probs(100, rng);
    p.data[0] = 0.0;
    p.data[1] = 1.0;
    const auto t = random_binary(100, rng);
    EXPECT_LT(std::abs(eval_loss(bce_loss<double>, p, t) - bce_ref(p, t)), 1e-7);
  }
}

TEST(IouLoss, PerfectOverlapIsExactlyZero) {
  Rng rng(6);
  const auto t = random_binary(64, rng);
  EXPECT_EQ(eval_loss(iou_loss<double>, t, t), 0.0);
}

TEST(IouLoss, AllOnesAgainstHalfClosedForm) {
  const std::size_t n = 20;
  Matrix<double> t(2 * n, 1);
  for (std::size_t i = 0; i < n; ++i) t.data[i] = 1.0;
  EXPECT_NEAR(eval_loss(iou_loss<double>, Matrix<double>(2 * n, 1, 1.0), t), 1.0 - (n + 1.0) / (2.0 * n + 1.0), 1e-15);
}

TEST(IouLoss, MatchesScalarReference) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_probs(100, rng), t = random_binary(100, rng);
    EXPECT_LT(std::abs(eval_loss(iou_loss<double>, p, t) - iou_ref(p, t)), 1e-7);
  }
}

TEST(Losses, NonNegativeOnRandomPairs) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_probs(16, rng), t = random_binary(16, rng);
    Tape<double> tape;
    const auto terms = total_loss(tape.constant(p), t);
    EXPECT_GT(terms.dice.scalar(), 0.0);
    EXPECT_GT(terms.bce.scalar(), 0.0);
    EXPECT_GT(terms.iou.scalar(), 0.0);
  }
}

TEST(Losses, ShapeMismatchIsError) {
  Tape<double> tape;
  const auto p = tape.constant(Matrix<double>(4, 1, 0.5));
  EXPECT_THROW(dice_loss(p, Matrix<double>(5, 1)), ContractError);
  EXPECT_THROW(bce_loss(p, Matrix<double>(4, 2)), ContractError);
  EXPECT_THROW(iou_loss(p, Matrix<double>(1, 4)), ContractError);
}

TEST(TotalLoss, DefaultWeightsAreExactLinearCombination) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_probs(32, rng), t = random_binary(32, rng);
    Tape<double> tape;
    const auto terms = total_loss(tape.constant(p), t);
    const double expected = 5.0 * terms.dice.scalar() + 5.0 * terms.bce.scalar() + 2.0 * terms.iou.scalar();
    EXPECT_NEAR(terms.total.scalar(), expected, 1e-9);
  }
}

TEST(TotalLoss, ComponentExample) {
  Tape<double> tape;
  const auto total = combine_losses(tape.constant(Matrix<double>(1, 1, 0.2)), tape.constant(Matrix<double>(1, 1, 0.1)),
                                    tape.constant(Matrix<double>(1, 1, 0.3)), LossWeights{});
  EXPECT_NEAR(total.scalar(), 2.1, 1e-12);
  const LossWeights w;
  EXPECT_EQ(w.dice, 5.0);
  EXPECT_EQ(w.bce, 5.0);
  EXPECT_EQ(w.iou, 2.0);
}

TEST(TotalLoss, PerfectPredictionBound) {
  Rng rng(10);
  const auto t = random_binary(64, rng);
  Tape<double> tape;
  EXPECT_LE(total_loss(tape.constant(t), t).total.scalar(), 5.0 * 1e-6);
}

TEST(TotalLoss, GradientCheck) {
  Rng rng(11);
  nn::Parameter<double> logits("logits", 24, 1);
  logits.value = testing::random_matrix(24, 1, rng, -2, 2);
  const auto t = random_binary(24, rng);
  const auto rep = nn::grad_check([&](Tape<double>& tape) { return total_loss(nn::sigmoid(tape.parameter(logits)), t).total; }, {&logits});
  EXPECT_TRUE(rep.passed) << rep.summary();
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Jaccard, HandCountedExample) {
  const auto P = mask_from(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  const auto T = mask_from(4, 4, {{0, 1}, {1, 1}, {0, 2}, {1, 2}});
  EXPECT_DOUBLE_EQ(jaccard_binary(P, T), 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(jaccard_semantic(P, T), 2.0 / 6.0);
}

TEST(Jaccard, IdenticalAndDisjoint) {
  const auto A = mask_from(4, 4, {{0, 0}, {3, 3}});
  const auto B = mask_from(4, 4, {{1, 1}, {2, 2}});
  EXPECT_EQ(jaccard_binary(A, A), 1.0);
  EXPECT_EQ(jaccard_binary(A, B), 0.0);
  EXPECT_EQ(jaccard_binary(LabelMap(4, 4), LabelMap(4, 4)), 1.0);
  EXPECT_THROW(jaccard_binary(LabelMap(4, 4), LabelMap(4, 3)), ContractError);
}

TEST(Jaccard, SemanticAveragesTargetClasses) {
  LabelMap T(2, 4), P(2, 4);
  T.at(0, 0) = T.at(0, 1) = 1;
  T.at(1, 0) = T.at(1, 1) = 2;
  P.at(0, 0) = P.at(0, 1) = 1;  // class 1 perfect
  P.at(1, 0) = 2;               // class 2: 1 / 2
  P.at(1, 3) = 3;               // absent from target, ignored for averaging
  EXPECT_DOUBLE_EQ(jaccard_semantic(P, T), (1.0 + 0.5) / 2.0);
  EXPECT_DOUBLE_EQ(jaccard_binary(P, T), 3.0 / 5.0);
}

TEST(Fbeta, ClosedFormExample) {
  EXPECT_NEAR(fbeta_from_rates(0.5, 1.0), 1.3 * 0.5 / (0.3 * 0.5 + 1.0), 1e-15);
  EXPECT_NEAR(fbeta_from_rates(0.5, 1.0), 0.5652, 1e-4);
  // P covers 4 pixels, 2 of them in T, T fully covered -> precision 0.5, recall 1.
  const auto P = mask_from(4, 4, {{0, 0}, {0, 1}, {0, 2}, {0, 3}});
  const auto T = mask_from(4, 4, {{0, 0}, {0, 1}});
  EXPECT_NEAR(fbeta_binary(P, T), 0.5652, 1e-4);
}

TEST(Fbeta, IdenticalEmptyAndZeroDenominator) {
  const auto T = mask_from(3, 3, {{1, 1}, {2, 2}});
  EXPECT_EQ(fbeta_binary(T, T), 1.0);
  EXPECT_EQ(fbeta_binary(LabelMap(3, 3), T), 0.0);
  EXPECT_EQ(fbeta_from_rates(0.0, 0.0), 0.0);
}

TEST(Fbeta, LiteralBetaOption) {
  const double b2 = 0.3 * 0.3;
  EXPECT_NEAR(fbeta_from_rates(0.5, 1.0, b2), (1 + b2) * 0.5 / (b2 * 0.5 + 1.0), 1e-15);
  const auto P = mask_from(4, 4, {{0, 0}, {0, 1}, {0, 2}, {0, 3}});
  const auto T = mask_from(4, 4, {{0, 0}, {0, 1}});
  EXPECT_NEAR(fbeta_binary(P, T, b2), fbeta_from_rates(0.5, 1.0, b2), 1e-15);
}

TEST(Metrics, RangeOnRandomMasks) {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    LabelMap P(6, 6), T(6, 6);
    for (auto& l : P.labels) l = static_cast<std::uint8_t>(rng.below(3));
    for (auto& l : T.labels) l = static_cast<std::uint8_t>(rng.below(3));
    for (double v : {jaccard_binary(P, T), fbeta_binary(P, T), jaccard_semantic(P, T), fbeta_semantic(P, T)}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    if (P != T) {
      EXPECT_LT(jaccard_semantic(P, T), 1.0);
    }
    EXPECT_EQ(jaccard_semantic(T, T), 1.0);
    EXPECT_EQ(fbeta_semantic(T, T), 1.0);
  }
}

TEST(MetricAccumulator, JfMeanIsExactAverage) {
  Rng rng(13);
  MetricAccumulator acc;
  for (int i = 0; i < 17; ++i) {
    LabelMap P(5, 5), T(5, 5);
    for (auto& l : P.labels) l = static_cast<std::uint8_t>(rng.below(4));
    for (auto& l : T.labels) l = static_cast<std::uint8_t>(rng.below(4));
    acc.add(P, T);
  }
  const auto r = acc.report();
  EXPECT_EQ(r.samples, 17u);
  EXPECT_EQ(r.jf_mean, (r.jaccard + r.fbeta) / 2.0);
  EXPECT_FALSE(r.per_class.empty());
  for (const auto& [cid, jf] : r.per_class) EXPECT_LT(cid, 3u);
}

TEST(MetricAccumulator, BinaryModeIgnoresLabels) {
  const auto P = mask_from(2, 2, {{0, 0}}, 2);
  const auto T = mask_from(2, 2, {{0, 0}}, 1);
  MetricAccumulator binary(false), semantic(true);
  binary.add(P, T);
  semantic.add(P, T);
  EXPECT_EQ(binary.report().jaccard, 1.0);
  EXPECT_EQ(semantic.report().jaccard, 0.0);
}

TEST(MetricCsv, HeaderAndRow) {
  EXPECT_EQ(metric_csv_header(2), "dataset,split,seed,J,F_beta,J&F,class0_J,class0_F,class1_J,class1_F");
  MetricReport r;
  r.jaccard = 0.5;
  r.fbeta = 0.25;
  r.jf_mean = 0.375;
  r.per_class[1] = {1.0, 0.5};
  std::ostringstream os;
  write_metric_csv_row(os, "synth", "test", 3, r, 2);
  EXPECT_EQ(os.str(), "synth,test,3,0.5,0.25,0.375,,,1,0.5\n");
}

}  // namespace
}  // namespace ddeseg
