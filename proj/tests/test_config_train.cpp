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
#include <fstream>

#include "ddeseg/config.hpp"
#include "ddeseg/grad_suite.hpp"
#include "ddeseg/train.hpp"
#include "test_support.hpp"

namespace ddeseg {
namespace {

// ---------------------------------------------------------------------------
// Run configuration

TEST(RunConfig, DefaultsAreFullMethod) {
  const RunConfig rc;
  EXPECT_EQ(rc.model.scheme, EliminationScheme::gs_ca_fc);
  EXPECT_TRUE(rc.model.derivation.derive);
  EXPECT_TRUE(rc.model.derivation.enhance);
  EXPECT_EQ(rc.model.K, 3u);
  EXPECT_EQ(rc.model.dim, 32u);
  EXPECT_EQ(rc.memory.build.k, 3u);
  EXPECT_EQ(rc.memory.build.m, 4u);
  EXPECT_EQ(rc.train.lr, 3e-4);
  EXPECT_EQ(rc.train.loss.dice, 5.0);
  EXPECT_EQ(rc.train.loss.bce, 5.0);
  EXPECT_EQ(rc.train.loss.iou, 2.0);
  EXPECT_EQ(rc.synth.train_size + rc.synth.val_size + rc.synth.test_size, 300u);
  EXPECT_EQ(rc.synth.image_size, 64u);
  EXPECT_EQ(rc.synth.num_classes, rc.model.num_classes);
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig rc;
  rc.model.scheme = EliminationScheme::sk_ca_fc;
  rc.model.derivation.subcluster = SubclusterMode::pooled;
  rc.model.stages.dims = {16, 16, 16, 16};
  rc.train.lr = 1e-3;
  rc.synth.offscreen_prob = 0.7;
  rc.memory.build.m = 2;
  RunConfig back;
  from_json(to_json(rc), back);
  EXPECT_EQ(to_json(back), to_json(rc));
  EXPECT_EQ(back.model.scheme, EliminationScheme::sk_ca_fc);
  EXPECT_EQ(back.model.stages.dims, rc.model.stages.dims);
}

TEST(RunConfig, UnknownKeyIsConfigError) {
  RunConfig rc;
  auto doc = to_json(rc);
  doc["train"]["learning_rate"] = 0.1;
  try {
    from_json(doc, rc);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  doc = to_json(RunConfig{});
  doc["extra"] = 1;
  EXPECT_THROW(from_json(doc, rc), ConfigError);
  doc = to_json(RunConfig{});
  doc["model"]["scheme"] = "gumbel";
  EXPECT_THROW(from_json(doc, rc), ConfigError);
  doc = to_json(RunConfig{});
  doc["model"]["K"] = "three";
  EXPECT_THROW(from_json(doc, rc), ConfigError);
}

TEST(RunConfig, AblationShorthands) {
  const auto rc = load_run_config(std::nullopt, {"derivation=off", "enhance=off", "scheme=ca_fc", "subcluster=pooled", "train.lr=0.01"});
  EXPECT_FALSE(rc.model.derivation.derive);
  EXPECT_FALSE(rc.model.derivation.enhance);
  EXPECT_EQ(rc.model.scheme, EliminationScheme::ca_fc);
  EXPECT_EQ(rc.model.derivation.subcluster, SubclusterMode::pooled);
  EXPECT_EQ(rc.train.lr, 0.01);
  EXPECT_THROW(load_run_config(std::nullopt, {"no_equals"}), ConfigError);
  EXPECT_THROW(load_run_config(std::nullopt, {"=1"}), ConfigError);
  EXPECT_THROW(load_run_config(std::nullopt, {"model.bogus=1"}), ConfigError);
}

TEST(RunConfig, FileOverlayThenAblations) {
  const auto dir = testing::scratch_dir("config");
  std::ofstream(dir / "c.json") << R"({"train": {"steps": 17, "lr": 0.5}, "model": {"K": 2}})";
  const auto rc = load_run_config(dir / "c.json", {"train.lr=0.25"});
  EXPECT_EQ(rc.train.steps, 17u);
  EXPECT_EQ(rc.train.lr, 0.25);
  EXPECT_EQ(rc.model.K, 2u);
  EXPECT_EQ(rc.model.dim, 32u);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_run_config(dir / "missing.json"), ConfigError);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Optimizer

TEST(Adam, MatchesHandComputation) {
  nn::Parameter<double> p("p", 1, 2);
  p.value = Matrix<double>(1, 2, {1.0, -2.0});
  Adam<double> opt({&p}, 0.1);
  const double g1[2] = {0.5, -3.0}, g2[2] = {-1.0, 1.0};
  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int step = 1; step <= 2; ++step) {
    const double* g = step == 1 ? g1 : g2;
    p.grad = Matrix<double>(1, 2, {g[0], g[1]});
    opt.step();
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
      x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.value.data[i], x[i], 1e-12) << "step " << step;
    }
  }
  EXPECT_EQ(opt.steps(), 2u);
}

TEST(Adam, SkipsFrozenAndScalesGradient) {
  nn::Parameter<double> a("a", 1, 1), b("b", 1, 1);
  b.trainable = false;
  a.grad.fill(2.0);
  b.grad.fill(2.0);
  Adam<double> opt({&a, &b}, 0.01);
  opt.step(0.5);
  EXPECT_NEAR(a.value(0, 0), -0.01, 1e-9);
  EXPECT_EQ(b.value(0, 0), 0.0);
  opt.zero_grad();
  EXPECT_EQ(a.grad(0, 0), 0.0);
}

// ---------------------------------------------------------------------------
// Query targets

LabelMap two_class_gt() {
  LabelMap gt(2, 3);
  gt.labels = {1, 1, 0, 0, 4, 4};  // class 0 and class 3
  return gt;
}

TEST(QueryTargets, ClassIdAlignment) {
  const auto t = query_targets<double>({2, 0, 3}, two_class_gt(), 6);
  EXPECT_EQ(t.matched, (std::vector<bool>{false, true, true}));
  EXPECT_EQ(t.classes, (std::vector<std::size_t>{6, 0, 3}));
  EXPECT_EQ(t.masks[1].data, (std::vector<double>{1, 1, 0, 0, 0, 0}));
  EXPECT_EQ(t.masks[2].data, (std::vector<double>{0, 0, 0, 0, 1, 1}));
  for (double v : t.masks[0].data) EXPECT_EQ(v, 0.0);
}

TEST(QueryTargets, LeftoverSegmentGoesToCheapestFreeQuery) {
  const auto gt = two_class_gt();
  // class 3 is not retrieved; queries 0 and 2 are free.
  Matrix<double> probs(6, 3, 0.05), logits(3, 7, 0.0);
  probs(4, 2) = probs(5, 2) = 0.95;
  const auto t = query_targets<double>({2, 0, 5}, gt, 6, &probs, &logits);
  EXPECT_EQ(t.matched, (std::vector<bool>{false, true, true}));
  EXPECT_EQ(t.classes[2], 3u);
  EXPECT_EQ(t.classes[0], 6u);

  const auto off = query_targets<double>({2, 0, 5}, gt, 6, &probs, &logits, false);
  EXPECT_EQ(off.matched, (std::vector<bool>{false, true, false}));
  EXPECT_EQ(off.classes[2], 6u);
}

TEST(QueryTargets, EmptyGroundTruthLeavesAllUnmatched) {
  const auto t = query_targets<double>({0, 1, 2}, LabelMap(2, 2), 6);
  for (bool m : t.matched) EXPECT_FALSE(m);
  for (auto c : t.classes) EXPECT_EQ(c, 6u);
}

// ---------------------------------------------------------------------------
// Training loop on a micro setup

struct MicroSetup {
  SynthConfig synth;
  ModelConfig model;
  MemoryConfig memory;
  std::vector<ClassSpec> bank;
  SemanticMemory mem;
  std::vector<ScenePair> train, val;

  MicroSetup() {
    model = micro_model_config(0);
    synth.num_classes = model.num_classes;
    synth.audio_time = model.audio_time;
    synth.audio_freq = model.audio_freq;
    synth.image_size = 16;
    synth.object_radius_lo = 2.5;
    synth.object_radius_hi = 3.5;
    synth.max_visible = 2;
    memory.singlesource_per_class = 12;
    memory.build.k = 2;
    memory.build.m = 2;
    bank = gen_class_bank(synth);
    mem = build_memory_from_bank(bank, synth, model, memory);
    train = gen_split(bank, synth, "train", 4);
    val = gen_split(bank, synth, "val", 4);
  }
};

const MicroSetup& micro() {
  static const MicroSetup s;
  return s;
}

TrainConfig micro_train(std::size_t steps) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = 2;
  tc.lr = 3e-3;
  tc.eval_every = 0;
  return tc;
}

TEST(Train, LossDecreases) {
  const auto& s = micro();
  Model<double> model(s.model);
  const auto res = train_model(model, s.train, nullptr, s.mem, micro_train(60));
  ASSERT_EQ(res.log.size(), 60u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 5; ++i) first += res.log[i].loss / 5, last += res.log[55 + i].loss / 5;
  EXPECT_LT(last, first);
  for (const auto& r : res.log) EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(Train, FixedSeedGivesIdenticalFirstStep) {
  const auto& s = micro();
  Model<double> a(s.model), b(s.model);
  const auto ra = train_model(a, s.train, nullptr, s.mem, micro_train(3));
  const auto rb = train_model(b, s.train, nullptr, s.mem, micro_train(3));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(ra.log[i].loss, rb.log[i].loss);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
}

TEST(Train, DerivationOffRunsEndToEnd) {
  const auto& s = micro();
  auto cfg = s.model;
  cfg.derivation.derive = false;
  cfg.scheme = EliminationScheme::none;
  Model<double> model(cfg);
  const auto res = train_model(model, s.train, &s.val, s.mem, micro_train(4));
  EXPECT_EQ(res.steps_run, 4u);
  EXPECT_FALSE(std::isnan(res.log.back().val_j));
  nn::Tape<double> t;
  const auto fr = model.forward(t, image_input<double>(s.val[0]), {16, 16}, s.val[0].audio.cast<double>(), s.mem);
  for (std::size_t i = 0; i < cfg.K; ++i)
    for (std::size_t c = 0; c < cfg.dim; ++c) EXPECT_EQ(fr.derived.refined.value()(i, c), fr.audio_feature.value()(0, c));
}

TEST(Train, BestValuesAndEarlyStop) {
  const auto& s = micro();
  Model<double> model(s.model);
  auto tc = micro_train(10);
  tc.eval_every = 2;
  TrainHooks<double> hooks;
  std::size_t evals = 0;
  hooks.on_eval = [&](std::size_t, const MetricReport&) { return ++evals == 3; };
  const auto res = train_model(model, s.train, &s.val, s.mem, tc, hooks);
  EXPECT_EQ(res.steps_run, 6u);
  EXPECT_GE(res.best_val_jf, 0.0);
  EXPECT_EQ(res.best_step % 2, 0u);
  restore_values(model, res.best_values);
  EXPECT_NEAR(evaluate(model, s.val, s.mem).jf_mean, res.best_val_jf, 1e-12);
  EXPECT_THROW(restore_values(model, {}), ContractError);
}

TEST(Train, NonFiniteLossAborts) {
  const auto& s = micro();
  Model<double> model(s.model);
  model.head.classifier.fc2.bias->value.fill(std::numeric_limits<double>::quiet_NaN());
  try {
    train_model(model, s.train, nullptr, s.mem, micro_train(2));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite loss at step 1"), std::string::npos);
  }
}

TEST(Train, InputErrors) {
  const auto& s = micro();
  Model<double> model(s.model);
  EXPECT_THROW(train_model(model, {}, nullptr, s.mem, micro_train(1)), ContractError);
  auto tc = micro_train(1);
  tc.batch_size = 0;
  EXPECT_THROW(train_model(model, s.train, nullptr, s.mem, tc), ContractError);
}

TEST(TrainCsv, HeaderAndRow) {
  EXPECT_EQ(train_csv_header(), "step,loss,dice,bce,iou,cls,val_J,val_F_beta");
  TrainLogRow r;
  r.step = 3;
  r.loss = 1.5;
  r.dice = 0.25;
  EXPECT_EQ(train_csv_row(r), "3,1.5,0.25,0,0,0,,");
  r.val_j = 0.5;
  r.val_f = 0.75;
  EXPECT_EQ(train_csv_row(r), "3,1.5,0.25,0,0,0,0.5,0.75");
}

// ---------------------------------------------------------------------------
// Linear probe

TEST(LinearProbe, SeparableAndRandomLabels) {
  Rng rng(3);
  const std::size_t n = 90, d = 4;
  Matrix<double> x(n, d), xt(n, d);
  std::vector<std::size_t> y(n), yt(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = yt[i] = i % 3;
    for (std::size_t j = 0; j < d; ++j) {
      x(i, j) = rng.normal(j == y[i] ? 3.0 : 0.0, 0.5);
      xt(i, j) = rng.normal(j == yt[i] ? 3.0 : 0.0, 0.5);
    }
  }
  EXPECT_GT(linear_probe_accuracy(x, y, xt, yt, 3), 0.95);
  std::vector<std::size_t> shuffled(n);
  for (auto& v : shuffled) v = rng.below(3);
  EXPECT_LT(linear_probe_accuracy(x, shuffled, xt, yt, 3), 0.6);
  EXPECT_THROW(linear_probe_accuracy(x, {0}, xt, yt, 3), ContractError);
}

}  // namespace
}  // namespace ddeseg
