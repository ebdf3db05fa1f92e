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

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ddeseg/core/grad_check.hpp"
#include "ddeseg/core/layers.hpp"
#include "ddeseg/core/spatial.hpp"
#include "ddeseg/derivation.hpp"
#include "ddeseg/elimination.hpp"
#include "ddeseg/losses_metrics.hpp"
#include "ddeseg/model.hpp"
#include "ddeseg/semantic_memory.hpp"
#include "ddeseg/train.hpp"

namespace ddeseg {

struct GradSuiteResult {
  std::string name;
  nn::GradCheckReport report;
};

/// The 2-stage micro-model used by the gradient suite: d = 8, K = 2 on an
/// 8x8 image and an 8x8 spectrogram.
inline ModelConfig micro_model_config(std::uint64_t seed = 0) {
  ModelConfig mc;
  mc.stages.num_blocks = {1, 1};
  mc.stages.dims = {8, 8};
  mc.stages.num_heads = {2, 2};
  mc.K = 2;
  mc.dim = 8;
  mc.patch = 2;
  mc.audio_time = 8;
  mc.audio_freq = 8;
  mc.audio_channels = 2;
  mc.num_classes = 3;
  mc.seed = seed;
  mc.audio_seed = seed + 1;
  return mc;
}

namespace detail {

using P = nn::Parameter<double>;
using V = nn::Var<double>;
using T = nn::Tape<double>;

inline P random_param(const std::string& name, std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  P p(name, r, c);
  for (auto& v : p.value.data) v = rng.uniform(lo, hi);
  return p;
}

template <class Module>
std::vector<P*> collect(Module& m) {
  std::vector<P*> out;
  m.visit([&](P& p) { out.push_back(&p); });
  return out;
}

inline SemanticMemory suite_memory(std::size_t classes, std::size_t d, Rng& rng) {
  std::map<std::uint32_t, Matrix<float>> feats;
  for (std::uint32_t c = 0; c < classes; ++c) {
    Matrix<float> m(8, d);
    for (auto& v : m.data) v = static_cast<float>(rng.normal() + static_cast<double>(c));
    feats[c] = m;
  }
  MemoryBuildConfig bc;
  bc.k = 2;
  bc.m = 2;
  bc.seed = rng.next_u64();
  return build_memory(feats, bc);
}

class SuiteBuilder {
 public:
  SuiteBuilder(std::uint64_t seed, const nn::GradCheckOptions& opt) : rng_(seed), opt_(opt) {}

  /// Checks a tensor-valued op reduced by fixed random weights.
  void tensor(const std::string& name, std::vector<P> inputs, const std::function<V(T&, std::vector<V>&)>& op) {
    std::vector<P*> ptrs;
    for (auto& p : inputs) ptrs.push_back(&p);
    Matrix<double> w;
    {
      T probe;
      std::vector<V> vs;
      for (auto* p : ptrs) vs.push_back(probe.parameter(*p));
      const auto& out = op(probe, vs).value();
      w = nn::random_weights(out.rows, out.cols, rng_);
    }
    auto fwd = [&](T& t) {
      std::vector<V> vs;
      for (auto* p : ptrs) vs.push_back(t.parameter(*p));
      return nn::weighted_sum(op(t, vs), w);
    };
    results_.push_back({name, nn::grad_check(fwd, ptrs, opt_)});
  }

  /// Checks a scalar objective over an arbitrary parameter set.
  void scalar(const std::string& name, const std::vector<P*>& params, const std::function<V(T&)>& fwd) {
    results_.push_back({name, nn::grad_check(fwd, params, opt_)});
  }

  Rng& rng() { return rng_; }
  std::vector<GradSuiteResult> take() { return std::move(results_); }

 private:
  Rng rng_;
  nn::GradCheckOptions opt_;
  std::vector<GradSuiteResult> results_;
};

inline void elementwise_ops(SuiteBuilder& s) {
  auto& r = s.rng();
  auto A = [&] { return random_param("a", 3, 4, r); };
  auto B = [&] { return random_param("b", 3, 4, r); };
  auto pos = [&] { return random_param("a", 3, 4, r, 0.5, 2.0); };
  s.tensor("add", {A(), B()}, [](T&, std::vector<V>& v) { return v[0] + v[1]; });
  s.tensor("sub", {A(), B()}, [](T&, std::vector<V>& v) { return v[0] - v[1]; });
  s.tensor("hadamard", {A(), B()}, [](T&, std::vector<V>& v) { return nn::hadamard(v[0], v[1]); });
  s.tensor("scale", {A()}, [](T&, std::vector<V>& v) { return nn::scale(v[0], -1.7); });
  s.tensor("add_scalar", {A()}, [](T&, std::vector<V>& v) { return nn::add_scalar(v[0], 0.3); });
  s.tensor("reciprocal", {pos()}, [](T&, std::vector<V>& v) { return nn::reciprocal(v[0]); });
  s.tensor("log", {pos()}, [](T&, std::vector<V>& v) { return nn::log(v[0]); });
  s.tensor("clamp", {A()}, [](T&, std::vector<V>& v) { return nn::clamp(v[0], -0.45, 0.55); });
  s.tensor("gelu", {A()}, [](T&, std::vector<V>& v) { return nn::gelu(nn::scale(v[0], 3.0)); });
  s.tensor("tanh", {A()}, [](T&, std::vector<V>& v) { return nn::tanh(nn::scale(v[0], 2.0)); });
  s.tensor("sigmoid", {A()}, [](T&, std::vector<V>& v) { return nn::sigmoid(nn::scale(v[0], 3.0)); });
  s.tensor("softmax_rows", {A()}, [](T&, std::vector<V>& v) { return nn::softmax_rows(nn::scale(v[0], 2.0)); });
}

inline void linear_algebra_ops(SuiteBuilder& s) {
  auto& r = s.rng();
  s.tensor("matmul", {random_param("a", 3, 4, r), random_param("b", 4, 5, r)},
           [](T&, std::vector<V>& v) { return nn::matmul(v[0], v[1]); });
  s.tensor("matmul_nt", {random_param("a", 3, 4, r), random_param("b", 5, 4, r)},
           [](T&, std::vector<V>& v) { return nn::matmul_nt(v[0], v[1]); });
  s.tensor("matmul_tn", {random_param("a", 4, 3, r), random_param("b", 4, 5, r)},
           [](T&, std::vector<V>& v) { return nn::matmul_tn(v[0], v[1]); });
  s.tensor("transpose", {random_param("a", 3, 4, r)}, [](T&, std::vector<V>& v) { return nn::transpose(v[0]); });
  s.tensor("add_row", {random_param("a", 3, 4, r), random_param("row", 1, 4, r)},
           [](T&, std::vector<V>& v) { return nn::add_row(v[0], v[1]); });
  s.tensor("mul_col", {random_param("a", 3, 4, r), random_param("col", 3, 1, r)},
           [](T&, std::vector<V>& v) { return nn::mul_col(v[0], v[1]); });
  s.tensor("broadcast_rows", {random_param("row", 1, 4, r)}, [](T&, std::vector<V>& v) { return nn::broadcast_rows(v[0], 3); });
  s.tensor("sum_rows", {random_param("a", 3, 4, r)}, [](T&, std::vector<V>& v) { return nn::sum_rows(v[0]); });
  s.tensor("sum_cols", {random_param("a", 3, 4, r)}, [](T&, std::vector<V>& v) { return nn::sum_cols(v[0]); });
  s.tensor("sum_all", {random_param("a", 3, 4, r)}, [](T&, std::vector<V>& v) { return nn::sum_all(v[0]); });
  s.tensor("mean_all", {random_param("a", 3, 4, r)}, [](T&, std::vector<V>& v) { return nn::mean_all(v[0]); });
  s.tensor("reshape", {random_param("a", 3, 4, r)}, [](T&, std::vector<V>& v) { return nn::reshape(v[0], 2, 6); });
  s.tensor("slice_cols", {random_param("a", 3, 5, r)}, [](T&, std::vector<V>& v) { return nn::slice_cols(v[0], 1, 4); });
  s.tensor("slice_rows", {random_param("a", 5, 3, r)}, [](T&, std::vector<V>& v) { return nn::slice_rows(v[0], 1, 3); });
  s.tensor("concat_cols", {random_param("a", 3, 2, r), random_param("b", 3, 3, r)},
           [](T&, std::vector<V>& v) { return nn::concat_cols(std::vector<V>{v[0], v[1]}); });
  s.tensor("concat_rows", {random_param("a", 2, 3, r), random_param("b", 1, 3, r)},
           [](T&, std::vector<V>& v) { return nn::concat_rows(std::vector<V>{v[0], v[1]}); });
  s.tensor("layer_norm", {random_param("x", 3, 6, r), random_param("gamma", 1, 6, r), random_param("beta", 1, 6, r)},
           [](T&, std::vector<V>& v) { return nn::layer_norm(v[0], v[1], v[2]); });
  s.tensor("cross_entropy_rows", {random_param("logits", 3, 4, r, -2.0, 2.0)},
           [](T&, std::vector<V>& v) { return nn::cross_entropy_rows(v[0], {0, 3, 1}); });
}

inline void spatial_ops(SuiteBuilder& s) {
  auto& r = s.rng();
  s.tensor("im2col", {random_param("x", 16, 2, r)}, [](T&, std::vector<V>& v) { return nn::im2col(v[0], {4, 4}, 3, 2, 1); });
  s.tensor("upsample_bilinear", {random_param("x", 6, 2, r)},
           [](T&, std::vector<V>& v) { return nn::upsample_bilinear(v[0], {2, 3}, {5, 7}); });
  s.tensor("avg_pool", {random_param("x", 16, 3, r)}, [](T&, std::vector<V>& v) { return nn::avg_pool(v[0], {4, 4}, 2); });
}

inline void layer_composites(SuiteBuilder& s) {
  auto& r = s.rng();
  auto x = random_param("x", 5, 6, r);
  auto kv = random_param("kv", 7, 6, r);
  auto reduce = [](V y, const Matrix<double>& w) { return nn::weighted_sum(y, w); };
  const auto w56 = nn::random_weights(5, 6, r);

  nn::LinearMap<double> lin("linear", 6, 6, true, r);
  auto lin_params = collect(lin);
  lin_params.push_back(&x);
  s.scalar("linear", lin_params, [&](T& t) { return reduce(lin.apply(t, t.parameter(x)), w56); });

  nn::LayerNorm<double> ln("layernorm", 6);
  for (auto& v : ln.gamma.value.data) v = r.uniform(0.5, 1.5);
  for (auto& v : ln.beta.value.data) v = r.uniform(-0.5, 0.5);
  auto ln_params = collect(ln);
  ln_params.push_back(&x);
  s.scalar("layernorm_module", ln_params, [&](T& t) { return reduce(ln.apply(t, t.parameter(x)), w56); });

  nn::Mlp<double> mlp("mlp", 6, 12, 6, r);
  auto mlp_params = collect(mlp);
  mlp_params.push_back(&x);
  s.scalar("mlp", mlp_params, [&](T& t) { return reduce(mlp.apply(t, t.parameter(x)), w56); });

  auto img = random_param("img", 16, 3, r);
  nn::Conv2d<double> conv("conv", 3, 4, 3, 2, 1, r);
  auto conv_params = collect(conv);
  conv_params.push_back(&img);
  const auto w_conv = nn::random_weights(4, 4, r);
  s.scalar("conv2d", conv_params, [&](T& t) { return reduce(conv.apply(t, t.parameter(img), {4, 4}), w_conv); });

  nn::MultiHeadAttention<double> mha("mha", {6, 2}, r);
  auto mha_params = collect(mha);
  mha_params.push_back(&x);
  mha_params.push_back(&kv);
  s.scalar("multi_head_attention", mha_params,
           [&](T& t) { return reduce(mha.apply(t, t.parameter(x), t.parameter(kv)), w56); });

  auto vis = random_param("visual", 6, 6, r);
  FusionBlock<double> block("fusion", 6, 2, 2, r);
  auto block_params = collect(block);
  block_params.push_back(&x);
  block_params.push_back(&vis);
  const auto w66 = nn::random_weights(6, 6, r);
  s.scalar("fusion_block", block_params, [&](T& t) {
    auto [a, v] = block.apply(t, t.parameter(x), t.parameter(vis));
    return nn::weighted_sum(a, w56) + reduce(v, w66);
  });
}

inline void derivation_composites(SuiteBuilder& s) {
  auto& r = s.rng();
  const std::size_t d = 4;
  auto mem = suite_memory(3, d, r);
  DerivationParams<double> dp("derivation", d, r);
  auto fa = random_param("F_a", 1, d, r);
  auto centers = random_param("centers", 3, d, r);
  const auto w = nn::random_weights(3, d, r);

  auto params = collect(dp);
  params.push_back(&fa);
  params.push_back(&centers);
  s.scalar("derive_prototypes", params, [&](T& t) {
    return nn::weighted_sum(derive_prototypes(t, t.parameter(fa), t.parameter(centers), dp), w);
  });

  auto A = random_param("A", 3, d, r);
  auto eparams = collect(dp);
  eparams.push_back(&A);
  for (auto mode : {SubclusterMode::nearest, SubclusterMode::pooled}) {
    s.scalar(mode == SubclusterMode::nearest ? "enhance_discriminative" : "enhance_discriminative_pooled", eparams, [&](T& t) {
      return nn::weighted_sum(enhance_discriminative(t, t.parameter(A), {2, 0, 1}, mem, dp, mode), w);
    });
  }

  auto fparams = collect(dp);
  fparams.push_back(&fa);
  s.scalar("derive", fparams, [&](T& t) {
    auto out = derive(t, t.parameter(fa), mem, 3, dp);
    return nn::weighted_sum(out.refined, w);
  });
}

inline void elimination_composites(SuiteBuilder& s) {
  auto& r = s.rng();
  const std::size_t d = 4, K = 3, hw = 9;
  auto V0 = random_param("V", hw, d, r);
  auto C0 = random_param("centers", K, d, r);
  const auto noise = sample_gumbel<double>(hw, K, r);
  const auto w_o = nn::random_weights(hw, K, r);
  s.scalar("soft_cluster_gumbel", {&V0, &C0}, [&](T& t) {
    return nn::weighted_sum(soft_cluster(t, t.parameter(V0), t.parameter(C0), 0.7, &noise), w_o);
  });
  s.scalar("soft_kmeans_assign", {&V0, &C0}, [&](T& t) {
    return nn::weighted_sum(soft_kmeans_assign(t, t.parameter(V0), t.parameter(C0), 0.7), w_o);
  });
  auto O = random_param("O", hw, K, r, 0.1, 1.0);
  const auto w_c = nn::random_weights(K, d, r);
  s.scalar("aggregate_centers", {&O, &V0},
           [&](T& t) { return nn::weighted_sum(aggregate_centers(t.parameter(O), t.parameter(V0)), w_c); });

  EliminationParams<double> ep("elimination", K, d, 6, 2, 1.0, r);
  auto A = random_param("A", K, d, r);
  auto V6 = random_param("V", hw, 6, r);
  for (auto scheme : {EliminationScheme::fc, EliminationScheme::ca_fc, EliminationScheme::sk_ca_fc, EliminationScheme::gs_ca_fc}) {
    auto params = collect(ep);
    params.push_back(&A);
    params.push_back(&V6);
    const std::uint64_t noise_seed = r.next_u64();
    s.scalar("eliminate_" + std::string(to_string(scheme)), params, [&, scheme, noise_seed](T& t) {
      Rng noise_rng(noise_seed);
      auto out = eliminate(t, t.parameter(A), t.parameter(V6), ep, scheme, &noise_rng);
      return nn::weighted_sum(out.eliminated, w_c) + nn::sum_all(out.scores);
    });
  }
}

inline void loss_composites(SuiteBuilder& s) {
  auto& r = s.rng();
  auto logits = random_param("logits", 16, 1, r, -2.0, 2.0);
  Matrix<double> target(16, 1);
  for (std::size_t i = 0; i < 16; ++i) target.data[i] = (i % 3 == 0) ? 1.0 : 0.0;
  s.scalar("dice_loss", {&logits}, [&](T& t) { return dice_loss(nn::sigmoid(t.parameter(logits)), target); });
  s.scalar("bce_loss", {&logits}, [&](T& t) { return bce_loss(nn::sigmoid(t.parameter(logits)), target); });
  s.scalar("iou_loss", {&logits}, [&](T& t) { return iou_loss(nn::sigmoid(t.parameter(logits)), target); });
  s.scalar("total_loss", {&logits}, [&](T& t) { return total_loss(nn::sigmoid(t.parameter(logits)), target).total; });
}

inline void micro_model(SuiteBuilder& s, std::uint64_t seed) {
  auto& r = s.rng();
  struct Variant {
    const char* name;
    bool derive, enhance;
    EliminationScheme scheme;
  };
  const ModelConfig base = micro_model_config(seed);
  auto mem = suite_memory(base.num_classes, base.dim, r);
  Matrix<double> img(64, 3), spec(8, 8);
  for (auto& v : img.data) v = r.uniform();
  for (auto& v : spec.data) v = r.uniform();
  LabelMap gt(8, 8);
  for (std::size_t i = 0; i < 64; ++i) gt.labels[i] = i % 5 == 0 ? 1 : (i % 7 == 0 ? 2 : 0);
  const TrainConfig tc;
  const std::uint64_t noise_seed = r.next_u64();
  for (Variant v : {Variant{"micro_model_gs_ca_fc", true, true, EliminationScheme::gs_ca_fc},
                    Variant{"micro_model_sk_ca_fc", true, true, EliminationScheme::sk_ca_fc},
                    Variant{"micro_model_ca_fc", true, true, EliminationScheme::ca_fc},
                    Variant{"micro_model_fc", true, true, EliminationScheme::fc},
                    Variant{"micro_model_baseline", false, false, EliminationScheme::none}}) {
    ModelConfig mc = base;
    mc.derivation.derive = v.derive;
    mc.derivation.enhance = v.enhance;
    mc.scheme = v.scheme;
    Model<double> model(mc);
    std::vector<P*> params;
    for (auto* p : model.parameters())
      if (p->trainable) params.push_back(p);
    s.scalar(v.name, params, [&](T& t) {
      Rng noise(noise_seed);
      auto fr = model.forward(t, img, {8, 8}, spec, mem, Mode::train, &noise);
      return sample_loss(t, fr, gt, mc.num_classes, tc).total;
    });
  }
}

}  // namespace detail

/// Finite-difference check of every differentiable op, the layer and module
/// composites, and the full micro-model under each elimination scheme.
inline std::vector<GradSuiteResult> run_grad_suite(std::uint64_t seed, const nn::GradCheckOptions& opt = {}) {
  detail::SuiteBuilder s(seed, opt);
  detail::elementwise_ops(s);
  detail::linear_algebra_ops(s);
  detail::spatial_ops(s);
  detail::layer_composites(s);
  detail::derivation_composites(s);
  detail::elimination_composites(s);
  detail::loss_composites(s);
  detail::micro_model(s, seed);
  return s.take();
}

inline bool all_passed(const std::vector<GradSuiteResult>& results) {
  for (const auto& r : results)
    if (!r.report.passed) return false;
  return true;
}

}  // namespace ddeseg
