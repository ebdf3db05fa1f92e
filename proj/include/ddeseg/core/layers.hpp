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

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ddeseg/core/rng.hpp"
#include "ddeseg/core/spatial.hpp"
#include "ddeseg/core/tape.hpp"

namespace ddeseg::nn {

template <class Real>
void init_normal(Parameter<Real>& p, Rng& rng, double stddev) {
  for (auto& v : p.value.data) v = static_cast<Real>(rng.normal(0.0, stddev));
}

template <class Real>
void init_constant(Parameter<Real>& p, Real c) {
  p.value.fill(c);
}

/// y = x W^T + b for row-vector inputs x (n x in).
template <class Real>
struct LinearMap {
  Parameter<Real> weight;
  std::optional<Parameter<Real>> bias;

  LinearMap() = default;
  LinearMap(const std::string& name, std::size_t in_dim, std::size_t out_dim, bool with_bias, Rng& rng)
      : weight(name + ".weight", out_dim, in_dim) {
    init_normal(weight, rng, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    if (with_bias) bias.emplace(name + ".bias", 1, out_dim);
  }

  std::size_t in_dim() const { return weight.value.cols; }
  std::size_t out_dim() const { return weight.value.rows; }

  Var<Real> apply(Tape<Real>& t, Var<Real> x) {
    require(x.cols() == in_dim(), "LinearMap " + weight.name + ": expected input width " + std::to_string(in_dim()) +
                                      ", got " + std::to_string(x.cols()));
    auto y = matmul_nt(x, t.parameter(weight));
    if (bias) y = add_row(y, t.parameter(*bias));
    return y;
  }

  void zero() {
    weight.value.fill(Real(0));
    if (bias) bias->value.fill(Real(0));
  }

  template <class F>
  void visit(F&& f) {
    f(weight);
    if (bias) f(*bias);
  }
};

template <class Real>
struct LayerNorm {
  Parameter<Real> gamma;
  Parameter<Real> beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim) : gamma(name + ".gamma", 1, dim), beta(name + ".beta", 1, dim) {
    gamma.value.fill(Real(1));
  }

  Var<Real> apply(Tape<Real>& t, Var<Real> x) { return layer_norm(x, t.parameter(gamma), t.parameter(beta)); }

  template <class F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
};

/// linear -> GELU -> linear
template <class Real>
struct Mlp {
  LinearMap<Real> fc1;
  LinearMap<Real> fc2;

  Mlp() = default;
  Mlp(const std::string& name, std::size_t in_dim, std::size_t hidden, std::size_t out_dim, Rng& rng)
      : fc1(name + ".fc1", in_dim, hidden, true, rng), fc2(name + ".fc2", hidden, out_dim, true, rng) {}

  Var<Real> apply(Tape<Real>& t, Var<Real> x) { return fc2.apply(t, gelu(fc1.apply(t, x))); }

  template <class F>
  void visit(F&& f) {
    fc1.visit(f);
    fc2.visit(f);
  }
};

/// Square-kernel convolution over (H*W) x C maps via im2col.
template <class Real>
struct Conv2d {
  Parameter<Real> weight;  // (kernel*kernel*in) x out
  Parameter<Real> bias;    // 1 x out
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t s, std::size_t p, Rng& rng)
      : weight(name + ".weight", k * k * in_ch, out_ch), bias(name + ".bias", 1, out_ch), kernel(k), stride(s), pad(p) {
    init_normal(weight, rng, 1.0 / std::sqrt(static_cast<double>(k * k * in_ch)));
  }

  std::size_t in_channels() const { return weight.value.rows / (kernel * kernel); }
  std::size_t out_channels() const { return weight.value.cols; }

  Extent output_extent(Extent in) const {
    return {conv_out_size(in.height, kernel, stride, pad), conv_out_size(in.width, kernel, stride, pad)};
  }

  Var<Real> apply(Tape<Real>& t, Var<Real> x, Extent in) {
    require(x.cols() == in_channels(), "Conv2d " + weight.name + ": expected " + std::to_string(in_channels()) +
                                           " input channels, got " + std::to_string(x.cols()));
    auto cols = im2col(x, in, kernel, stride, pad);
    return add_row(matmul(cols, t.parameter(weight)), t.parameter(bias));
  }

  template <class F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
};

struct AttentionConfig {
  std::size_t dim = 0;
  std::size_t num_heads = 1;

  std::size_t head_dim() const { return dim / num_heads; }
  void validate() const {
    require(dim > 0 && num_heads > 0, "AttentionConfig: dim and num_heads must be positive");
    require(dim % num_heads == 0, "AttentionConfig: dim " + std::to_string(dim) + " not divisible by " +
                                      std::to_string(num_heads) + " heads");
  }
};

/// Multi-head scaled dot-product attention with learnable Q/K/V/output
/// projections. query: Q x d, keyvalue: N x d -> Q x d.
template <class Real>
struct MultiHeadAttention {
  AttentionConfig cfg;
  LinearMap<Real> q, k, v, out;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, AttentionConfig c, Rng& rng) : cfg(c) {
    cfg.validate();
    q = LinearMap<Real>(name + ".q", c.dim, c.dim, true, rng);
    k = LinearMap<Real>(name + ".k", c.dim, c.dim, true, rng);
    v = LinearMap<Real>(name + ".v", c.dim, c.dim, true, rng);
    out = LinearMap<Real>(name + ".out", c.dim, c.dim, true, rng);
  }

  Var<Real> apply(Tape<Real>& t, Var<Real> query, Var<Real> keyvalue) {
    require(query.cols() == cfg.dim && keyvalue.cols() == cfg.dim,
            "multi_head_cross_attention: query/keyvalue width must equal dim " + std::to_string(cfg.dim));
    auto Q = q.apply(t, query);
    auto K = k.apply(t, keyvalue);
    auto V = v.apply(t, keyvalue);
    const std::size_t hd = cfg.head_dim();
    const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(hd));
    if (cfg.num_heads == 1) return out.apply(t, matmul(softmax_rows(scale(matmul_nt(Q, K), inv_sqrt)), V));
    std::vector<Var<Real>> heads;
    heads.reserve(cfg.num_heads);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      auto Qh = slice_cols(Q, h * hd, (h + 1) * hd);
      auto Kh = slice_cols(K, h * hd, (h + 1) * hd);
      auto Vh = slice_cols(V, h * hd, (h + 1) * hd);
      heads.push_back(matmul(softmax_rows(scale(matmul_nt(Qh, Kh), inv_sqrt)), Vh));
    }
    return out.apply(t, concat_cols(heads));
  }

  template <class F>
  void visit(F&& f) {
    q.visit(f);
    k.visit(f);
    v.visit(f);
    out.visit(f);
  }
};

}  // namespace ddeseg::nn
