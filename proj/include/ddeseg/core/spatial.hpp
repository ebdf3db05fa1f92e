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

#include <algorithm>
#include <cmath>
#include <vector>

#include "ddeseg/core/tape.hpp"

namespace ddeseg::nn {

/// Spatial extent of a (H*W) x C feature matrix.
struct Extent {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t pixels() const { return height * width; }
  bool operator==(const Extent&) const = default;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require(in + 2 * pad >= kernel, "conv: kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

/// Patch extraction for convolution. Input (H*W) x C; output
/// (H'*W') x (kernel*kernel*C), columns ordered (ky, kx, c). Zero padding.
template <class Real>
Var<Real> im2col(Var<Real> x, Extent in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require(x.rows() == in.pixels(), "im2col: row count does not match extent");
  const std::size_t C = x.cols();
  const std::size_t Ho = conv_out_size(in.height, kernel, stride, pad);
  const std::size_t Wo = conv_out_size(in.width, kernel, stride, pad);
  const std::size_t K = kernel * kernel * C;
  // Source row index per (output pixel, ky, kx); -1 for padding.
  std::vector<long> src(Ho * Wo * kernel * kernel, -1);
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox)
      for (std::size_t ky = 0; ky < kernel; ++ky)
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.height) || ix >= static_cast<long>(in.width)) continue;
          src[((oy * Wo + ox) * kernel + ky) * kernel + kx] = iy * static_cast<long>(in.width) + ix;
        }
  const auto& xv = x.value();
  Matrix<Real> out(Ho * Wo, K);
  const std::size_t taps = kernel * kernel;
  for (std::size_t p = 0; p < Ho * Wo; ++p)
    for (std::size_t tap = 0; tap < taps; ++tap) {
      const long s = src[p * taps + tap];
      if (s < 0) continue;
      std::copy_n(xv.data.begin() + s * C, C, out.data.begin() + p * K + tap * C);
    }
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, src = std::move(src), taps, C, K](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ix)) return;
    const auto& gs = t.grad(self);
    auto& g = t.grad(ix);
    for (std::size_t p = 0; p < gs.rows; ++p)
      for (std::size_t tap = 0; tap < taps; ++tap) {
        const long s = src[p * taps + tap];
        if (s < 0) continue;
        const Real* gp = gs.data.data() + p * K + tap * C;
        Real* dst = g.data.data() + s * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] += gp[c];
      }
  });
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel (align_corners = false) sampling positions.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of a (H*W) x C map to (H2*W2) x C, half-pixel centers.
template <class Real>
Var<Real> upsample_bilinear(Var<Real> x, Extent in, Extent out_extent) {
  require(x.rows() == in.pixels(), "upsample_bilinear: row count does not match extent");
  const auto ty = detail::lerp_taps(in.height, out_extent.height);
  const auto tx = detail::lerp_taps(in.width, out_extent.width);
  const std::size_t C = x.cols();
  const auto& xv = x.value();
  Matrix<Real> out(out_extent.pixels(), C);
  for (std::size_t oy = 0; oy < out_extent.height; ++oy)
    for (std::size_t ox = 0; ox < out_extent.width; ++ox) {
      const auto& a = ty[oy];
      const auto& b = tx[ox];
      const Real w00 = Real((1 - a.w1) * (1 - b.w1)), w01 = Real((1 - a.w1) * b.w1);
      const Real w10 = Real(a.w1 * (1 - b.w1)), w11 = Real(a.w1 * b.w1);
      const Real* p00 = xv.data.data() + (a.i0 * in.width + b.i0) * C;
      const Real* p01 = xv.data.data() + (a.i0 * in.width + b.i1) * C;
      const Real* p10 = xv.data.data() + (a.i1 * in.width + b.i0) * C;
      const Real* p11 = xv.data.data() + (a.i1 * in.width + b.i1) * C;
      Real* o = out.data.data() + (oy * out_extent.width + ox) * C;
      for (std::size_t c = 0; c < C; ++c) o[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
    }
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, ty, tx, in, out_extent, C](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ix)) return;
    const auto& gs = t.grad(self);
    auto& g = t.grad(ix);
    for (std::size_t oy = 0; oy < out_extent.height; ++oy)
      for (std::size_t ox = 0; ox < out_extent.width; ++ox) {
        const auto& a = ty[oy];
        const auto& b = tx[ox];
        const Real w00 = Real((1 - a.w1) * (1 - b.w1)), w01 = Real((1 - a.w1) * b.w1);
        const Real w10 = Real(a.w1 * (1 - b.w1)), w11 = Real(a.w1 * b.w1);
        const Real* go = gs.data.data() + (oy * out_extent.width + ox) * C;
        Real* p00 = g.data.data() + (a.i0 * in.width + b.i0) * C;
        Real* p01 = g.data.data() + (a.i0 * in.width + b.i1) * C;
        Real* p10 = g.data.data() + (a.i1 * in.width + b.i0) * C;
        Real* p11 = g.data.data() + (a.i1 * in.width + b.i1) * C;
        for (std::size_t c = 0; c < C; ++c) {
          p00[c] += w00 * go[c];
          p01[c] += w01 * go[c];
          p10[c] += w10 * go[c];
          p11[c] += w11 * go[c];
        }
      }
  });
}

/// Non-overlapping average pooling with window = stride = `factor`.
template <class Real>
Var<Real> avg_pool(Var<Real> x, Extent in, std::size_t factor) {
  require(x.rows() == in.pixels(), "avg_pool: row count does not match extent");
  require(in.height % factor == 0 && in.width % factor == 0, "avg_pool: extent not divisible by pooling factor");
  const std::size_t Ho = in.height / factor, Wo = in.width / factor, C = x.cols();
  const Real inv = Real(1) / static_cast<Real>(factor * factor);
  const auto& xv = x.value();
  Matrix<Real> out(Ho * Wo, C);
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t xx = 0; xx < in.width; ++xx) {
      const Real* src = xv.data.data() + (y * in.width + xx) * C;
      Real* dst = out.data.data() + ((y / factor) * Wo + xx / factor) * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += inv * src[c];
    }
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, in, factor, Wo, C, inv](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ix)) return;
    const auto& gs = t.grad(self);
    auto& g = t.grad(ix);
    for (std::size_t y = 0; y < in.height; ++y)
      for (std::size_t xx = 0; xx < in.width; ++xx) {
        const Real* src = gs.data.data() + ((y / factor) * Wo + xx / factor) * C;
        Real* dst = g.data.data() + (y * in.width + xx) * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] += inv * src[c];
      }
  });
}

}  // namespace ddeseg::nn
