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

// Scalar-loop references shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ddeseg/derivation.hpp"

namespace ddeseg::testing {

using Vec = std::vector<double>;

inline Vec affine(const nn::LinearMap<double>& l, const Vec& x) {
  Vec y(l.out_dim());
  for (std::size_t o = 0; o < y.size(); ++o) {
    double s = l.bias ? l.bias->value(0, o) : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += l.weight.value(o, i) * x[i];
    y[o] = s;
  }
  return y;
}

inline double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Vec row_of(const Matrix<double>& m, std::size_t r) { return Vec(m.row(r).begin(), m.row(r).end()); }

/// Inter-class derivation written out per center.
inline Matrix<double> derive_reference(const Vec& fa, const Matrix<double>& centers, const DerivationParams<double>& p) {
  const std::size_t K = centers.rows, d = fa.size();
  std::vector<Vec> e(K);
  Vec logit(K);
  for (std::size_t i = 0; i < K; ++i) {
    Vec diff(d);
    for (std::size_t t = 0; t < d; ++t) diff[t] = centers(i, t) - fa[t];
    e[i] = affine(p.edge_map, diff);
    for (auto& v : e[i]) v = gelu_ref(v);
    logit[i] = affine(p.edge_score, e[i])[0];
  }
  const double mx = *std::max_element(logit.begin(), logit.end());
  double z = 0;
  for (auto v : logit) z += std::exp(v - mx);
  Matrix<double> A(K, d);
  for (std::size_t i = 0; i < K; ++i) {
    const double w = std::exp(logit[i] - mx) / z;
    Vec in(d);
    for (std::size_t t = 0; t < d; ++t) in[t] = fa[t] + w * e[i][t];
    const auto off = affine(p.offset_map, in);
    for (std::size_t t = 0; t < d; ++t) A(i, t) = fa[t] + std::tanh(off[t]);
  }
  return A;
}

/// Intra-class refinement of one row against representatives R (m x d).
inline Vec enhance_reference(const Vec& a, const Matrix<double>& R, const DerivationParams<double>& p) {
  const std::size_t m = R.rows, d = a.size();
  std::vector<Vec> e(m);
  Vec logit(m);
  for (std::size_t j = 0; j < m; ++j) {
    Vec diff(d);
    for (std::size_t t = 0; t < d; ++t) diff[t] = R(j, t) - a[t];
    e[j] = affine(p.intra_edge_map, diff);
    for (auto& v : e[j]) v = gelu_ref(v);
    logit[j] = affine(p.intra_score, e[j])[0];
  }
  const double mx = *std::max_element(logit.begin(), logit.end());
  double z = 0;
  for (auto v : logit) z += std::exp(v - mx);
  Vec pooled(d, 0.0);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t t = 0; t < d; ++t) pooled[t] += std::exp(logit[j] - mx) / z * e[j][t];
  const auto off = affine(p.intra_offset_map, pooled);
  Vec out(d);
  for (std::size_t t = 0; t < d; ++t) out[t] = a[t] * (1.0 + std::tanh(off[t]));
  return out;
}

inline double dice_ref(const Matrix<double>& p, const Matrix<double>& t) {
  double pt = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < p.size(); ++i) pt += p.data[i] * t.data[i], sp += p.data[i], st += t.data[i];
  return 1.0 - (2.0 * pt + 1.0) / (sp + st + 1.0);
}

inline double bce_ref(const Matrix<double>& p, const Matrix<double>& t) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p.data[i], 1e-7, 1.0 - 1e-7);
    s -= t.data[i] * std::log(q) + (1.0 - t.data[i]) * std::log(1.0 - q);
  }
  return s / static_cast<double>(p.size());
}

inline double iou_ref(const Matrix<double>& p, const Matrix<double>& t) {
  double pt = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < p.size(); ++i) pt += p.data[i] * t.data[i], sp += p.data[i], st += t.data[i];
  return 1.0 - (pt + 1.0) / (sp + st - pt + 1.0);
}

/// Global k-means optimum by enumerating every labelling.
inline double exhaustive_inertia(const Matrix<double>& pts, std::size_t k) {
  const std::size_t n = pts.rows, d = pts.cols;
  std::vector<std::size_t> label(n, 0);
  double best = INFINITY;
  for (;;) {
    std::vector<std::vector<double>> sum(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[label[i]];
      for (std::size_t t = 0; t < d; ++t) sum[label[i]][t] += pts(i, t);
    }
    double inertia = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < d; ++t) {
        const double c = sum[label[i]][t] / double(count[label[i]]);
        inertia += (pts(i, t) - c) * (pts(i, t) - c);
      }
    best = std::min(best, inertia);
    std::size_t pos = 0;
    while (pos < n && ++label[pos] == k) label[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

}  // namespace ddeseg::testing
