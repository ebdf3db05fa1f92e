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
#include <string>
#include <vector>

#include "ddeseg/core/layers.hpp"
#include "ddeseg/semantic_memory.hpp"

namespace ddeseg {

/// Learnable maps of the derivation module, all in the memory dimension d.
template <class Real>
struct DerivationParams {
  nn::LinearMap<Real> edge_map;          // W_e, b_e
  nn::LinearMap<Real> edge_score;        // W_f1 (1 x d)
  nn::LinearMap<Real> offset_map;        // W_o1, b_o1
  nn::LinearMap<Real> intra_edge_map;    // W_d, b_d
  nn::LinearMap<Real> intra_score;       // W_f2 (1 x d)
  nn::LinearMap<Real> intra_offset_map;  // W_o2, b_o2

  DerivationParams() = default;
  DerivationParams(const std::string& prefix, std::size_t d, Rng& rng)
      : edge_map(prefix + ".edge_map", d, d, true, rng),
        edge_score(prefix + ".edge_score", d, 1, false, rng),
        offset_map(prefix + ".offset_map", d, d, true, rng),
        intra_edge_map(prefix + ".intra_edge_map", d, d, true, rng),
        intra_score(prefix + ".intra_score", d, 1, false, rng),
        intra_offset_map(prefix + ".intra_offset_map", d, d, true, rng) {}

  std::size_t dim() const { return edge_map.in_dim(); }

  void zero() {
    visit([](nn::Parameter<Real>& p) { p.value.fill(Real(0)); });
  }

  template <class F>
  void visit(F&& f) {
    edge_map.visit(f);
    edge_score.visit(f);
    offset_map.visit(f);
    intra_edge_map.visit(f);
    intra_score.visit(f);
    intra_offset_map.visit(f);
  }
};

enum class SubclusterMode {
  nearest,  // representatives of the sub-cluster whose centroid is nearest to a_i
  pooled,   // all k*m representatives of the class
};

struct DerivationOptions {
  bool derive = true;   // off: K copies of F_a
  bool enhance = true;  // discriminative enhancement
  SubclusterMode subcluster = SubclusterMode::nearest;
};

template <class Real>
struct DerivedSet {
  nn::Var<Real> raw;      // A, K x d
  nn::Var<Real> refined;  // A-hat, K x d
  std::vector<std::uint32_t> class_ids;
  std::vector<double> distances;

  std::size_t size() const { return class_ids.size(); }
};

template <class Real>
Matrix<Real> class_centers(const SemanticMemory& memory, const std::vector<RetrievedClass>& retrieved) {
  Matrix<Real> c(retrieved.size(), memory.dim);
  for (std::size_t i = 0; i < retrieved.size(); ++i) {
    const auto& mu = memory.at(retrieved[i].class_id).global_centroid;
    for (std::size_t t = 0; t < memory.dim; ++t) c(i, t) = static_cast<Real>(mu[t]);
  }
  return c;
}

/// Inter-class derivation: for each retrieved center u_i,
///   e_i  = GELU(W_e (u_i - F_a) + b_e)
///   w    = softmax_i(W_f1 e_i)          (jointly over the K centers)
///   da_i = tanh(W_o1 (F_a + w_i e_i) + b_o1)
///   a_i  = F_a + da_i
/// F_a: 1 x d, centers: K x d.
template <class Real>
nn::Var<Real> derive_prototypes(nn::Tape<Real>& t, nn::Var<Real> feature, nn::Var<Real> centers, DerivationParams<Real>& p) {
  require(centers.rows() >= 1, "derive_prototypes: K must be >= 1");
  require(feature.rows() == 1 && feature.cols() == centers.cols(), "derive_prototypes: F_a must be 1 x d matching the centers");
  const std::size_t K = centers.rows();
  auto fa = nn::broadcast_rows(feature, K);
  auto edges = nn::gelu(p.edge_map.apply(t, centers - fa));
  auto weights = nn::transpose(nn::softmax_rows(nn::transpose(p.edge_score.apply(t, edges))));
  auto weighted = nn::mul_col(edges, weights);
  auto offset = nn::tanh(p.offset_map.apply(t, fa + weighted));
  return fa + offset;
}

struct SubclusterChoice {
  std::size_t index = 0;
  const Matrix<float>* representatives = nullptr;
};

/// Sub-cluster whose centroid is nearest to `a` (ties to the lowest j).
template <class Real>
SubclusterChoice select_subcluster(std::span<const Real> a, const ClassMemory& cm) {
  require(cm.sub_centroids.rows >= 1, "select_subcluster: class has no sub-clusters");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < cm.sub_centroids.rows; ++j) {
    double s = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) {
      const double diff = static_cast<double>(a[t]) - static_cast<double>(cm.sub_centroids(j, t));
      s += diff * diff;
    }
    if (s < best_d) {
      best_d = s;
      best = j;
    }
  }
  return {best, &cm.representatives[best]};
}

template <class Real>
Matrix<Real> representatives_for(std::span<const Real> a, const ClassMemory& cm, SubclusterMode mode) {
  if (mode == SubclusterMode::nearest) return select_subcluster(a, cm).representatives->template cast<Real>();
  std::size_t rows = 0;
  for (const auto& r : cm.representatives) rows += r.rows;
  require(rows > 0, "representatives_for: class has no representatives");
  Matrix<Real> out(rows, cm.sub_centroids.cols);
  std::size_t off = 0;
  for (const auto& r : cm.representatives) {
    for (std::size_t i = 0; i < r.size(); ++i) out.data[off + i] = static_cast<Real>(r.data[i]);
    off += r.size();
  }
  return out;
}

/// Intra-class refinement of each row a_i against representatives R of its class:
///   e    = GELU(W_d (R - a_i) + b_d)          (m x d)
///   w    = softmax over the m rows of W_f2 e
///   da   = tanh(W_o2 (w^T e) + b_o2)
///   a'_i = a_i * (1 + da)
template <class Real>
nn::Var<Real> enhance_discriminative(nn::Tape<Real>& t, nn::Var<Real> A, const std::vector<std::uint32_t>& class_ids,
                                     const SemanticMemory& memory, DerivationParams<Real>& p,
                                     SubclusterMode mode = SubclusterMode::nearest) {
  require(A.rows() == class_ids.size(), "enhance_discriminative: one class id per row required");
  require(A.cols() == memory.dim, "enhance_discriminative: dimension mismatch with memory");
  std::vector<nn::Var<Real>> rows;
  rows.reserve(A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    require(class_ids[i] < memory.num_classes(), "enhance_discriminative: class " + std::to_string(class_ids[i]) + " missing from memory");
    auto a = nn::slice_rows(A, i, i + 1);
    auto reps = t.constant(representatives_for<Real>(a.value().row(0), memory.at(class_ids[i]), mode));
    auto edges = nn::gelu(p.intra_edge_map.apply(t, reps - nn::broadcast_rows(a, reps.rows())));
    auto weights = nn::softmax_rows(nn::transpose(p.intra_score.apply(t, edges)));  // 1 x m
    auto pooled = nn::matmul(weights, edges);                                     // 1 x d
    auto offset = nn::tanh(p.intra_offset_map.apply(t, pooled));
    rows.push_back(nn::hadamard(a, nn::add_scalar(offset, Real(1))));
  }
  return nn::concat_rows(rows);
}

/// Retrieval (constant indices) -> inter-class derivation -> intra-class
/// refinement, subject to the ablation switches in `opt`.
template <class Real>
DerivedSet<Real> derive(nn::Tape<Real>& t, nn::Var<Real> feature, const SemanticMemory& memory, std::size_t K,
                        DerivationParams<Real>& p, const DerivationOptions& opt = {}) {
  require(feature.rows() == 1 && feature.cols() == memory.dim, "derive: F_a must be 1 x d with d = memory dim");
  const auto retrieved = nearest_classes<Real>(feature.value().row(0), memory, K);
  DerivedSet<Real> out;
  for (const auto& r : retrieved) {
    out.class_ids.push_back(r.class_id);
    out.distances.push_back(r.distance);
  }
  if (!opt.derive) {
    out.raw = nn::broadcast_rows(feature, K);
    out.refined = out.raw;
    return out;
  }
  out.raw = derive_prototypes(t, feature, t.constant(class_centers<Real>(memory, retrieved)), p);
  out.refined = opt.enhance ? enhance_discriminative(t, out.raw, out.class_ids, memory, p, opt.subcluster) : out.raw;
  return out;
}

}  // namespace ddeseg
