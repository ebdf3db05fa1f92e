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

#include <limits>
#include <optional>
#include <string>
#include <string_view>

#include "ddeseg/core/layers.hpp"

namespace ddeseg {

/// Elimination variants, from no filtering to the full Gumbel-Softmax
/// clustering + cross-attention + scorer.
enum class EliminationScheme { none, fc, ca_fc, sk_ca_fc, gs_ca_fc };

inline std::string_view to_string(EliminationScheme s) {
  switch (s) {
    case EliminationScheme::none: return "none";
    case EliminationScheme::fc: return "fc";
    case EliminationScheme::ca_fc: return "ca_fc";
    case EliminationScheme::sk_ca_fc: return "sk_ca_fc";
    case EliminationScheme::gs_ca_fc: return "gs_ca_fc";
  }
  return "?";
}

inline EliminationScheme parse_scheme(std::string_view s) {
  if (s == "none") return EliminationScheme::none;
  if (s == "fc") return EliminationScheme::fc;
  if (s == "ca_fc") return EliminationScheme::ca_fc;
  if (s == "sk_ca_fc") return EliminationScheme::sk_ca_fc;
  if (s == "gs_ca_fc") return EliminationScheme::gs_ca_fc;
  throw ContractError("unknown elimination scheme '" + std::string(s) + "'");
}

/// Scorer output bias at init; sigmoid(2) ~ 0.88 keeps rows mostly intact.
inline constexpr double kInitialScoreLogit = 2.0;

template <class Real>
struct EliminationParams {
  nn::Parameter<Real> centers;  // C_v, K x d
  Real temperature = Real(1);
  nn::LayerNorm<Real> norm_audio, norm_visual;  // pre-norm of the scorer inputs
  nn::MultiHeadAttention<Real> attention;
  nn::Mlp<Real> scorer;  // d -> d -> 1
  std::optional<nn::LinearMap<Real>> visual_proj;

  EliminationParams() = default;
  EliminationParams(const std::string& prefix, std::size_t K, std::size_t d, std::size_t visual_dim, std::size_t heads,
                    Real tau, Rng& rng)
      : centers(prefix + ".centers", K, d), temperature(tau), norm_audio(prefix + ".norm_audio", d),
        norm_visual(prefix + ".norm_visual", d), attention(prefix + ".attn", {d, heads}, rng),
        scorer(prefix + ".scorer", d, d, 1, rng) {
    nn::init_normal(centers, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    nn::init_constant(*scorer.fc2.bias, Real(kInitialScoreLogit));
    if (visual_dim != d) visual_proj.emplace(prefix + ".visual_proj", visual_dim, d, true, rng);
  }

  template <class F>
  void visit(F&& f) {
    f(centers);
    norm_audio.visit(f);
    norm_visual.visit(f);
    attention.visit(f);
    scorer.visit(f);
    if (visual_proj) visual_proj->visit(f);
  }
};

/// HW x K Gumbel(0,1) sample.
template <class Real>
Matrix<Real> sample_gumbel(std::size_t rows, std::size_t K, Rng& rng) {
  Matrix<Real> g(rows, K);
  for (auto& v : g.data) v = static_cast<Real>(rng.gumbel());
  return g;
}

/// O = row-softmax((V C^T + g) / tau). Absent noise means g = 0.
template <class Real>
nn::Var<Real> soft_cluster(nn::Tape<Real>& t, nn::Var<Real> V, nn::Var<Real> centers, Real tau,
                           const Matrix<Real>* noise = nullptr) {
  require(tau > Real(0), "soft_cluster: temperature must be > 0");
  require(V.cols() == centers.cols(), "soft_cluster: visual/center dimension mismatch");
  auto logits = nn::matmul_nt(V, centers);
  if (noise != nullptr) {
    require(noise->rows == V.rows() && noise->cols == centers.rows(), "soft_cluster: noise must be HW x K");
    logits = logits + t.constant(*noise);
  }
  return nn::softmax_rows(nn::scale(logits, Real(1) / tau));
}

/// Soft k-means assignment: row-softmax(-||v - c_k||^2 / tau). The ||v||^2
/// term is constant per row and cancels in the softmax.
template <class Real>
nn::Var<Real> soft_kmeans_assign(nn::Tape<Real>& t, nn::Var<Real> V, nn::Var<Real> centers, Real tau) {
  require(tau > Real(0), "soft_kmeans_assign: temperature must be > 0");
  auto cross = nn::scale(nn::matmul_nt(V, centers), Real(2));
  auto sq = nn::transpose(nn::sum_cols(nn::hadamard(centers, centers)));  // 1 x K
  (void)t;
  return nn::softmax_rows(nn::scale(nn::add_row(cross, nn::scale(sq, Real(-1))), Real(1) / tau));
}

/// Lower bound on a center's assignment mass; an unused center aggregates
/// to ~0 instead of 0/0.
inline constexpr double kMinCenterMass = 1e-6;

/// Assignment-weighted mean of visual tokens per center: diag(1 / 1^T O) O^T V.
template <class Real>
nn::Var<Real> aggregate_centers(nn::Var<Real> O, nn::Var<Real> V) {
  require(O.rows() == V.rows(), "aggregate_centers: assignment rows must match visual tokens");
  auto mass = nn::clamp(nn::transpose(nn::sum_rows(O)), Real(kMinCenterMass), std::numeric_limits<Real>::max());  // K x 1
  return nn::mul_col(nn::matmul_tn(O, V), nn::reciprocal(mass));
}

template <class Real>
struct EliminationOutput {
  nn::Var<Real> scores;      // K x 1, in [0, 1]
  nn::Var<Real> eliminated;  // K x d, row i = S_i * A_i
};

/// F_av = MCA(LN(A), LN(C')), S = sigmoid(MLP(F_av)), A' = S * A.
template <class Real>
EliminationOutput<Real> score_and_eliminate(nn::Tape<Real>& t, nn::Var<Real> A, nn::Var<Real> visual_centers,
                                            EliminationParams<Real>& p) {
  require(A.cols() == visual_centers.cols(), "score_and_eliminate: dimension mismatch");
  auto fav = p.attention.apply(t, p.norm_audio.apply(t, A), p.norm_visual.apply(t, visual_centers));
  auto scores = nn::sigmoid(p.scorer.apply(t, fav));
  return {scores, nn::mul_col(A, scores)};
}

/// Visual-guided elimination of derived audio rows. `noise_rng` non-null
/// selects training mode (Gumbel noise drawn from it); null is eval mode.
template <class Real>
EliminationOutput<Real> eliminate(nn::Tape<Real>& t, nn::Var<Real> A, nn::Var<Real> V, EliminationParams<Real>& p,
                                  EliminationScheme scheme = EliminationScheme::gs_ca_fc, Rng* noise_rng = nullptr) {
  if (p.visual_proj) V = p.visual_proj->apply(t, V);
  require(V.cols() == A.cols(), "eliminate: visual width " + std::to_string(V.cols()) + " does not match audio width " +
                                    std::to_string(A.cols()));
  switch (scheme) {
    case EliminationScheme::none: return {t.constant(Matrix<Real>(A.rows(), 1, Real(1))), A};
    case EliminationScheme::fc: {
      auto scores = nn::sigmoid(p.scorer.apply(t, p.norm_audio.apply(t, A)));
      return {scores, nn::mul_col(A, scores)};
    }
    case EliminationScheme::ca_fc: return score_and_eliminate(t, A, V, p);
    case EliminationScheme::sk_ca_fc: {
      require(p.centers.value.rows == A.rows(), "eliminate: visual center count must equal K");
      auto centers = t.parameter(p.centers);
      auto O = soft_kmeans_assign(t, V, centers, p.temperature);
      return score_and_eliminate(t, A, aggregate_centers(O, V), p);
    }
    case EliminationScheme::gs_ca_fc: {
      require(p.centers.value.rows == A.rows(), "eliminate: visual center count must equal K");
      auto centers = t.parameter(p.centers);
      std::optional<Matrix<Real>> noise;
      if (noise_rng != nullptr) noise = sample_gumbel<Real>(V.rows(), p.centers.value.rows, *noise_rng);
      auto O = soft_cluster(t, V, centers, p.temperature, noise ? &*noise : nullptr);
      return score_and_eliminate(t, A, aggregate_centers(O, V), p);
    }
  }
  throw ContractError("eliminate: unknown scheme");
}

}  // namespace ddeseg
