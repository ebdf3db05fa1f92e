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
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "ddeseg/core/tape.hpp"

namespace ddeseg {

// ---------------------------------------------------------------------------
// Differentiable losses. `pred` holds probabilities, `target` is binary and
// of the same shape.

inline constexpr double kOverlapSmoothing = 1.0;
inline constexpr double kBceClamp = 1e-7;

struct LossWeights {
  double dice = 5.0;
  double bce = 5.0;
  double iou = 2.0;
};

namespace detail {

template <class Real>
void check_loss_shapes(const nn::Var<Real>& pred, const Matrix<Real>& target, const char* op) {
  require(pred.rows() == target.rows && pred.cols() == target.cols,
          std::string(op) + ": shape mismatch " + shape_str(pred.rows(), pred.cols()) + " vs " + shape_str(target.rows, target.cols));
}

template <class Real>
Real sum(const Matrix<Real>& m) {
  Real s = 0;
  for (Real v : m.data) s += v;
  return s;
}

}  // namespace detail

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps)
template <class Real>
nn::Var<Real> dice_loss(nn::Var<Real> pred, const Matrix<Real>& target) {
  detail::check_loss_shapes(pred, target, "dice_loss");
  auto& t = *pred.tape();
  const Real eps = Real(kOverlapSmoothing);
  auto inter = nn::sum_all(nn::hadamard(pred, t.constant(target)));
  auto num = nn::add_scalar(nn::scale(inter, Real(2)), eps);
  auto den = nn::add_scalar(nn::sum_all(pred), detail::sum(target) + eps);
  return nn::add_scalar(nn::scale(nn::hadamard(num, nn::reciprocal(den)), Real(-1)), Real(1));
}

/// Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].
template <class Real>
nn::Var<Real> bce_loss(nn::Var<Real> pred, const Matrix<Real>& target) {
  detail::check_loss_shapes(pred, target, "bce_loss");
  auto& t = *pred.tape();
  auto p = nn::clamp(pred, Real(kBceClamp), Real(1) - Real(kBceClamp));
  Matrix<Real> inv_target = target;
  for (auto& v : inv_target.data) v = Real(1) - v;
  auto pos = nn::hadamard(t.constant(target), nn::log(p));
  auto neg = nn::hadamard(t.constant(inv_target), nn::log(nn::add_scalar(nn::scale(p, Real(-1)), Real(1))));
  return nn::scale(nn::mean_all(pos + neg), Real(-1));
}

/// 1 - (sum(p t) + eps) / (sum p + sum t - sum(p t) + eps)
template <class Real>
nn::Var<Real> iou_loss(nn::Var<Real> pred, const Matrix<Real>& target) {
  detail::check_loss_shapes(pred, target, "iou_loss");
  auto& t = *pred.tape();
  const Real eps = Real(kOverlapSmoothing);
  auto inter = nn::sum_all(nn::hadamard(pred, t.constant(target)));
  auto num = nn::add_scalar(inter, eps);
  auto den = nn::add_scalar(nn::sum_all(pred) - inter, detail::sum(target) + eps);
  return nn::add_scalar(nn::scale(nn::hadamard(num, nn::reciprocal(den)), Real(-1)), Real(1));
}

template <class Real>
struct LossTerms {
  nn::Var<Real> dice, bce, iou, total;
};

template <class Real>
nn::Var<Real> combine_losses(nn::Var<Real> dice, nn::Var<Real> bce, nn::Var<Real> iou, const LossWeights& w) {
  return nn::scale(dice, Real(w.dice)) + nn::scale(bce, Real(w.bce)) + nn::scale(iou, Real(w.iou));
}

/// lambda_dice * dice + lambda_bce * bce + lambda_iou * iou
template <class Real>
LossTerms<Real> total_loss(nn::Var<Real> pred, const Matrix<Real>& target, const LossWeights& w = {}) {
  LossTerms<Real> out{dice_loss(pred, target), bce_loss(pred, target), iou_loss(pred, target), {}};
  out.total = combine_losses(out.dice, out.bce, out.iou, w);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics over label maps (0 = background, c + 1 = class c).

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}
  std::size_t size() const { return labels.size(); }
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  bool operator==(const LabelMap&) const = default;

  std::set<std::uint8_t> foreground_labels() const {
    std::set<std::uint8_t> s;
    for (auto l : labels)
      if (l != 0) s.insert(l);
    return s;
  }
};

inline constexpr double kDefaultBetaSquared = 0.3;

/// (1 + b^2) P R / (b^2 P + R); 0 when the denominator is 0.
inline double fbeta_from_rates(double precision, double recall, double beta_sq = kDefaultBetaSquared) {
  const double den = beta_sq * precision + recall;
  return den <= 0.0 ? 0.0 : (1.0 + beta_sq) * precision * recall / den;
}


namespace detail {

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0;
};

template <class PredFn, class TargetFn>
Confusion confusion(std::size_t n, PredFn pred, TargetFn target) {
  Confusion c;
  for (std::size_t i = 0; i < n; ++i) {
    const bool p = pred(i), t = target(i);
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

inline double jaccard_from(const Confusion& c) {
  const std::size_t uni = c.tp + c.fp + c.fn;
  return uni == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(uni);
}

inline double fbeta_from(const Confusion& c, double beta_sq) {
  if (c.tp + c.fp + c.fn == 0) return 1.0;
  const double precision = c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  const double recall = c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return fbeta_from_rates(precision, recall, beta_sq);
}

inline void check_shapes(const LabelMap& a, const LabelMap& b, const char* op) {
  require(a.height == b.height && a.width == b.width && a.size() == b.size(), std::string(op) + ": shape mismatch");
}

}  // namespace detail

/// |P n T| / |P u T| on foreground (label != 0); 1 when both are empty.
inline double jaccard_binary(const LabelMap& pred, const LabelMap& target) {
  detail::check_shapes(pred, target, "jaccard_metric");
  return detail::jaccard_from(detail::confusion(
      pred.size(), [&](std::size_t i) { return pred.labels[i] != 0; }, [&](std::size_t i) { return target.labels[i] != 0; }));
}

inline double fbeta_binary(const LabelMap& pred, const LabelMap& target, double beta_sq = kDefaultBetaSquared) {
  detail::check_shapes(pred, target, "fbeta_metric");
  return detail::fbeta_from(detail::confusion(
                                pred.size(), [&](std::size_t i) { return pred.labels[i] != 0; },
                                [&](std::size_t i) { return target.labels[i] != 0; }),
                            beta_sq);
}

/// Per-class (J, F_beta) for every foreground label present in `target`.
inline std::map<std::uint8_t, std::pair<double, double>> per_class_scores(const LabelMap& pred, const LabelMap& target,
                                                                            double beta_sq = kDefaultBetaSquared) {
  detail::check_shapes(pred, target, "semantic metric");
  std::map<std::uint8_t, std::pair<double, double>> out;
  for (auto label : target.foreground_labels()) {
    const auto c = detail::confusion(
        pred.size(), [&](std::size_t i) { return pred.labels[i] == label; }, [&](std::size_t i) { return target.labels[i] == label; });
    out[label] = {detail::jaccard_from(c), detail::fbeta_from(c, beta_sq)};
  }
  return out;
}

/// Mean per-class J over foreground classes present in the target. With no
/// foreground in the target it reduces to the binary score.
inline double jaccard_semantic(const LabelMap& pred, const LabelMap& target) {
  const auto scores = per_class_scores(pred, target);
  if (scores.empty()) return jaccard_binary(pred, target);
  double s = 0.0;
  for (const auto& [label, jf] : scores) s += jf.first;
  return s / static_cast<double>(scores.size());
}

inline double fbeta_semantic(const LabelMap& pred, const LabelMap& target, double beta_sq = kDefaultBetaSquared) {
  const auto scores = per_class_scores(pred, target, beta_sq);
  if (scores.empty()) return fbeta_binary(pred, target, beta_sq);
  double s = 0.0;
  for (const auto& [label, jf] : scores) s += jf.second;
  return s / static_cast<double>(scores.size());
}

struct MetricReport {
  double jaccard = 0.0;
  double fbeta = 0.0;
  double jf_mean = 0.0;
  std::map<std::uint32_t, std::pair<double, double>> per_class;  // class id -> (J, F_beta)
  std::size_t samples = 0;
};

/// Dataset-level aggregation: means of per-sample scores; per-class means
/// over the samples in which the class is present.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(bool semantic = true, double beta_sq = kDefaultBetaSquared) : semantic_(semantic), beta_sq_(beta_sq) {}

  void add(const LabelMap& pred, const LabelMap& target) {
    if (semantic_) {
      j_sum_ += jaccard_semantic(pred, target);
      f_sum_ += fbeta_semantic(pred, target, beta_sq_);
      for (const auto& [label, jf] : per_class_scores(pred, target, beta_sq_)) {
        auto& acc = per_class_[static_cast<std::uint32_t>(label - 1)];
        acc.j += jf.first;
        acc.f += jf.second;
        ++acc.n;
      }
    } else {
      j_sum_ += jaccard_binary(pred, target);
      f_sum_ += fbeta_binary(pred, target, beta_sq_);
    }
    ++n_;
  }

  MetricReport report() const {
    MetricReport r;
    r.samples = n_;
    if (n_ > 0) {
      r.jaccard = j_sum_ / static_cast<double>(n_);
      r.fbeta = f_sum_ / static_cast<double>(n_);
    }
    r.jf_mean = (r.jaccard + r.fbeta) / 2.0;
    for (const auto& [cid, acc] : per_class_)
      r.per_class[cid] = {acc.j / static_cast<double>(acc.n), acc.f / static_cast<double>(acc.n)};
    return r;
  }

 private:
  struct ClassAcc {
    double j = 0.0, f = 0.0;
    std::size_t n = 0;
  };
  bool semantic_;
  double beta_sq_;
  double j_sum_ = 0.0, f_sum_ = 0.0;
  std::size_t n_ = 0;
  std::map<std::uint32_t, ClassAcc> per_class_;
};

/// CSV header for `num_classes` per-class column pairs.
inline std::string metric_csv_header(std::size_t num_classes) {
  std::string h = "dataset,split,seed,J,F_beta,J&F";
  for (std::size_t c = 0; c < num_classes; ++c) h += ",class" + std::to_string(c) + "_J,class" + std::to_string(c) + "_F";
  return h;
}

inline void write_metric_csv_row(std::ostream& os, const std::string& dataset, const std::string& split, std::uint64_t seed,
                                 const MetricReport& r, std::size_t num_classes) {
  os << dataset << ',' << split << ',' << seed << ',' << r.jaccard << ',' << r.fbeta << ',' << r.jf_mean;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto it = r.per_class.find(static_cast<std::uint32_t>(c));
    if (it == r.per_class.end())
      os << ",,";
    else
      os << ',' << it->second.first << ',' << it->second.second;
  }
  os << '\n';
}

}  // namespace ddeseg
