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
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ddeseg/config.hpp"
#include "ddeseg/core/parallel.hpp"
#include "ddeseg/losses_metrics.hpp"
#include "ddeseg/model.hpp"
#include "ddeseg/semantic_memory.hpp"
#include "ddeseg/synth.hpp"

namespace ddeseg {

/// Raised when a training step produces NaN/Inf.
class NumericError : public ContractError {
 public:
  using ContractError::ContractError;
};

// ---------------------------------------------------------------------------
// Memory from the synthetic single-source bank

inline AudioEncoder<float> frozen_audio_encoder(const ModelConfig& cfg) {
  Rng rng(cfg.audio_seed);
  AudioEncoder<float> enc(cfg, rng);
  enc.set_trainable(false);
  return enc;
}

template <class Real>
std::vector<float> encode_audio(AudioEncoder<Real>& enc, const Matrix<float>& spectrogram) {
  nn::Tape<Real> t;
  const auto v = enc.apply(t, t.constant(spectrogram.cast<Real>())).value();
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v.data[i]);
  return out;
}

inline std::map<std::uint32_t, Matrix<float>> encode_clips(const std::vector<SingleSourceClip>& clips, const ModelConfig& model) {
  auto enc = frozen_audio_encoder(model);
  return gen_singlesource_bank(clips, [&](const Matrix<float>& s) { return encode_audio(enc, s); });
}

inline SemanticMemory build_memory_from_bank(const std::vector<ClassSpec>& bank, const SynthConfig& synth, const ModelConfig& model,
                                             const MemoryConfig& mem) {
  const auto clips = gen_singlesource_clips(bank, synth, mem.singlesource_per_class, mem.singlesource_seed);
  return build_memory(encode_clips(clips, model), mem.build);
}

// ---------------------------------------------------------------------------
// Optimizer

template <class Real>
class Adam {
 public:
  Adam(std::vector<nn::Parameter<Real>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.rows, p->value.cols);
      v_.emplace_back(p->value.rows, p->value.cols);
    }
  }

  /// One update from the accumulated gradients scaled by `grad_scale`.
  void step(double grad_scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (!p.trainable) continue;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = double(p.grad.data[j]) * grad_scale;
        double& m = m_[i].data[j];
        double& v = v_[i].data[j];
        m = b1_ * m + (1 - b1_) * g;
        v = b2_ * v + (1 - b2_) * g * g;
        p.value.data[j] -= static_cast<Real>(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<nn::Parameter<Real>*> params_;
  std::vector<Matrix<double>> m_, v_;
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Per-sample objective

/// Query-to-segment assignment. Query i carries retrieved class c_i and
/// takes the gt region of c_i when that class is a sounding visible one.
/// With assign_leftover, segments left over (retrieval misses) go to the
/// remaining queries by minimum total cost (1 - soft dice) - p(class).
/// Queries still unassigned are unmatched and target "no object" (index C).
struct QueryTargets {
  std::vector<Matrix<double>> masks;
  std::vector<std::size_t> classes;
  std::vector<bool> matched;
};

template <class Real>
QueryTargets query_targets(const std::vector<std::uint32_t>& class_ids, const LabelMap& gt, std::size_t num_classes,
                           const Matrix<Real>* mask_probs = nullptr, const Matrix<Real>* class_logits = nullptr,
                           bool assign_leftover = true) {
  const std::size_t K = class_ids.size();
  QueryTargets out;
  out.masks.assign(K, Matrix<double>(gt.size(), 1));
  out.classes.assign(K, num_classes);
  out.matched.assign(K, false);
  auto region = [&](std::uint32_t cid) {
    Matrix<double> m(gt.size(), 1);
    for (std::size_t i = 0; i < gt.size(); ++i) m.data[i] = gt.labels[i] == cid + 1 ? 1.0 : 0.0;
    return m;
  };
  const auto present = gt.foreground_labels();
  std::vector<std::uint32_t> leftover;
  for (auto label : present) {
    const std::uint32_t cid = label - 1u;
    const auto it = std::find(class_ids.begin(), class_ids.end(), cid);
    if (it != class_ids.end()) {
      const auto q = static_cast<std::size_t>(it - class_ids.begin());
      out.masks[q] = region(cid);
      out.classes[q] = cid;
      out.matched[q] = true;
    } else {
      leftover.push_back(cid);
    }
  }
  std::vector<std::size_t> free;
  for (std::size_t q = 0; q < K; ++q)
    if (!out.matched[q]) free.push_back(q);
  if (!assign_leftover || leftover.empty() || free.empty()) return out;

  std::vector<Matrix<double>> regions;
  for (auto cid : leftover) regions.push_back(region(cid));
  // cost[s][f]: segment s on free query f.
  std::vector<std::vector<double>> cost(leftover.size(), std::vector<double>(free.size(), 0.0));
  if (mask_probs && class_logits)
    for (std::size_t si = 0; si < leftover.size(); ++si)
      for (std::size_t fi = 0; fi < free.size(); ++fi) {
        const std::size_t q = free[fi];
        double inter = 0, ps = 0, ts = 0;
        for (std::size_t i = 0; i < gt.size(); ++i) {
          const double pv = static_cast<double>((*mask_probs)(i, q));
          inter += pv * regions[si].data[i];
          ps += pv;
          ts += regions[si].data[i];
        }
        std::vector<double> prob(class_logits->cols);
        for (std::size_t c = 0; c < prob.size(); ++c) prob[c] = static_cast<double>((*class_logits)(q, c));
        nn::softmax_inplace(std::span<double>(prob));
        cost[si][fi] = (1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0)) - prob[leftover[si]];
      }
  // Exhaustive search over injective segment -> free-query maps (K is small).
  const std::size_t S = std::min(leftover.size(), free.size());
  std::vector<std::size_t> perm(free.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::vector<std::size_t> best;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (std::size_t si = 0; si < S; ++si) c += cost[si][perm[si]];
    if (c < best_cost - 1e-12) {
      best_cost = c;
      best.assign(perm.begin(), perm.begin() + S);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  for (std::size_t si = 0; si < S; ++si) {
    const std::size_t q = free[best[si]];
    out.masks[q] = regions[si];
    out.classes[q] = leftover[si];
    out.matched[q] = true;
  }
  return out;
}

template <class Real>
struct SampleLoss {
  nn::Var<Real> total;
  double dice = 0, bce = 0, iou = 0, cls = 0;
};

template <class Real>
Matrix<Real> image_input(const ScenePair& p) {
  return p.image_matrix().cast<Real>();
}

template <class Real>
SampleLoss<Real> sample_loss(nn::Tape<Real>& t, const ForwardResult<Real>& fr, const LabelMap& gt, std::size_t num_classes,
                             const TrainConfig& cfg) {
  const auto targets = query_targets(fr.derived.class_ids, gt, num_classes, &fr.decoded.mask_probs.value(),
                                     &fr.decoded.class_logits.value(), cfg.assign_leftover);
  const std::size_t K = targets.masks.size();
  std::vector<bool> supervised = targets.matched;
  if (cfg.supervise_unmatched_masks) supervised.assign(K, true);
  std::size_t n_matched = 0;
  for (bool m : supervised) n_matched += m;
  SampleLoss<Real> out;
  // Mask terms average over supervised queries (matched ones, plus the
  // unmatched ones toward an empty mask when enabled).
  nn::Var<Real> total = t.constant(Matrix<Real>(1, 1));
  for (std::size_t q = 0; q < K; ++q) {
    if (!supervised[q]) continue;
    const auto col = nn::slice_cols(fr.decoded.mask_probs, q, q + 1);
    const auto terms = total_loss(col, targets.masks[q].template cast<Real>(), cfg.loss);
    out.dice += double(terms.dice.scalar()) / n_matched;
    out.bce += double(terms.bce.scalar()) / n_matched;
    out.iou += double(terms.iou.scalar()) / n_matched;
    total = total + nn::scale(terms.total, Real(1.0 / n_matched));
  }
  if (cfg.class_weight > 0) {
    const auto ce = nn::cross_entropy_rows(fr.decoded.class_logits, targets.classes);
    out.cls = double(ce.scalar());
    total = total + nn::scale(ce, Real(cfg.class_weight));
  }
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

template <class Real>
std::vector<SegmentationOutput> predict_all(Model<Real>& model, const std::vector<ScenePair>& pairs, const SemanticMemory& memory) {
  std::vector<SegmentationOutput> out(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    out[i] = model.predict(image_input<Real>(p), {p.height, p.width}, p.audio.cast<Real>(), memory);
  });
  return out;
}

template <class Real>
MetricReport evaluate(Model<Real>& model, const std::vector<ScenePair>& pairs, const SemanticMemory& memory, bool semantic = true) {
  const auto preds = predict_all(model, pairs, memory);
  MetricAccumulator acc(semantic);
  for (std::size_t i = 0; i < pairs.size(); ++i) acc.add(preds[i].assembled, pairs[i].gt_mask);
  return acc.report();
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0, dice = 0, bce = 0, iou = 0, cls = 0;
  double val_j = std::numeric_limits<double>::quiet_NaN();
  double val_f = std::numeric_limits<double>::quiet_NaN();
};

inline std::string train_csv_header() { return "step,loss,dice,bce,iou,cls,val_J,val_F_beta"; }

inline std::string train_csv_row(const TrainLogRow& r) {
  std::ostringstream os;
  os.precision(8);
  os << r.step << ',' << r.loss << ',' << r.dice << ',' << r.bce << ',' << r.iou << ',' << r.cls << ',';
  if (!std::isnan(r.val_j)) os << r.val_j;
  os << ',';
  if (!std::isnan(r.val_f)) os << r.val_f;
  return os.str();
}

template <class Real>
struct TrainResult {
  std::vector<TrainLogRow> log;  // one row per optimizer step
  double best_val_jf = -1.0;
  std::size_t best_step = 0;
  std::vector<Matrix<Real>> best_values;  // parameter values at best_step
  std::size_t steps_run = 0;
};

template <class Real>
struct TrainHooks {
  std::function<void(const TrainLogRow&)> on_step;
  /// Called after each periodic evaluation; return true to stop early.
  std::function<bool(std::size_t step, const MetricReport&)> on_eval;
};

/// Mini-batch Adam on the composite objective. Evaluates `val` every
/// cfg.eval_every steps and after the last step, tracking the best J&F.
template <class Real>
TrainResult<Real> train_model(Model<Real>& model, const std::vector<ScenePair>& train, const std::vector<ScenePair>* val,
                              const SemanticMemory& memory, const TrainConfig& cfg, const TrainHooks<Real>& hooks = {}) {
  require(!train.empty(), "train: empty training split");
  require(cfg.batch_size >= 1, "train: batch_size must be >= 1");
  auto params = model.parameters();
  Adam<Real> opt(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  opt.zero_grad();
  Rng order_rng(Rng::derive_seed(cfg.seed, 0x0fde));
  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();
  const std::size_t C = model.config.num_classes;

  std::vector<Matrix<Real>> images, spectra;
  for (const auto& p : train) {
    images.push_back(image_input<Real>(p));
    spectra.push_back(p.audio.cast<Real>());
  }

  TrainResult<Real> result;
  auto run_eval = [&](std::size_t step, TrainLogRow& row) {
    if (!val || val->empty()) return false;
    const auto rep = evaluate(model, *val, memory);
    row.val_j = rep.jaccard;
    row.val_f = rep.fbeta;
    if (rep.jf_mean > result.best_val_jf) {
      result.best_val_jf = rep.jf_mean;
      result.best_step = step;
      result.best_values.clear();
      for (auto* p : params) result.best_values.push_back(p->value);
    }
    return hooks.on_eval && hooks.on_eval(step, rep);
  };

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    TrainLogRow row;
    row.step = step;
    Rng noise(Rng::derive_seed(cfg.seed, 0x100000 + step));
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      const auto& pair = train[idx];
      nn::Tape<Real> t;
      const auto fr = model.forward(t, images[idx], {pair.height, pair.width}, spectra[idx], memory, Mode::train, &noise);
      const auto loss = sample_loss(t, fr, pair.gt_mask, C, cfg);
      const double value = double(loss.total.scalar());
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite loss at step " << step << " (pair seed " << pair.seed << "): dice=" << loss.dice << " bce=" << loss.bce
           << " iou=" << loss.iou << " cls=" << loss.cls;
        throw NumericError(os.str());
      }
      t.backward(loss.total);
      const double inv = 1.0 / double(cfg.batch_size);
      row.loss += value * inv;
      row.dice += loss.dice * inv;
      row.bce += loss.bce * inv;
      row.iou += loss.iou * inv;
      row.cls += loss.cls * inv;
    }
    double scale = 1.0 / double(cfg.batch_size);
    if (cfg.grad_clip > 0) {
      double sq = 0;
      for (auto* p : params)
        if (p->trainable)
          for (Real g : p->grad.data) sq += double(g) * double(g);
      const double norm = std::sqrt(sq) * scale;
      if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
      if (norm > cfg.grad_clip) scale *= cfg.grad_clip / norm;
    }
    opt.step(scale);
    opt.zero_grad();
    bool stop = false;
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) stop = run_eval(step, row);
    result.log.push_back(row);
    result.steps_run = step;
    if (hooks.on_step) hooks.on_step(row);
    if (stop) break;
  }
  return result;
}

template <class Real>
void restore_values(Model<Real>& model, const std::vector<Matrix<Real>>& values) {
  auto params = model.parameters();
  require(values.size() == params.size(), "restore_values: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

// ---------------------------------------------------------------------------
// Linear probe

/// Multinomial logistic regression trained by full-batch gradient descent
/// on z-scored features; returns test accuracy.
inline double linear_probe_accuracy(const Matrix<double>& train_x, const std::vector<std::size_t>& train_y, const Matrix<double>& test_x,
                                    const std::vector<std::size_t>& test_y, std::size_t num_classes, std::size_t iters = 500,
                                    double lr = 0.5, double l2 = 1e-3) {
  require(train_x.rows == train_y.size() && test_x.rows == test_y.size(), "linear_probe: one label per row");
  require(train_x.cols == test_x.cols, "linear_probe: feature width mismatch");
  const std::size_t n = train_x.rows, d = train_x.cols;
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += train_x(i, j) / n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (train_x(i, j) - mean[j]) * (train_x(i, j) - mean[j]) / n;
  for (auto& s : sd) s = std::sqrt(s) + 1e-8;
  auto standardize = [&](const Matrix<double>& x) {
    Matrix<double> z(x.rows, d + 1);
    for (std::size_t i = 0; i < x.rows; ++i) {
      for (std::size_t j = 0; j < d; ++j) z(i, j) = (x(i, j) - mean[j]) / sd[j];
      z(i, d) = 1.0;
    }
    return z;
  };
  const auto zt = standardize(train_x), ze = standardize(test_x);
  Matrix<double> w(d + 1, num_classes);
  std::vector<double> p(num_classes);
  for (std::size_t it = 0; it < iters; ++it) {
    Matrix<double> g(d + 1, num_classes);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < num_classes; ++c) {
        double s = 0;
        for (std::size_t j = 0; j <= d; ++j) s += zt(i, j) * w(j, c);
        p[c] = s;
      }
      nn::softmax_inplace(std::span<double>(p));
      p[train_y[i]] -= 1.0;
      for (std::size_t j = 0; j <= d; ++j)
        for (std::size_t c = 0; c < num_classes; ++c) g(j, c) += zt(i, j) * p[c] / n;
    }
    for (std::size_t k = 0; k < w.size(); ++k) w.data[k] -= lr * (g.data[k] + l2 * w.data[k]);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ze.rows; ++i) {
    std::size_t best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < num_classes; ++c) {
      double s = 0;
      for (std::size_t j = 0; j <= d; ++j) s += ze(i, j) * w(j, c);
      if (s > best_s) {
        best_s = s;
        best = c;
      }
    }
    correct += best == test_y[i];
  }
  return ze.rows == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(ze.rows);
}

}  // namespace ddeseg
