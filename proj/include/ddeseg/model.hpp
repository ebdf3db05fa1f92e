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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ddeseg/core/layers.hpp"
#include "ddeseg/derivation.hpp"
#include "ddeseg/elimination.hpp"
#include "ddeseg/losses_metrics.hpp"

namespace ddeseg {

struct StageConfig {
  std::vector<std::size_t> num_blocks{1, 1, 2, 1};
  std::vector<std::size_t> dims{32, 32, 32, 32};
  std::vector<std::size_t> num_heads{2, 2, 2, 2};
  std::size_t downsample = 2;

  std::size_t num_stages() const { return num_blocks.size(); }

  void validate() const {
    require(num_stages() >= 2, "StageConfig: at least 2 stages required");
    require(dims.size() == num_stages() && num_heads.size() == num_stages(), "StageConfig: per-stage fields must have equal length");
    require(downsample == 2, "StageConfig: only stride-2 transitions are supported");
    for (std::size_t l = 0; l < num_stages(); ++l) nn::AttentionConfig{dims[l], num_heads[l]}.validate();
  }

  bool operator==(const StageConfig&) const = default;
};

struct ModelConfig {
  StageConfig stages;
  std::size_t K = 3;            // derived audio rows / visual centers
  std::size_t dim = 32;         // audio feature and memory dimension d
  double tau = 1.0;             // soft-clustering temperature
  std::uint64_t seed = 0;       // trainable-parameter init
  std::uint64_t audio_seed = 7; // frozen audio encoder init (shared with the memory build)
  std::size_t num_classes = 6;
  std::size_t patch = 4;
  std::size_t audio_time = 16;
  std::size_t audio_freq = 16;
  std::size_t audio_channels = 8;
  std::size_t mlp_ratio = 2;
  DerivationOptions derivation;
  EliminationScheme scheme = EliminationScheme::gs_ca_fc;
  bool share_centers = false;

  void validate() const {
    stages.validate();
    require(K >= 1 && K <= num_classes, "ModelConfig: K must be in [1, C]");
    require(dim >= 1 && tau > 0.0 && patch >= 1, "ModelConfig: dim, tau and patch must be positive");
    require(audio_time % 4 == 0 && audio_freq % 4 == 0, "ModelConfig: audio extent must be divisible by 4");
    if (share_centers)
      for (auto d : stages.dims) require(d == stages.dims[1], "ModelConfig: shared visual centers need equal stage dims");
  }
};

/// Frozen-by-default audio feature extractor: per-clip standardization, two
/// conv + 2x2 average-pool layers, flattened, projected to d and
/// layer-normalized.
template <class Real>
struct AudioEncoder {
  nn::Conv2d<Real> conv1, conv2;
  nn::LinearMap<Real> proj;
  nn::LayerNorm<Real> norm;
  nn::Extent extent;

  AudioEncoder() = default;
  AudioEncoder(const ModelConfig& cfg, Rng& rng)
      : conv1("audio_encoder.conv1", 1, cfg.audio_channels, 3, 1, 1, rng),
        conv2("audio_encoder.conv2", cfg.audio_channels, 2 * cfg.audio_channels, 3, 1, 1, rng),
        proj("audio_encoder.proj", (cfg.audio_time / 4) * (cfg.audio_freq / 4) * 2 * cfg.audio_channels, cfg.dim, true, rng),
        norm("audio_encoder.norm", cfg.dim),
        extent{cfg.audio_time, cfg.audio_freq} {}

  /// spectrogram: T x F -> 1 x d
  nn::Var<Real> apply(nn::Tape<Real>& t, nn::Var<Real> spectrogram) {
    require(spectrogram.rows() == extent.height && spectrogram.cols() == extent.width,
            "encode_audio: expected " + shape_str(extent.height, extent.width) + " input, got " +
                shape_str(spectrogram.rows(), spectrogram.cols()));
    const std::size_t n = extent.pixels();
    auto x = nn::layer_norm(nn::reshape(spectrogram, 1, n), t.constant(Matrix<Real>(1, n, Real(1))), t.constant(Matrix<Real>(1, n)));
    x = nn::reshape(x, n, 1);
    x = nn::avg_pool(nn::gelu(conv1.apply(t, x, extent)), extent, 2);
    const nn::Extent e2{extent.height / 2, extent.width / 2};
    x = nn::avg_pool(nn::gelu(conv2.apply(t, x, e2)), e2, 2);
    return norm.apply(t, proj.apply(t, nn::reshape(x, 1, x.value().size())));
  }

  void set_trainable(bool on) {
    visit([on](nn::Parameter<Real>& p) { p.trainable = on; });
  }

  template <class F>
  void visit(F&& f) {
    conv1.visit(f);
    conv2.visit(f);
    proj.visit(f);
    norm.visit(f);
  }
};

/// Patch embedding: conv(kernel = stride = patch) followed by LayerNorm.
template <class Real>
struct VisualEncoder {
  nn::Conv2d<Real> patch_embed;
  nn::LayerNorm<Real> norm;
  std::size_t patch = 4;

  VisualEncoder() = default;
  VisualEncoder(const ModelConfig& cfg, Rng& rng)
      : patch_embed("visual_encoder.patch", 3, cfg.stages.dims[0], cfg.patch, cfg.patch, 0, rng),
        norm("visual_encoder.norm", cfg.stages.dims[0]),
        patch(cfg.patch) {}

  /// image: (H*W) x 3 -> (H/p * W/p) x d_1
  nn::Var<Real> apply(nn::Tape<Real>& t, nn::Var<Real> image, nn::Extent extent) {
    require(image.cols() == 3 && image.rows() == extent.pixels(), "encode_visual: image must be (H*W) x 3");
    return norm.apply(t, patch_embed.apply(t, image, extent));
  }

  template <class F>
  void visit(F&& f) {
    patch_embed.visit(f);
    norm.visit(f);
  }
};

/// Audio-query cross-attention, visual-query cross-attention, then
/// self-attention and FFN on the visual stream; every sub-layer residual
/// with pre-normalization.
template <class Real>
struct FusionBlock {
  nn::LayerNorm<Real> norm_audio_q, norm_visual_kv;
  nn::MultiHeadAttention<Real> audio_cross;
  nn::LayerNorm<Real> norm_visual_q, norm_audio_kv;
  nn::MultiHeadAttention<Real> visual_cross;
  nn::LayerNorm<Real> norm_self;
  nn::MultiHeadAttention<Real> self_attn;
  nn::LayerNorm<Real> norm_ffn;
  nn::Mlp<Real> ffn;

  FusionBlock() = default;
  FusionBlock(const std::string& name, std::size_t dim, std::size_t heads, std::size_t mlp_ratio, Rng& rng)
      : norm_audio_q(name + ".norm_audio_q", dim), norm_visual_kv(name + ".norm_visual_kv", dim),
        audio_cross(name + ".audio_cross", {dim, heads}, rng),
        norm_visual_q(name + ".norm_visual_q", dim), norm_audio_kv(name + ".norm_audio_kv", dim),
        visual_cross(name + ".visual_cross", {dim, heads}, rng),
        norm_self(name + ".norm_self", dim), self_attn(name + ".self_attn", {dim, heads}, rng),
        norm_ffn(name + ".norm_ffn", dim), ffn(name + ".ffn", dim, mlp_ratio * dim, dim, rng) {}

  std::pair<nn::Var<Real>, nn::Var<Real>> apply(nn::Tape<Real>& t, nn::Var<Real> audio, nn::Var<Real> visual) {
    require(audio.cols() == visual.cols(), "fusion_block: audio/visual width mismatch");
    audio = audio + audio_cross.apply(t, norm_audio_q.apply(t, audio), norm_visual_kv.apply(t, visual));
    visual = visual + visual_cross.apply(t, norm_visual_q.apply(t, visual), norm_audio_kv.apply(t, audio));
    auto v_self = norm_self.apply(t, visual);
    visual = visual + self_attn.apply(t, v_self, v_self);
    visual = visual + ffn.apply(t, norm_ffn.apply(t, visual));
    return {audio, visual};
  }

  /// Zeroes every residual branch's output projection: the block becomes
  /// the identity on both streams.
  void zero_residual_outputs() {
    audio_cross.out.zero();
    visual_cross.out.zero();
    self_attn.out.zero();
    ffn.fc2.zero();
  }

  template <class F>
  void visit(F&& f) {
    norm_audio_q.visit(f);
    norm_visual_kv.visit(f);
    audio_cross.visit(f);
    norm_visual_q.visit(f);
    norm_audio_kv.visit(f);
    visual_cross.visit(f);
    norm_self.visit(f);
    self_attn.visit(f);
    norm_ffn.visit(f);
    ffn.visit(f);
  }
};

/// Stride-2 3x3 convolution halving the spatial extent.
template <class Real>
struct StageTransition {
  nn::Conv2d<Real> conv;
  std::optional<nn::LinearMap<Real>> audio_proj;

  StageTransition() = default;
  StageTransition(const std::string& name, std::size_t in_dim, std::size_t out_dim, Rng& rng)
      : conv(name + ".conv", in_dim, out_dim, 3, 2, 1, rng) {
    if (in_dim != out_dim) audio_proj.emplace(name + ".audio_proj", in_dim, out_dim, true, rng);
  }

  std::pair<nn::Var<Real>, nn::Extent> apply(nn::Tape<Real>& t, nn::Var<Real> visual, nn::Extent extent) {
    require(extent.height % 2 == 0 && extent.width % 2 == 0,
            "stage_transition: odd spatial extent " + shape_str(extent.height, extent.width));
    return {conv.apply(t, visual, extent), conv.output_extent(extent)};
  }

  template <class F>
  void visit(F&& f) {
    conv.visit(f);
    if (audio_proj) audio_proj->visit(f);
  }
};

/// Mask-classification head over a multi-scale pixel embedding.
template <class Real>
struct MaskHead {
  std::vector<nn::LinearMap<Real>> pixel_proj;  // per stage -> mask dim
  nn::Conv2d<Real> image_proj;                  // full-resolution RGB -> mask dim
  nn::Mlp<Real> mask_embed;
  nn::Mlp<Real> classifier;

  MaskHead() = default;
  MaskHead(const ModelConfig& cfg, Rng& rng) {
    const std::size_t mask_dim = cfg.stages.dims[0];
    for (std::size_t l = 0; l < cfg.stages.num_stages(); ++l)
      pixel_proj.emplace_back("head.pixel_proj" + std::to_string(l), cfg.stages.dims[l], mask_dim, true, rng);
    image_proj = nn::Conv2d<Real>("head.image_proj", 3, mask_dim, 3, 1, 1, rng);
    const std::size_t dl = cfg.stages.dims.back();
    mask_embed = nn::Mlp<Real>("head.mask_embed", dl, dl, mask_dim, rng);
    classifier = nn::Mlp<Real>("head.classifier", dl, dl, cfg.num_classes + 1, rng);
  }

  template <class F>
  void visit(F&& f) {
    for (auto& p : pixel_proj) p.visit(f);
    image_proj.visit(f);
    mask_embed.visit(f);
    classifier.visit(f);
  }
};

/// Differentiable decoder outputs. Masks are columns: (H*W) x K.
template <class Real>
struct DecodedMasks {
  nn::Var<Real> mask_probs;
  nn::Var<Real> class_logits;  // K x (C + 1); column C is "no object"
};

/// mask_i = upsample(sigmoid(P . MLP_mask(a_i) / sqrt(D))), logits_i = MLP_cls(a_i).
/// `pixels` is the (h*w) x mask_dim embedding at `pixel_extent`.
template <class Real>
DecodedMasks<Real> decode_masks(nn::Tape<Real>& t, nn::Var<Real> queries, nn::Var<Real> pixels, nn::Extent pixel_extent,
                                nn::Extent image_extent, MaskHead<Real>& head) {
  auto embed = head.mask_embed.apply(t, queries);
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(embed.cols()));
  auto probs = nn::sigmoid(nn::scale(nn::matmul_nt(pixels, embed), inv_sqrt));
  if (!(pixel_extent == image_extent)) probs = nn::upsample_bilinear(probs, pixel_extent, image_extent);
  return {probs, head.classifier.apply(t, queries)};
}

/// Non-differentiable segmentation output of one pair.
struct SegmentationOutput {
  std::size_t height = 0, width = 0;
  Matrix<float> query_masks;   // (H*W) x K
  Matrix<float> query_logits;  // K x (C + 1)
  LabelMap assembled;
};

inline constexpr double kMaskThreshold = 0.5;

/// Per pixel, the query with the highest (class confidence x mask
/// probability) emits its best foreground class; background when that
/// score is below the threshold. With `ignore_classes` confidence is 1 and
/// the emitted label is 1 (binary assembly).
template <class Real>
LabelMap assemble_masks(const Matrix<Real>& mask_probs, const Matrix<Real>& class_logits, std::size_t height, std::size_t width,
                        bool ignore_classes = false, double threshold = kMaskThreshold) {
  require(mask_probs.rows == height * width, "assemble_masks: mask rows must equal H*W");
  require(class_logits.rows == mask_probs.cols, "assemble_masks: one logit row per query required");
  const std::size_t K = mask_probs.cols;
  const std::size_t C = class_logits.cols - 1;
  std::vector<double> conf(K, 1.0);
  std::vector<std::uint8_t> label(K, 1);
  if (!ignore_classes) {
    for (std::size_t q = 0; q < K; ++q) {
      std::vector<double> p(class_logits.cols);
      for (std::size_t c = 0; c < p.size(); ++c) p[c] = static_cast<double>(class_logits(q, c));
      nn::softmax_inplace(std::span<double>(p));
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (p[c] > p[best]) best = c;
      conf[q] = p[best];
      label[q] = static_cast<std::uint8_t>(best + 1);
    }
  }
  LabelMap out(height, width);
  for (std::size_t i = 0; i < height * width; ++i) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t q = 0; q < K; ++q) {
      const double s = conf[q] * static_cast<double>(mask_probs(i, q));
      if (s > best) {
        best = s;
        arg = q;
      }
    }
    out.labels[i] = best >= threshold ? label[arg] : 0;
  }
  return out;
}

/// Everything a forward pass produces; Vars live on the caller's tape.
template <class Real>
struct ForwardResult {
  DerivedSet<Real> derived;
  nn::Var<Real> audio_feature;               // F_a, 1 x d
  nn::Var<Real> queries;                     // final audio queries, K x d_L
  std::vector<nn::Var<Real>> stage_scores;   // elimination scores per transition, K x 1
  DecodedMasks<Real> decoded;
  nn::Extent image_extent;
  std::vector<nn::Extent> stage_extents;
};

enum class Mode { eval, train };

/// Full audio-visual segmentation model.
template <class Real>
struct Model {
  ModelConfig config;
  AudioEncoder<Real> audio_encoder;
  VisualEncoder<Real> visual_encoder;
  DerivationParams<Real> derivation;
  std::optional<nn::LinearMap<Real>> audio_to_stage;
  std::vector<std::vector<FusionBlock<Real>>> stages;
  std::vector<StageTransition<Real>> transitions;
  std::vector<EliminationParams<Real>> eliminators;
  MaskHead<Real> head;

  explicit Model(const ModelConfig& cfg) : config(cfg) {
    cfg.validate();
    Rng audio_rng(cfg.audio_seed);
    audio_encoder = AudioEncoder<Real>(cfg, audio_rng);
    audio_encoder.set_trainable(false);
    Rng rng(cfg.seed);
    visual_encoder = VisualEncoder<Real>(cfg, rng);
    derivation = DerivationParams<Real>("derivation", cfg.dim, rng);
    const auto& sc = cfg.stages;
    if (sc.dims[0] != cfg.dim) audio_to_stage.emplace("audio_to_stage", cfg.dim, sc.dims[0], true, rng);
    for (std::size_t l = 0; l < sc.num_stages(); ++l) {
      std::vector<FusionBlock<Real>> blocks;
      for (std::size_t b = 0; b < sc.num_blocks[l]; ++b)
        blocks.emplace_back("stage" + std::to_string(l) + ".block" + std::to_string(b), sc.dims[l], sc.num_heads[l], cfg.mlp_ratio, rng);
      stages.push_back(std::move(blocks));
    }
    for (std::size_t l = 0; l + 1 < sc.num_stages(); ++l) {
      transitions.emplace_back("transition" + std::to_string(l), sc.dims[l], sc.dims[l + 1], rng);
      const std::size_t n_elim = cfg.share_centers ? 1 : sc.num_stages() - 1;
      if (l < n_elim)
        eliminators.emplace_back("elimination" + std::to_string(l), cfg.K, sc.dims[l + 1], sc.dims[l + 1], sc.num_heads[l + 1],
                                 static_cast<Real>(cfg.tau), rng);
    }
    head = MaskHead<Real>(cfg, rng);
  }

  nn::Extent feature_extent(nn::Extent image) const {
    const std::size_t L = config.stages.num_stages();
    const std::size_t unit = config.patch << (L - 1);
    require(image.height % unit == 0 && image.width % unit == 0,
            "encode_visual: image " + shape_str(image.height, image.width) + " not divisible by patch * 2^(L-1) = " +
                std::to_string(unit));
    return {image.height / config.patch, image.width / config.patch};
  }

  /// image: (H*W) x 3 in [0, 1]; spectrogram: T x F. In train mode with a
  /// non-null rng, Gumbel noise is drawn from it.
  ForwardResult<Real> forward(nn::Tape<Real>& t, const Matrix<Real>& image, nn::Extent image_extent,
                              const Matrix<Real>& spectrogram, const SemanticMemory& memory, Mode mode = Mode::eval,
                              Rng* rng = nullptr) {
    require(memory.dim == config.dim, "pipeline: memory dimension " + std::to_string(memory.dim) +
                                          " does not match the audio encoder dimension " + std::to_string(config.dim));
    ForwardResult<Real> r;
    r.image_extent = image_extent;
    nn::Extent extent = feature_extent(image_extent);

    r.audio_feature = audio_encoder.apply(t, t.constant(spectrogram));
    r.derived = derive(t, r.audio_feature, memory, config.K, derivation, config.derivation);
    auto audio = r.derived.refined;
    if (audio_to_stage) audio = audio_to_stage->apply(t, audio);

    const auto image_var = t.constant(image);
    auto visual = visual_encoder.apply(t, image_var, image_extent);
    std::vector<nn::Var<Real>> stage_outputs;
    Rng* noise = mode == Mode::train ? rng : nullptr;
    for (std::size_t l = 0; l < stages.size(); ++l) {
      if (l > 0) {
        auto [v, e] = transitions[l - 1].apply(t, visual, extent);
        visual = v;
        extent = e;
        if (transitions[l - 1].audio_proj) audio = transitions[l - 1].audio_proj->apply(t, audio);
        if (config.scheme != EliminationScheme::none) {
          auto& elim = eliminators[config.share_centers ? 0 : l - 1];
          auto out = eliminate(t, audio, visual, elim, config.scheme, noise);
          r.stage_scores.push_back(out.scores);
          audio = out.eliminated;
        }
      }
      for (auto& block : stages[l]) std::tie(audio, visual) = block.apply(t, audio, visual);
      stage_outputs.push_back(visual);
      r.stage_extents.push_back(extent);
    }
    r.queries = audio;

    const nn::Extent base = r.stage_extents.front();
    nn::Var<Real> pixels = head.pixel_proj[0].apply(t, stage_outputs[0]);
    for (std::size_t l = 1; l < stage_outputs.size(); ++l)
      pixels = pixels + nn::upsample_bilinear(head.pixel_proj[l].apply(t, stage_outputs[l]), r.stage_extents[l], base);
    pixels = nn::upsample_bilinear(pixels, base, image_extent) + head.image_proj.apply(t, image_var, image_extent);
    r.decoded = decode_masks(t, r.queries, pixels, image_extent, image_extent, head);
    return r;
  }

  /// Eval-mode inference, no gradients kept.
  SegmentationOutput predict(const Matrix<Real>& image, nn::Extent image_extent, const Matrix<Real>& spectrogram,
                             const SemanticMemory& memory) {
    nn::Tape<Real> t;
    auto r = forward(t, image, image_extent, spectrogram, memory, Mode::eval);
    SegmentationOutput out;
    out.height = image_extent.height;
    out.width = image_extent.width;
    out.query_masks = r.decoded.mask_probs.value().template cast<float>();
    out.query_logits = r.decoded.class_logits.value().template cast<float>();
    out.assembled = assemble_masks(r.decoded.mask_probs.value(), r.decoded.class_logits.value(), out.height, out.width);
    return out;
  }

  void zero_residual_outputs() {
    for (auto& s : stages)
      for (auto& b : s) b.zero_residual_outputs();
  }

  template <class F>
  void visit(F&& f) {
    audio_encoder.visit(f);
    visual_encoder.visit(f);
    derivation.visit(f);
    if (audio_to_stage) audio_to_stage->visit(f);
    for (auto& s : stages)
      for (auto& b : s) b.visit(f);
    for (auto& tr : transitions) tr.visit(f);
    for (auto& e : eliminators) e.visit(f);
    head.visit(f);
  }

  std::vector<nn::Parameter<Real>*> parameters() {
    std::vector<nn::Parameter<Real>*> out;
    visit([&](nn::Parameter<Real>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](nn::Parameter<Real>& p) { n += p.size(); });
    return n;
  }
};

}  // namespace ddeseg
