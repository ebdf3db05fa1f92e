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
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ddeseg/core/binary_io.hpp"
#include "ddeseg/core/matrix.hpp"
#include "ddeseg/core/parallel.hpp"
#include "ddeseg/core/rng.hpp"
#include "ddeseg/losses_metrics.hpp"

namespace ddeseg {

struct SynthConfig {
  std::size_t num_classes = 6;
  std::size_t sub_modes = 3;
  std::size_t audio_time = 16;
  std::size_t audio_freq = 16;
  std::size_t image_size = 64;
  double inter_sim_lo = 0.1, inter_sim_hi = 0.6;
  double sub_sim_lo = 0.5, sub_sim_hi = 0.95;
  double noise_sigma = 0.05;
  double gain_lo = 0.5, gain_hi = 1.5;
  double offscreen_prob = 0.3;
  std::size_t max_visible = 3;
  std::size_t max_audible = 2;
  double object_radius_lo = 8.0, object_radius_hi = 12.0;
  std::size_t train_size = 200, val_size = 50, test_size = 50;
  std::size_t singlesource_per_class = 30;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_classes >= 2 && num_classes <= 250, "SynthConfig: num_classes must be in [2, 250]");
    require(sub_modes >= 1, "SynthConfig: sub_modes must be >= 1");
    require(inter_sim_lo <= inter_sim_hi && sub_sim_lo <= sub_sim_hi, "SynthConfig: similarity bands must be ordered");
    require(max_visible >= 1 && max_visible <= num_classes, "SynthConfig: max_visible must be in [1, C]");
    require(max_audible >= 1, "SynthConfig: max_audible must be >= 1");
    require(gain_lo > 0 && gain_lo <= gain_hi, "SynthConfig: gains must be positive and ordered");
    require(offscreen_prob >= 0.0 && offscreen_prob <= 1.0, "SynthConfig: offscreen_prob must be in [0, 1]");
  }
};

enum class ShapeKind : std::uint32_t { circle = 0, square = 1, diamond = 2, triangle = 3, ring = 4, cross = 5 };

struct ClassSpec {
  std::uint32_t class_id = 0;
  Matrix<float> base;                  // T x F, L2-normalized, nonnegative
  std::vector<Matrix<float>> sub_modes;  // k templates, L2-normalized, nonnegative
  std::array<std::uint8_t, 3> color{};
  ShapeKind shape = ShapeKind::circle;
};

struct SceneObject {
  std::uint32_t class_id = 0;
  ShapeKind shape = ShapeKind::circle;
  float cx = 0, cy = 0, radius = 0;
  bool operator==(const SceneObject&) const = default;
};

struct AudioSource {
  std::uint32_t class_id = 0;
  std::uint32_t sub_mode = 0;
  float gain = 1.0f;
  bool operator==(const AudioSource&) const = default;
};

struct ScenePair {
  std::uint64_t seed = 0;
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> image;  // H x W x 3, row-major
  Matrix<float> audio;              // T x F mixture
  LabelMap gt_mask;                 // 0 = background, c + 1 = class c
  std::vector<std::uint32_t> visible_classes;
  std::vector<std::uint32_t> audible_classes;
  std::vector<SceneObject> objects;
  std::vector<AudioSource> sources;

  bool operator==(const ScenePair&) const = default;

  Matrix<float> image_matrix() const {
    Matrix<float> m(height * width, 3);
    for (std::size_t i = 0; i < image.size(); ++i) m.data[i] = static_cast<float>(image[i]) / 255.0f;
    return m;
  }

  bool is_offscreen(std::uint32_t c) const {
    return std::find(visible_classes.begin(), visible_classes.end(), c) == visible_classes.end();
  }
};

// ---------------------------------------------------------------------------
// Spectral templates

namespace detail {

inline double cosine(const Matrix<float>& a, const Matrix<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a.data[i]) * b.data[i];
    aa += double(a.data[i]) * a.data[i];
    bb += double(b.data[i]) * b.data[i];
  }
  return ab / std::sqrt(aa * bb);
}

inline void l2_normalize(Matrix<float>& m) {
  double s = 0;
  for (float v : m.data) s += double(v) * v;
  const double inv = 1.0 / std::sqrt(s);
  for (auto& v : m.data) v = static_cast<float>(v * inv);
}

/// Smooth nonnegative pattern: a coarse 4x4 uniform grid, bilinearly
/// interpolated to T x F and raised to `sharpness` to concentrate energy.
inline Matrix<float> band_limited_pattern(std::size_t T, std::size_t F, double sharpness, Rng& rng) {
  constexpr std::size_t G = 4;
  double grid[G][G];
  for (auto& row : grid)
    for (auto& v : row) v = rng.uniform();
  Matrix<float> out(T, F);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) {
      const double gy = (t + 0.5) * G / T - 0.5, gx = (f + 0.5) * G / F - 0.5;
      const double cy = std::clamp(gy, 0.0, double(G - 1)), cx = std::clamp(gx, 0.0, double(G - 1));
      const auto y0 = static_cast<std::size_t>(cy), x0 = static_cast<std::size_t>(cx);
      const std::size_t y1 = std::min(y0 + 1, G - 1), x1 = std::min(x0 + 1, G - 1);
      const double wy = cy - y0, wx = cx - x0;
      const double v = (1 - wy) * ((1 - wx) * grid[y0][x0] + wx * grid[y0][x1]) + wy * ((1 - wx) * grid[y1][x0] + wx * grid[y1][x1]);
      out(t, f) = static_cast<float>(std::pow(v, sharpness));
    }
  return out;
}

inline Matrix<float> blend(const Matrix<float>& a, const Matrix<float>& b, double alpha) {
  Matrix<float> out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = static_cast<float>(a.data[i] + alpha * b.data[i]);
  l2_normalize(out);
  return out;
}

// normalize(base + alpha * p) with cosine to base == target, by bisection on alpha.
inline std::optional<Matrix<float>> sub_mode_towards(const Matrix<float>& base, const Matrix<float>& p, double target) {
  double lo = 0.0, hi = 64.0;
  if (cosine(base, blend(base, p, hi)) > target) return std::nullopt;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (cosine(base, blend(base, p, mid)) > target ? lo : hi) = mid;
  }
  return blend(base, p, 0.5 * (lo + hi));
}

inline std::array<std::uint8_t, 3> class_color(std::uint32_t c) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 6> palette{{
      {220, 40, 40}, {40, 190, 60}, {50, 80, 230}, {230, 210, 40}, {200, 60, 210}, {40, 200, 210}}};
  auto col = palette[c % palette.size()];
  const std::uint32_t tier = c / static_cast<std::uint32_t>(palette.size());
  for (auto& ch : col) ch = static_cast<std::uint8_t>(std::max(0, int(ch) - int(40 * (tier % 4))));
  return col;
}

}  // namespace detail

/// Deterministic class bank with inter-class base similarities inside
/// [inter_sim_lo, inter_sim_hi] and sub-mode/base similarities inside
/// [sub_sim_lo, sub_sim_hi].
inline std::vector<ClassSpec> gen_class_bank(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.num_classes, T = cfg.audio_time, F = cfg.audio_freq;
  Rng rng(cfg.seed);
  std::vector<ClassSpec> bank;
  for (int attempt = 0; attempt < 10000; ++attempt) {
    auto shared = detail::band_limited_pattern(T, F, 1.0, rng);
    detail::l2_normalize(shared);
    std::vector<Matrix<float>> own;
    for (std::size_t c = 0; c < C; ++c) own.push_back(detail::band_limited_pattern(T, F, 3.0, rng));
    const double beta = rng.uniform(0.0, 0.6);
    std::vector<Matrix<float>> bases;
    for (auto o : own) {
      detail::l2_normalize(o);
      bases.push_back(detail::blend(o, shared, beta));
    }
    bool ok = true;
    for (std::size_t a = 0; a < C && ok; ++a)
      for (std::size_t b = a + 1; b < C && ok; ++b) {
        const double s = detail::cosine(bases[a], bases[b]);
        ok = s >= cfg.inter_sim_lo && s <= cfg.inter_sim_hi;
      }
    if (!ok) continue;
    bank.clear();
    for (std::uint32_t c = 0; c < C; ++c) {
      ClassSpec spec;
      spec.class_id = c;
      spec.base = bases[c];
      spec.color = detail::class_color(c);
      spec.shape = static_cast<ShapeKind>(c % 6);
      const double band_lo = std::max(cfg.sub_sim_lo, std::min(cfg.sub_sim_hi, 0.6));
      const double band_hi = std::min(cfg.sub_sim_hi, std::max(cfg.sub_sim_lo, 0.85));
      while (spec.sub_modes.size() < cfg.sub_modes) {
        const auto p = detail::band_limited_pattern(T, F, 3.0, rng);
        const double target = rng.uniform(band_lo, band_hi);
        if (auto sm = detail::sub_mode_towards(spec.base, p, target)) spec.sub_modes.push_back(std::move(*sm));
      }
      bank.push_back(std::move(spec));
    }
    return bank;
  }
  throw ContractError("gen_class_bank: could not satisfy the similarity band in 10000 attempts");
}

// ---------------------------------------------------------------------------
// Rendering

inline bool shape_contains(const SceneObject& o, double x, double y) {
  const double dx = x - o.cx, dy = y - o.cy, r = o.radius;
  switch (o.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::diamond: return std::abs(dx) + std::abs(dy) <= r;
    case ShapeKind::triangle: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    case ShapeKind::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
    case ShapeKind::cross: return (std::abs(dx) <= 0.35 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.35 * r && std::abs(dx) <= r);
  }
  return false;
}

/// Ground truth recomputed from scene metadata: pixels of objects whose
/// class is both visible and audible.
inline LabelMap render_gt(std::size_t H, std::size_t W, const std::vector<SceneObject>& objects,
                          const std::vector<std::uint32_t>& audible) {
  LabelMap gt(H, W);
  for (const auto& o : objects) {
    if (std::find(audible.begin(), audible.end(), o.class_id) == audible.end()) continue;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (shape_contains(o, x + 0.5, y + 0.5)) gt.at(y, x) = static_cast<std::uint8_t>(o.class_id + 1);
  }
  return gt;
}

/// Renders one scene. `n_audible` counts sounding sources; sources beyond
/// the visible set are off-screen. With probability `offscreen_prob` one
/// extra off-screen class is added to the mixture.
inline ScenePair gen_scene(const std::vector<ClassSpec>& bank, const SynthConfig& cfg, std::size_t n_visible,
                           std::size_t n_audible, double offscreen_prob, std::uint64_t seed) {
  const std::size_t C = bank.size();
  require(n_visible <= C, "gen_scene: n_visible exceeds the class count");
  require(n_audible >= 1, "gen_scene: n_audible must be >= 1");
  Rng rng(seed);
  ScenePair s;
  s.seed = seed;
  s.height = s.width = cfg.image_size;

  std::vector<std::uint32_t> order(C);
  for (std::uint32_t c = 0; c < C; ++c) order[c] = c;
  for (std::size_t i = C; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  s.visible_classes.assign(order.begin(), order.begin() + n_visible);
  std::size_t next_hidden = n_visible;
  for (std::size_t i = 0; i < n_audible; ++i) {
    if (i < n_visible) {
      s.audible_classes.push_back(s.visible_classes[i]);
    } else {
      require(next_hidden < C, "gen_scene: not enough classes for off-screen sources");
      s.audible_classes.push_back(order[next_hidden++]);
    }
  }
  if (rng.uniform() < offscreen_prob && next_hidden < C) s.audible_classes.push_back(order[next_hidden++]);

  // Non-overlapping placement (bounding circles plus a 2 px margin). A
  // layout that cannot fit the next object is redrawn from scratch.
  const double size = static_cast<double>(cfg.image_size);
  bool layout_ok = s.visible_classes.empty();
  for (int retry = 0; retry < 100 && !layout_ok; ++retry) {
    s.objects.clear();
    layout_ok = true;
    for (auto c : s.visible_classes) {
      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        SceneObject o;
        o.class_id = c;
        o.shape = bank[c].shape;
        o.radius = static_cast<float>(rng.uniform(cfg.object_radius_lo, cfg.object_radius_hi));
        o.cx = static_cast<float>(rng.uniform(o.radius + 1.0, size - o.radius - 1.0));
        o.cy = static_cast<float>(rng.uniform(o.radius + 1.0, size - o.radius - 1.0));
        placed = true;
        for (const auto& p : s.objects) {
          const double dx = o.cx - p.cx, dy = o.cy - p.cy;
          if (std::sqrt(dx * dx + dy * dy) < o.radius + p.radius + 2.0) placed = false;
        }
        if (placed) s.objects.push_back(o);
      }
      if (!placed) {
        layout_ok = false;
        break;
      }
    }
  }
  if (!layout_ok) throw ContractError("gen_scene: impossible placement after 100 retries (seed " + std::to_string(seed) + ")");

  s.image.assign(s.height * s.width * 3, 0);
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      std::array<double, 3> px{110, 110, 110};
      for (const auto& o : s.objects)
        if (shape_contains(o, x + 0.5, y + 0.5))
          for (int ch = 0; ch < 3; ++ch) px[ch] = bank[o.class_id].color[ch];
      for (int ch = 0; ch < 3; ++ch)
        s.image[(y * s.width + x) * 3 + ch] = static_cast<std::uint8_t>(std::clamp(px[ch] + rng.normal(0.0, 6.0), 0.0, 255.0));
    }
  s.gt_mask = render_gt(s.height, s.width, s.objects, s.audible_classes);

  s.audio = Matrix<float>(cfg.audio_time, cfg.audio_freq);
  for (auto c : s.audible_classes) {
    AudioSource src;
    src.class_id = c;
    src.sub_mode = static_cast<std::uint32_t>(rng.below(bank[c].sub_modes.size()));
    src.gain = static_cast<float>(rng.uniform(cfg.gain_lo, cfg.gain_hi));
    const auto& tpl = bank[c].sub_modes[src.sub_mode];
    for (std::size_t i = 0; i < s.audio.size(); ++i) s.audio.data[i] += src.gain * tpl.data[i];
    s.sources.push_back(src);
  }
  for (auto& v : s.audio.data) v += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
  return s;
}

/// Pair `index` of a split: visible count in [1, max_visible], on-screen
/// audible count in [1, min(max_audible, visible)].
inline ScenePair gen_split_pair(const std::vector<ClassSpec>& bank, const SynthConfig& cfg, std::uint64_t split_seed,
                                std::size_t index) {
  const std::uint64_t seed = Rng::derive_seed(split_seed, index);
  Rng pick(seed ^ 0x5bd1e995ULL);
  const std::size_t n_visible = 1 + pick.below(cfg.max_visible);
  const std::size_t n_audible = 1 + pick.below(std::min(cfg.max_audible, n_visible));
  return gen_scene(bank, cfg, n_visible, n_audible, cfg.offscreen_prob, seed);
}

inline std::uint64_t split_seed(std::uint64_t seed, const std::string& split) {
  std::uint64_t tag = 0;
  for (char ch : split) tag = tag * 131 + static_cast<unsigned char>(ch);
  std::uint64_t x = seed ^ (tag << 20);
  return Rng::splitmix64(x);
}

inline std::vector<ScenePair> gen_split(const std::vector<ClassSpec>& bank, const SynthConfig& cfg, const std::string& split,
                                        std::size_t count) {
  std::vector<ScenePair> pairs(count);
  const auto base = split_seed(cfg.seed, split);
  parallel_for(count, [&](std::size_t i) { pairs[i] = gen_split_pair(bank, cfg, base, i); });
  return pairs;
}

struct SingleSourceClip {
  std::uint32_t class_id = 0;
  std::uint32_t sub_mode = 0;
  Matrix<float> spectrogram;
};

/// Per class, `per_class` clips of one uniformly chosen sub-mode plus noise.
inline std::vector<SingleSourceClip> gen_singlesource_clips(const std::vector<ClassSpec>& bank, const SynthConfig& cfg,
                                                            std::size_t per_class, std::uint64_t seed) {
  std::vector<SingleSourceClip> clips;
  Rng rng(seed);
  for (const auto& spec : bank)
    for (std::size_t i = 0; i < per_class; ++i) {
      SingleSourceClip clip;
      clip.class_id = spec.class_id;
      clip.sub_mode = static_cast<std::uint32_t>(rng.below(spec.sub_modes.size()));
      clip.spectrogram = spec.sub_modes[clip.sub_mode];
      for (auto& v : clip.spectrogram.data) v += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
      clips.push_back(std::move(clip));
    }
  return clips;
}

/// Encodes clips with `encoder(const Matrix<float>&) -> std::vector<float>`
/// into the per-class feature matrices consumed by build_memory.
template <class Encoder>
std::map<std::uint32_t, Matrix<float>> gen_singlesource_bank(const std::vector<SingleSourceClip>& clips, Encoder&& encoder) {
  std::map<std::uint32_t, std::vector<std::vector<float>>> rows;
  for (const auto& clip : clips) rows[clip.class_id].push_back(encoder(clip.spectrogram));
  std::map<std::uint32_t, Matrix<float>> out;
  for (auto& [cid, rs] : rows) {
    Matrix<float> m(rs.size(), rs.front().size());
    for (std::size_t i = 0; i < rs.size(); ++i) std::copy(rs[i].begin(), rs[i].end(), m.row(i).begin());
    out[cid] = std::move(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DDSP1 records:
//   "DDSP1\0\0\0" | u32 version | u64 seed | u32 H, W, T, F | u8 image[H*W*3] |
//   f32 audio[T*F] | u8 mask[H*W] | u32 n + u32 visible[n] | u32 n + u32 audible[n] |
//   u32 n + objects (u32 class, u32 shape, f32 cx, f32 cy, f32 radius) |
//   u32 n + sources (u32 class, u32 sub_mode, f32 gain) | u32 CRC32(payload)

inline constexpr io::Magic kSceneMagic = io::make_magic("DDSP1");
inline constexpr std::uint32_t kSceneVersion = 1;

inline std::vector<std::uint8_t> serialize_scene(const ScenePair& s) {
  io::Writer w;
  w.put_u32(kSceneVersion);
  w.put_u64(s.seed);
  w.put_u32(static_cast<std::uint32_t>(s.height));
  w.put_u32(static_cast<std::uint32_t>(s.width));
  w.put_u32(static_cast<std::uint32_t>(s.audio.rows));
  w.put_u32(static_cast<std::uint32_t>(s.audio.cols));
  w.put_bytes(s.image.data(), s.image.size());
  w.put_f32s(s.audio.data);
  w.put_bytes(s.gt_mask.labels.data(), s.gt_mask.labels.size());
  for (const auto* set : {&s.visible_classes, &s.audible_classes}) {
    w.put_u32(static_cast<std::uint32_t>(set->size()));
    for (auto c : *set) w.put_u32(c);
  }
  w.put_u32(static_cast<std::uint32_t>(s.objects.size()));
  for (const auto& o : s.objects) {
    w.put_u32(o.class_id);
    w.put_u32(static_cast<std::uint32_t>(o.shape));
    w.put_f32(o.cx);
    w.put_f32(o.cy);
    w.put_f32(o.radius);
  }
  w.put_u32(static_cast<std::uint32_t>(s.sources.size()));
  for (const auto& src : s.sources) {
    w.put_u32(src.class_id);
    w.put_u32(src.sub_mode);
    w.put_f32(src.gain);
  }
  return io::seal(kSceneMagic, w);
}

inline ScenePair deserialize_scene(std::span<const std::uint8_t> bytes, const std::string& context) {
  io::Reader r(io::unseal(kSceneMagic, bytes, context), context);
  if (const auto v = r.get_u32(); v != kSceneVersion) throw FormatError(context + ": unsupported version " + std::to_string(v));
  ScenePair s;
  s.seed = r.get_u64();
  s.height = r.get_u32();
  s.width = r.get_u32();
  const std::size_t T = r.get_u32(), F = r.get_u32();
  if (s.height * s.width > (1u << 24) || T * F > (1u << 20)) throw FormatError(context + ": implausible extents");
  s.image.resize(s.height * s.width * 3);
  r.get_bytes(s.image.data(), s.image.size());
  s.audio = Matrix<float>(T, F);
  r.get_f32s(s.audio.data);
  s.gt_mask = LabelMap(s.height, s.width);
  r.get_bytes(s.gt_mask.labels.data(), s.gt_mask.labels.size());
  auto read_ids = [&](std::vector<std::uint32_t>& out) {
    const auto n = r.get_u32();
    if (n > 4096) throw FormatError(context + ": class list too long");
    for (std::uint32_t i = 0; i < n; ++i) out.push_back(r.get_u32());
  };
  read_ids(s.visible_classes);
  read_ids(s.audible_classes);
  const auto n_obj = r.get_u32();
  if (n_obj > 4096) throw FormatError(context + ": object list too long");
  for (std::uint32_t i = 0; i < n_obj; ++i) {
    SceneObject o;
    o.class_id = r.get_u32();
    o.shape = static_cast<ShapeKind>(r.get_u32());
    o.cx = r.get_f32();
    o.cy = r.get_f32();
    o.radius = r.get_f32();
    s.objects.push_back(o);
  }
  const auto n_src = r.get_u32();
  if (n_src > 4096) throw FormatError(context + ": source list too long");
  for (std::uint32_t i = 0; i < n_src; ++i) {
    AudioSource src;
    src.class_id = r.get_u32();
    src.sub_mode = r.get_u32();
    src.gain = r.get_f32();
    s.sources.push_back(src);
  }
  if (r.remaining() != 0) throw FormatError(context + ": trailing bytes in record");
  return s;
}

struct DatasetIndexEntry {
  std::string split;
  std::string file;
  std::uint64_t seed = 0;
  std::uint32_t crc = 0;
};

struct Dataset {
  std::map<std::string, std::vector<ScenePair>> splits;
  std::vector<DatasetIndexEntry> index;

  const std::vector<ScenePair>& split(const std::string& name) const {
    const auto it = splits.find(name);
    if (it == splits.end()) throw IoError("dataset has no split '" + name + "'");
    return it->second;
  }
};

inline constexpr const char* kIndexFile = "index.txt";
inline constexpr const char* kRecordExt = ".ddsp";

/// Writes one DDSP1 record per pair and a plain-text index
/// ("split file seed crc32" per line after a header line).
inline std::vector<DatasetIndexEntry> save_dataset(const std::map<std::string, std::vector<ScenePair>>& splits,
                                                   const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto parent = fs::absolute(dir).parent_path();
  if (!fs::exists(parent)) throw IoError("output parent directory does not exist: " + parent.string());
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<DatasetIndexEntry> index;
  for (const auto& [name, pairs] : splits)
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      std::ostringstream fn;
      fn << name << '_' << std::setw(5) << std::setfill('0') << i << kRecordExt;
      const auto bytes = serialize_scene(pairs[i]);
      io::write_file(dir / fn.str(), bytes);
      std::uint32_t crc;
      std::memcpy(&crc, bytes.data() + bytes.size() - 4, 4);
      index.push_back({name, fn.str(), pairs[i].seed, crc});
    }
  std::ofstream out(dir / kIndexFile);
  if (!out) throw IoError("cannot write index in " + dir.string());
  out << "DDSP-INDEX 1 " << index.size() << '\n';
  for (const auto& e : index) out << e.split << ' ' << e.file << ' ' << e.seed << ' ' << std::hex << e.crc << std::dec << '\n';
  if (!out) throw IoError("short write of index in " + dir.string());
  return index;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(dir / kIndexFile);
  if (!in) throw IoError("cannot open " + (dir / kIndexFile).string());
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  in >> magic >> version >> count;
  if (magic != "DDSP-INDEX" || version != 1) throw FormatError(std::string(kIndexFile) + ": bad header");
  Dataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    DatasetIndexEntry e;
    if (!(in >> e.split >> e.file >> e.seed >> std::hex >> e.crc >> std::dec)) throw FormatError(std::string(kIndexFile) + ": truncated");
    auto pair = deserialize_scene(io::read_file(dir / e.file), e.file);
    ds.splits[e.split].push_back(std::move(pair));
    ds.index.push_back(std::move(e));
  }
  std::size_t on_disk = 0;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == kRecordExt) ++on_disk;
  if (on_disk != count)
    throw FormatError(std::string(kIndexFile) + ": index lists " + std::to_string(count) + " records, directory holds " +
                      std::to_string(on_disk));
  return ds;
}

}  // namespace ddeseg
