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
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "ddeseg/core/error.hpp"
#include "ddeseg/losses_metrics.hpp"
#include "ddeseg/model.hpp"
#include "ddeseg/semantic_memory.hpp"
#include "ddeseg/synth.hpp"

namespace ddeseg {

/// Malformed or unreadable configuration (CLI exit code 2).
class ConfigError : public IoError {
 public:
  using IoError::IoError;
};

struct MemoryConfig {
  MemoryBuildConfig build;
  std::size_t singlesource_per_class = 30;
  std::uint64_t singlesource_seed = 101;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 4;
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double grad_clip = 5.0;  // global L2 norm; 0 disables
  double class_weight = 1.0;
  bool supervise_unmatched_masks = false;  // empty-mask target for unmatched queries
  bool assign_leftover = true;             // retrieval misses go to free queries
  LossWeights loss;
  std::uint64_t seed = 0;
  std::size_t eval_every = 250;
  std::size_t log_every = 10;
};

struct RunConfig {
  ModelConfig model;
  MemoryConfig memory;
  SynthConfig synth;
  TrainConfig train;
};

using nlohmann::json;

namespace detail {

// Reads `key` into `v` if present; the object must not carry unknown keys.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  template <class T>
  Fields& opt(const char* key, T& v) {
    seen_.push_back(key);
    if (const auto it = j_.find(key); it != j_.end()) {
      try {
        v = it->template get<T>();
      } catch (const json::exception& e) {
        throw ConfigError(where_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }
  template <class Fn>
  Fields& sub(const char* key, Fn&& fn) {
    seen_.push_back(key);
    if (const auto it = j_.find(key); it != j_.end()) fn(*it, where_ + "." + key);
    return *this;
  }
  void done() const {
    for (const auto& [k, _] : j_.items())
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

inline std::string subcluster_name(SubclusterMode m) { return m == SubclusterMode::pooled ? "pooled" : "nearest"; }

inline SubclusterMode parse_subcluster(const std::string& s) {
  if (s == "nearest") return SubclusterMode::nearest;
  if (s == "pooled") return SubclusterMode::pooled;
  throw ConfigError("unknown subcluster mode '" + s + "'");
}

}  // namespace detail

inline json to_json(const ModelConfig& c) {
  return {{"stages", {{"num_blocks", c.stages.num_blocks}, {"dims", c.stages.dims}, {"num_heads", c.stages.num_heads},
                      {"downsample", c.stages.downsample}}},
          {"K", c.K}, {"dim", c.dim}, {"tau", c.tau}, {"seed", c.seed}, {"audio_seed", c.audio_seed},
          {"num_classes", c.num_classes}, {"patch", c.patch}, {"audio_time", c.audio_time}, {"audio_freq", c.audio_freq},
          {"audio_channels", c.audio_channels}, {"mlp_ratio", c.mlp_ratio},
          {"derivation", {{"derive", c.derivation.derive}, {"enhance", c.derivation.enhance},
                          {"subcluster", detail::subcluster_name(c.derivation.subcluster)}}},
          {"scheme", std::string(to_string(c.scheme))}, {"share_centers", c.share_centers}};
}

inline void from_json(const json& j, ModelConfig& c, const std::string& where = "model") {
  std::string scheme(to_string(c.scheme));
  detail::Fields(j, where)
      .sub("stages",
           [&](const json& s, const std::string& w) {
             detail::Fields(s, w)
                 .opt("num_blocks", c.stages.num_blocks)
                 .opt("dims", c.stages.dims)
                 .opt("num_heads", c.stages.num_heads)
                 .opt("downsample", c.stages.downsample)
                 .done();
           })
      .opt("K", c.K).opt("dim", c.dim).opt("tau", c.tau).opt("seed", c.seed).opt("audio_seed", c.audio_seed)
      .opt("num_classes", c.num_classes).opt("patch", c.patch).opt("audio_time", c.audio_time)
      .opt("audio_freq", c.audio_freq).opt("audio_channels", c.audio_channels).opt("mlp_ratio", c.mlp_ratio)
      .sub("derivation",
           [&](const json& d, const std::string& w) {
             std::string sub = detail::subcluster_name(c.derivation.subcluster);
             detail::Fields(d, w).opt("derive", c.derivation.derive).opt("enhance", c.derivation.enhance).opt("subcluster", sub).done();
             c.derivation.subcluster = detail::parse_subcluster(sub);
           })
      .opt("scheme", scheme)
      .opt("share_centers", c.share_centers)
      .done();
  try {
    c.scheme = parse_scheme(scheme);
  } catch (const ContractError& e) {
    throw ConfigError(where + ".scheme: " + e.what());
  }
}

inline json to_json(const SynthConfig& c) {
  return {{"num_classes", c.num_classes}, {"sub_modes", c.sub_modes}, {"audio_time", c.audio_time}, {"audio_freq", c.audio_freq},
          {"image_size", c.image_size}, {"inter_sim_lo", c.inter_sim_lo}, {"inter_sim_hi", c.inter_sim_hi},
          {"sub_sim_lo", c.sub_sim_lo}, {"sub_sim_hi", c.sub_sim_hi}, {"noise_sigma", c.noise_sigma}, {"gain_lo", c.gain_lo},
          {"gain_hi", c.gain_hi}, {"offscreen_prob", c.offscreen_prob}, {"max_visible", c.max_visible},
          {"max_audible", c.max_audible}, {"object_radius_lo", c.object_radius_lo}, {"object_radius_hi", c.object_radius_hi},
          {"train_size", c.train_size}, {"val_size", c.val_size}, {"test_size", c.test_size},
          {"singlesource_per_class", c.singlesource_per_class}, {"seed", c.seed}};
}

inline void from_json(const json& j, SynthConfig& c, const std::string& where = "synth") {
  detail::Fields(j, where)
      .opt("num_classes", c.num_classes).opt("sub_modes", c.sub_modes).opt("audio_time", c.audio_time)
      .opt("audio_freq", c.audio_freq).opt("image_size", c.image_size).opt("inter_sim_lo", c.inter_sim_lo)
      .opt("inter_sim_hi", c.inter_sim_hi).opt("sub_sim_lo", c.sub_sim_lo).opt("sub_sim_hi", c.sub_sim_hi)
      .opt("noise_sigma", c.noise_sigma).opt("gain_lo", c.gain_lo).opt("gain_hi", c.gain_hi)
      .opt("offscreen_prob", c.offscreen_prob).opt("max_visible", c.max_visible).opt("max_audible", c.max_audible)
      .opt("object_radius_lo", c.object_radius_lo).opt("object_radius_hi", c.object_radius_hi)
      .opt("train_size", c.train_size).opt("val_size", c.val_size).opt("test_size", c.test_size)
      .opt("singlesource_per_class", c.singlesource_per_class).opt("seed", c.seed)
      .done();
}

inline json to_json(const MemoryConfig& c) {
  return {{"k", c.build.k}, {"m", c.build.m}, {"restarts", c.build.restarts}, {"max_iters", c.build.max_iters},
          {"seed", c.build.seed}, {"singlesource_per_class", c.singlesource_per_class}, {"singlesource_seed", c.singlesource_seed}};
}

inline void from_json(const json& j, MemoryConfig& c, const std::string& where = "memory") {
  detail::Fields(j, where)
      .opt("k", c.build.k).opt("m", c.build.m).opt("restarts", c.build.restarts).opt("max_iters", c.build.max_iters)
      .opt("seed", c.build.seed).opt("singlesource_per_class", c.singlesource_per_class)
      .opt("singlesource_seed", c.singlesource_seed)
      .done();
}

inline json to_json(const TrainConfig& c) {
  return {{"steps", c.steps}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2},
          {"adam_eps", c.adam_eps}, {"grad_clip", c.grad_clip}, {"class_weight", c.class_weight},
          {"supervise_unmatched_masks", c.supervise_unmatched_masks}, {"assign_leftover", c.assign_leftover},
          {"loss", {{"dice", c.loss.dice}, {"bce", c.loss.bce}, {"iou", c.loss.iou}}}, {"seed", c.seed},
          {"eval_every", c.eval_every}, {"log_every", c.log_every}};
}

inline void from_json(const json& j, TrainConfig& c, const std::string& where = "train") {
  detail::Fields(j, where)
      .opt("steps", c.steps).opt("batch_size", c.batch_size).opt("lr", c.lr).opt("beta1", c.beta1).opt("beta2", c.beta2)
      .opt("adam_eps", c.adam_eps).opt("grad_clip", c.grad_clip).opt("class_weight", c.class_weight)
      .opt("supervise_unmatched_masks", c.supervise_unmatched_masks).opt("assign_leftover", c.assign_leftover)
      .sub("loss",
           [&](const json& l, const std::string& w) {
             detail::Fields(l, w).opt("dice", c.loss.dice).opt("bce", c.loss.bce).opt("iou", c.loss.iou).done();
           })
      .opt("seed", c.seed).opt("eval_every", c.eval_every).opt("log_every", c.log_every)
      .done();
}

inline json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)}, {"memory", to_json(c.memory)}, {"synth", to_json(c.synth)}, {"train", to_json(c.train)}};
}

inline void from_json(const json& j, RunConfig& c) {
  detail::Fields(j, "config")
      .sub("model", [&](const json& s, const std::string& w) { from_json(s, c.model, w); })
      .sub("memory", [&](const json& s, const std::string& w) { from_json(s, c.memory, w); })
      .sub("synth", [&](const json& s, const std::string& w) { from_json(s, c.synth, w); })
      .sub("train", [&](const json& s, const std::string& w) { from_json(s, c.train, w); })
      .done();
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Applies KEY=VAL to a config document. KEY is a dotted path
/// (train.lr=1e-3) or one of the shorthands derivation, enhance, scheme,
/// subcluster. VAL is parsed as JSON when possible; on/off map to booleans.
inline void apply_ablation(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("ablation '" + std::string(assignment) + "' is not KEY=VAL");
  std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  if (key == "derivation") key = "model.derivation.derive";
  else if (key == "enhance") key = "model.derivation.enhance";
  else if (key == "subcluster") key = "model.derivation.subcluster";
  else if (key == "scheme") key = "model.scheme";
  json value;
  if (raw == "on") value = true;
  else if (raw == "off") value = false;
  else value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("ablation key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

/// Defaults, overlaid with an optional file, then ablations in order.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& ablations = {}) {
  RunConfig defaults;
  json doc = to_json(defaults);
  if (path) doc.merge_patch(read_json_file(*path));
  for (const auto& a : ablations) apply_ablation(doc, a);
  RunConfig cfg;
  from_json(doc, cfg);
  return cfg;
}

}  // namespace ddeseg
