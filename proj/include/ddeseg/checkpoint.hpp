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

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ddeseg/core/binary_io.hpp"
#include "ddeseg/model.hpp"

namespace ddeseg {

// "DDCK1\0\0\0" | u32 version | config block | u32 count |
// per tensor: u32 name length, name, u32 rank, u32 dims[rank], f32 data | u32 CRC32(payload)
inline constexpr io::Magic kCheckpointMagic = io::make_magic("DDCK1");
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_sizes(io::Writer& w, const std::vector<std::size_t>& v) {
  w.put_u32(static_cast<std::uint32_t>(v.size()));
  for (auto x : v) w.put_u32(static_cast<std::uint32_t>(x));
}

inline std::vector<std::size_t> get_sizes(io::Reader& r, const std::string& ctx) {
  const auto n = r.get_u32();
  if (n > 64) throw FormatError(ctx + ": stage list too long");
  std::vector<std::size_t> v(n);
  for (auto& x : v) x = r.get_u32();
  return v;
}

inline void put_model_config(io::Writer& w, const ModelConfig& c) {
  put_sizes(w, c.stages.num_blocks);
  put_sizes(w, c.stages.dims);
  put_sizes(w, c.stages.num_heads);
  w.put_u32(static_cast<std::uint32_t>(c.stages.downsample));
  for (auto v : {c.K, c.dim}) w.put_u32(static_cast<std::uint32_t>(v));
  w.put_f32(static_cast<float>(c.tau));
  w.put_u64(c.seed);
  w.put_u64(c.audio_seed);
  for (auto v : {c.num_classes, c.patch, c.audio_time, c.audio_freq, c.audio_channels, c.mlp_ratio})
    w.put_u32(static_cast<std::uint32_t>(v));
  w.put_u8(c.derivation.derive);
  w.put_u8(c.derivation.enhance);
  w.put_u8(static_cast<std::uint8_t>(c.derivation.subcluster));
  w.put_u8(static_cast<std::uint8_t>(c.scheme));
  w.put_u8(c.share_centers);
}

inline ModelConfig get_model_config(io::Reader& r, const std::string& ctx) {
  ModelConfig c;
  c.stages.num_blocks = get_sizes(r, ctx);
  c.stages.dims = get_sizes(r, ctx);
  c.stages.num_heads = get_sizes(r, ctx);
  c.stages.downsample = r.get_u32();
  c.K = r.get_u32();
  c.dim = r.get_u32();
  c.tau = r.get_f32();
  c.seed = r.get_u64();
  c.audio_seed = r.get_u64();
  for (auto* v : {&c.num_classes, &c.patch, &c.audio_time, &c.audio_freq, &c.audio_channels, &c.mlp_ratio}) *v = r.get_u32();
  c.derivation.derive = r.get_u8() != 0;
  c.derivation.enhance = r.get_u8() != 0;
  const auto sub = r.get_u8();
  const auto scheme = r.get_u8();
  if (sub > 1 || scheme > 4) throw FormatError(ctx + ": invalid enum in config block");
  c.derivation.subcluster = static_cast<SubclusterMode>(sub);
  c.scheme = static_cast<EliminationScheme>(scheme);
  c.share_centers = r.get_u8() != 0;
  return c;
}

}  // namespace detail

template <class Real>
std::vector<std::uint8_t> serialize_checkpoint(Model<Real>& model) {
  io::Writer w;
  w.put_u32(kCheckpointVersion);
  detail::put_model_config(w, model.config);
  const auto params = model.parameters();
  w.put_u32(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.put_string(p->name);
    w.put_u32(static_cast<std::uint32_t>(p->shape.size()));
    for (auto d : p->shape) w.put_u32(static_cast<std::uint32_t>(d));
    w.put_reals_as_f32(std::span<const Real>(p->value.data));
  }
  return io::seal(kCheckpointMagic, w);
}

/// Reads a checkpoint into a freshly constructed model; every parameter of
/// the architecture must be present with a matching shape.
template <class Real>
Model<Real> deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& context = "DDCK1") {
  io::Reader r(io::unseal(kCheckpointMagic, bytes, context), context);
  if (const auto v = r.get_u32(); v != kCheckpointVersion) throw FormatError(context + ": unsupported version " + std::to_string(v));
  ModelConfig cfg = detail::get_model_config(r, context);
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    throw FormatError(context + ": invalid config block: " + e.what());
  }
  Model<Real> model(cfg);
  std::map<std::string, nn::Parameter<Real>*> by_name;
  for (auto* p : model.parameters()) by_name[p->name] = p;
  const auto count = r.get_u32();
  if (count != by_name.size())
    throw FormatError(context + ": tensor count " + std::to_string(count) + " does not match architecture (" +
                      std::to_string(by_name.size()) + ")");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.get_string();
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(context + ": unknown tensor '" + name + "'");
    auto& p = *it->second;
    const auto rank = r.get_u32();
    if (rank != p.shape.size()) throw FormatError(context + ": rank mismatch for '" + name + "'");
    for (auto d : p.shape)
      if (r.get_u32() != d) throw FormatError(context + ": shape mismatch for '" + name + "'");
    for (auto& v : p.value.data) v = static_cast<Real>(r.get_f32());
  }
  if (r.remaining() != 0) throw FormatError(context + ": trailing bytes");
  return model;
}

template <class Real>
void save_checkpoint(Model<Real>& model, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(model));
}

template <class Real>
Model<Real> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<Real>(io::read_file(path), path.filename().string());
}

}  // namespace ddeseg
