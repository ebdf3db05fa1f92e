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
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ddeseg/core/binary_io.hpp"
#include "ddeseg/core/matrix.hpp"
#include "ddeseg/kmeans.hpp"

namespace ddeseg {

struct ClassMemory {
  std::uint32_t class_id = 0;
  std::uint32_t sample_count = 0;
  std::vector<float> global_centroid;              // d
  Matrix<float> sub_centroids;                     // k x d
  std::vector<Matrix<float>> representatives;      // k entries, each (<= m) x d

  bool operator==(const ClassMemory&) const = default;
};

struct MemoryBuildConfig {
  std::size_t k = 3;
  std::size_t m = 4;
  std::size_t restarts = 10;
  std::size_t max_iters = 100;
  std::uint64_t seed = 0;
};

/// Frozen per-class audio memory. Immutable after build; safe to share
/// read-only across threads.
struct SemanticMemory {
  std::size_t dim = 0;
  std::size_t k = 0;
  std::size_t m = 0;
  std::vector<ClassMemory> classes;
  MemoryBuildConfig build_config;  // restarts/seed are not persisted
  std::vector<double> inertia;     // per-class k-means inertia (build only)
  std::vector<std::string> warnings;

  std::size_t num_classes() const { return classes.size(); }

  const ClassMemory& at(std::uint32_t class_id) const {
    require(class_id < classes.size(), "memory: class " + std::to_string(class_id) + " not present");
    return classes[class_id];
  }

  /// Equality of the persisted content.
  bool same_content(const SemanticMemory& o) const {
    return dim == o.dim && k == o.k && m == o.m && classes == o.classes;
  }
};

namespace detail {

inline Matrix<double> to_double(const Matrix<float>& m) { return m.cast<double>(); }

}  // namespace detail

/// Builds the memory: per class the global mean, k-means sub-centroids and
/// the m members nearest (Euclidean) to each sub-centroid, ties broken by
/// lowest input index.
inline SemanticMemory build_memory(const std::map<std::uint32_t, Matrix<float>>& features_by_class,
                                   const MemoryBuildConfig& cfg) {
  require(!features_by_class.empty(), "build_memory: no classes");
  require(cfg.k >= 1 && cfg.m >= 1, "build_memory: k and m must be >= 1");
  SemanticMemory mem;
  mem.k = cfg.k;
  mem.m = cfg.m;
  mem.build_config = cfg;
  mem.dim = features_by_class.begin()->second.cols;
  std::uint32_t expected_id = 0;
  for (const auto& [cid, feats] : features_by_class) {
    require(cid == expected_id, "build_memory: class ids must be contiguous from 0 (missing " + std::to_string(expected_id) + ")");
    ++expected_id;
    require(feats.cols == mem.dim, "build_memory: class " + std::to_string(cid) + " has dimension " +
                                       std::to_string(feats.cols) + ", expected " + std::to_string(mem.dim));
    require(feats.rows >= cfg.k, "build_memory: class " + std::to_string(cid) + " has n_c = " + std::to_string(feats.rows) +
                                     " < k = " + std::to_string(cfg.k));
    const auto pts = detail::to_double(feats);
    const std::size_t n = pts.rows, d = pts.cols;

    ClassMemory cm;
    cm.class_id = cid;
    cm.sample_count = static_cast<std::uint32_t>(n);
    cm.global_centroid.assign(d, 0.0f);
    for (std::size_t t = 0; t < d; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += pts(i, t);
      cm.global_centroid[t] = static_cast<float>(s / static_cast<double>(n));
    }

    const auto km = kmeans(pts, cfg.k, cfg.restarts, cfg.max_iters, Rng::derive_seed(cfg.seed, cid));
    mem.inertia.push_back(km.inertia);
    cm.sub_centroids = km.centroids.cast<float>();
    const auto centroid = cm.sub_centroids.cast<double>();
    for (std::size_t j = 0; j < cfg.k; ++j) {
      std::vector<std::pair<double, std::size_t>> members;
      for (std::size_t i = 0; i < n; ++i)
        if (km.assignments[i] == j) members.emplace_back(std::sqrt(detail::squared_distance(pts.row(i), centroid.row(j))), i);
      std::stable_sort(members.begin(), members.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      const std::size_t take = std::min(cfg.m, members.size());
      if (take < cfg.m)
        mem.warnings.push_back("class " + std::to_string(cid) + " sub-cluster " + std::to_string(j) + ": only " +
                               std::to_string(take) + " members, representatives truncated from m = " + std::to_string(cfg.m));
      Matrix<float> reps(take, d);
      for (std::size_t r = 0; r < take; ++r) std::copy(feats.row(members[r].second).begin(), feats.row(members[r].second).end(), reps.row(r).begin());
      cm.representatives.push_back(std::move(reps));
    }
    mem.classes.push_back(std::move(cm));
  }
  return mem;
}

struct RetrievedClass {
  std::uint32_t class_id = 0;
  double distance = 0.0;
};

/// K classes whose global centroid is nearest to `feature`, ascending by
/// Euclidean distance, ties to the lower class id.
template <class Real>
std::vector<RetrievedClass> nearest_classes(std::span<const Real> feature, const SemanticMemory& memory, std::size_t K) {
  require(K >= 1, "nearest_classes: K must be >= 1");
  require(K <= memory.num_classes(), "nearest_classes: K = " + std::to_string(K) + " exceeds the " +
                                         std::to_string(memory.num_classes()) + " classes in memory");
  require(feature.size() == memory.dim, "nearest_classes: feature dimension mismatch");
  std::vector<RetrievedClass> all;
  for (const auto& cm : memory.classes) {
    double s = 0.0;
    for (std::size_t t = 0; t < memory.dim; ++t) {
      const double diff = static_cast<double>(feature[t]) - static_cast<double>(cm.global_centroid[t]);
      s += diff * diff;
    }
    all.push_back({cm.class_id, std::sqrt(s)});
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.distance < b.distance; });
  all.resize(K);
  return all;
}

// ---------------------------------------------------------------------------
// DDEM1 container:
//   "DDEM1\0\0\0" | u32 version=1, d, C, k, m |
//   per class: u32 class_id, u32 n_c, f32 mu[d], f32 mu_j[k*d], f32 x_rep[k*m*d] |
//   u32 CRC32(payload)
// Sub-clusters with fewer than m representatives are padded with NaN rows.

inline constexpr io::Magic kMemoryMagic = io::make_magic("DDEM1");
inline constexpr std::uint32_t kMemoryVersion = 1;

inline std::vector<std::uint8_t> serialize_memory(const SemanticMemory& mem) {
  io::Writer w;
  w.put_u32(kMemoryVersion);
  w.put_u32(static_cast<std::uint32_t>(mem.dim));
  w.put_u32(static_cast<std::uint32_t>(mem.num_classes()));
  w.put_u32(static_cast<std::uint32_t>(mem.k));
  w.put_u32(static_cast<std::uint32_t>(mem.m));
  const float nan = std::numeric_limits<float>::quiet_NaN();
  for (const auto& cm : mem.classes) {
    w.put_u32(cm.class_id);
    w.put_u32(cm.sample_count);
    w.put_f32s(cm.global_centroid);
    w.put_f32s(cm.sub_centroids.data);
    for (const auto& reps : cm.representatives) {
      w.put_f32s(reps.data);
      for (std::size_t r = reps.rows; r < mem.m; ++r)
        for (std::size_t t = 0; t < mem.dim; ++t) w.put_f32(nan);
    }
  }
  return io::seal(kMemoryMagic, w);
}

inline SemanticMemory deserialize_memory(std::span<const std::uint8_t> bytes, std::optional<std::size_t> expected_dim = {},
                                         const std::string& context = "DDEM1") {
  io::Reader r(io::unseal(kMemoryMagic, bytes, context), context);
  if (const auto v = r.get_u32(); v != kMemoryVersion) throw FormatError(context + ": unsupported version " + std::to_string(v));
  SemanticMemory mem;
  mem.dim = r.get_u32();
  const std::size_t C = r.get_u32();
  mem.k = r.get_u32();
  mem.m = r.get_u32();
  if (expected_dim && *expected_dim != mem.dim)
    throw FormatError(context + ": dimension mismatch: file d=" + std::to_string(mem.dim) + ", expected d=" +
                      std::to_string(*expected_dim));
  if (mem.dim == 0 || mem.k == 0 || mem.m == 0 || C == 0) throw FormatError(context + ": empty header field");
  const std::size_t per_class = 8 + 4 * (mem.dim + mem.k * mem.dim + mem.k * mem.m * mem.dim);
  if (r.remaining() != per_class * C) throw FormatError(context + ": truncated payload");
  mem.build_config = {mem.k, mem.m, 0, 0, 0};
  for (std::size_t c = 0; c < C; ++c) {
    ClassMemory cm;
    cm.class_id = r.get_u32();
    if (cm.class_id != c) throw FormatError(context + ": class ids not contiguous");
    cm.sample_count = r.get_u32();
    cm.global_centroid.resize(mem.dim);
    r.get_f32s(cm.global_centroid);
    cm.sub_centroids = Matrix<float>(mem.k, mem.dim);
    r.get_f32s(cm.sub_centroids.data);
    for (std::size_t j = 0; j < mem.k; ++j) {
      Matrix<float> reps(mem.m, mem.dim);
      r.get_f32s(reps.data);
      std::size_t valid = mem.m;
      while (valid > 0 && std::isnan(reps(valid - 1, 0))) --valid;
      reps.data.resize(valid * mem.dim);
      reps.rows = valid;
      cm.representatives.push_back(std::move(reps));
    }
    mem.classes.push_back(std::move(cm));
  }
  return mem;
}

inline void save_memory(const SemanticMemory& mem, const std::filesystem::path& path) {
  io::write_file(path, serialize_memory(mem));
}

inline SemanticMemory load_memory(const std::filesystem::path& path, std::optional<std::size_t> expected_dim = {}) {
  const auto bytes = io::read_file(path);
  return deserialize_memory(bytes, expected_dim, path.filename().string());
}

}  // namespace ddeseg
