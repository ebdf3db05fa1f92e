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

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddeseg/core/error.hpp"

namespace ddeseg::io {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

using Magic = std::array<char, 8>;

constexpr Magic make_magic(std::string_view tag) {
  Magic m{};
  for (std::size_t i = 0; i < tag.size() && i < m.size(); ++i) m[i] = tag[i];
  return m;
}

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large payloads.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

/// Append-only little-endian byte buffer.
class Writer {
 public:
  void put_bytes(const void* src, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(src);
    buf_.insert(buf_.end(), p, p + n);
  }
  void put_u8(std::uint8_t v) { buf_.push_back(v); }
  void put_u32(std::uint32_t v) { put_bytes(&v, 4); }
  void put_u64(std::uint64_t v) { put_bytes(&v, 8); }
  void put_f32(float v) { put_bytes(&v, 4); }
  void put_f32s(std::span<const float> v) { put_bytes(v.data(), v.size() * 4); }
  template <class Real>
  void put_reals_as_f32(std::span<const Real> v) {
    for (Real x : v) put_f32(static_cast<float>(x));
  }
  void put_string(std::string_view s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader; every overrun raises FormatError("truncated ...").
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string context) : bytes_(bytes), context_(std::move(context)) {}

  void get_bytes(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError(context_ + ": truncated payload");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t get_u8() {
    std::uint8_t v;
    get_bytes(&v, 1);
    return v;
  }
  std::uint32_t get_u32() {
    std::uint32_t v;
    get_bytes(&v, 4);
    return v;
  }
  std::uint64_t get_u64() {
    std::uint64_t v;
    get_bytes(&v, 8);
    return v;
  }
  float get_f32() {
    float v;
    get_bytes(&v, 4);
    return v;
  }
  void get_f32s(std::span<float> out) { get_bytes(out.data(), out.size() * 4); }
  std::string get_string(std::size_t max_len = 4096) {
    const auto n = get_u32();
    if (n > max_len) throw FormatError(context_ + ": string length out of range");
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

/// magic | payload | u32 CRC32(payload)
inline std::vector<std::uint8_t> seal(const Magic& magic, const Writer& payload) {
  const auto& body = payload.bytes();
  const std::uint32_t crc = crc32(body);
  std::vector<std::uint8_t> out(magic.size() + body.size() + 4);
  std::copy(magic.begin(), magic.end(), out.begin());
  std::copy(body.begin(), body.end(), out.begin() + magic.size());
  std::memcpy(out.data() + magic.size() + body.size(), &crc, 4);
  return out;
}

/// Validates magic and CRC; returns the payload span inside `file`.
inline std::span<const std::uint8_t> unseal(const Magic& magic, std::span<const std::uint8_t> file,
                                            const std::string& context) {
  if (file.size() < magic.size()) throw FormatError(context + ": truncated payload");
  if (!std::equal(magic.begin(), magic.end(), file.begin())) throw FormatError(context + ": bad magic");
  if (file.size() < magic.size() + 4) throw FormatError(context + ": truncated payload");
  const auto payload = file.subspan(magic.size(), file.size() - magic.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, file.data() + file.size() - 4, 4);
  if (crc32(payload) != stored) throw FormatError(context + ": CRC mismatch");
  return payload;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace ddeseg::io
