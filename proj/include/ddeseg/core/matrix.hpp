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
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ddeseg/core/error.hpp"

namespace ddeseg {

/// Dense row-major matrix. Spatial maps are stored as (H*W) x C with
/// row index y * W + x.
template <class Real>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, Real fill = Real(0)) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::initializer_list<Real> values) : rows(r), cols(c), data(values) {
    require(data.size() == r * c, "Matrix: initializer size mismatch");
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const Real& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<Real> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const Real> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  void fill(Real v) { std::fill(data.begin(), data.end(), v); }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows, cols);
    std::transform(data.begin(), data.end(), out.data.begin(), [](Real v) { return static_cast<U>(v); });
    return out;
  }

  static Matrix row_vector(std::span<const Real> values) {
    Matrix m(1, values.size());
    std::copy(values.begin(), values.end(), m.data.begin());
    return m;
  }

  bool operator==(const Matrix& other) const = default;
};

template <class Real>
bool same_shape(const Matrix<Real>& a, const Matrix<Real>& b) {
  return a.rows == b.rows && a.cols == b.cols;
}

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace ddeseg
