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

#include <string>
#include <vector>

#include "ddeseg/core/matrix.hpp"

namespace ddeseg::nn {

/// Learnable tensor. `shape` is the logical shape written to checkpoints;
/// values/gradient are its row-major matrix view.
template <class Real>
struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  Matrix<Real> value;
  Matrix<Real> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::size_t rows, std::size_t cols)
      : name(std::move(n)), shape(rows == 1 ? std::vector<std::size_t>{cols} : std::vector<std::size_t>{rows, cols}),
        value(rows, cols), grad(rows, cols) {}

  void zero_grad() { grad.fill(Real(0)); }
  std::size_t size() const { return value.size(); }
};

}  // namespace ddeseg::nn
