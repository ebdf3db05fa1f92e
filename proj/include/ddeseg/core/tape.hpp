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
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "ddeseg/core/matrix.hpp"
#include "ddeseg/core/parameter.hpp"

namespace ddeseg::nn {

template <class Real>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <class Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Real>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Matrix<Real>& value() const { return tape_->value(id_); }
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  Real scalar() const { return value().data[0]; }

 private:
  Tape<Real>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Single-threaded; one tape per forward computation.
template <class Real>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Var<Real> constant(Matrix<Real> value) { return push(std::move(value), {}, false, nullptr); }

  Var<Real> parameter(Parameter<Real>& p) { return push(p.value, {}, p.trainable, &p); }

  /// Records an op node. `backward(tape, self)` reads grad(self) and
  /// accumulates into grad(input) for each input with needs_grad(input).
  Var<Real> record(Matrix<Real> value, std::vector<std::size_t> inputs, Backward backward) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
    auto v = push(std::move(value), std::move(backward), needs, nullptr);
    nodes_.back().inputs = std::move(inputs);
    return v;
  }

  const Matrix<Real>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  Matrix<Real>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Matrix<Real>(n.value.rows, n.value.cols);
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1, runs the reverse sweep and adds leaf
  /// gradients into their Parameters.
  void backward(Var<Real> root) {
    require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
    grad(root.id()).data[0] = Real(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        auto& pg = n.param->grad.data;
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += nodes_[i].grad.data[j];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<Real> value;
    Matrix<Real> grad;
    Backward backward;
    std::vector<std::size_t> inputs;
    Parameter<Real>* param = nullptr;
    bool needs_grad = false;
  };

  Var<Real> push(Matrix<Real> value, Backward backward, bool needs, Parameter<Real>* param) {
    Node n;
    n.value = std::move(value);
    n.backward = std::move(backward);
    n.needs_grad = needs;
    n.param = param;
    nodes_.push_back(std::move(n));
    return Var<Real>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Helpers

namespace detail {

template <class Real, class F>
Var<Real> unary(Var<Real> a, Matrix<Real> out, F dfdx_times_grad) {
  auto* t = a.tape();
  const auto ia = a.id();
  return t->record(std::move(out), {ia}, [ia, dfdx_times_grad](Tape<Real>& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    const auto& g = tp.grad(self).data;
    const auto& x = tp.value(ia).data;
    const auto& y = tp.value(self).data;
    auto& ga = tp.grad(ia).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx_times_grad(x[i], y[i]);
  });
}

template <class Real>
void check_same(const Var<Real>& a, const Var<Real>& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " + shape_str(b.rows(), b.cols()));
}

// C[m x n] += A[m x k] * B[k x n]
template <class Real>
void gemm_nn(const Real* A, const Real* B, Real* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* c = C + i * n;
    const Real* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[p];
      if (av == Real(0)) continue;
      const Real* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <class Real>
void gemm_nt(const Real* A, const Real* B, Real* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* a = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* b = B + j * k;
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
      C[i * n + j] += s;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <class Real>
void gemm_tn(const Real* A, const Real* B, Real* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const Real* a = A + p * m;
    const Real* b = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Real av = a[i];
      if (av == Real(0)) continue;
      Real* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class Real>
Var<Real> operator+(Var<Real> a, Var<Real> b) {
  detail::check_same(a, b, "add");
  Matrix<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, std::size_t self) {
    for (auto in : {ia, ib}) {
      if (!t.needs_grad(in)) continue;
      auto& g = t.grad(in).data;
      const auto& gs = t.grad(self).data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[i];
    }
  });
}

template <class Real>
Var<Real> operator-(Var<Real> a, Var<Real> b) {
  detail::check_same(a, b, "sub");
  Matrix<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self).data;
    if (t.needs_grad(ia)) {
      auto& g = t.grad(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[i];
    }
    if (t.needs_grad(ib)) {
      auto& g = t.grad(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gs[i];
    }
  });
}

/// Elementwise (Hadamard) product.
template <class Real>
Var<Real> hadamard(Var<Real> a, Var<Real> b) {
  detail::check_same(a, b, "hadamard");
  Matrix<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self).data;
    if (t.needs_grad(ia)) {
      auto& g = t.grad(ia).data;
      const auto& bv = t.value(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      auto& g = t.grad(ib).data;
      const auto& av = t.value(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[i] * av[i];
    }
  });
}

template <class Real>
Var<Real> scale(Var<Real> a, Real s) {
  Matrix<Real> out = a.value();
  for (auto& v : out.data) v *= s;
  return detail::unary(a, std::move(out), [s](Real, Real) { return s; });
}

template <class Real>
Var<Real> add_scalar(Var<Real> a, Real s) {
  Matrix<Real> out = a.value();
  for (auto& v : out.data) v += s;
  return detail::unary(a, std::move(out), [](Real, Real) { return Real(1); });
}

template <class Real>
Var<Real> reciprocal(Var<Real> a) {
  Matrix<Real> out = a.value();
  for (auto& v : out.data) v = Real(1) / v;
  return detail::unary(a, std::move(out), [](Real, Real y) { return -y * y; });
}

template <class Real>
Var<Real> log(Var<Real> a) {
  Matrix<Real> out = a.value();
  for (auto& v : out.data) v = std::log(v);
  return detail::unary(a, std::move(out), [](Real x, Real) { return Real(1) / x; });
}

/// Clamp to [lo, hi]; zero gradient where clamped.
template <class Real>
Var<Real> clamp(Var<Real> a, Real lo, Real hi) {
  Matrix<Real> out = a.value();
  for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
  return detail::unary(a, std::move(out), [lo, hi](Real x, Real) { return (x < lo || x > hi) ? Real(0) : Real(1); });
}

// ---------------------------------------------------------------------------
// Activations

/// Standard normal CDF via erfc, accurate in the negative tail.
template <class Real>
Real normal_cdf(Real x) {
  return Real(0.5) * std::erfc(-x / std::numbers::sqrt2_v<Real>);
}

template <class Real>
Real gelu_scalar(Real x) {
  return x * normal_cdf(x);
}

template <class Real>
Var<Real> gelu(Var<Real> a) {
  Matrix<Real> out = a.value();
  for (auto& v : out.data) v = gelu_scalar(v);
  return detail::unary(a, std::move(out), [](Real x, Real) {
    const Real cdf = normal_cdf(x);
    const Real pdf = std::exp(Real(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Real> / std::numbers::sqrt2_v<Real>;
    return cdf + x * pdf;
  });
}

template <class Real>
Var<Real> tanh(Var<Real> a) {
  Matrix<Real> out = a.value();
  for (auto& v : out.data) v = std::tanh(v);
  return detail::unary(a, std::move(out), [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Real sigmoid_scalar(Real x) {
  return x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
}

template <class Real>
Var<Real> sigmoid(Var<Real> a) {
  Matrix<Real> out = a.value();
  for (auto& v : out.data) v = sigmoid_scalar(v);
  return detail::unary(a, std::move(out), [](Real, Real y) { return y * (Real(1) - y); });
}

/// Numerically stable softmax of a span, in place.
template <class Real>
void softmax_inplace(std::span<Real> v) {
  if (v.empty()) return;
  Real mx = v[0];
  for (Real x : v) mx = std::max(mx, x);
  Real sum = 0;
  for (auto& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : v) x /= sum;
}

/// Softmax along each row.
template <class Real>
Var<Real> softmax_rows(Var<Real> a) {
  Matrix<Real> out = a.value();
  for (std::size_t r = 0; r < out.rows; ++r) softmax_inplace(out.row(r));
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto& y = t.value(self);
    const auto& gs = t.grad(self);
    auto& g = t.grad(ia);
    for (std::size_t r = 0; r < y.rows; ++r) {
      Real dot = 0;
      for (std::size_t c = 0; c < y.cols; ++c) dot += gs(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols; ++c) g(r, c) += y(r, c) * (gs(r, c) - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch " + shape_str(a.rows(), a.cols()) + " * " +
                                    shape_str(b.rows(), b.cols()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix<Real> out(m, n);
  detail::gemm_nn(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self).data;
    if (t.needs_grad(ia)) detail::gemm_nt(gs.data(), t.value(ib).data.data(), t.grad(ia).data.data(), m, n, k);
    if (t.needs_grad(ib)) detail::gemm_tn(t.value(ia).data.data(), gs.data(), t.grad(ib).data.data(), k, m, n);
  });
}

/// a * b^T
template <class Real>
Var<Real> matmul_nt(Var<Real> a, Var<Real> b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch " + shape_str(a.rows(), a.cols()) + " * (" +
                                    shape_str(b.rows(), b.cols()) + ")^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Matrix<Real> out(m, n);
  detail::gemm_nt(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self).data;
    // dA = G * B ; dB = G^T * A
    if (t.needs_grad(ia)) detail::gemm_nn(gs.data(), t.value(ib).data.data(), t.grad(ia).data.data(), m, n, k);
    if (t.needs_grad(ib)) detail::gemm_tn(gs.data(), t.value(ia).data.data(), t.grad(ib).data.data(), n, m, k);
  });
}

/// a^T * b
template <class Real>
Var<Real> matmul_tn(Var<Real> a, Var<Real> b) {
  require(a.rows() == b.rows(), "matmul_tn: inner dimension mismatch (" + shape_str(a.rows(), a.cols()) + ")^T * " +
                                    shape_str(b.rows(), b.cols()));
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  Matrix<Real> out(m, n);
  detail::gemm_tn(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self).data;
    // out = A^T B ; dA = B * G^T (k x m) ; dB = A * G (k x n)
    if (t.needs_grad(ia)) detail::gemm_nt(t.value(ib).data.data(), gs.data(), t.grad(ia).data.data(), k, n, m);
    if (t.needs_grad(ib)) detail::gemm_nn(t.value(ia).data.data(), gs.data(), t.grad(ib).data.data(), k, m, n);
  });
}

template <class Real>
Var<Real> transpose(Var<Real> a) {
  const auto& v = a.value();
  Matrix<Real> out(v.cols, v.rows);
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t c = 0; c < v.cols; ++c) out(c, r) = v(r, c);
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto& gs = t.grad(self);
    auto& g = t.grad(ia);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) g(r, c) += gs(c, r);
  });
}

// ---------------------------------------------------------------------------
// Broadcasting and reductions

/// a[m x n] + row[1 x n] broadcast over rows.
template <class Real>
Var<Real> add_row(Var<Real> a, Var<Real> row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                                                         shape_str(row.rows(), row.cols()));
  Matrix<Real> out = a.value();
  const auto& rv = row.value().data;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += rv[c];
  const auto ia = a.id(), ir = row.id();
  return a.tape()->record(std::move(out), {ia, ir}, [ia, ir](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self);
    if (t.needs_grad(ia)) {
      auto& g = t.grad(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs.data[i];
    }
    if (t.needs_grad(ir)) {
      auto& g = t.grad(ir).data;
      for (std::size_t r = 0; r < gs.rows; ++r)
        for (std::size_t c = 0; c < gs.cols; ++c) g[c] += gs(r, c);
    }
  });
}

/// a[m x n] scaled rowwise by s[m x 1].
template <class Real>
Var<Real> mul_col(Var<Real> a, Var<Real> s) {
  require(s.cols() == 1 && s.rows() == a.rows(), "mul_col: expected " + std::to_string(a.rows()) + "x1 scale, got " +
                                                     shape_str(s.rows(), s.cols()));
  Matrix<Real> out = a.value();
  const auto& sv = s.value().data;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) *= sv[r];
  const auto ia = a.id(), is = s.id();
  return a.tape()->record(std::move(out), {ia, is}, [ia, is](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self);
    if (t.needs_grad(ia)) {
      auto& g = t.grad(ia);
      const auto& sv2 = t.value(is).data;
      for (std::size_t r = 0; r < gs.rows; ++r)
        for (std::size_t c = 0; c < gs.cols; ++c) g(r, c) += gs(r, c) * sv2[r];
    }
    if (t.needs_grad(is)) {
      auto& g = t.grad(is).data;
      const auto& av = t.value(ia);
      for (std::size_t r = 0; r < gs.rows; ++r) {
        Real acc = 0;
        for (std::size_t c = 0; c < gs.cols; ++c) acc += gs(r, c) * av(r, c);
        g[r] += acc;
      }
    }
  });
}

/// row[1 x n] repeated m times.
template <class Real>
Var<Real> broadcast_rows(Var<Real> row, std::size_t m) {
  require(row.rows() == 1, "broadcast_rows: expected a row vector");
  Matrix<Real> out(m, row.cols());
  for (std::size_t r = 0; r < m; ++r) std::copy(row.value().data.begin(), row.value().data.end(), out.row(r).begin());
  const auto ir = row.id();
  return row.tape()->record(std::move(out), {ir}, [ir](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ir)) return;
    const auto& gs = t.grad(self);
    auto& g = t.grad(ir).data;
    for (std::size_t r = 0; r < gs.rows; ++r)
      for (std::size_t c = 0; c < gs.cols; ++c) g[c] += gs(r, c);
  });
}

/// Column sums: [m x n] -> [1 x n].
template <class Real>
Var<Real> sum_rows(Var<Real> a) {
  const auto& v = a.value();
  Matrix<Real> out(1, v.cols);
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t c = 0; c < v.cols; ++c) out.data[c] += v(r, c);
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto& gs = t.grad(self).data;
    auto& g = t.grad(ia);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) g(r, c) += gs[c];
  });
}

/// Row sums: [m x n] -> [m x 1].
template <class Real>
Var<Real> sum_cols(Var<Real> a) {
  const auto& v = a.value();
  Matrix<Real> out(v.rows, 1);
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t c = 0; c < v.cols; ++c) out.data[r] += v(r, c);
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto& gs = t.grad(self).data;
    auto& g = t.grad(ia);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) g(r, c) += gs[r];
  });
}

template <class Real>
Var<Real> sum_all(Var<Real> a) {
  Real s = 0;
  for (Real v : a.value().data) s += v;
  const auto ia = a.id();
  return a.tape()->record(Matrix<Real>(1, 1, s), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Real gs = t.grad(self).data[0];
    for (auto& g : t.grad(ia).data) g += gs;
  });
}

template <class Real>
Var<Real> mean_all(Var<Real> a) {
  return scale(sum_all(a), Real(1) / static_cast<Real>(a.value().size()));
}

/// sum_ij a_ij * w_ij with constant weights; used to reduce tensors to
/// scalars for gradient checks.
template <class Real>
Var<Real> weighted_sum(Var<Real> a, const Matrix<Real>& w) {
  require(same_shape(a.value(), w), "weighted_sum: shape mismatch");
  Real s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value().data[i] * w.data[i];
  const auto ia = a.id();
  return a.tape()->record(Matrix<Real>(1, 1, s), {ia}, [ia, w](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Real gs = t.grad(self).data[0];
    auto& g = t.grad(ia).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs * w.data[i];
  });
}

// ---------------------------------------------------------------------------
// Slicing and stacking

/// Same row-major data viewed as rows x cols.
template <class Real>
Var<Real> reshape(Var<Real> a, std::size_t rows, std::size_t cols) {
  require(rows * cols == a.value().size(), "reshape: element count mismatch");
  Matrix<Real> out = a.value();
  out.rows = rows;
  out.cols = cols;
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto& gs = t.grad(self).data;
    auto& g = t.grad(ia).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[i];
  });
}

template <class Real>
Var<Real> slice_cols(Var<Real> a, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= a.cols(), "slice_cols: range out of bounds");
  const auto& v = a.value();
  const std::size_t w = end - begin;
  Matrix<Real> out(v.rows, w);
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = v(r, begin + c);
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia, begin, w](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto& gs = t.grad(self);
    auto& g = t.grad(ia);
    for (std::size_t r = 0; r < gs.rows; ++r)
      for (std::size_t c = 0; c < w; ++c) g(r, begin + c) += gs(r, c);
  });
}

template <class Real>
Var<Real> slice_rows(Var<Real> a, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= a.rows(), "slice_rows: range out of bounds");
  const auto& v = a.value();
  Matrix<Real> out(end - begin, v.cols);
  std::copy(v.data.begin() + begin * v.cols, v.data.begin() + end * v.cols, out.data.begin());
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia, begin](Tape<Real>& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const auto& gs = t.grad(self).data;
    auto& g = t.grad(ia);
    const std::size_t off = begin * g.cols;
    for (std::size_t i = 0; i < gs.size(); ++i) g.data[off + i] += gs[i];
  });
}

template <class Real>
Var<Real> concat_cols(const std::vector<Var<Real>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix<Real> out(rows, cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, off + c) = p.value()(r, c);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  return parts[0].tape()->record(std::move(out), ids, [ids, offsets](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      auto& g = t.grad(ids[k]);
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) g(r, c) += gs(r, offsets[k] + c);
    }
  });
}

template <class Real>
Var<Real> concat_rows(const std::vector<Var<Real>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix<Real> out(rows, cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off * cols);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  return parts[0].tape()->record(std::move(out), ids, [ids, offsets, cols](Tape<Real>& t, std::size_t self) {
    const auto& gs = t.grad(self).data;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      auto& g = t.grad(ids[k]).data;
      const std::size_t base = offsets[k] * cols;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gs[base + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and losses

/// Per-row layer normalization with affine gamma/beta (1 x n each).
template <class Real>
Var<Real> layer_norm(Var<Real> a, Var<Real> gamma, Var<Real> beta, Real eps = Real(1e-5)) {
  const auto& x = a.value();
  const std::size_t n = x.cols;
  require(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n, "layer_norm: affine shape mismatch");
  Matrix<Real> out(x.rows, n);
  Matrix<Real> xhat(x.rows, n);
  std::vector<Real> inv_std(x.rows);
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (std::size_t r = 0; r < x.rows; ++r) {
    Real mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += x(r, c);
    mean /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<Real>(n);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (x(r, c) - mean) * inv_std[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  const auto ia = a.id(), ig = gamma.id(), ib = beta.id();
  return a.tape()->record(std::move(out), {ia, ig, ib},
                          [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Real>& t, std::size_t self) {
                            const auto& gs = t.grad(self);
                            const std::size_t rows = gs.rows, cols = gs.cols;
                            if (t.needs_grad(ig) || t.needs_grad(ib)) {
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t c = 0; c < cols; ++c) {
                                  if (t.needs_grad(ig)) t.grad(ig).data[c] += gs(r, c) * xhat(r, c);
                                  if (t.needs_grad(ib)) t.grad(ib).data[c] += gs(r, c);
                                }
                            }
                            if (!t.needs_grad(ia)) return;
                            const auto& gv2 = t.value(ig).data;
                            auto& g = t.grad(ia);
                            for (std::size_t r = 0; r < rows; ++r) {
                              Real m1 = 0, m2 = 0;
                              for (std::size_t c = 0; c < cols; ++c) {
                                const Real gh = gs(r, c) * gv2[c];
                                m1 += gh;
                                m2 += gh * xhat(r, c);
                              }
                              m1 /= static_cast<Real>(cols);
                              m2 /= static_cast<Real>(cols);
                              for (std::size_t c = 0; c < cols; ++c) {
                                const Real gh = gs(r, c) * gv2[c];
                                g(r, c) += inv_std[r] * (gh - m1 - xhat(r, c) * m2);
                              }
                            }
                          });
}

/// Mean softmax cross-entropy of each row of `logits` against `targets`.
template <class Real>
Var<Real> cross_entropy_rows(Var<Real> logits, const std::vector<std::size_t>& targets) {
  const auto& z = logits.value();
  require(targets.size() == z.rows, "cross_entropy_rows: one target per row required");
  Matrix<Real> prob = z;
  Real loss = 0;
  for (std::size_t r = 0; r < z.rows; ++r) {
    require(targets[r] < z.cols, "cross_entropy_rows: target out of range");
    softmax_inplace(prob.row(r));
    loss -= std::log(std::max(prob(r, targets[r]), std::numeric_limits<Real>::min()));
  }
  const Real inv_n = Real(1) / static_cast<Real>(z.rows);
  const auto il = logits.id();
  return logits.tape()->record(Matrix<Real>(1, 1, loss * inv_n), {il},
                               [il, prob = std::move(prob), targets, inv_n](Tape<Real>& t, std::size_t self) {
                                 if (!t.needs_grad(il)) return;
                                 const Real gs = t.grad(self).data[0] * inv_n;
                                 auto& g = t.grad(il);
                                 for (std::size_t r = 0; r < prob.rows; ++r)
                                   for (std::size_t c = 0; c < prob.cols; ++c)
                                     g(r, c) += gs * (prob(r, c) - (c == targets[r] ? Real(1) : Real(0)));
                               });
}

}  // namespace ddeseg::nn
