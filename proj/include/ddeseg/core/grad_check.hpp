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
#include <sstream>
#include <string>
#include <vector>

#include "ddeseg/core/rng.hpp"
#include "ddeseg/core/tape.hpp"

namespace ddeseg::nn {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Entries whose |analytic - numeric| is below this are treated as exact.
  double abs_floor = 1e-7;
};

struct ParameterGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  bool passed = false;
  bool aborted = false;
  std::string diagnostic;
  std::vector<ParameterGradError> parameters;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : parameters) m = std::max(m, p.max_rel_error);
    return m;
  }

  std::string summary() const {
    std::ostringstream os;
    if (aborted) {
      os << "aborted: " << diagnostic;
      return os.str();
    }
    os << (passed ? "pass" : "FAIL") << " max_rel_error=" << max_rel_error();
    for (const auto& p : parameters)
      if (p.max_rel_error > 0)
        os << "\n  " << p.name << " rel=" << p.max_rel_error << " @" << p.worst_index << " analytic=" << p.analytic
           << " numeric=" << p.numeric;
    return os.str();
  }
};

inline double relative_gradient_error(double analytic, double numeric, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff < abs_floor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

/// Central finite-difference check of d forward / d params.
///
/// `forward(tape)` must build the computation on a fresh tape and return a
/// 1x1 Var. Inputs whose gradient should be checked are passed as
/// Parameters like any weight.
template <class Forward>
GradCheckReport grad_check(Forward&& forward, const std::vector<Parameter<double>*>& params, const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  auto evaluate = [&]() {
    Tape<double> tape;
    return forward(tape).scalar();
  };

  std::vector<bool> trainable;
  for (auto* p : params) {
    trainable.push_back(p->trainable);
    p->trainable = true;
    p->zero_grad();
  }
  struct Restore {
    const std::vector<Parameter<double>*>& ps;
    const std::vector<bool>& flags;
    ~Restore() {
      for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->trainable = flags[i];
    }
  } restore{params, trainable};
  {
    Tape<double> tape;
    auto out = forward(tape);
    if (!std::isfinite(out.scalar())) {
      report.aborted = true;
      report.diagnostic = "non-finite forward value " + std::to_string(out.scalar());
      return report;
    }
    tape.backward(out);
  }

  report.passed = true;
  for (auto* p : params) {
    ParameterGradError err;
    err.name = p->name;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + opt.epsilon;
      const double up = evaluate();
      p->value.data[i] = orig - opt.epsilon;
      const double down = evaluate();
      p->value.data[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.aborted = true;
        report.passed = false;
        report.diagnostic = "non-finite forward value while perturbing " + p->name + "[" + std::to_string(i) + "]";
        return report;
      }
      const double numeric = (up - down) / (2.0 * opt.epsilon);
      const double analytic = p->grad.data[i];
      const double rel = relative_gradient_error(analytic, numeric, opt.abs_floor);
      if (rel > err.max_rel_error) {
        err.max_rel_error = rel;
        err.worst_index = i;
        err.analytic = analytic;
        err.numeric = numeric;
      }
    }
    if (!(err.max_rel_error < opt.tolerance)) report.passed = false;
    report.parameters.push_back(err);
  }
  for (auto* p : params) p->zero_grad();
  return report;
}

/// Fixed random weights for reducing a tensor output to a scalar.
inline Matrix<double> random_weights(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix<double> w(rows, cols);
  for (auto& v : w.data) v = rng.uniform(-1.0, 1.0);
  return w;
}

}  // namespace ddeseg::nn
