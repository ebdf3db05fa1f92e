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
#include <limits>
#include <vector>

#include "ddeseg/core/matrix.hpp"
#include "ddeseg/core/rng.hpp"

namespace ddeseg {

struct KMeansResult {
  Matrix<double> centroids;               // k x d
  std::vector<std::size_t> assignments;   // n
  double inertia = 0.0;                   // sum of squared distances
  std::vector<double> history;            // inertia after each Lloyd iteration of the winning run
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline Matrix<double> kmeans_pp_seed(const Matrix<double>& pts, std::size_t k, Rng& rng) {
  const std::size_t n = pts.rows;
  Matrix<double> c(k, pts.cols);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(n);
  for (std::size_t j = 0; j < k; ++j) {
    std::copy(pts.row(pick).begin(), pts.row(pick).end(), c.row(j).begin());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(pts.row(i), c.row(j)));
      total += d2[i];
    }
    if (j + 1 == k) break;
    if (total <= 0.0) {
      pick = rng.below(n);
      continue;
    }
    double r = rng.uniform() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      r -= d2[i];
      if (r < 0.0) {
        pick = i;
        break;
      }
    }
  }
  return c;
}

inline KMeansResult lloyd(const Matrix<double>& pts, Matrix<double> c, std::size_t max_iters) {
  const std::size_t n = pts.rows, k = c.rows, d = pts.cols;
  KMeansResult res;
  res.assignments.assign(n, k);  // k == unassigned
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    // Assignment: nearest centroid; ties keep the current cluster, else lowest index.
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double dj = squared_distance(pts.row(i), c.row(j));
        if (dj < best_d) {
          best_d = dj;
          best = j;
        }
      }
      const std::size_t cur = res.assignments[i];
      if (cur < k && squared_distance(pts.row(i), c.row(cur)) <= best_d) best = cur;
      if (best != cur) {
        res.assignments[i] = best;
        changed = true;
      }
    }
    // Empty clusters take the point farthest from its centroid among
    // clusters that can spare one.
    std::vector<std::size_t> counts(k, 0);
    for (auto a : res.assignments) ++counts[a];
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] > 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t a = res.assignments[i];
        if (counts[a] < 2) continue;
        const double di = squared_distance(pts.row(i), c.row(a));
        if (di > far_d) {
          far_d = di;
          far = i;
        }
      }
      if (far == n) break;  // n < k cannot happen; guarded by caller
      --counts[res.assignments[far]];
      res.assignments[far] = j;
      counts[j] = 1;
      std::copy(pts.row(far).begin(), pts.row(far).end(), c.row(j).begin());
      changed = true;
    }
    // Update.
    Matrix<double> next(k, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < d; ++t) next(res.assignments[i], t) += pts(i, t);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t t = 0; t < d; ++t) next(j, t) /= static_cast<double>(counts[j]);
    c = std::move(next);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += squared_distance(pts.row(i), c.row(res.assignments[i]));
    res.history.push_back(inertia);
    if (!changed && iter > 0) break;
  }
  res.centroids = std::move(c);
  res.inertia = res.history.empty() ? 0.0 : res.history.back();
  return res;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` runs by
/// inertia. Empty clusters are re-seeded to the farthest point.
inline KMeansResult kmeans(const Matrix<double>& points, std::size_t k, std::size_t restarts = 10,
                           std::size_t max_iters = 100, std::uint64_t seed = 0) {
  require(k >= 1, "kmeans: k must be >= 1");
  require(points.rows >= k, "kmeans: n = " + std::to_string(points.rows) + " < k = " + std::to_string(k));
  require(restarts >= 1 && max_iters >= 1, "kmeans: restarts and max_iters must be >= 1");
  Rng rng(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    auto run = detail::lloyd(points, detail::kmeans_pp_seed(points, k, rng), max_iters);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

}  // namespace ddeseg
