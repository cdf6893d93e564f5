// assignment.hpp: rectangular min-cost bipartite assignment (Hungarian method,
// shortest augmenting path with potentials, O(n^3)).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace softtrack {

/// Costs at or above this value mark a forbidden pair.
inline constexpr double kForbiddenCost = 1e9;

struct CostMatrix
{
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  bool empty() const { return rows == 0 || cols == 0; }
};

/// Injective (row, col) pairs minimizing total cost. The matrix is padded to
/// square with kForbiddenCost; pairs landing on a forbidden cost are dropped.
inline std::vector<std::pair<std::size_t, std::size_t>> solve_min_cost_assignment(const CostMatrix& costs)
{
  if (costs.empty()) {
    return {};
  }
  for (double v : costs.values) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("solve_min_cost_assignment: non-finite cost");
    }
  }
  const std::size_t n = std::max(costs.rows, costs.cols);
  auto cost = [&](std::size_t r, std::size_t c) {
    if (r < costs.rows && c < costs.cols) {
      return std::min(costs.at(r, c), kForbiddenCost);
    }
    return kForbiddenCost;
  };

  // 1-based potentials; p[j] is the row matched to column j, 0 means free.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t j = 1; j <= n; ++j) {
    const std::size_t r = p[j] - 1, c = j - 1;
    if (r < costs.rows && c < costs.cols && costs.at(r, c) < kForbiddenCost) {
      out.emplace_back(r, c);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace softtrack
