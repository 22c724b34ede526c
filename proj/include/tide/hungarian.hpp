#pragma once

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "tide/errors.hpp"

namespace tide {

struct MatchAssignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, target), sorted by target
  std::vector<std::size_t> unmatched;                      // prediction indices assigned to no-object
  double total_cost = 0.0;
};

// Exact minimum-cost assignment of every target (column) to a distinct
// prediction (row) for a row-major n_pred x n_tgt cost matrix with
// n_tgt <= n_pred. Kuhn-Munkres with row/column potentials (shortest
// augmenting paths), O(n_tgt^2 * n_pred).
inline MatchAssignment hungarian(const std::vector<double>& cost, std::size_t n_pred, std::size_t n_tgt) {
  if (cost.size() != n_pred * n_tgt) throw DimError("hungarian: cost size does not match dimensions");
  if (n_tgt > n_pred) throw DimError("hungarian: more targets than predictions");
  for (double c : cost)
    if (std::isnan(c)) throw NumericError("hungarian: NaN in cost matrix");
    else if (!std::isfinite(c)) throw NumericError("hungarian: non-finite cost");

  MatchAssignment out;
  if (n_tgt == 0) {
    for (std::size_t i = 0; i < n_pred; ++i) out.unmatched.push_back(i);
    return out;
  }

  // Targets are the "rows" being assigned, predictions the "columns".
  // Arrays are 1-based; index 0 is the virtual source column.
  const std::size_t n = n_tgt, m = n_pred;
  const double inf = std::numeric_limits<double>::infinity();
  auto c = [&](std::size_t t, std::size_t p) { return cost[(p - 1) * n_tgt + (t - 1)]; };
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t t = 1; t <= n; ++t) {
    owner[0] = t;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t t0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = c(t0, j) - u[t0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> pred_of(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (owner[j] == 0) {
      out.unmatched.push_back(j - 1);
    } else {
      pred_of[owner[j] - 1] = j - 1;
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    out.pairs.emplace_back(pred_of[t], t);
    out.total_cost += cost[pred_of[t] * n_tgt + t];
  }
  return out;
}

}  // namespace tide
