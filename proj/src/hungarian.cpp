#include "hps/hungarian.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "hps/errors.hpp"

namespace hps {
namespace {

// Lexicographic cost: exact-integer tie-break term `b` only decides between
// equal primary costs.
struct Key {
  double a = 0;
  double b = 0;
  Key operator+(const Key& o) const { return {a + o.a, b + o.b}; }
  Key operator-(const Key& o) const { return {a - o.a, b - o.b}; }
  bool operator<(const Key& o) const { return a < o.a || (a == o.a && b < o.b); }
};

}  // namespace

std::vector<std::size_t> hungarian_assign(const std::vector<double>& cost,
                                          std::size_t n, std::size_t g) {
  if (cost.size() != n * g) {
    throw ShapeError("hungarian_assign: cost has " + std::to_string(cost.size()) +
                     " entries, expected " + std::to_string(n * g));
  }
  if (g > n) {
    throw ShapeError("hungarian_assign: " + std::to_string(g) +
                     " targets exceed capacity of " + std::to_string(n) +
                     " queries");
  }
  for (double c : cost) {
    if (!std::isfinite(c)) {
      throw NumericError("hungarian_assign: non-finite cost entry");
    }
  }
  if (g == 0) return {};

  // Shortest augmenting paths with potentials. Rows are targets (1..g),
  // columns are queries (1..n); index 0 is the virtual source. Costs are
  // compared as (cost, (g - j) * i) pairs: among optimal assignments the
  // one preferring lower query indices for earlier targets wins.
  const Key inf{std::numeric_limits<double>::infinity(), 0.0};
  auto key = [&](std::size_t row, std::size_t col) {
    return Key{cost[(col - 1) * g + (row - 1)],
               static_cast<double>((g - row + 1) * (col - 1))};
  };
  std::vector<Key> u(g + 1), v(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= g; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<Key> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      Key delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const Key cur = key(i0, j) - u[i0] - v[j];
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
          u[p[j]] = u[p[j]] + delta;
          v[j] = v[j] - delta;
        } else {
          minv[j] = minv[j] - delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> assignment(g);
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j]) assignment[p[j] - 1] = j - 1;
  }
  return assignment;
}

double assignment_cost(const std::vector<double>& cost, std::size_t g,
                       const std::vector<std::size_t>& assignment) {
  double total = 0;
  for (std::size_t j = 0; j < assignment.size(); ++j) {
    total += cost[assignment[j] * g + j];
  }
  return total;
}

}  // namespace hps
