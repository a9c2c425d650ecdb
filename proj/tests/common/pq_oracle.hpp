#pragma once

#include <vector>

#include "hps/metrics.hpp"
#include "hps/rng.hpp"

namespace hps::testing {

// Random disjoint instances on a w x h grid: each pixel picks an instance
// or background, then empty instances are dropped.
inline std::vector<Mask> random_instances(Rng& rng, std::size_t h, std::size_t w,
                                          std::size_t max_segments) {
  const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(max_segments)));
  std::vector<Mask> masks(k, Mask(h * w, 0));
  if (k == 0) return masks;
  // Blobby layout: seed each instance at a cell and grow by random labels
  // copied from neighbors so IoU > 0.5 matches actually occur.
  std::vector<int> label(h * w, -1);
  for (std::size_t p = 0; p < h * w; ++p) {
    label[p] = rng.uniform_int(-1, static_cast<int>(k) - 1);
  }
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (rng.uniform(0, 1) < 0.5 && x > 0) label[y * w + x] = label[y * w + x - 1];
        else if (rng.uniform(0, 1) < 0.5 && y > 0) label[y * w + x] = label[(y - 1) * w + x];
      }
    }
  }
  for (std::size_t p = 0; p < h * w; ++p) {
    if (label[p] >= 0) masks[static_cast<std::size_t>(label[p])][p] = 1;
  }
  std::vector<Mask> nonempty;
  for (auto& m : masks) {
    bool any = false;
    for (auto v : m) any = any || v;
    if (any) nonempty.push_back(std::move(m));
  }
  return nonempty;
}

// Exhaustive search over partial injective GT -> prediction assignments
// restricted to IoU > 0.5 pairs, maximizing the IoU sum (ties: more pairs).
// Sums run in GT order like the implementation.
struct OracleResult {
  double pq = 0;
  std::size_t tp = 0;
  std::vector<int> gt_to_pred;
};

inline void oracle_rec(const std::vector<std::vector<double>>& m, std::size_t j,
                       std::vector<char>& used, std::vector<int>& cur,
                       std::vector<int>& best, double& best_sum) {
  if (j == m.size()) {
    double s = 0;
    for (std::size_t g = 0; g < cur.size(); ++g) {
      if (cur[g] >= 0) s += m[g][static_cast<std::size_t>(cur[g])];
    }
    if (s > best_sum) {
      best_sum = s;
      best = cur;
    }
    return;
  }
  cur[j] = -1;
  oracle_rec(m, j + 1, used, cur, best, best_sum);
  for (std::size_t p = 0; p < used.size(); ++p) {
    if (used[p] || !(m[j][p] > 0.5)) continue;
    used[p] = 1;
    cur[j] = static_cast<int>(p);
    oracle_rec(m, j + 1, used, cur, best, best_sum);
    used[p] = 0;
  }
  cur[j] = -1;
}

inline OracleResult pq_oracle(const std::vector<Mask>& pred,
                              const std::vector<Mask>& gt) {
  OracleResult r;
  if (pred.empty() && gt.empty()) {
    r.pq = 100.0;
    return r;
  }
  std::vector<std::vector<double>> m(gt.size(), std::vector<double>(pred.size()));
  for (std::size_t g = 0; g < gt.size(); ++g) {
    for (std::size_t p = 0; p < pred.size(); ++p) m[g][p] = iou(pred[p], gt[g]);
  }
  std::vector<char> used(pred.size(), 0);
  std::vector<int> cur(gt.size(), -1), best(gt.size(), -1);
  double best_sum = -1;
  oracle_rec(m, 0, used, cur, best, best_sum);
  double sum = 0;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (best[g] >= 0) {
      sum += m[g][static_cast<std::size_t>(best[g])];
      ++r.tp;
    }
  }
  const double fp = static_cast<double>(pred.size() - r.tp);
  const double fn = static_cast<double>(gt.size() - r.tp);
  r.pq = 100.0 * sum / (static_cast<double>(r.tp) + 0.5 * fp + 0.5 * fn);
  r.gt_to_pred = best;
  return r;
}

}  // namespace hps::testing
