#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "hssda/rng.hpp"

namespace hssda {

struct TooFewValues : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct PrefixSums {
  std::vector<double> sum;     // sum[i]  = v[0] + ... + v[i-1]
  std::vector<double> sum_sq;  // squares
};

inline PrefixSums prefix_sums(std::span<const double> sorted) {
  PrefixSums p;
  p.sum.assign(sorted.size() + 1, 0.0);
  p.sum_sq.assign(sorted.size() + 1, 0.0);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    p.sum[i + 1] = p.sum[i] + sorted[i];
    p.sum_sq[i + 1] = p.sum_sq[i] + sorted[i] * sorted[i];
  }
  return p;
}

// Within-group sum of squared deviations for sorted[lo..hi], inclusive.
inline double group_ssd(const PrefixSums& p, int lo, int hi) {
  const double s = p.sum[hi + 1] - p.sum[lo];
  const double s2 = p.sum_sq[hi + 1] - p.sum_sq[lo];
  const double n = hi - lo + 1;
  return std::max(0.0, s2 - s * s / n);
}

}  // namespace detail

struct BreakResult {
  std::vector<double> breaks;   // k-1 ascending; break i = smallest element of group i+1
  std::vector<int> assignment;  // group index per input value, in input order
  double objective = 0.0;       // total within-group SSD
};

// Exact optimal 1-D k-partition (Jenks natural breaks) by Fisher's dynamic
// program, O(k n^2). Ties resolved toward the earliest split, so the result
// is deterministic and independent of input order.
inline BreakResult jenks_breaks(std::span<const double> values, int k) {
  const auto n = static_cast<int>(values.size());
  if (k < 2) throw std::invalid_argument("jenks_breaks: k must be >= 2");

  std::vector<int> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return values[a] < values[b]; });
  std::vector<double> sorted(values.size());
  for (int i = 0; i < n; ++i) sorted[i] = values[order[i]];

  int distinct = n > 0 ? 1 : 0;
  for (int i = 1; i < n; ++i) distinct += sorted[i] != sorted[i - 1];
  if (distinct < k) throw TooFewValues("jenks_breaks: need at least k distinct values");

  const auto pre = detail::prefix_sums(sorted);

  // cost[j] = best objective for sorted[0..j] with the current group count;
  // first_idx[g][j] = first index of the last group in that optimum.
  std::vector<double> cost(n), prev_cost(n);
  std::vector<std::vector<int>> first_idx(k, std::vector<int>(n, 0));
  for (int j = 0; j < n; ++j) prev_cost[j] = detail::group_ssd(pre, 0, j);
  for (int g = 1; g < k; ++g) {
    for (int j = 0; j < n; ++j) {
      double best = std::numeric_limits<double>::max();
      int best_i = g;
      for (int i = g; i <= j; ++i) {
        const double c = prev_cost[i - 1] + detail::group_ssd(pre, i, j);
        if (c < best) {
          best = c;
          best_i = i;
        }
      }
      cost[j] = best;
      first_idx[g][j] = best_i;
    }
    std::swap(cost, prev_cost);
  }

  // Group boundaries from the backpointers.
  std::vector<int> group_start(k);
  int j = n - 1;
  for (int g = k - 1; g >= 1; --g) {
    group_start[g] = first_idx[g][j];
    j = group_start[g] - 1;
  }
  group_start[0] = 0;

  BreakResult res;
  res.objective = prev_cost[n - 1];
  res.breaks.resize(k - 1);
  for (int g = 1; g < k; ++g) res.breaks[g - 1] = sorted[group_start[g]];
  res.assignment.resize(n);
  int g = 0;
  for (int i = 0; i < n; ++i) {
    while (g + 1 < k && i >= group_start[g + 1]) ++g;
    res.assignment[order[i]] = g;
  }
  return res;
}

enum class Measure { cls, obj, iou };

struct ScorePool {
  std::vector<double> values;
  int class_id = 0;
  Measure measure = Measure::cls;
};

struct ThresholdPair {
  double low = 0.0;
  double high = 0.0;
};

namespace detail {

// Pools above this size are subsampled before the O(n^2) solve.
inline constexpr std::size_t kMaxPoolSolveSize = 20000;

// Conservative thresholds when the pool cannot support a 3-way split.
inline ThresholdPair fallback_thresholds(std::span<const double> values) {
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, v);
  if (hi <= 0.0) {
    // Empty or all-zero pool: pin a high bar so almost nothing passes until
    // the pool recovers.
    return {0.45, 0.9};
  }
  return {0.5 * hi, hi};
}

}  // namespace detail

// Dual threshold from a score pool: 3-way natural breaks, low = lower break,
// high = upper break. Degenerate pools (fewer than 6 values or fewer than 3
// distinct ones) fall back to (max/2, max). `rng` is only consumed when the
// pool exceeds the subsample cap.
inline ThresholdPair dual_threshold(const ScorePool& pool, Rng& rng) {
  std::span<const double> values(pool.values);
  std::vector<double> sampled;
  if (values.size() > detail::kMaxPoolSolveSize) {
    sampled.assign(values.begin(), values.end());
    rng.shuffle(sampled);
    sampled.resize(detail::kMaxPoolSolveSize);
    values = sampled;
  }

  std::vector<double> distinct(values.begin(), values.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (values.size() < 6 || distinct.size() < 3) return detail::fallback_thresholds(values);

  const BreakResult br = jenks_breaks(values, 3);
  if (!(br.breaks[0] < br.breaks[1])) return detail::fallback_thresholds(values);
  return {br.breaks[0], br.breaks[1]};
}

// Convenience overload with a fixed subsampling stream. Callers that solve
// many pools should fork a stream per pool and use the two-argument form.
inline ThresholdPair dual_threshold(const ScorePool& pool) {
  Rng rng(0x706f6f6cULL);
  return dual_threshold(pool, rng);
}

}  // namespace hssda
