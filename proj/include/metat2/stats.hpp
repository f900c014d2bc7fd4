#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace metat2::stats {

// Percentile of `values` with linear interpolation between closest ranks
// (rank = q/100 * (n-1)). Takes its argument by value and sorts it.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double acc = 0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

// Population standard deviation.
inline double stddev(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean(v);
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace metat2::stats
