#pragma once

// Voxel-level (DSC, HD95) and lesion-level (recall over ground-truth
// components, precision over predicted components) segmentation metrics.

#include "metat2/config_keys.hpp"
#include "metat2/dataset.hpp"
#include "metat2/errors.hpp"
#include "metat2/grid.hpp"
#include "metat2/stats.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace metat2::metrics {

inline void require_same_shape(const Mask& a, const Mask& b, const char* what) {
  if (!a.same_shape(b) || a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

inline std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](auto v) { return v != 0; }));
}

// 2|A n B| / (|A| + |B|); 1.0 when both masks are empty.
inline double dsc(const Mask& a, const Mask& b) {
  require_same_shape(a, b, "dsc");
  // Eight pixels per word: the high bit of each byte of `nonzero` is set
  // exactly when that byte is nonzero.
  constexpr std::uint64_t kLow7 = 0x7f7f7f7f7f7f7f7fULL, kHigh = 0x8080808080808080ULL;
  auto nonzero = [](std::uint64_t w) { return (((w & kLow7) + kLow7) | w) & kHigh; };
  const std::uint8_t* pa = a.data.data();
  const std::uint8_t* pb = b.data.data();
  const std::size_t n = a.size();
  std::uint64_t inter = 0, na = 0, nb = 0;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    std::uint64_t wa, wb;
    std::memcpy(&wa, pa + i, 8);
    std::memcpy(&wb, pb + i, 8);
    wa = nonzero(wa);
    wb = nonzero(wb);
    inter += std::popcount(wa & wb);
    na += std::popcount(wa);
    nb += std::popcount(wb);
  }
  for (; i < n; ++i) {
    const std::uint64_t x = pa[i] != 0, y = pb[i] != 0;
    inter += x & y;
    na += x;
    nb += y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// Foreground pixels with at least one 4-neighbour outside the mask. Pixels on
// the image border count as boundary.
inline std::vector<std::pair<int, int>> boundary_pixels(const Mask& m) {
  std::vector<std::pair<int, int>> out;
  auto fg = [&](int r, int c) { return r >= 0 && c >= 0 && r < m.rows && c < m.cols && m.at(r, c) != 0; };
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c)
      if (fg(r, c) && (!fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1))) out.emplace_back(r, c);
  return out;
}

// Exact Euclidean distance transform (Felzenszwalb-Huttenlocher) of the
// feature set, with anisotropic spacing. Returns distances in mm.
namespace detail {

inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, double w2) {
  const int n = static_cast<int>(f.size());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p));
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[k]) {
      v[k] = q;
      z[k + 1] = kInf;
    } else {
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
    }
  }
  d.assign(n, kInf);
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double diff = q - v[j];
    d[q] = w2 * diff * diff + f[v[j]];
  }
}

inline std::vector<double> squared_distance_to(const std::vector<std::pair<int, int>>& features, int rows, int cols,
                                               const Spacing& sp) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(static_cast<std::size_t>(rows) * cols, kInf);
  for (auto [r, c] : features) grid[static_cast<std::size_t>(r) * cols + c] = 0.0;
  std::vector<double> f, d;
  const double wr = sp.row_mm * sp.row_mm, wc = sp.col_mm * sp.col_mm;
  for (int c = 0; c < cols; ++c) {
    f.resize(rows);
    for (int r = 0; r < rows; ++r) f[r] = grid[static_cast<std::size_t>(r) * cols + c];
    edt_1d(f, d, wr);
    for (int r = 0; r < rows; ++r) grid[static_cast<std::size_t>(r) * cols + c] = d[r];
  }
  for (int r = 0; r < rows; ++r) {
    f.assign(grid.begin() + static_cast<std::ptrdiff_t>(r) * cols, grid.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols);
    edt_1d(f, d, wc);
    std::copy(d.begin(), d.end(), grid.begin() + static_cast<std::ptrdiff_t>(r) * cols);
  }
  return grid;
}

}  // namespace detail

// 95th percentile (linear interpolation) of the pooled two-way multiset of
// nearest boundary-to-boundary distances in mm. Both empty -> 0; exactly one
// empty -> nullopt (undefined).
inline std::optional<double> hd95(const Mask& a, const Mask& b, const Spacing& spacing = {}) {
  require_same_shape(a, b, "hd95");
  const auto ba = boundary_pixels(a);
  const auto bb = boundary_pixels(b);
  if (ba.empty() && bb.empty()) return 0.0;
  if (ba.empty() || bb.empty()) return std::nullopt;
  const auto da = detail::squared_distance_to(ba, a.rows, a.cols, spacing);
  const auto db = detail::squared_distance_to(bb, b.rows, b.cols, spacing);
  std::vector<double> pooled;
  pooled.reserve(ba.size() + bb.size());
  for (auto [r, c] : ba) pooled.push_back(std::sqrt(db[static_cast<std::size_t>(r) * b.cols + c]));
  for (auto [r, c] : bb) pooled.push_back(std::sqrt(da[static_cast<std::size_t>(r) * a.cols + c]));
  return stats::percentile(std::move(pooled), 95.0);
}

// Label image (0 = background, 1..n) plus component sizes.
struct Components {
  Grid<int> labels;
  std::vector<std::size_t> sizes;  // sizes[k] for label k+1

  std::size_t count() const { return sizes.size(); }
};

// Labels follow raster order of each component's first pixel.
inline Components connected_components(const Mask& m, int connectivity = 8) {
  if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("connectivity must be 4 or 8");
  Components out;
  out.labels = Grid<int>(m.rows, m.cols, 0);
  std::vector<std::pair<int, int>> stack;
  int next = 0;
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      if (m.at(r, c) == 0 || out.labels.at(r, c) != 0) continue;
      ++next;
      std::size_t size = 0;
      stack.emplace_back(r, c);
      out.labels.at(r, c) = next;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        ++size;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if ((dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0)) continue;
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= m.rows || nx >= m.cols) continue;
            if (m.at(ny, nx) == 0 || out.labels.at(ny, nx) != 0) continue;
            out.labels.at(ny, nx) = next;
            stack.emplace_back(ny, nx);
          }
      }
      out.sizes.push_back(size);
    }
  }
  return out;
}

// |gt| x |pred| intersection pixel counts.
struct LesionMatch {
  Components gt;
  Components pred;
  std::vector<std::vector<std::size_t>> overlap;

  static LesionMatch build(const Mask& gt_mask, const Mask& pred_mask, int connectivity) {
    require_same_shape(gt_mask, pred_mask, "lesion matching");
    LesionMatch lm;
    lm.gt = connected_components(gt_mask, connectivity);
    lm.pred = connected_components(pred_mask, connectivity);
    lm.overlap.assign(lm.gt.count(), std::vector<std::size_t>(lm.pred.count(), 0));
    for (std::size_t i = 0; i < gt_mask.size(); ++i) {
      const int g = lm.gt.labels.data[i], p = lm.pred.labels.data[i];
      if (g > 0 && p > 0) ++lm.overlap[g - 1][p - 1];
    }
    return lm;
  }

  // Ground-truth components overlapped by some prediction component on at
  // least `tau` of the ground-truth component's own area.
  std::size_t detected_gt(double tau) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < gt.count(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 0; j < pred.count(); ++j) best = std::max(best, overlap[i][j]);
      n += static_cast<double>(best) / static_cast<double>(gt.sizes[i]) >= tau;
    }
    return n;
  }

  std::size_t true_positive_pred(double tau) const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < pred.count(); ++j) {
      std::size_t best = 0;
      for (std::size_t i = 0; i < gt.count(); ++i) best = std::max(best, overlap[i][j]);
      n += static_cast<double>(best) / static_cast<double>(pred.sizes[j]) >= tau;
    }
    return n;
  }
};

struct LesionCount {
  std::size_t hits = 0;
  std::size_t total = 0;
  bool operator==(const LesionCount&) const = default;
};

inline LesionCount lesion_recall(const Mask& gt, const Mask& pred, double tau = 0.1, int connectivity = 8) {
  const auto lm = LesionMatch::build(gt, pred, connectivity);
  return {lm.detected_gt(tau), lm.gt.count()};
}

inline LesionCount lesion_precision(const Mask& gt, const Mask& pred, double tau = 0.1, int connectivity = 8) {
  const auto lm = LesionMatch::build(gt, pred, connectivity);
  return {lm.true_positive_pred(tau), lm.pred.count()};
}

struct MetricsConfig {
  double overlap_threshold = 0.1;
  int connectivity = 8;

  void validate() const {
    if (!(overlap_threshold > 0 && overlap_threshold <= 1)) throw ConfigError("overlap_threshold must lie in (0, 1]");
    if (connectivity != 4 && connectivity != 8) throw ConfigError("connectivity must be 4 or 8");
  }
};

inline void to_json(nlohmann::json& j, const MetricsConfig& c) {
  j = {{"overlap_threshold", c.overlap_threshold}, {"connectivity", c.connectivity}};
}

inline void from_json(const nlohmann::json& j, MetricsConfig& c) {
  require_known_keys(j, {"overlap_threshold", "connectivity"}, "metrics config");
  c.overlap_threshold = j.value("overlap_threshold", c.overlap_threshold);
  c.connectivity = j.value("connectivity", c.connectivity);
}

struct CaseMetrics {
  std::string id;
  double dsc = 0;
  std::optional<double> hd95;
  std::size_t n_gt_lesions = 0;
  std::size_t n_detected_gt = 0;
  std::size_t n_pred_lesions = 0;
  std::size_t n_tp_pred = 0;
};

inline CaseMetrics evaluate_case(const std::string& id, const Mask& pred, const Mask& gt, const Spacing& spacing,
                                 const MetricsConfig& cfg) {
  CaseMetrics cm;
  cm.id = id;
  cm.dsc = dsc(pred, gt);
  cm.hd95 = hd95(pred, gt, spacing);
  const auto lm = LesionMatch::build(gt, pred, cfg.connectivity);
  cm.n_gt_lesions = lm.gt.count();
  cm.n_detected_gt = lm.detected_gt(cfg.overlap_threshold);
  cm.n_pred_lesions = lm.pred.count();
  cm.n_tp_pred = lm.true_positive_pred(cfg.overlap_threshold);
  return cm;
}

struct AggregateReport {
  std::vector<CaseMetrics> per_case;
  double dsc_mean = 0;
  double dsc_std = 0;
  std::optional<double> hd95_mean;
  std::optional<double> hd95_std;
  std::size_t hd95_undefined_count = 0;
  std::optional<double> lesion_recall;     // pooled over ground-truth lesions
  std::optional<double> lesion_precision;  // pooled over predicted lesions
};

inline AggregateReport aggregate(std::vector<CaseMetrics> cases) {
  AggregateReport rep;
  std::vector<double> dscs, hds;
  std::size_t gt = 0, det = 0, pred = 0, tp = 0;
  for (const auto& c : cases) {
    dscs.push_back(c.dsc);
    if (c.hd95)
      hds.push_back(*c.hd95);
    else
      ++rep.hd95_undefined_count;
    gt += c.n_gt_lesions;
    det += c.n_detected_gt;
    pred += c.n_pred_lesions;
    tp += c.n_tp_pred;
  }
  rep.dsc_mean = stats::mean(dscs);
  rep.dsc_std = stats::stddev(dscs);
  if (!hds.empty()) {
    rep.hd95_mean = stats::mean(hds);
    rep.hd95_std = stats::stddev(hds);
  }
  if (gt > 0) rep.lesion_recall = static_cast<double>(det) / static_cast<double>(gt);
  if (pred > 0) rep.lesion_precision = static_cast<double>(tp) / static_cast<double>(pred);
  rep.per_case = std::move(cases);
  return rep;
}

inline AggregateReport evaluate_dataset(const std::vector<Mask>& predictions, const Dataset& ds,
                                        const MetricsConfig& cfg = {}) {
  if (predictions.size() != ds.size())
    throw DataError("evaluate_dataset: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(ds.size()) + " samples");
  std::vector<CaseMetrics> cases;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!predictions[i].same_shape(ds[i].mask)) throw DataError("prediction for '" + ds[i].id + "' has the wrong shape");
    cases.push_back(evaluate_case(ds[i].id, predictions[i], ds[i].mask, ds[i].spacing, cfg));
  }
  return aggregate(std::move(cases));
}

namespace detail {

inline nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

// Undefined values serialize as null.
inline nlohmann::json report_to_json(const AggregateReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.per_case) {
    cases.push_back({{"id", c.id},
                     {"dsc", c.dsc},
                     {"hd95", detail::optional_number(c.hd95)},
                     {"n_gt_lesions", c.n_gt_lesions},
                     {"n_detected_gt", c.n_detected_gt},
                     {"n_pred_lesions", c.n_pred_lesions},
                     {"n_tp_pred", c.n_tp_pred}});
  }
  nlohmann::json j;
  j["per_case"] = std::move(cases);
  j["dsc_mean"] = r.dsc_mean;
  j["dsc_std"] = r.dsc_std;
  j["hd95_mean"] = detail::optional_number(r.hd95_mean);
  j["hd95_std"] = detail::optional_number(r.hd95_std);
  j["hd95_undefined_count"] = r.hd95_undefined_count;
  j["lesion_recall"] = detail::optional_number(r.lesion_recall);
  j["lesion_precision"] = detail::optional_number(r.lesion_precision);
  return j;
}

inline std::string format_table(const std::string& method, const AggregateReport& r) {
  auto num = [](const std::optional<double>& v, int prec) {
    if (!v) return std::string("undef");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, *v);
    return std::string(buf);
  };
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-12s %-18s %-18s %-8s %-8s\n", "Method", "DSC", "HD95", "Rec.GT", "Prec.Pd");
  os << line;
  const std::string dsc = num(r.dsc_mean, 4) + "(" + num(r.dsc_std, 4) + ")";
  const std::string hd = num(r.hd95_mean, 2) + "(" + num(r.hd95_std, 2) + ")";
  std::snprintf(line, sizeof(line), "%-12s %-18s %-18s %-8s %-8s\n", method.c_str(), dsc.c_str(), hd.c_str(),
                num(r.lesion_recall, 4).c_str(), num(r.lesion_precision, 4).c_str());
  os << line;
  if (r.hd95_undefined_count > 0) os << "(HD95 undefined for " << r.hd95_undefined_count << " case(s))\n";
  return os.str();
}

}  // namespace metat2::metrics
