#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace metat2;
using namespace metat2::testing;

namespace {

std::set<std::set<int>> partition_of(const metrics::Components& cc) {
  std::vector<std::set<int>> parts(cc.count());
  for (std::size_t i = 0; i < cc.labels.size(); ++i)
    if (cc.labels.data[i] > 0) parts[cc.labels.data[i] - 1].insert(static_cast<int>(i));
  return {parts.begin(), parts.end()};
}

Mask from_rows(const std::vector<std::string>& rows) {
  Mask m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) m.at(r, c) = rows[r][c] == '#';
  return m;
}

}  // namespace

TEST(Dsc, HandValues) {
  const Mask a = from_rows({"##..", "##..", "....", "...."});
  const Mask b = from_rows({".##.", ".##.", "....", "...."});
  EXPECT_DOUBLE_EQ(metrics::dsc(a, b), 0.5);
  EXPECT_DOUBLE_EQ(metrics::dsc(a, a), 1.0);
  const Mask d = from_rows({"....", "....", "..##", "..##"});
  EXPECT_DOUBLE_EQ(metrics::dsc(a, d), 0.0);
  EXPECT_DOUBLE_EQ(metrics::dsc(Mask(3, 3), Mask(3, 3)), 1.0);
}

TEST(Dsc, ShapeMismatchThrows) { EXPECT_THROW(metrics::dsc(Mask(2, 2), Mask(2, 3)), std::invalid_argument); }

TEST(Dsc, SymmetricAndBoundedOnRandomMasks) {
  std::mt19937_64 gen(7);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_mask(9, 11, 0.3, gen), b = random_mask(9, 11, 0.3, gen);
    const double d = metrics::dsc(a, b);
    EXPECT_EQ(d, metrics::dsc(b, a));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
    EXPECT_NEAR(d, oracle_dsc(a, b), 1e-15);
  }
}

TEST(ConnectedComponents, DiagonalPixels) {
  const Mask m = from_rows({"#.", ".#"});
  EXPECT_EQ(metrics::connected_components(m, 8).count(), 1u);
  EXPECT_EQ(metrics::connected_components(m, 4).count(), 2u);
}

TEST(ConnectedComponents, LabelsFollowRasterOrder) {
  const Mask m = from_rows({"..#", "#..", "#.#"});
  const auto cc = metrics::connected_components(m, 4);
  ASSERT_EQ(cc.count(), 3u);
  EXPECT_EQ(cc.labels.at(0, 2), 1);
  EXPECT_EQ(cc.labels.at(1, 0), 2);
  EXPECT_EQ(cc.labels.at(2, 0), 2);
  EXPECT_EQ(cc.labels.at(2, 2), 3);
  EXPECT_EQ(cc.sizes, (std::vector<std::size_t>{1, 2, 1}));
}

TEST(ConnectedComponents, MatchesFloodFillOnRandom16x16) {
  std::mt19937_64 gen(11);
  for (int i = 0; i < 100; ++i) {
    const auto m = random_mask(16, 16, 0.45, gen);
    for (int conn : {4, 8}) EXPECT_EQ(partition_of(metrics::connected_components(m, conn)), oracle_components(m, conn));
  }
}

TEST(ConnectedComponents, RejectsBadConnectivity) {
  EXPECT_THROW(metrics::connected_components(Mask(2, 2), 6), std::invalid_argument);
}

TEST(Hd95, HandValues) {
  Mask a(5, 7), b(5, 7);
  a.at(2, 1) = 1;
  b.at(2, 4) = 1;
  EXPECT_DOUBLE_EQ(*metrics::hd95(a, b), 3.0);
  EXPECT_DOUBLE_EQ(*metrics::hd95(a, a), 0.0);
  EXPECT_DOUBLE_EQ(*metrics::hd95(Mask(4, 4), Mask(4, 4)), 0.0);
  EXPECT_FALSE(metrics::hd95(a, Mask(5, 7)).has_value());
  EXPECT_FALSE(metrics::hd95(Mask(5, 7), b).has_value());
}

TEST(Hd95, SpacingScalesDistances) {
  Mask a(6, 6), b(6, 6);
  a.at(1, 1) = 1;
  b.at(4, 1) = 1;
  EXPECT_DOUBLE_EQ(*metrics::hd95(a, b, Spacing{0.5, 2.0}), 1.5);
  b = Mask(6, 6);
  b.at(1, 4) = 1;
  EXPECT_DOUBLE_EQ(*metrics::hd95(a, b, Spacing{0.5, 2.0}), 6.0);
}

TEST(Hd95, MatchesAllPairsOracleWithAnisotropicSpacing) {
  std::mt19937_64 gen(5);
  for (int i = 0; i < 40; ++i) {
    const auto a = random_mask(12, 15, 0.25, gen), b = random_mask(12, 15, 0.2, gen);
    const auto got = metrics::hd95(a, b, Spacing{0.7, 1.3});
    const auto want = oracle_hd95(a, b, 0.7, 1.3);
    ASSERT_EQ(got.has_value(), want.has_value());
    if (got) EXPECT_NEAR(*got, *want, 1e-9);
  }
}

TEST(Hd95, SymmetricTranslationCovariantAndBoundedByHausdorff) {
  std::mt19937_64 gen(9);
  for (int i = 0; i < 30; ++i) {
    Mask a(20, 20), b(20, 20), a2(20, 20), b2(20, 20);
    const auto pa = random_mask(12, 12, 0.3, gen), pb = random_mask(12, 12, 0.3, gen);
    for (int r = 0; r < 12; ++r)
      for (int c = 0; c < 12; ++c) {
        a.at(r + 2, c + 2) = pa.at(r, c);
        b.at(r + 2, c + 2) = pb.at(r, c);
        a2.at(r + 6, c + 5) = pa.at(r, c);
        b2.at(r + 6, c + 5) = pb.at(r, c);
      }
    const double h = *metrics::hd95(a, b);
    EXPECT_DOUBLE_EQ(h, *metrics::hd95(b, a));
    EXPECT_NEAR(h, *metrics::hd95(a2, b2), 1e-12);
    double hausdorff = 0;
    for (const auto& p : oracle_boundary(a)) {
      double best = 1e300;
      for (const auto& q : oracle_boundary(b)) best = std::min(best, std::hypot(p.first - q.first, p.second - q.second));
      hausdorff = std::max(hausdorff, best);
    }
    for (const auto& q : oracle_boundary(b)) {
      double best = 1e300;
      for (const auto& p : oracle_boundary(a)) best = std::min(best, std::hypot(p.first - q.first, p.second - q.second));
      hausdorff = std::max(hausdorff, best);
    }
    EXPECT_LE(h, hausdorff + 1e-12);
  }
}

TEST(LesionMatching, RecallExample) {
  Mask gt(10, 20), pred(10, 20);
  for (int c = 0; c < 10; ++c) gt.at(1, c) = 1;     // lesion 1, 10 px
  for (int c = 0; c < 10; ++c) gt.at(7, c + 5) = 1;  // lesion 2, 10 px
  for (int c = 0; c < 5; ++c) pred.at(1, c) = 1;
  const auto rec = metrics::lesion_recall(gt, pred, 0.1);
  EXPECT_EQ(rec.hits, 1u);
  EXPECT_EQ(rec.total, 2u);
  const auto none = metrics::lesion_recall(gt, Mask(10, 20), 0.1);
  EXPECT_EQ(none.hits, 0u);
  EXPECT_EQ(none.total, 2u);
  const auto self = metrics::lesion_recall(gt, gt, 0.1);
  EXPECT_EQ(self.hits, 2u);
}

TEST(LesionMatching, PrecisionRatioThreshold) {
  Mask gt(6, 20), pred(6, 20);
  for (int c = 0; c < 20; ++c) pred.at(2, c) = 1;  // 20 px prediction
  gt.at(2, 0) = gt.at(2, 1) = 1;                   // overlaps it by 2 px
  gt.at(4, 10) = 1;
  auto p = metrics::lesion_precision(gt, pred, 0.1);
  EXPECT_EQ(p.hits, 1u);
  EXPECT_EQ(p.total, 1u);
  p = metrics::lesion_precision(gt, pred, 0.2);
  EXPECT_EQ(p.hits, 0u);
  EXPECT_EQ(p.total, 1u);
}

TEST(LesionMatching, NoTouchingPredictionsAndEmptyCases) {
  Mask gt(8, 8), pred(8, 8);
  gt.at(0, 0) = 1;
  pred.at(7, 7) = pred.at(4, 4) = pred.at(7, 0) = 1;
  const auto p = metrics::lesion_precision(gt, pred, 0.1);
  EXPECT_EQ(p.hits, 0u);
  EXPECT_EQ(p.total, 3u);
  const auto r = metrics::lesion_recall(Mask(8, 8), pred, 0.1);
  EXPECT_EQ(r.total, 0u);
  EXPECT_EQ(r.hits, 0u);
}

TEST(LesionMatching, DetectionsGrowAsThresholdFalls) {
  std::mt19937_64 gen(21);
  for (int i = 0; i < 50; ++i) {
    const auto gt = random_mask(16, 16, 0.3, gen), pred = random_mask(16, 16, 0.3, gen);
    std::size_t prev_r = 0, prev_p = 0;
    for (double tau : {1.0, 0.8, 0.5, 0.3, 0.1, 0.01}) {
      const auto r = metrics::lesion_recall(gt, pred, tau);
      const auto p = metrics::lesion_precision(gt, pred, tau);
      EXPECT_GE(r.hits, prev_r);
      EXPECT_GE(p.hits, prev_p);
      EXPECT_LE(r.hits, r.total);
      EXPECT_LE(p.hits, p.total);
      prev_r = r.hits;
      prev_p = p.hits;
    }
  }
}

TEST(LesionMatching, OverlapMatrixBounded) {
  std::mt19937_64 gen(3);
  const auto gt = random_mask(16, 16, 0.4, gen), pred = random_mask(16, 16, 0.4, gen);
  const auto lm = metrics::LesionMatch::build(gt, pred, 8);
  for (std::size_t i = 0; i < lm.gt.count(); ++i)
    for (std::size_t j = 0; j < lm.pred.count(); ++j)
      EXPECT_LE(lm.overlap[i][j], std::min(lm.gt.sizes[i], lm.pred.sizes[j]));
}

TEST(Aggregate, PerfectPredictions) {
  auto ds = generate_synthetic_dataset(small_spec(5, 24, 2));
  std::vector<Mask> preds;
  for (const auto& s : ds) preds.push_back(s.mask);
  const auto rep = metrics::evaluate_dataset(preds, ds);
  EXPECT_DOUBLE_EQ(rep.dsc_mean, 1.0);
  EXPECT_DOUBLE_EQ(rep.dsc_std, 0.0);
  EXPECT_DOUBLE_EQ(*rep.hd95_mean, 0.0);
  EXPECT_DOUBLE_EQ(*rep.lesion_recall, 1.0);
  EXPECT_DOUBLE_EQ(*rep.lesion_precision, 1.0);
}

TEST(Aggregate, EmptyPredictions) {
  auto ds = generate_synthetic_dataset(small_spec(4, 24, 3));
  std::vector<Mask> preds(ds.size(), Mask(24, 24));
  const auto rep = metrics::evaluate_dataset(preds, ds);
  EXPECT_DOUBLE_EQ(*rep.lesion_recall, 0.0);
  EXPECT_FALSE(rep.lesion_precision.has_value());
  EXPECT_EQ(rep.hd95_undefined_count, 4u);
  EXPECT_FALSE(rep.hd95_mean.has_value());
  const auto j = metrics::report_to_json(rep);
  EXPECT_TRUE(j["lesion_precision"].is_null());
  EXPECT_TRUE(j["hd95_mean"].is_null());
}

TEST(Aggregate, CountMismatchThrows) {
  auto ds = generate_synthetic_dataset(small_spec(2, 16, 3));
  EXPECT_THROW(metrics::evaluate_dataset({Mask(16, 16)}, ds), DataError);
}

TEST(Aggregate, ToySetMatchesOracles) {
  Dataset ds(3);
  std::vector<Mask> preds;
  ds[0].mask = from_rows({"......", ".##...", ".##...", "......", "....#.", "......"});
  preds.push_back(from_rows({"......", "..##..", "..##..", "......", "......", "......"}));
  ds[1].mask = from_rows({"##....", "##....", "......", "......", "......", "....##"});
  preds.push_back(from_rows({"##....", "#.....", "......", "..#...", "......", "......"}));
  ds[2].mask = Mask(6, 6);
  preds.push_back(Mask(6, 6));
  for (int i = 0; i < 3; ++i) {
    ds[i].id = "c" + std::to_string(i);
    ds[i].source = Image(6, 6);
  }
  const auto rep = metrics::evaluate_dataset(preds, ds);
  std::vector<double> d, h;
  for (int i = 0; i < 3; ++i) {
    d.push_back(oracle_dsc(preds[i], ds[i].mask));
    h.push_back(*oracle_hd95(preds[i], ds[i].mask));
  }
  auto mean = [](const std::vector<double>& v) { return (v[0] + v[1] + v[2]) / 3.0; };
  auto pstd = [&](const std::vector<double>& v) {
    const double m = mean(v);
    return std::sqrt(((v[0] - m) * (v[0] - m) + (v[1] - m) * (v[1] - m) + (v[2] - m) * (v[2] - m)) / 3.0);
  };
  EXPECT_NEAR(rep.dsc_mean, mean(d), 1e-12);
  EXPECT_NEAR(rep.dsc_std, pstd(d), 1e-12);
  EXPECT_NEAR(*rep.hd95_mean, mean(h), 1e-12);
  EXPECT_NEAR(*rep.hd95_std, pstd(h), 1e-12);
  // Hand count (8-connectivity): case 0 gt {square, dot}, pred {square};
  // case 1 gt {block, bar}, pred {L, dot}.
  EXPECT_NEAR(*rep.lesion_recall, 2.0 / 4.0, 1e-12);
  EXPECT_NEAR(*rep.lesion_precision, 2.0 / 3.0, 1e-12);
}

TEST(Report, JsonKeysAndTable) {
  auto ds = generate_synthetic_dataset(small_spec(2, 16, 4));
  std::vector<Mask> preds{ds[0].mask, Mask(16, 16)};
  const auto rep = metrics::evaluate_dataset(preds, ds);
  const auto j = metrics::report_to_json(rep);
  for (const char* k : {"per_case", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std", "hd95_undefined_count",
                        "lesion_recall", "lesion_precision"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["per_case"].size(), 2u);
  const auto table = metrics::format_table("metat2", rep);
  EXPECT_NE(table.find("DSC"), std::string::npos);
  EXPECT_NE(table.find("HD95"), std::string::npos);
  EXPECT_NE(table.find("metat2"), std::string::npos);
}
