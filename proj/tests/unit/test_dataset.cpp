// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "stproph/data/dataset.hpp"
#include "stproph/error.hpp"
#include "test_util.hpp"

namespace stproph::data {
namespace {

using num::Rng;
using testing::TempDir;
using testing::write_text;

SeriesMatrix random_series(Rng& rng, std::size_t N, std::size_t T) {
  SeriesMatrix x(N, T);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t) x.values(n, t) = rng.normal(3.0, 2.0);
  return x;
}

TEST(Csv, LoadsAllObserved) {
  TempDir dir;
  write_text(dir.file("a.csv"), "s0,s1\n1,2\n3,4\n5,6\n");
  const SeriesMatrix x = load_csv(dir.file("a.csv"));
  EXPECT_EQ(x.sensors(), 2u);
  EXPECT_EQ(x.steps(), 3u);
  EXPECT_EQ(x.observed_count(), 6u);
  EXPECT_EQ(x.values(1, 2), 6.0);
  EXPECT_EQ(x.sensor_names, (std::vector<std::string>{"s0", "s1"}));
}

TEST(Csv, NanAndEmptyCellsAreMissing) {
  TempDir dir;
  write_text(dir.file("a.csv"), "s0,s1\n1,NaN\n,4\n");
  const SeriesMatrix x = load_csv(dir.file("a.csv"));
  EXPECT_FALSE(x.observed(1, 0));
  EXPECT_FALSE(x.observed(0, 1));
  EXPECT_TRUE(x.observed(1, 1));
  EXPECT_EQ(x.values(1, 0), 0.0);
}

TEST(Csv, DistinctErrors) {
  TempDir dir;
  const auto kind_of = [&](const std::string& text) {
    write_text(dir.file("e.csv"), text);
    try {
      load_csv(dir.file("e.csv"));
    } catch (const CsvError& e) {
      return std::pair{e.kind(), e.line()};
    }
    ADD_FAILURE() << text;
    return std::pair{CsvError::Kind::unreadable, std::size_t{0}};
  };
  EXPECT_EQ(kind_of("a,b\n1,2\n3\n"), std::pair(CsvError::Kind::ragged, std::size_t{3}));
  EXPECT_EQ(kind_of("a,b\n1,x\n").first, CsvError::Kind::non_numeric);
  EXPECT_EQ(kind_of("").first, CsvError::Kind::empty);
  EXPECT_THROW(load_csv(dir.file("absent.csv")), CsvError);
}

TEST(Csv, SaveLoadRoundTrip) {
  TempDir dir;
  Rng rng(1);
  SeriesMatrix x = random_series(rng, 3, 20);
  x.sensor_names = {"a", "b", "c"};
  x.set_missing(1, 4);
  save_csv(dir.file("rt.csv"), x);
  const SeriesMatrix y = load_csv(dir.file("rt.csv"));
  EXPECT_EQ(y.values, x.values);
  EXPECT_EQ(y.mask, x.mask);
}

TEST(Split, Boundaries) {
  const SplitRanges a = split_chrono(100, {0.6, 0.2, 0.2});
  EXPECT_EQ(a.train, (Range{0, 60}));
  EXPECT_EQ(a.val, (Range{60, 80}));
  EXPECT_EQ(a.test, (Range{80, 100}));
  const SplitRanges b = split_chrono(10, {0.7, 0.1, 0.2});
  EXPECT_EQ(b.train, (Range{0, 7}));
  EXPECT_EQ(b.val, (Range{7, 8}));
  EXPECT_EQ(b.test, (Range{8, 10}));
}

TEST(Split, RandomSpecsCoverAndAreDisjoint) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 10 + rng.below(5000);
    const double a = 0.05 + rng.uniform(), b = 0.05 + rng.uniform(), c = 0.05 + rng.uniform();
    const double s = a + b + c;
    const SplitRanges r = split_chrono(T, {a / s, b / s, 1.0 - a / s - b / s});
    EXPECT_EQ(r.train.begin, 0u);
    EXPECT_EQ(r.train.end, r.val.begin);
    EXPECT_EQ(r.val.end, r.test.begin);
    EXPECT_EQ(r.test.end, T);
    EXPECT_EQ(r.train.end, static_cast<std::size_t>(std::floor(a / s * static_cast<double>(T) + 1e-9)));
  }
}

TEST(Split, FractionsMustSumToOne) {
  EXPECT_THROW(split_chrono(100, {0.7, 0.2, 0.2}), ConfigError);
}

TEST(Windows, Counts) {
  Rng rng(3);
  const SeriesMatrix x = random_series(rng, 2, 100);
  EXPECT_EQ(make_windows(x, {0, 100}, 12, 12).size(), 77u);
  EXPECT_EQ(make_windows(x, {10, 34}, 12, 12).size(), 1u);
  std::vector<std::string> warnings;
  EXPECT_TRUE(make_windows(x, {0, 23}, 12, 12, &warnings).empty());
  EXPECT_EQ(warnings.size(), 1u);
  for (std::size_t len : {24, 50, 99})
    EXPECT_EQ(make_windows(x, {0, len}, 12, 12).size(), window_count(len, 12, 12));
  EXPECT_EQ(window_count(100, 12, 12), 77u);
}

TEST(Windows, InputsPrecedeTargets) {
  Rng rng(4);
  const SeriesMatrix x = random_series(rng, 2, 40);
  const auto samples = make_windows(x, {5, 40}, 6, 3);
  for (const auto& s : samples) {
    ASSERT_GE(s.anchor, 5u + 6u);
    ASSERT_LE(s.anchor + 3, 40u);
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t w = 0; w < 6; ++w) EXPECT_EQ(s.input(n, w), x.values(n, s.anchor - 6 + w));
      for (std::size_t h = 0; h < 3; ++h) EXPECT_EQ(s.target(n, h), x.values(n, s.anchor + h));
    }
  }
}

TEST(PointMask, RatioZeroIsIdentity) {
  Rng rng(5);
  const SeriesMatrix x = random_series(rng, 3, 30);
  const SeriesMatrix m = mask_point_mcar(x, 0.0, 1);
  EXPECT_EQ(m.mask, x.mask);
  EXPECT_EQ(m.values, x.values);
}

TEST(PointMask, ExactCount) {
  Rng rng(6);
  const SeriesMatrix x = random_series(rng, 10, 100);
  EXPECT_EQ(x.observed_count() - mask_point_mcar(x, 0.3, 9).observed_count(), 300u);
}

TEST(PointMask, CountRoundsAmongObserved) {
  Rng rng(7);
  SeriesMatrix x = random_series(rng, 3, 7);
  x.set_missing(0, 0);
  x.set_missing(2, 5);
  const std::size_t observed = x.observed_count();
  const SeriesMatrix m = mask_point_mcar(x, 0.25, 4);
  EXPECT_EQ(observed - m.observed_count(), static_cast<std::size_t>(std::llround(0.25 * 19)));
  EXPECT_FALSE(m.observed(0, 0));
  EXPECT_FALSE(m.observed(2, 5));
}

TEST(PointMask, SeedDeterminismAndMonotonicity) {
  Rng rng(8);
  const SeriesMatrix x = random_series(rng, 4, 50);
  EXPECT_EQ(mask_point_mcar(x, 0.2, 5).mask, mask_point_mcar(x, 0.2, 5).mask);
  SeriesMatrix prev = x;
  for (double ratio : {0.1, 0.2, 0.3, 0.45, 0.6}) {
    const SeriesMatrix m = mask_point_mcar(x, ratio, 5);
    for (std::size_t i = 0; i < m.mask.size(); ++i)
      if (prev.mask[i] == 0.0) EXPECT_EQ(m.mask[i], 0.0);
    prev = m;
  }
}

TEST(BlockMask, RatioZeroIsIdentity) {
  Rng rng(9);
  const SeriesMatrix x = random_series(rng, 3, 30);
  EXPECT_EQ(mask_block_mcar(x, 0.0, {}, 1).mask, x.mask);
}

TEST(BlockMask, AchievedFractionAndRunLengths) {
  Rng rng(10);
  const SeriesMatrix x = random_series(rng, 5, 200);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const SeriesMatrix m = mask_block_mcar(x, 0.3, {4, 8}, seed);
    const double frac =
        static_cast<double>(x.observed_count() - m.observed_count()) / static_cast<double>(x.observed_count());
    EXPECT_GE(frac, 0.30);
    EXPECT_LE(frac, 0.30 + 8.0 / 200.0);
    for (std::size_t n = 0; n < 5; ++n) {
      std::size_t t = 0;
      while (t < 200) {
        if (m.observed(n, t)) {
          ++t;
          continue;
        }
        std::size_t end = t;
        while (end < 200 && !m.observed(n, end)) ++end;
        const std::size_t len = end - t;
        EXPECT_LE(len, 8u);
        if (end < 200) EXPECT_GE(len, 4u);
        t = end;
      }
    }
  }
}

TEST(BlockMask, NeverUnmasks) {
  Rng rng(11);
  SeriesMatrix x = random_series(rng, 3, 60);
  for (std::size_t t = 0; t < 60; t += 7) x.set_missing(1, t);
  const SeriesMatrix m = mask_block_mcar(x, 0.2, {2, 4}, 3);
  for (std::size_t i = 0; i < x.mask.size(); ++i)
    if (x.mask[i] == 0.0) EXPECT_EQ(m.mask[i], 0.0);
}

TEST(BlockMask, UnsatisfiableLengths) {
  Rng rng(12);
  const SeriesMatrix x = random_series(rng, 2, 10);
  EXPECT_THROW(mask_block_mcar(x, 0.2, {5, 4}, 1), ConfigError);
  EXPECT_THROW(mask_block_mcar(x, 0.2, {4, 20}, 1), ConfigError);
  EXPECT_THROW(mask_block_mcar(x, 1.0, {2, 4}, 1), ConfigError);
}

TEST(Standardizer, MomentsOnTrainingRange) {
  Rng rng(13);
  const SeriesMatrix x = random_series(rng, 3, 100);
  const Standardizer s = Standardizer::fit(x, {0, 70});
  const SeriesMatrix z = s.transform(x);
  for (std::size_t n = 0; n < 3; ++n) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t t = 0; t < 70; ++t) mean += z.values(n, t) / 70.0;
    for (std::size_t t = 0; t < 70; ++t) sq += (z.values(n, t) - mean) * (z.values(n, t) - mean);
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(sq / 70.0), 1.0, 1e-10);
  }
}

TEST(Standardizer, ConstantSensorMapsToZero) {
  SeriesMatrix x(1, 10);
  x.values.fill(4.5);
  const Standardizer s = Standardizer::fit(x, {0, 10});
  EXPECT_EQ(s.stddev()[0], Standardizer::kStdFloor);
  const SeriesMatrix z = s.transform(x);
  for (double v : z.values.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Standardizer, RoundTrip) {
  Rng rng(14);
  SeriesMatrix x = random_series(rng, 3, 50);
  x.set_missing(2, 3);
  const Standardizer s = Standardizer::fit(x, {0, 35});
  const SeriesMatrix back = s.inverse(s.transform(x));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t t = 0; t < 50; ++t)
      if (x.observed(n, t)) EXPECT_NEAR(back.values(n, t), x.values(n, t), 1e-10);
  EXPECT_EQ(s.transform(x).values(2, 3), 0.0);
}

TEST(Standardizer, NoLeakageFromTestRange) {
  Rng rng(15);
  SeriesMatrix x = random_series(rng, 3, 100);
  const Standardizer a = Standardizer::fit(x, {0, 70});
  for (std::size_t t = 70; t < 100; ++t) x.values(1, t) += 1e6 * rng.uniform();
  x.set_missing(2, 90);
  const Standardizer b = Standardizer::fit(x, {0, 70});
  EXPECT_EQ(a.mean(), b.mean());
  EXPECT_EQ(a.stddev(), b.stddev());
}

TEST(Standardizer, TooFewObservationsNamesSensor) {
  SeriesMatrix x(2, 5);
  x.sensor_names = {"good", "bad"};
  for (std::size_t t = 0; t < 5; ++t) x.values(0, t) = static_cast<double>(t);
  for (std::size_t t = 1; t < 5; ++t) x.set_missing(1, t);
  try {
    Standardizer::fit(x, {0, 5});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
}

TEST(Synthetic, ShapesAndDeterminism) {
  const SeriesMatrix a = synthetic_coupled(300, 7), b = synthetic_coupled(300, 7);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.sensors(), 4u);
  EXPECT_EQ(a.steps(), 300u);
  // Sensor 2 is sensor 0 lagged by 12 steps, plus small noise.
  double err = 0.0;
  for (std::size_t t = 12; t < 300; ++t) err += std::abs(a.values(2, t) - a.values(0, t - 12));
  EXPECT_LT(err / 288.0, 0.2);

  num::Tensor sigma;
  const SeriesMatrix h = synthetic_heteroscedastic(1000, 3, &sigma, 0.1, 0.6, 250, 2);
  EXPECT_EQ(sigma.shape(), (num::Shape{2, 1000}));
  for (double v : sigma.storage()) EXPECT_TRUE(v == 0.1 || v == 0.6);
  EXPECT_EQ(toy_sine(48, 2, 2.0).values(0, 6), 2.0 * toy_sine(48, 2, 1.0).values(0, 6));
}

TEST(Manifest, RoundTrip) {
  TempDir dir;
  Manifest m{.name = "toy", .path = "toy.csv", .granularity = "5min", .split = {0.6, 0.2, 0.2}, .window = 8,
             .horizon = 4};
  save_manifest(dir.file("m.json"), m);
  const Manifest back = load_manifest(dir.file("m.json"));
  EXPECT_EQ(back.name, "toy");
  EXPECT_EQ(back.window, 8u);
  EXPECT_EQ(back.horizon, 4u);
  EXPECT_DOUBLE_EQ(back.split.val, 0.2);
}

}  // namespace
}  // namespace stproph::data
