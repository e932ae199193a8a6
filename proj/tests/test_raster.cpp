#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "impervia/raster.hpp"
#include "oracles.hpp"

using namespace impervia;

namespace {

std::string bytes_of(const Grid& g) {
  std::ostringstream os;
  write_grid(os, g);
  return os.str();
}

Grid from_bytes(const std::string& s, std::optional<GridKind> k = std::nullopt) {
  std::istringstream is(s);
  return read_grid(is, k);
}

}  // namespace

TEST(Igrd, ContinuousRoundTrip) {
  Grid g = Grid::continuous(2, 2);
  g.values = {0, 50, 100, 25};
  const auto r = from_bytes(bytes_of(g));
  EXPECT_EQ(r.values, (std::vector<double>{0, 50, 100, 25}));
  EXPECT_EQ(r.width, 2u);
  EXPECT_EQ(r.kind, GridKind::Continuous);
  EXPECT_DOUBLE_EQ(r.pixel_size, 30.0);
}

TEST(Igrd, SaveLoadIsByteIdentical) {
  std::mt19937_64 rng(3);
  for (auto g : {oracle::random_percent(7, 5, rng, 0.2), oracle::random_categorical(9, 4, 16, rng, 0.1)}) {
    const auto a = bytes_of(g);
    EXPECT_EQ(bytes_of(from_bytes(a)), a);
  }
}

TEST(Igrd, NodataSurvives) {
  Grid g = Grid::continuous(3, 1);
  g.values = {1, 2, 3};
  g.set_nodata(1);
  const auto r = from_bytes(bytes_of(g));
  EXPECT_EQ(r.valid, (std::vector<std::uint8_t>{1, 0, 1}));
}

TEST(Igrd, BadMagicIsFormatError) {
  auto s = bytes_of(Grid::continuous(1, 1));
  s.replace(0, 4, "XXXX");
  EXPECT_THROW(from_bytes(s), FormatError);
}

TEST(Igrd, BadVersionIsFormatError) {
  auto s = bytes_of(Grid::continuous(1, 1));
  s[4] = 9;
  EXPECT_THROW(from_bytes(s), FormatError);
}

TEST(Igrd, KindMismatchIsSchemaError) {
  const auto s = bytes_of(Grid::categorical(2, 2));
  EXPECT_THROW(from_bytes(s, GridKind::Continuous), SchemaError);
  auto bad = s;
  bad[6] = 7;
  EXPECT_THROW(from_bytes(bad), SchemaError);
}

TEST(Igrd, TruncatedBodyIsIoError) {
  auto s = bytes_of(Grid::continuous(4, 4));
  s.resize(s.size() - 3);
  EXPECT_THROW(from_bytes(s), IoError);
  EXPECT_THROW(from_bytes("IGR"), IoError);
}

TEST(Igrd, GeoTiffIsRejected) { EXPECT_THROW(load_geotiff("x.tif"), FormatError); }

TEST(AsciiGrid, ParsesHeaderAndNodata) {
  std::istringstream is("ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 30\nNODATA_value -9999\n"
                        "1 2 3\n4 -9999 6\n");
  const auto g = read_ascii_grid(is, GridKind::Continuous);
  EXPECT_EQ(g.width, 3u);
  EXPECT_EQ(g.height, 2u);
  EXPECT_EQ(g.values[5], 6.0);
  EXPECT_FALSE(g.valid[4]);
}

TEST(Grid, CheckRejectsOutOfLegendClass) {
  Grid g = Grid::categorical(2, 1);
  g.values = {0, 16};
  EXPECT_THROW(g.check(16), RangeError);
  g.values[1] = 15;
  EXPECT_NO_THROW(g.check(16));
}

TEST(Grid, CheckPercentRange) {
  Grid g = Grid::continuous(2, 1);
  g.values = {0, 100.5};
  EXPECT_THROW(g.check_percent(), RangeError);
}

TEST(Legend, Nlcd16Shape) {
  const auto l = LulcLegend::nlcd16();
  EXPECT_NO_THROW(l.check());
  EXPECT_EQ(l.class_count(), 16u);
  int developed = 0;
  for (std::size_t i = 0; i < 16; ++i) developed += l.developed_weight[i].has_value();
  EXPECT_EQ(developed, 4);
  EXPECT_EQ(l.index_of_code(24), nlcd::kDevHigh);
  EXPECT_EQ(l.index_of_code(99), -1);
}

TEST(Tiling, CountsAndMargins) {
  EXPECT_EQ(tile(Grid::continuous(256, 256), 128).tiles.size(), 4u);
  const auto t = tile(Grid::continuous(300, 300), 128);
  EXPECT_EQ(t.tiles.size(), 4u);
  EXPECT_EQ(t.margin_right, 44u);
  EXPECT_EQ(t.margin_bottom, 44u);
  const auto e = tile(Grid::continuous(100, 100), 128);
  EXPECT_TRUE(e.tiles.empty());
  EXPECT_TRUE(e.warning);
  EXPECT_THROW(tile(Grid::continuous(4, 4), 0), RangeError);
}

TEST(Tiling, NonOverlappingInsideParent) {
  const auto g = Grid::continuous(70, 45);
  const auto t = tile(g, 16);
  std::vector<int> hit(g.size(), 0);
  for (const auto& tl : t.tiles)
    for (std::size_t y = tl.row; y < tl.row + 16; ++y)
      for (std::size_t x = tl.col; x < tl.col + 16; ++x) {
        ASSERT_LT(y, g.height);
        ASSERT_LT(x, g.width);
        ++hit[y * g.width + x];
      }
  for (int h : hit) EXPECT_LE(h, 1);
}

TEST(Tiling, NodataFraction) {
  Grid g = Grid::continuous(4, 4);
  g.set_nodata(0);
  g.set_nodata(1);
  EXPECT_DOUBLE_EQ(tile(g, 2).tiles[0].nodata_fraction, 0.5);
}

TEST(Aggregate, IdentityAndMean) {
  std::mt19937_64 rng(1);
  const auto g = oracle::random_percent(6, 6, rng);
  EXPECT_EQ(aggregate(g, 1).values, g.values);
  Grid s = Grid::continuous(2, 2);
  s.values = {0, 100, 50, 50};
  const auto a = aggregate(s, 2);
  EXPECT_EQ(a.values, std::vector<double>{50});
  EXPECT_DOUBLE_EQ(a.pixel_size, 60.0);
}

TEST(Aggregate, MatchesBlockMeanOracle) {
  std::mt19937_64 rng(2);
  for (int k = 0; k < 20; ++k) {
    const auto g = oracle::random_percent(8, 8, rng, 0.2);
    const auto a = aggregate(g, 4);
    const auto o = oracle::block_means(g, 4);
    for (std::size_t i = 0; i < o.size(); ++i) {
      if (std::isnan(o[i])) EXPECT_FALSE(a.valid[i]);
      else EXPECT_NEAR(a.values[i], o[i], 1e-12);
    }
  }
}

TEST(Aggregate, AllNodataBlock) {
  Grid g = Grid::continuous(2, 2);
  for (std::size_t i = 0; i < 4; ++i) g.set_nodata(i);
  EXPECT_FALSE(aggregate(g, 2).valid[0]);
}

TEST(Aggregate, Errors) {
  EXPECT_THROW(aggregate(Grid::categorical(4, 4), 2), KindError);
  EXPECT_THROW(aggregate(Grid::continuous(6, 6), 4), ShapeError);
}

TEST(Aggregate, MeanPreserving) {
  std::mt19937_64 rng(5);
  for (int k = 0; k < 20; ++k) {
    const auto g = oracle::random_percent(32, 32, rng);
    const auto a = aggregate(g, 8);
    double m1 = 0, m2 = 0;
    for (double v : g.values) m1 += v;
    for (double v : a.values) m2 += v;
    m1 /= static_cast<double>(g.size());
    m2 /= static_cast<double>(a.size());
    EXPECT_NEAR(m1, m2, 1e-9 * m1);
  }
}

TEST(Aggregate, CommutesWithTiling) {
  std::mt19937_64 rng(6);
  const auto g = oracle::random_percent(32, 32, rng, 0.1);
  const auto ts = tile(g, 16);
  const auto parent = aggregate(g, 4);
  for (std::size_t k = 0; k < ts.tiles.size(); ++k) {
    const auto a = aggregate(extract_tile(g, ts, k), 4);
    const auto b = crop(parent, ts.tiles[k].row / 4, ts.tiles[k].col / 4, 4, 4);
    EXPECT_EQ(a.valid, b.valid);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.valid[i]) {
        EXPECT_DOUBLE_EQ(a.values[i], b.values[i]);
      }
  }
}

TEST(Tiling, PasteRestoresParent) {
  std::mt19937_64 rng(8);
  const auto g = oracle::random_percent(32, 32, rng);
  Grid out = Grid::continuous(32, 32);
  const auto ts = tile(g, 8);
  for (std::size_t k = 0; k < ts.tiles.size(); ++k) paste(out, extract_tile(g, ts, k), ts.tiles[k].row, ts.tiles[k].col);
  EXPECT_EQ(out.values, g.values);
}

TEST(ChangeMap, Basics) {
  Grid a = Grid::continuous(1, 1, 30, 10), b = Grid::continuous(1, 1, 30, 35);
  EXPECT_EQ(change_map(a, b).values, std::vector<double>{25});
  EXPECT_EQ(change_map(a, a).values, std::vector<double>{0});
  EXPECT_THROW(change_map(a, Grid::continuous(2, 1)), ShapeError);
  b.set_nodata(0);
  EXPECT_FALSE(change_map(a, b).valid[0]);
}

TEST(ChangeMap, NonDecreasingSeriesGivesNonNegativeChange) {
  std::mt19937_64 rng(9);
  auto a = oracle::random_percent(16, 16, rng);
  auto b = a;
  std::uniform_real_distribution<double> u(0, 5);
  for (auto& v : b.values) v = std::min(100.0, v + u(rng));
  for (double d : change_map(a, b).values) EXPECT_GE(d, 0.0);
}
