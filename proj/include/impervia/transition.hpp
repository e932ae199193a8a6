#pragma once

// LULC cross-tabulation, collapse into pervious / impervious columns and
// per-pixel imperviousness likelihood lookup.

#include <array>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "impervia/errors.hpp"
#include "impervia/raster.hpp"

namespace impervia::transition {

/// Dense C x C count matrix, row = class at t, column = class at t+1.
struct CountMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit CountMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}
  std::uint64_t& operator()(std::size_t i, std::size_t j) { return counts[i * classes + j]; }
  std::uint64_t operator()(std::size_t i, std::size_t j) const { return counts[i * classes + j]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }

  CountMatrix& operator+=(const CountMatrix& o) {
    if (o.classes != classes) throw ShapeError("count matrices of different class counts");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
};

/// C x 2 real matrix: column 0 pervious, column 1 impervious.
struct TwoColumn {
  std::vector<std::array<double, 2>> rows;
  std::size_t classes() const { return rows.size(); }
};

struct TransitionTables {
  CountMatrix counts;
  TwoColumn collapsed;
  TwoColumn probs;
  std::set<std::size_t> absent_classes;
};

inline CountMatrix crosstab(const Grid& lc_t, const Grid& lc_t1, std::size_t classes) {
  require_same_shape(lc_t, lc_t1, "crosstab");
  if (lc_t.kind != GridKind::Categorical || lc_t1.kind != GridKind::Categorical)
    throw KindError("crosstab needs categorical grids");
  CountMatrix m(classes);
  for (std::size_t p = 0; p < lc_t.size(); ++p) {
    if (!lc_t.valid[p] || !lc_t1.valid[p]) continue;
    const auto a = static_cast<std::size_t>(lc_t.values[p]);
    const auto b = static_cast<std::size_t>(lc_t1.values[p]);
    if (a >= classes || b >= classes)
      throw RangeError("class index " + std::to_string(a >= classes ? a : b) + " >= " +
                       std::to_string(classes));
    ++m(a, b);
  }
  return m;
}

/// Column 0 sums transitions into pervious classes; column 1 is the
/// developed-weighted sum of transitions into developed classes.
inline TwoColumn collapse(const CountMatrix& counts, const LulcLegend& legend) {
  if (legend.class_count() != counts.classes)
    throw SchemaError("legend has " + std::to_string(legend.class_count()) + " classes, counts have " +
                      std::to_string(counts.classes));
  TwoColumn out;
  out.rows.assign(counts.classes, {0.0, 0.0});
  for (std::size_t i = 0; i < counts.classes; ++i)
    for (std::size_t j = 0; j < counts.classes; ++j) {
      const auto n = static_cast<double>(counts(i, j));
      if (legend.pervious[j]) out.rows[i][0] += n;
      else out.rows[i][1] += *legend.developed_weight[j] * n;
    }
  return out;
}

/// Row-normalizes; rows without support become [1, 0] and are reported in
/// `absent`.
inline TwoColumn normalize(const TwoColumn& collapsed, std::set<std::size_t>* absent = nullptr) {
  TwoColumn out;
  out.rows.resize(collapsed.rows.size());
  for (std::size_t i = 0; i < collapsed.rows.size(); ++i) {
    const auto& r = collapsed.rows[i];
    const double s = r[0] + r[1];
    if (s > 0.0) {
      out.rows[i] = {r[0] / s, r[1] / s};
    } else {
      out.rows[i] = {1.0, 0.0};
      if (absent) absent->insert(i);
    }
  }
  return out;
}

inline TransitionTables fit(const Grid& lc_t, const Grid& lc_t1, const LulcLegend& legend) {
  TransitionTables t;
  t.counts = crosstab(lc_t, lc_t1, legend.class_count());
  t.collapsed = collapse(t.counts, legend);
  t.probs = normalize(t.collapsed, &t.absent_classes);
  return t;
}

/// Per-pixel lookup of the impervious column. Output values are
/// probabilities in [0,1], not percent.
inline Grid likelihood_map(const Grid& lc, const TwoColumn& probs) {
  if (lc.kind != GridKind::Categorical) throw KindError("likelihood_map needs a categorical grid");
  Grid out = Grid::continuous(lc.width, lc.height, lc.pixel_size);
  for (std::size_t p = 0; p < lc.size(); ++p) {
    if (!lc.valid[p]) {
      out.set_nodata(p);
      continue;
    }
    const auto c = static_cast<std::size_t>(lc.values[p]);
    if (c >= probs.rows.size())
      throw RangeError("class index " + std::to_string(c) + " outside transition table");
    out.values[p] = probs.rows[c][1];
  }
  return out;
}

struct LikelihoodSeries {
  std::vector<Grid> maps;
  std::vector<TransitionTables> tables;  // one per consecutive pair
};

/// N land-cover maps yield N likelihood maps: one per consecutive pair, plus a
/// final map that looks up lc_N in the last pair's probabilities.
inline LikelihoodSeries likelihood_series(const std::vector<Grid>& lcs, const LulcLegend& legend) {
  if (lcs.size() < 2) throw RangeError("likelihood_series needs at least 2 land-cover maps");
  LikelihoodSeries s;
  for (std::size_t k = 0; k + 1 < lcs.size(); ++k) {
    s.tables.push_back(fit(lcs[k], lcs[k + 1], legend));
    s.maps.push_back(likelihood_map(lcs[k], s.tables.back().probs));
  }
  s.maps.push_back(likelihood_map(lcs.back(), s.tables.back().probs));
  return s;
}

/// Plain-text audit table, one "p_pervious p_impervious" row per class.
inline void write_probs(std::ostream& os, const TwoColumn& probs) {
  char buf[64];
  for (const auto& r : probs.rows) {
    std::snprintf(buf, sizeof buf, "%.9g %.9g\n", r[0], r[1]);
    os << buf;
  }
}

}  // namespace impervia::transition
