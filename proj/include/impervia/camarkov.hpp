#pragma once

// CA-Markov baseline: Markov projection of class areas, neighbourhood
// suitability and greedy multiplier-driven allocation.

#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "impervia/errors.hpp"
#include "impervia/raster.hpp"

namespace impervia::ca {

inline constexpr std::size_t kClasses = 8;
enum Class : std::uint8_t { Water, Developed, Barren, Forest, Shrubland, Herbaceous, Cultivated, Wetlands };

inline const std::array<const char*, kClasses>& class_names() {
  static const std::array<const char*, kClasses> n{"Water",      "Developed",  "Barren",     "Forest",
                                                   "Shrubland",  "Herbaceous", "Cultivated", "Wetlands"};
  return n;
}

/// NLCD 16-class index (canonical legend order) to the 8 aggregate classes.
inline const std::array<std::uint8_t, 16>& nlcd_to_ca() {
  static const std::array<std::uint8_t, 16> m{
      Water,      Water,                                       // open water, ice/snow
      Developed,  Developed, Developed, Developed,             // open .. high intensity
      Barren,                                                  //
      Forest,     Forest,    Forest,                           // deciduous, evergreen, mixed
      Shrubland,  Herbaceous,                                  //
      Cultivated, Cultivated,                                  // pasture/hay, crops
      Wetlands,   Wetlands,                                    // woody, emergent
  };
  return m;
}

inline Grid reclass_nlcd(const Grid& lc16) {
  if (lc16.kind != GridKind::Categorical) throw KindError("reclass needs a categorical grid");
  Grid out = lc16;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!out.valid[i]) continue;
    const auto c = lc16.class_at(i);
    if (c >= 16) throw RangeError("NLCD class index " + std::to_string(c) + " >= 16");
    out.values[i] = nlcd_to_ca()[c];
  }
  return out;
}

using Matrix = std::vector<std::vector<double>>;

struct MarkovModel {
  std::size_t classes = kClasses;
  Matrix P;
  std::vector<double> areas;    // cells per class in lc_b
  std::vector<double> targets;  // areas * P
};

inline std::vector<double> class_areas(const Grid& lc, std::size_t classes) {
  std::vector<double> a(classes, 0.0);
  for (std::size_t i = 0; i < lc.size(); ++i) {
    if (!lc.valid[i]) continue;
    const auto c = static_cast<std::size_t>(lc.values[i]);
    if (c >= classes) throw RangeError("class index " + std::to_string(c) + " >= " + std::to_string(classes));
    a[c] += 1.0;
  }
  return a;
}

inline std::vector<double> project(const std::vector<double>& areas, const Matrix& P) {
  std::vector<double> t(P.size(), 0.0);
  for (std::size_t i = 0; i < P.size(); ++i)
    for (std::size_t j = 0; j < P.size(); ++j) t[j] += areas[i] * P[i][j];
  return t;
}

inline MarkovModel fit_markov(const Grid& lc_a, const Grid& lc_b, std::size_t classes = kClasses) {
  require_same_shape(lc_a, lc_b, "fit_markov");
  if (lc_a.kind != GridKind::Categorical || lc_b.kind != GridKind::Categorical)
    throw KindError("fit_markov needs categorical grids");
  MarkovModel m;
  m.classes = classes;
  std::vector<std::vector<std::uint64_t>> counts(classes, std::vector<std::uint64_t>(classes, 0));
  for (std::size_t p = 0; p < lc_a.size(); ++p) {
    if (!lc_a.valid[p] || !lc_b.valid[p]) continue;
    const auto a = static_cast<std::size_t>(lc_a.values[p]);
    const auto b = static_cast<std::size_t>(lc_b.values[p]);
    if (a >= classes || b >= classes)
      throw RangeError("class index " + std::to_string(std::max(a, b)) + " >= " + std::to_string(classes));
    ++counts[a][b];
  }
  m.P.assign(classes, std::vector<double>(classes, 0.0));
  for (std::size_t i = 0; i < classes; ++i) {
    double s = 0.0;
    for (auto c : counts[i]) s += static_cast<double>(c);
    if (s == 0.0) {
      m.P[i][i] = 1.0;
      continue;
    }
    for (std::size_t j = 0; j < classes; ++j) m.P[i][j] = static_cast<double>(counts[i][j]) / s;
  }
  m.areas = class_areas(lc_b, classes);
  m.targets = project(m.areas, m.P);
  return m;
}

inline constexpr double kSuitabilityFloor = 1e-6;

/// suitability[c][p] = max(P[lc(p)][c] * neigh_c(p), floor), neigh_c the
/// fraction of valid window pixels of class c. Windows are truncated at the
/// edges. Nodata pixels get 0 for every class.
inline std::vector<std::vector<double>> suitability(const Grid& lc, const Matrix& P, std::size_t window = 5,
                                                    double floor = kSuitabilityFloor) {
  if (window % 2 == 0) throw RangeError("suitability window must be odd");
  if (lc.kind != GridKind::Categorical) throw KindError("suitability needs a categorical grid");
  const std::size_t K = P.size(), W = lc.width, H = lc.height;
  // Per-class summed-area tables over (H+1) x (W+1).
  std::vector<std::vector<std::uint32_t>> sat(K + 1, std::vector<std::uint32_t>((H + 1) * (W + 1), 0));
  auto at = [W](std::size_t y, std::size_t x) { return y * (W + 1) + x; };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto i = y * W + x;
      const bool v = lc.valid[i];
      const auto c = v ? static_cast<std::size_t>(lc.values[i]) : K;
      if (v && c >= K) throw RangeError("class index " + std::to_string(c) + " outside transition matrix");
      for (std::size_t k = 0; k <= K; ++k) {
        const std::uint32_t self = (k == K) ? (v ? 1 : 0) : (v && c == k ? 1 : 0);
        sat[k][at(y + 1, x + 1)] = self + sat[k][at(y, x + 1)] + sat[k][at(y + 1, x)] - sat[k][at(y, x)];
      }
    }
  const std::size_t r = window / 2;
  std::vector<std::vector<double>> s(K, std::vector<double>(lc.size(), 0.0));
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto i = y * W + x;
      if (!lc.valid[i]) continue;
      const std::size_t y0 = y >= r ? y - r : 0, x0 = x >= r ? x - r : 0;
      const std::size_t y1 = std::min(H, y + r + 1), x1 = std::min(W, x + r + 1);
      auto box = [&](std::size_t k) {
        return static_cast<double>(sat[k][at(y1, x1)] - sat[k][at(y0, x1)] - sat[k][at(y1, x0)] + sat[k][at(y0, x0)]);
      };
      const double n = box(K);
      const auto from = static_cast<std::size_t>(lc.values[i]);
      for (std::size_t c = 0; c < K; ++c) s[c][i] = std::max(P[from][c] * box(c) / n, floor);
    }
  return s;
}

struct AllocationConfig {
  double eta = 0.1;
  double rel_tolerance = 0.005;
  std::size_t max_iterations = 500;
};

struct AllocationResult {
  Grid map;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> multipliers;
  std::vector<double> deficits;  // target - allocated
};

inline bool within_tolerance(const std::vector<double>& deficits, const std::vector<double>& targets,
                             double rel_tolerance) {
  for (std::size_t c = 0; c < targets.size(); ++c)
    if (std::abs(deficits[c]) > std::max(1.0, rel_tolerance * targets[c])) return false;
  return true;
}

/// Greedy allocation: argmax of multiplier * suitability per cell, then
/// multiplier_c *= exp(eta * deficit_c / target_c). Stops once every class is
/// within max(1, rel_tolerance * target) cells of its target.
inline AllocationResult allocate(const Grid& like, const std::vector<std::vector<double>>& suit,
                                 const std::vector<double>& targets, const AllocationConfig& cfg = {}) {
  const std::size_t K = suit.size();
  if (targets.size() != K) throw ShapeError("allocate: target count does not match class count");
  double cells = 0.0, tsum = 0.0;
  for (auto v : like.valid) cells += v ? 1.0 : 0.0;
  for (double t : targets) {
    if (!(t >= 0.0)) throw RangeError("allocate: negative target");
    tsum += t;
  }
  if (std::abs(tsum - cells) > 1e-6 * std::max(1.0, cells))
    throw RangeError("allocate: targets sum to " + std::to_string(tsum) + ", grid has " + std::to_string(cells) +
                     " valid cells");

  AllocationResult r;
  r.map = Grid::categorical(like.width, like.height, like.pixel_size);
  r.multipliers.assign(K, 1.0);
  r.deficits.assign(K, 0.0);
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    std::vector<double> alloc(K, 0.0);
    for (std::size_t i = 0; i < like.size(); ++i) {
      if (!like.valid[i]) {
        r.map.set_nodata(i);
        continue;
      }
      std::size_t best = 0;
      double bv = r.multipliers[0] * suit[0][i];
      for (std::size_t c = 1; c < K; ++c) {
        const double v = r.multipliers[c] * suit[c][i];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      r.map.values[i] = static_cast<double>(best);
      alloc[best] += 1.0;
    }
    r.iterations = it + 1;
    for (std::size_t c = 0; c < K; ++c) r.deficits[c] = targets[c] - alloc[c];
    if (within_tolerance(r.deficits, targets, cfg.rel_tolerance)) {
      r.converged = true;
      break;
    }
    for (std::size_t c = 0; c < K; ++c)
      r.multipliers[c] *= std::exp(cfg.eta * r.deficits[c] / std::max(targets[c], 1.0));
  }
  return r;
}

/// True where `after` is Developed and `before` is not.
inline Grid imperv_change_binary(const Grid& before, const Grid& after) {
  require_same_shape(before, after, "imperv_change_binary");
  Grid out = Grid::categorical(before.width, before.height, before.pixel_size);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!before.valid[i] || !after.valid[i]) {
      out.set_nodata(i);
      continue;
    }
    out.values[i] = (after.class_at(i) == Developed && before.class_at(i) != Developed) ? 1.0 : 0.0;
  }
  return out;
}

struct Forecast {
  MarkovModel model;
  AllocationResult allocation;
};

/// Fits P on (lc_a, lc_b) and allocates the projected areas starting from
/// lc_b's neighbourhoods.
inline Forecast forecast(const Grid& lc_a, const Grid& lc_b, std::size_t window = 5, const AllocationConfig& cfg = {}) {
  Forecast f;
  f.model = fit_markov(lc_a, lc_b);
  f.allocation = allocate(lc_b, suitability(lc_b, f.model.P, window), f.model.targets, cfg);
  return f;
}

inline void write_matrix(std::ostream& os, const Matrix& P) {
  char buf[32];
  for (const auto& row : P) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%s%.9f", j ? " " : "", row[j]);
      os << buf;
    }
    os << "\n";
  }
}

}  // namespace impervia::ca
