#pragma once

// Multi-scale MAE curves, the persistence baseline, null resolution,
// per-seed statistics and binary change confusion metrics.

#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "impervia/errors.hpp"
#include "impervia/numerics.hpp"
#include "impervia/raster.hpp"

namespace impervia::eval {

inline const std::vector<std::size_t>& default_cells() {
  static const std::vector<std::size_t> s{4, 8, 16, 32, 64, 128};
  return s;
}

inline Grid null_forecast(const Grid& past) { return past; }

struct MaeCurve {
  std::vector<double> scales_km;
  std::vector<double> values;

  void check() const {
    if (scales_km.size() != values.size()) throw ShapeError("MAE curve scale/value length mismatch");
    for (std::size_t i = 1; i < scales_km.size(); ++i)
      if (!(scales_km[i] > scales_km[i - 1])) throw RangeError("MAE curve scales must be strictly increasing");
  }
};

/// Running sum of |pred - truth| weighted by the number of valid source pixels
/// behind each aggregated cell. Pooling several tiles adds their sums.
struct MaeAccumulator {
  double abs_sum = 0.0;
  double weight = 0.0;
  double mean() const { return weight > 0.0 ? abs_sum / weight : 0.0; }
};

namespace detail {

inline void mask_joint(Grid& a, Grid& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a.valid[i] || !b.valid[i]) {
      a.set_nodata(i);
      b.set_nodata(i);
    }
}

inline std::vector<double> valid_counts(const Grid& g, std::size_t cell) {
  std::vector<double> n((g.width / cell) * (g.height / cell), 0.0);
  const std::size_t ow = g.width / cell;
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x)
      if (g.valid[y * g.width + x]) n[(y / cell) * ow + x / cell] += 1.0;
  return n;
}

}  // namespace detail

/// Adds one aligned prediction/truth pair to the per-scale accumulators. A
/// pixel counts only when valid in both grids.
inline void accumulate_mae(std::vector<MaeAccumulator>& acc, const Grid& pred, const Grid& truth,
                           const std::vector<std::size_t>& cells) {
  require_same_shape(pred, truth, "mae_curve");
  if (pred.kind != GridKind::Continuous || truth.kind != GridKind::Continuous)
    throw KindError("mae_curve needs continuous grids");
  acc.resize(cells.size());
  Grid p = pred, t = truth;
  detail::mask_joint(p, t);
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto ap = aggregate(p, cells[k]);
    const auto at = aggregate(t, cells[k]);
    const auto n = detail::valid_counts(p, cells[k]);
    for (std::size_t i = 0; i < ap.size(); ++i) {
      if (n[i] == 0.0) continue;
      acc[k].abs_sum += n[i] * std::abs(ap.values[i] - at.values[i]);
      acc[k].weight += n[i];
    }
  }
}

inline MaeCurve curve_from(const std::vector<MaeAccumulator>& acc, const std::vector<std::size_t>& cells,
                           double pixel_size) {
  MaeCurve c;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    c.scales_km.push_back(static_cast<double>(cells[k]) * pixel_size / 1000.0);
    c.values.push_back(acc[k].mean());
  }
  return c;
}

inline MaeCurve mae_curve(const Grid& pred, const Grid& truth,
                          const std::vector<std::size_t>& cells = default_cells()) {
  std::vector<MaeAccumulator> acc;
  accumulate_mae(acc, pred, truth, cells);
  return curve_from(acc, cells, pred.pixel_size);
}

// ---------------------------------------------------------------------------
// Null resolution

enum class NullStatus { Found, BelowRange, AboveRange };

inline const char* to_string(NullStatus s) {
  switch (s) {
    case NullStatus::Found: return "FOUND";
    case NullStatus::BelowRange: return "BELOW_RANGE";
    case NullStatus::AboveRange: return "ABOVE_RANGE";
  }
  return "?";
}

struct NullResolution {
  NullStatus status = NullStatus::AboveRange;
  double km = std::nan("");
  double mae_at_nr = std::nan("");

  std::string str() const {
    if (status != NullStatus::Found) return to_string(status);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", km);
    return buf;
  }
};

/// Both curves are interpolated by not-a-knot cubic splines over linear
/// resolution. The root of model - null is searched in the first knot
/// interval, finest first, where the difference changes sign.
inline NullResolution null_resolution(const MaeCurve& model, const MaeCurve& null) {
  model.check();
  null.check();
  if (model.scales_km != null.scales_km) throw ShapeError("model and null curves use different scales");
  if (model.scales_km.size() < 4) throw RangeError("null resolution needs at least 4 scales");
  const auto& x = model.scales_km;
  const numerics::CubicSpline sm(x, model.values), sn(x, null.values);
  auto diff = [&](double r) { return sm(r) - sn(r); };

  NullResolution out;
  const double d0 = model.values[0] - null.values[0];
  if (d0 < 0.0) {
    out.status = NullStatus::BelowRange;
    return out;
  }
  if (d0 == 0.0) {
    out.status = NullStatus::Found;
    out.km = x[0];
    out.mae_at_nr = null.values[0];
    return out;
  }
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double b = model.values[i + 1] - null.values[i + 1];
    if (b > 0.0) continue;
    out.status = NullStatus::Found;
    out.km = numerics::find_root(diff, x[i], x[i + 1]);
    out.mae_at_nr = sn(out.km);
    return out;
  }
  out.status = NullStatus::AboveRange;
  return out;
}

// ---------------------------------------------------------------------------
// Seed statistics

struct SeedStats {
  Grid mean;
  Grid std;
};

/// Per-pixel mean and population standard deviation. A pixel that is nodata
/// in any input is nodata in both outputs.
inline SeedStats seed_stats(const std::vector<Grid>& preds) {
  if (preds.empty()) throw RangeError("seed_stats needs at least one grid");
  const auto& g0 = preds.front();
  for (const auto& g : preds) {
    require_same_shape(g0, g, "seed_stats");
    if (g.kind != GridKind::Continuous) throw KindError("seed_stats needs continuous grids");
  }
  SeedStats s{Grid::continuous(g0.width, g0.height, g0.pixel_size),
              Grid::continuous(g0.width, g0.height, g0.pixel_size)};
  const double n = static_cast<double>(preds.size());
  for (std::size_t i = 0; i < g0.size(); ++i) {
    bool ok = true;
    double sum = 0.0;
    for (const auto& g : preds) {
      ok = ok && g.valid[i];
      sum += g.values[i];
    }
    if (!ok) {
      s.mean.set_nodata(i);
      s.std.set_nodata(i);
      continue;
    }
    const double m = sum / n;
    double ss = 0.0;
    for (const auto& g : preds) ss += (g.values[i] - m) * (g.values[i] - m);
    s.mean.values[i] = m;
    s.std.values[i] = std::sqrt(ss / n);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Confusion

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;  // percent, 2 decimals
  bool degenerate = false;

  std::uint64_t total() const { return tp + fp + fn + tn; }
};

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

/// Fills precision/recall/F1 from the counts. F1 is computed from the
/// unrounded ratios.
inline ConfusionCounts finish_confusion(ConfusionCounts c) {
  c.degenerate = false;
  const double p_den = static_cast<double>(c.tp + c.fp);
  const double r_den = static_cast<double>(c.tp + c.fn);
  double p = 0.0, r = 0.0, f = 0.0;
  if (p_den > 0) p = static_cast<double>(c.tp) / p_den;
  else c.degenerate = true;
  if (r_den > 0) r = static_cast<double>(c.tp) / r_den;
  else c.degenerate = true;
  if (p + r > 0) f = 2 * p * r / (p + r);
  else c.degenerate = true;
  c.precision = round2(100 * p);
  c.recall = round2(100 * r);
  c.f1 = round2(100 * f);
  return c;
}

inline ConfusionCounts confusion_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn,
                                             std::uint64_t tn = 0) {
  ConfusionCounts c;
  c.tp = tp;
  c.fp = fp;
  c.fn = fn;
  c.tn = tn;
  return finish_confusion(c);
}

/// Boolean grids: any nonzero value is "changed". Cells invalid in either
/// grid are not evaluated.
inline ConfusionCounts confusion(const Grid& pred_change, const Grid& true_change) {
  require_same_shape(pred_change, true_change, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred_change.size(); ++i) {
    if (!pred_change.valid[i] || !true_change.valid[i]) continue;
    const bool p = pred_change.values[i] != 0.0;
    const bool t = true_change.values[i] != 0.0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return finish_confusion(c);
}

/// Strict > 0 threshold on the imperviousness difference.
inline Grid binary_change(const Grid& before, const Grid& after) {
  const auto d = change_map(before, after);
  Grid out = Grid::categorical(d.width, d.height, d.pixel_size);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!d.valid[i]) out.set_nodata(i);
    else out.values[i] = d.values[i] > 0.0 ? 1.0 : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report and curve files

struct EvalReport {
  MaeCurve model;
  MaeCurve null;
  NullResolution nr;
  std::optional<ConfusionCounts> confusion;
};

inline EvalReport make_report(const MaeCurve& model, const MaeCurve& null) {
  return EvalReport{model, null, null_resolution(model, null), std::nullopt};
}

inline void write_curves_csv(std::ostream& os, const MaeCurve& model, const MaeCurve& null) {
  if (model.scales_km != null.scales_km) throw ShapeError("curves use different scales");
  os << "resolution_km,model_mae,null_mae\n";
  char buf[128];
  for (std::size_t i = 0; i < model.scales_km.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6g,%.9g,%.9g\n", model.scales_km[i], model.values[i], null.values[i]);
    os << buf;
  }
}

/// Parses the CSV written by write_curves_csv.
inline std::pair<MaeCurve, MaeCurve> read_curves_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty curve CSV");
  if (line.rfind("resolution_km,model_mae,null_mae", 0) != 0) throw FormatError("unexpected curve CSV header: " + line);
  MaeCurve m, n;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    double r = 0, a = 0, b = 0;
    char c1 = 0, c2 = 0;
    if (!(ls >> r >> c1 >> a >> c2 >> b) || c1 != ',' || c2 != ',')
      throw FormatError("bad curve CSV row at line " + std::to_string(lineno));
    m.scales_km.push_back(r);
    m.values.push_back(a);
    n.scales_km.push_back(r);
    n.values.push_back(b);
  }
  m.check();
  return {m, n};
}

inline void write_report(std::ostream& os, const EvalReport& r) {
  char buf[160];
  os << "null_resolution_km=" << r.nr.str() << "\n";
  if (r.nr.status == NullStatus::Found) {
    std::snprintf(buf, sizeof buf, "mae_at_null_resolution=%.4f\n", r.nr.mae_at_nr);
    os << buf;
  }
  for (std::size_t i = 0; i < r.model.scales_km.size(); ++i) {
    std::snprintf(buf, sizeof buf, "scale_km=%.3f model_mae=%.6f null_mae=%.6f\n", r.model.scales_km[i],
                  r.model.values[i], r.null.values[i]);
    os << buf;
  }
  if (r.confusion) {
    const auto& c = *r.confusion;
    std::snprintf(buf, sizeof buf, "tp=%llu fp=%llu fn=%llu tn=%llu\n", static_cast<unsigned long long>(c.tp),
                  static_cast<unsigned long long>(c.fp), static_cast<unsigned long long>(c.fn),
                  static_cast<unsigned long long>(c.tn));
    os << buf;
    std::snprintf(buf, sizeof buf, "precision=%.2f recall=%.2f f1=%.2f%s\n", c.precision, c.recall, c.f1,
                  c.degenerate ? " degenerate=1" : "");
    os << buf;
  }
}

/// Minimal self-contained SVG line plot of both curves on a log-x axis.
inline void write_svg(std::ostream& os, const MaeCurve& model, const MaeCurve& null, const std::string& title = "") {
  const double W = 480, H = 320, L = 60, R = 20, T = 30, B = 50;
  double lo = 1e300, hi = -1e300;
  for (const auto* c : {&model, &null})
    for (double v : c->values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(hi > lo)) hi = lo + 1.0;
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  const double x0 = std::log(model.scales_km.front()), x1 = std::log(model.scales_km.back());
  auto px = [&](double km) { return x1 > x0 ? L + (std::log(km) - x0) / (x1 - x0) * (W - L - R) : L; };
  auto py = [&](double v) { return T + (hi - v) / (hi - lo) * (H - T - B); };
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" viewBox=\"0 0 %g %g\">\n", W, H,
                W, H);
  os << buf;
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, H - B, W - R,
                H - B);
  os << buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, T, L, H - B);
  os << buf;
  for (double km : model.scales_km) {
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%g\" font-size=\"10\" text-anchor=\"middle\">%.2f</text>\n", px(km),
                  H - B + 14, km);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"11\" text-anchor=\"middle\">resolution (km)</text>\n",
                (L + W - R) / 2, H - 12);
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\">%.3f</text>\n", L - 4,
                py(hi - pad), hi - pad);
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\">%.3f</text>\n", L - 4,
                py(lo + pad), lo + pad);
  os << buf;
  if (!title.empty()) {
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"18\" font-size=\"12\" text-anchor=\"middle\">", W / 2);
    os << buf;
    for (char ch : title) {
      if (ch == '<') os << "&lt;";
      else if (ch == '>') os << "&gt;";
      else if (ch == '&') os << "&amp;";
      else os << ch;
    }
    os << "</text>\n";
  }
  auto poly = [&](const MaeCurve& c, const char* color, const char* label, double ly) {
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < c.values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.1f,%.1f", i ? " " : "", px(c.scales_km[i]), py(c.values[i]));
      os << buf;
    }
    os << "\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"11\" fill=\"%s\">%s</text>\n", W - R - 90, ly,
                  color, label);
    os << buf;
  };
  poly(model, "#1f77b4", "model", T + 12);
  poly(null, "#d62728", "null (persistence)", T + 26);
  os << "</svg>\n";
}

}  // namespace impervia::eval
