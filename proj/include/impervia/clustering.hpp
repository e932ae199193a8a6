#pragma once

// Per-patch temporal change signatures, DTW distance, k-medoids clustering
// and inverse-frequency sampling weights.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "impervia/errors.hpp"
#include "impervia/raster.hpp"

namespace impervia::clustering {

enum class SignatureStat {
  MeanChange,       // mean signed pixel change, percent points
  FractionChanged,  // percent of pixels whose value changed
};

struct TemporalSignature {
  std::string patch_id;
  std::vector<double> values;
};

/// Entry i summarizes imp_{i+1} - imp_i over pixels valid at both years.
inline TemporalSignature signature(const std::vector<Grid>& series, std::string patch_id = {},
                                   SignatureStat stat = SignatureStat::MeanChange) {
  if (series.size() < 2) throw RangeError("signature needs at least 2 timestamps");
  for (const auto& g : series) {
    require_same_shape(series.front(), g, "signature");
    if (g.kind != GridKind::Continuous) throw KindError("signature needs continuous grids");
  }
  TemporalSignature s{std::move(patch_id), {}};
  for (std::size_t k = 0; k + 1 < series.size(); ++k) {
    const auto& a = series[k];
    const auto& b = series[k + 1];
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a.valid[i] || !b.valid[i]) continue;
      const double d = b.values[i] - a.values[i];
      sum += stat == SignatureStat::MeanChange ? d : (d != 0.0 ? 100.0 : 0.0);
      ++n;
    }
    s.values.push_back(n ? sum / static_cast<double>(n) : 0.0);
  }
  return s;
}

/// Classic DTW with |a_i - b_j| local cost and match/insert/delete steps.
inline double dtw(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw RangeError("dtw needs nonempty sequences");
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j)
      cur[j] = std::abs(a[i - 1] - b[j - 1]) + std::min({prev[j - 1], prev[j], cur[j - 1]});
    std::swap(prev, cur);
  }
  return prev[m];
}

using DistanceMatrix = std::vector<std::vector<double>>;

inline DistanceMatrix dtw_matrix(const std::vector<TemporalSignature>& sigs) {
  const std::size_t n = sigs.size();
  DistanceMatrix d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d[i][j] = d[j][i] = dtw(sigs[i].values, sigs[j].values);
  return d;
}

struct ClusterModel {
  std::size_t k = 0;
  std::vector<std::size_t> medoids;     // indices into the signature list, one per cluster
  std::vector<std::size_t> assignment;  // patch -> cluster
  std::vector<double> distance;         // patch -> distance to its medoid
  std::vector<double> ratios;           // cluster share of patches
  std::vector<double> sampling_weights; // per cluster
  std::vector<char> labels;             // 'A'.. by descending mean |medoid signature|
  std::vector<double> objective_history;
  std::size_t persistence_cluster = 0;  // lowest mean |signature|

  double objective() const { return std::accumulate(distance.begin(), distance.end(), 0.0); }
};

namespace detail {

inline double assign(const DistanceMatrix& d, const std::vector<std::size_t>& medoids,
                     std::vector<std::size_t>& assignment, std::vector<double>& dist) {
  const std::size_t n = d.size();
  assignment.assign(n, 0);
  dist.assign(n, 0.0);
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < medoids.size(); ++c)
      if (d[p][medoids[c]] < d[p][medoids[best]]) best = c;
    assignment[p] = best;
    dist[p] = d[p][medoids[best]];
    total += dist[p];
  }
  return total;
}

inline double cost_of(const DistanceMatrix& d, const std::vector<std::size_t>& medoids) {
  double total = 0.0;
  for (std::size_t p = 0; p < d.size(); ++p) {
    double best = std::numeric_limits<double>::infinity();
    for (auto m : medoids) best = std::min(best, d[p][m]);
    total += best;
  }
  return total;
}

}  // namespace detail

inline std::vector<double> sampling_weights(const std::vector<double>& ratios) {
  if (ratios.empty()) throw RangeError("sampling_weights needs at least one ratio");
  std::vector<double> w;
  double s = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw RangeError("sampling_weights: ratio must be positive");
    w.push_back(1.0 / r);
    s += w.back();
  }
  for (auto& v : w) v /= s;
  return w;
}

/// PAM-style k-medoids over a precomputed distance matrix. Initial medoids
/// are k distinct indices drawn with the seeded generator; each iteration
/// applies the single best improving (medoid, non-medoid) swap until none
/// improves the total distance.
inline ClusterModel cluster_matrix(const DistanceMatrix& d, const std::vector<TemporalSignature>& sigs,
                                   std::size_t k, std::uint64_t seed, std::size_t max_iter = 1000) {
  const std::size_t n = d.size();
  if (k == 0) throw RangeError("cluster: k must be positive");
  if (n < k) throw RangeError("cluster: " + std::to_string(n) + " signatures for k=" + std::to_string(k));
  ClusterModel m;
  m.k = k;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> medoids;
  std::sample(idx.begin(), idx.end(), std::back_inserter(medoids), static_cast<std::ptrdiff_t>(k), rng);

  double cost = detail::cost_of(d, medoids);
  m.objective_history.push_back(cost);
  for (std::size_t it = 0; it < max_iter; ++it) {
    double best = cost;
    std::size_t bi = 0, bj = 0;
    bool found = false;
    for (std::size_t ci = 0; ci < k; ++ci)
      for (std::size_t p = 0; p < n; ++p) {
        if (std::find(medoids.begin(), medoids.end(), p) != medoids.end()) continue;
        auto trial = medoids;
        trial[ci] = p;
        const double c = detail::cost_of(d, trial);
        if (c < best - 1e-12 * std::max(1.0, std::abs(best))) {
          best = c;
          bi = ci;
          bj = p;
          found = true;
        }
      }
    if (!found) break;
    medoids[bi] = bj;
    cost = best;
    m.objective_history.push_back(cost);
  }
  // Medoid order by index keeps cluster numbering independent of swap history.
  std::sort(medoids.begin(), medoids.end());
  m.medoids = medoids;
  detail::assign(d, m.medoids, m.assignment, m.distance);

  m.ratios.assign(k, 0.0);
  for (auto a : m.assignment) m.ratios[a] += 1.0 / static_cast<double>(n);
  m.sampling_weights = sampling_weights(m.ratios);

  std::vector<double> mag(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    const auto& v = sigs[m.medoids[c]].values;
    for (double x : v) mag[c] += std::abs(x);
    if (!v.empty()) mag[c] /= static_cast<double>(v.size());
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mag[a] > mag[b]; });
  m.labels.assign(k, '?');
  for (std::size_t r = 0; r < k; ++r) m.labels[order[r]] = r < 26 ? static_cast<char>('A' + r) : '?';
  m.persistence_cluster = order.back();
  return m;
}

inline ClusterModel cluster(const std::vector<TemporalSignature>& sigs, std::size_t k, std::uint64_t seed) {
  if (sigs.size() < k) throw RangeError("cluster: " + std::to_string(sigs.size()) + " signatures for k=" + std::to_string(k));
  return cluster_matrix(dtw_matrix(sigs), sigs, k, seed);
}

/// Per-patch draw weight: each patch carries its cluster's weight, so a
/// cluster's total draw mass is size * (1/ratio), the same for every cluster.
inline std::vector<double> patch_weights(const ClusterModel& m) {
  std::vector<double> w;
  for (auto a : m.assignment) w.push_back(m.sampling_weights[a]);
  return w;
}

inline void write_assignments_csv(std::ostream& os, const std::vector<TemporalSignature>& sigs,
                                  const ClusterModel& m) {
  os << "patch_id,cluster_label,distance\n";
  char buf[64];
  for (std::size_t p = 0; p < sigs.size(); ++p) {
    std::snprintf(buf, sizeof buf, ",%c,%.9g\n", m.labels[m.assignment[p]], m.distance[p]);
    os << sigs[p].patch_id << buf;
  }
}

inline void write_signatures_csv(std::ostream& os, const std::vector<TemporalSignature>& sigs) {
  char buf[32];
  for (const auto& s : sigs) {
    os << s.patch_id;
    for (double v : s.values) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      os << buf;
    }
    os << "\n";
  }
}

inline void write_weights_csv(std::ostream& os, const ClusterModel& m) {
  os << "cluster_label,ratio,weight\n";
  char buf[96];
  for (std::size_t c = 0; c < m.k; ++c) {
    std::snprintf(buf, sizeof buf, "%c,%.9g,%.9g\n", m.labels[c], m.ratios[c], m.sampling_weights[c]);
    os << buf;
  }
}

}  // namespace impervia::clustering
