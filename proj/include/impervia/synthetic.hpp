#pragma once

// Toy imperviousness series for end-to-end checks: smooth random blobs for
// the first year and a smooth likelihood field that drives growth. Each year
// adds growth * likelihood percent points, clamped to [0,100].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "impervia/denoiser.hpp"
#include "impervia/diffusion.hpp"
#include "impervia/raster.hpp"

namespace impervia::synthetic {

struct Sample {
  ConditioningStack stack;  // N (imperviousness, likelihood) pairs
  Grid truth;               // year after the last conditioning year
};

inline Grid blobs(std::size_t side, std::mt19937_64& rng, int count, double amp_lo, double amp_hi) {
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(side)), radius(2.5, 7.0),
      amp(amp_lo, amp_hi);
  Grid g = Grid::continuous(side, side);
  for (int b = 0; b < count; ++b) {
    const double cy = pos(rng), cx = pos(rng), r = radius(rng), a = amp(rng);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        g.at(y, x) += a * std::exp(-d2 / (2 * r * r));
      }
  }
  return g;
}

inline Sample make_sample(std::size_t side, int n_cond, std::uint64_t seed, double growth = 5.0) {
  std::mt19937_64 rng(seed);
  Sample s;
  auto imp = blobs(side, rng, 5, 30.0, 90.0);
  for (auto& v : imp.values) v = std::clamp(v, 0.0, 100.0);
  auto like = blobs(side, rng, 4, 0.3, 0.6);
  for (auto& v : like.values) v = std::clamp(0.4 + v, 0.0, 1.0);
  auto step = [&](const Grid& g) {
    Grid n = g;
    for (std::size_t i = 0; i < n.size(); ++i) n.values[i] = std::clamp(g.values[i] + growth * like.values[i], 0.0, 100.0);
    return n;
  };
  for (int k = 0; k < n_cond; ++k) {
    s.stack.imperviousness.push_back(imp);
    s.stack.likelihood.push_back(like);
    s.stack.years.push_back(2000 + 3 * k);
    imp = step(imp);
  }
  s.truth = imp;
  return s;
}

template <class Real>
nn::Tensor<Real> to_unit(const Grid& g) {
  nn::Tensor<Real> t({1, static_cast<int>(g.height), static_cast<int>(g.width)});
  for (std::size_t i = 0; i < g.size(); ++i) t[i] = static_cast<Real>(percent_to_unit(g.valid[i] ? g.values[i] : 0.0));
  return t;
}

template <class Real>
Grid to_percent(const nn::Tensor<Real>& t, double pixel_size = 30.0) {
  Grid g = Grid::continuous(static_cast<std::size_t>(t.dim(2)), static_cast<std::size_t>(t.dim(1)), pixel_size);
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = unit_to_percent(static_cast<double>(t[i]));
  return g;
}

template <class Real>
diffusion::TrainingPair<Real> training_pair(const Sample& s) {
  return {s.stack.template to_tensor<Real>(), to_unit<Real>(s.truth), 1.0};
}

}  // namespace impervia::synthetic
