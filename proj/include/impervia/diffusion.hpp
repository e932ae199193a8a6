#pragma once

// Linear noise schedule, closed-form forward noising, the noise-prediction
// objective, DDPM / DDIM samplers and the training loop (Adam + EMA).
//
// Samplers are written against any callable `eps = predict(x_t, step)` so
// they can be driven by the denoiser or by an analytic predictor.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "impervia/autograd.hpp"
#include "impervia/denoiser.hpp"
#include "impervia/errors.hpp"

namespace impervia::diffusion {

/// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{s<=t} alpha_s for
/// t = 1..T (stored at index t-1).
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta, alpha, alpha_bar;

  double abar(int t) const { return t == 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t - 1)); }
  double b(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
  double a(int t) const { return alpha.at(static_cast<std::size_t>(t - 1)); }
};

inline NoiseSchedule make_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  if (steps < 1) throw RangeError("schedule needs T >= 1");
  if (!(beta_start > 0.0) || beta_start > beta_end || !(beta_end < 1.0))
    throw RangeError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  double prod = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

template <class Real>
using Patch = nn::Tensor<Real>;

template <class Real>
Patch<Real> gaussian_like(const std::vector<int>& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Patch<Real> p(shape);
  for (auto& v : p.data) v = static_cast<Real>(n(rng));
  return p;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <class Real>
Patch<Real> q_sample(const Patch<Real>& x0, int t, const Patch<Real>& eps, const NoiseSchedule& s) {
  if (x0.shape != eps.shape) throw ShapeError("q_sample: noise shape differs from x0");
  if (t < 1 || t > s.steps) throw RangeError("q_sample: step " + std::to_string(t) + " outside [1,T]");
  const double ab = s.abar(t);
  const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
  Patch<Real> xt(x0.shape);
  for (std::size_t i = 0; i < x0.numel(); ++i) xt[i] = static_cast<Real>(c0 * x0[i] + c1 * eps[i]);
  return xt;
}

template <class Real>
double denoise_loss(const Patch<Real>& predicted, const Patch<Real>& truth) {
  if (predicted.shape != truth.shape) throw ShapeError("denoise_loss: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < truth.numel(); ++i) {
    const double d = static_cast<double>(predicted[i]) - static_cast<double>(truth[i]);
    s += d * d;
  }
  return s / static_cast<double>(truth.numel());
}

template <class Real>
void clamp_unit(Patch<Real>& p) {
  for (auto& v : p.data) v = std::clamp(v, Real(-1), Real(1));
}

/// Ancestral sampling from x_T ~ N(0, I). Each step uses the posterior mean
///   (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)
/// and the posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
/// Clamping to [-1,1] happens once, at the end.
template <class Real, class Predict>
Patch<Real> ddpm_sample(const Predict& predict, const NoiseSchedule& s, const std::vector<int>& shape,
                        std::mt19937_64& rng, bool clamp = true) {
  auto x = gaussian_like<Real>(shape, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = s.steps; t >= 1; --t) {
    const Patch<Real> eps = predict(x, t);
    const double ab = s.abar(t), ab_prev = s.abar(t - 1);
    const double coef = s.b(t) / std::sqrt(1.0 - ab);
    const double inv_sqrt_a = 1.0 / std::sqrt(s.a(t));
    const double sigma = t > 1 ? std::sqrt((1.0 - ab_prev) / (1.0 - ab) * s.b(t)) : 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      double v = inv_sqrt_a * (x[i] - coef * eps[i]);
      if (t > 1) v += sigma * n(rng);
      x[i] = static_cast<Real>(v);
    }
  }
  if (clamp) clamp_unit(x);
  return x;
}

/// Evenly spaced step subsequence tau_1 < ... < tau_S = T with
/// tau_i = floor(i T / S).
inline std::vector<int> ddim_timesteps(int total, int steps) {
  if (steps < 1 || steps > total) throw RangeError("DDIM steps must be in [1, T]");
  std::vector<int> tau;
  for (int i = 1; i <= steps; ++i)
    tau.push_back(static_cast<int>((static_cast<long long>(i) * total) / steps));
  return tau;
}

/// DDIM trajectory over `ddim_timesteps(T, steps)`. With eta = 0 the only
/// randomness is x_T; eta = 1 with steps = T reproduces the DDPM posterior
/// variance. With `clamp`, every predicted x0 is clipped to [-1,1] and the
/// noise estimate is re-derived from it, which keeps early high-noise steps
/// from amplifying small noise errors into large offsets.
template <class Real, class Predict>
Patch<Real> ddim_sample(const Predict& predict, const NoiseSchedule& s, const std::vector<int>& shape, int steps,
                        double eta, std::mt19937_64& rng, bool clamp = true) {
  if (eta < 0.0 || eta > 1.0) throw RangeError("DDIM eta must be in [0,1]");
  const auto tau = ddim_timesteps(s.steps, steps);
  auto x = gaussian_like<Real>(shape, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t k = tau.size(); k-- > 0;) {
    const int t = tau[k];
    const int t_prev = k == 0 ? 0 : tau[k - 1];
    const Patch<Real> eps = predict(x, t);
    const double ab = s.abar(t), ab_prev = s.abar(t_prev);
    const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    for (std::size_t i = 0; i < x.numel(); ++i) {
      double x0 = (x[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
      double e = eps[i];
      if (clamp) {
        x0 = std::clamp(x0, -1.0, 1.0);
        e = (x[i] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
      }
      double v = std::sqrt(ab_prev) * x0 + dir * e;
      if (sigma > 0.0) v += sigma * n(rng);
      x[i] = static_cast<Real>(v);
    }
  }
  if (clamp) clamp_unit(x);
  return x;
}

/// Binds a denoiser and one conditioning tensor into a sampler predictor.
template <class Real>
auto model_predictor(const Denoiser<Real>& model, const nn::Tensor<Real>& cond) {
  return [&model, &cond](const Patch<Real>& x, int t) { return model.forward(x, t, cond); };
}

/// Independent generator for (seed, tile, draw), stable across thread
/// counts and iteration orders.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t tile, std::uint64_t draw) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tile), static_cast<std::uint32_t>(tile >> 32),
                    static_cast<std::uint32_t>(draw), static_cast<std::uint32_t>(draw >> 32)};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int steps = 20000;
  int batch = 8;
  double lr = 3e-4;
  double ema = 0.99;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int threads = 1;

  void check() const {
    if (steps < 0) throw ConfigError("train steps must be >= 0");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (lr < 0) throw ConfigError("learning rate must be >= 0");
    if (ema < 0 || ema > 1) throw ConfigError("ema must be in [0,1]");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

/// Conditioning [2N,S,S] and clean target x0 [1,S,S] in [-1,1]. `weight` is
/// the relative sampling probability of the pair.
template <class Real>
struct TrainingPair {
  nn::Tensor<Real> cond;
  nn::Tensor<Real> target;
  double weight = 1.0;
};

template <class Real>
struct TrainResult {
  ParamSet<Real> ema;
  std::vector<double> loss_history;  // per step
};

/// Adam without weight decay.
template <class Real>
class Adam {
 public:
  Adam(const ParamSet<Real>& like, double lr, double b1, double b2, double eps)
      : m_(like.zeros_like()), v_(like.zeros_like()), lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

  void step(ParamSet<Real>& params, const ParamSet<Real>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& w = params.tensors[p].data;
      auto& m = m_.tensors[p].data;
      auto& v = v_.tensors[p].data;
      const auto& g = grads.tensors[p].data;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = static_cast<Real>(b1_ * m[i] + (1.0 - b1_) * g[i]);
        v[i] = static_cast<Real>(b2_ * v[i] + (1.0 - b2_) * g[i] * g[i]);
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        w[i] = static_cast<Real>(w[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  ParamSet<Real> m_, v_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

/// ema <- rate * ema + (1 - rate) * params
template <class Real>
void ema_update(ParamSet<Real>& ema, const ParamSet<Real>& params, double rate) {
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params.tensors[p].numel(); ++i)
      ema.tensors[p][i] = static_cast<Real>(rate * ema.tensors[p][i] + (1.0 - rate) * params.tensors[p][i]);
}

/// Noise-prediction training. Each step draws a batch (weighted by
/// `TrainingPair::weight`), a uniform step t in [1,T] and Gaussian noise per
/// item, then applies one Adam update and one EMA update. Deterministic in
/// `cfg.seed`. `on_step(step, loss)` is called after every update.
template <class Real>
TrainResult<Real> train(Denoiser<Real>& model, const std::vector<TrainingPair<Real>>& data, const NoiseSchedule& s,
                        const TrainConfig& cfg,
                        const std::function<void(int, double)>& on_step = {}) {
  cfg.check();
  if (data.empty()) throw RangeError("training dataset is empty");
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> w;
  for (const auto& d : data) w.push_back(d.weight);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  std::uniform_int_distribution<int> step_dist(1, s.steps);

  TrainResult<Real> res;
  res.ema = model.params();
  Adam<Real> adam(model.params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  ParamSet<Real> grads;
  std::vector<NoiseItem<Real>> batch(static_cast<std::size_t>(cfg.batch));
  for (int it = 0; it < cfg.steps; ++it) {
    for (auto& item : batch) {
      const auto& pair = data[pick(rng)];
      const int t = step_dist(rng);
      item.eps = gaussian_like<Real>(pair.target.shape, rng);
      item.x_t = q_sample(pair.target, t, item.eps, s);
      item.step = t;
      item.cond = pair.cond;
    }
    const double loss = loss_and_gradients(model, batch, grads, cfg.threads);
    if (!std::isfinite(loss))
      throw NumericError("training diverged at step " + std::to_string(it) + " (loss " + std::to_string(loss) + ")");
    adam.step(model.params(), grads);
    ema_update(res.ema, model.params(), cfg.ema);
    res.loss_history.push_back(loss);
    if (on_step) on_step(it, loss);
  }
  return res;
}

}  // namespace impervia::diffusion
