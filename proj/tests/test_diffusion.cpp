#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "impervia/diffusion.hpp"

using namespace impervia;
using namespace impervia::diffusion;
using T = nn::Tensor<double>;

namespace {

struct Moments {
  double mean = 0, std = 0;
};

Moments moments(const T& x) {
  Moments m;
  for (double v : x.data) m.mean += v;
  m.mean /= static_cast<double>(x.numel());
  for (double v : x.data) m.std += (v - m.mean) * (v - m.mean);
  m.std = std::sqrt(m.std / static_cast<double>(x.numel()));
  return m;
}

// Exact noise predictor when every pixel of x0 is independently N(mu, sigma^2):
// E[eps | x_t] = sqrt(1-abar) (x_t - sqrt(abar) mu) / (abar sigma^2 + 1 - abar).
auto gaussian_oracle(const NoiseSchedule& s, double mu, double sigma) {
  return [&s, mu, sigma](const T& x, int t) {
    const double ab = s.abar(t);
    T eps(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i)
      eps[i] = std::sqrt(1 - ab) * (x[i] - std::sqrt(ab) * mu) / (ab * sigma * sigma + 1 - ab);
    return eps;
  };
}

const std::vector<int> kDraws{1, 40, 50};  // 2000 independent pixels

}  // namespace

TEST(Schedule, HandProducts) {
  const auto a = make_schedule(1, 0.1, 0.1);
  ASSERT_EQ(a.alpha_bar.size(), 1u);
  EXPECT_NEAR(a.alpha_bar[0], 0.9, 1e-15);
  const auto b = make_schedule(2, 0.1, 0.3);
  EXPECT_NEAR(b.alpha_bar[0], 0.9, 1e-15);
  EXPECT_NEAR(b.alpha_bar[1], 0.63, 1e-15);
  EXPECT_NEAR(b.beta[1], 0.3, 1e-15);
}

TEST(Schedule, DefaultMonotone) {
  const auto s = make_schedule();
  EXPECT_EQ(s.steps, 1000);
  EXPECT_DOUBLE_EQ(s.beta.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta.back(), 0.02);
  EXPECT_LT(s.alpha_bar.back(), 1e-4);
  for (int t = 1; t < s.steps; ++t) {
    EXPECT_LE(s.beta[t - 1], s.beta[t]);
    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    EXPECT_GT(s.alpha_bar[t], 0.0);
  }
}

TEST(Schedule, RejectsBadParameters) {
  EXPECT_THROW(make_schedule(0), RangeError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.1), RangeError);
  EXPECT_THROW(make_schedule(10, 0.2, 0.1), RangeError);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), RangeError);
}

TEST(QSample, LimitsAndZeroNoise) {
  std::mt19937_64 rng(1);
  const auto x0 = gaussian_like<double>({1, 4, 4}, rng);
  const auto eps = gaussian_like<double>({1, 4, 4}, rng);
  const auto tiny = make_schedule(10, 1e-14, 1e-14);
  const auto xt = q_sample(x0, 10, eps, tiny);
  for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_LT(std::abs(xt[i] - x0[i]), 1e-6);
  const auto s = make_schedule();
  const auto z = q_sample(x0, 300, T(x0.shape), s);
  for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(z[i], std::sqrt(s.abar(300)) * x0[i], 1e-15);
}

TEST(QSample, Errors) {
  const auto s = make_schedule(10);
  EXPECT_THROW(q_sample(T({1, 2, 2}), 1, T({1, 3, 3}), s), ShapeError);
  EXPECT_THROW(q_sample(T({1, 2, 2}), 0, T({1, 2, 2}), s), RangeError);
  EXPECT_THROW(q_sample(T({1, 2, 2}), 11, T({1, 2, 2}), s), RangeError);
}

TEST(QSample, MomentsMatchClosedForm) {
  const auto s = make_schedule();
  std::mt19937_64 rng(2);
  const T x0({1, 100, 100}, 0.6);
  for (int t : {250, 500, 1000}) {
    const auto xt = q_sample(x0, t, gaussian_like<double>(x0.shape, rng), s);
    const auto m = moments(xt);
    EXPECT_NEAR(m.mean, std::sqrt(s.abar(t)) * 0.6, 0.03);
    EXPECT_NEAR(m.std * m.std, 1 - s.abar(t), 0.05 * (1 - s.abar(t)));
  }
}

TEST(DenoiseLoss, Values) {
  std::mt19937_64 rng(3);
  const auto a = gaussian_like<double>({1, 3, 3}, rng), b = gaussian_like<double>({1, 3, 3}, rng);
  EXPECT_EQ(denoise_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(denoise_loss(T({2}, 1.0), T({2}, 0.0)), 1.0);
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_NEAR(denoise_loss(a, b), s / 9, 1e-15);
  EXPECT_THROW(denoise_loss(a, T({1, 2, 2})), ShapeError);
}

TEST(Ddpm, GaussianOracleMoments) {
  const auto s = make_schedule();
  const double mu = 0.3, sigma = 0.2;
  std::mt19937_64 rng(4);
  const auto x = ddpm_sample<double>(gaussian_oracle(s, mu, sigma), s, kDraws, rng, false);
  const auto m = moments(x);
  EXPECT_NEAR(m.mean, mu, 0.05 * mu);
  EXPECT_NEAR(m.std, sigma, 0.05 * sigma);
}

TEST(Ddpm, SingleStepChainAndReproducibility) {
  const auto s1 = make_schedule(1, 0.1, 0.1);
  std::mt19937_64 rng(5);
  const auto x = ddpm_sample<double>(gaussian_oracle(s1, 0, 0.5), s1, {1, 4, 4}, rng);
  for (double v : x.data) EXPECT_TRUE(std::isfinite(v));
  const auto s = make_schedule(50);
  std::mt19937_64 r1(6), r2(6);
  EXPECT_EQ(ddpm_sample<double>(gaussian_oracle(s, 0, 0.5), s, {1, 4, 4}, r1).data,
            ddpm_sample<double>(gaussian_oracle(s, 0, 0.5), s, {1, 4, 4}, r2).data);
}

TEST(Ddim, Timesteps) {
  EXPECT_EQ(ddim_timesteps(10, 10), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
  EXPECT_EQ(ddim_timesteps(1000, 4), (std::vector<int>{250, 500, 750, 1000}));
  EXPECT_EQ(ddim_timesteps(1000, 1), std::vector<int>{1000});
  EXPECT_THROW(ddim_timesteps(10, 11), RangeError);
  EXPECT_THROW(ddim_timesteps(10, 0), RangeError);
}

TEST(Ddim, DeterministicWithZeroEta) {
  const auto s = make_schedule();
  std::mt19937_64 r1(7), r2(7);
  const auto a = ddim_sample<double>(gaussian_oracle(s, 0.1, 0.3), s, {1, 8, 8}, 50, 0.0, r1);
  const auto b = ddim_sample<double>(gaussian_oracle(s, 0.1, 0.3), s, {1, 8, 8}, 50, 0.0, r2);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_LT(std::abs(a[i] - b[i]), 1e-12);
}

TEST(Ddim, FullStepsEtaOneMatchesDdpmMoments) {
  const auto s = make_schedule();
  const double mu = -0.2, sigma = 0.25;
  std::mt19937_64 r1(8), r2(9);
  const auto a = moments(ddim_sample<double>(gaussian_oracle(s, mu, sigma), s, kDraws, s.steps, 1.0, r1, false));
  const auto b = moments(ddpm_sample<double>(gaussian_oracle(s, mu, sigma), s, kDraws, r2, false));
  EXPECT_NEAR(a.mean, b.mean, 0.05 * std::abs(mu));
  EXPECT_NEAR(a.std, b.std, 0.05 * sigma);
  EXPECT_NEAR(a.std, sigma, 0.05 * sigma);
}

TEST(Ddim, ZeroEtaRecoversDataDistribution) {
  const auto s = make_schedule();
  std::mt19937_64 rng(10);
  const auto m = moments(ddim_sample<double>(gaussian_oracle(s, 0.4, 0.1), s, kDraws, s.steps, 0.0, rng, false));
  EXPECT_NEAR(m.mean, 0.4, 0.02);
  EXPECT_NEAR(m.std, 0.1, 0.005);
}

TEST(Ddim, SingleJumpAndErrors) {
  const auto s = make_schedule();
  std::mt19937_64 rng(11);
  const auto x = ddim_sample<double>(gaussian_oracle(s, 0, 0.5), s, {1, 4, 4}, 1, 0.0, rng);
  for (double v : x.data) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_LE(std::abs(v), 1.0);
  }
  EXPECT_THROW(ddim_sample<double>(gaussian_oracle(s, 0, 0.5), s, {1, 4, 4}, 1001, 0.0, rng), RangeError);
  EXPECT_THROW(ddim_sample<double>(gaussian_oracle(s, 0, 0.5), s, {1, 4, 4}, 10, 1.5, rng), RangeError);
}

TEST(Ddim, ClampClipsEveryPredictedX0) {
  const auto s = make_schedule();
  // Predictor whose implied x0 is 5 everywhere.
  auto far = [&s](const Patch<double>& x, int t) {
    Patch<double> e(x.shape);
    const double ab = s.abar(t);
    for (std::size_t i = 0; i < x.numel(); ++i) e[i] = (x[i] - std::sqrt(ab) * 5.0) / std::sqrt(1.0 - ab);
    return e;
  };
  std::mt19937_64 r1(12), r2(12);
  for (double v : ddim_sample<double>(far, s, {1, 4, 4}, 20, 0.0, r1, false).data) EXPECT_NEAR(v, 5.0, 1e-9);
  for (double v : ddim_sample<double>(far, s, {1, 4, 4}, 20, 0.0, r2, true).data) EXPECT_NEAR(v, 1.0, 1e-9);

  // Data well inside [-1,1]: clipping never triggers.
  std::mt19937_64 r3(13), r4(13);
  const auto a = ddim_sample<double>(gaussian_oracle(s, 0.0, 0.05), s, {1, 8, 8}, 50, 0.0, r3, false);
  const auto b = ddim_sample<double>(gaussian_oracle(s, 0.0, 0.05), s, {1, 8, 8}, 50, 0.0, r4, true);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(StreamRng, IndependentAndStable) {
  auto a = stream_rng(7, 0, 0), b = stream_rng(7, 0, 0), c = stream_rng(7, 1, 0), d = stream_rng(7, 0, 1);
  const auto va = a(), vb = b(), vc = c(), vd = d();
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
  EXPECT_NE(va, vd);
  EXPECT_NE(vc, vd);
}

namespace {

DenoiserConfig toy_config() {
  DenoiserConfig c;
  c.depth = 1;
  c.base_channels = 4;
  c.gn_groups = 2;
  c.embed_dim = 8;
  c.n_cond = 1;
  c.input_side = 8;
  return c;
}

std::vector<TrainingPair<double>> toy_data(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<TrainingPair<double>> d;
  for (int k = 0; k < n; ++k) {
    TrainingPair<double> p{T({2, 8, 8}), T({1, 8, 8}), 1.0 + k};
    const double level = u(rng);
    for (int i = 0; i < 64; ++i) {
      p.cond[i] = level;
      p.cond[64 + i] = 0.5;
      p.target[i] = level;
    }
    d.push_back(p);
  }
  return d;
}

}  // namespace

TEST(Train, ZeroLearningRateLeavesParameters) {
  Denoiser<double> m(toy_config());
  m.initialize(1);
  const auto before = m.params();
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 2;
  cfg.lr = 0;
  train(m, toy_data(4, 1), make_schedule(100), cfg);
  EXPECT_EQ(m.params().tensors, before.tensors);
}

TEST(Train, ZeroStepsIsIdentity) {
  Denoiser<double> m(toy_config());
  m.initialize(2);
  const auto before = m.params();
  TrainConfig cfg;
  cfg.steps = 0;
  const auto r = train(m, toy_data(2, 2), make_schedule(100), cfg);
  EXPECT_EQ(m.params().tensors, before.tensors);
  EXPECT_EQ(r.ema.tensors, before.tensors);
  EXPECT_TRUE(r.loss_history.empty());
}

TEST(Train, DeterministicGivenSeed) {
  TrainConfig cfg;
  cfg.steps = 15;
  cfg.batch = 3;
  cfg.lr = 1e-3;
  cfg.seed = 9;
  Denoiser<double> a(toy_config()), b(toy_config());
  a.initialize(3);
  b.initialize(3);
  const auto ra = train(a, toy_data(5, 3), make_schedule(100), cfg);
  cfg.threads = 2;
  const auto rb = train(b, toy_data(5, 3), make_schedule(100), cfg);
  EXPECT_EQ(ra.loss_history, rb.loss_history);
  EXPECT_EQ(a.params().tensors, b.params().tensors);
  EXPECT_EQ(ra.ema.tensors, rb.ema.tensors);
}

TEST(Train, LossDecreasesOnToyTask) {
  Denoiser<double> m(toy_config());
  m.initialize(4);
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.batch = 4;
  cfg.lr = 3e-3;
  cfg.seed = 4;
  const auto r = train(m, toy_data(8, 4), make_schedule(100), cfg);
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    first += r.loss_history[i];
    last += r.loss_history[r.loss_history.size() - 1 - i];
  }
  EXPECT_LT(last, first);
}

TEST(Train, DivergenceIsReported) {
  Denoiser<double> m(toy_config());
  m.initialize(5);
  auto data = toy_data(2, 5);
  data[0].target[0] = std::nan("");
  data[1].target[0] = std::nan("");
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 1;
  EXPECT_THROW(train(m, data, make_schedule(100), cfg), NumericError);
}

TEST(Train, EmptyDatasetAndBadConfig) {
  Denoiser<double> m(toy_config());
  TrainConfig cfg;
  EXPECT_THROW(train(m, {}, make_schedule(10), cfg), RangeError);
  cfg.batch = 0;
  EXPECT_THROW(train(m, toy_data(1, 1), make_schedule(10), cfg), ConfigError);
}

TEST(Ema, UpdateRule) {
  ParamSet<double> e, p;
  e.add("w", {2});
  p.add("w", {2});
  e.tensors[0].data = {1, 2};
  p.tensors[0].data = {3, 4};
  ema_update(e, p, 0.99);
  EXPECT_NEAR(e.tensors[0][0], 0.99 * 1 + 0.01 * 3, 1e-15);
  EXPECT_NEAR(e.tensors[0][1], 0.99 * 2 + 0.01 * 4, 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet<double> w, g;
  w.add("w", {3});
  g.add("w", {3});
  g.tensors[0].data = {0.5, -2, 0};
  Adam<double> opt(w, 0.1, 0.9, 0.999, 1e-8);
  opt.step(w, g);
  EXPECT_NEAR(w.tensors[0][0], -0.1, 1e-6);
  EXPECT_NEAR(w.tensors[0][1], 0.1, 1e-6);
  EXPECT_EQ(w.tensors[0][2], 0.0);
}
