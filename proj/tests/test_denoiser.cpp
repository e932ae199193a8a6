#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "impervia/denoiser.hpp"

using namespace impervia;
using T = nn::Tensor<double>;

namespace {

DenoiserConfig tiny(int side = 8) {
  DenoiserConfig c;
  c.depth = 1;
  c.base_channels = 2;
  c.gn_groups = 1;
  c.embed_dim = 4;
  c.n_cond = 2;
  c.input_side = side;
  return c;
}

T random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  T t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = u(rng);
  return t;
}

T cond_for(const DenoiserConfig& c, std::mt19937_64& rng) {
  T t({2 * c.n_cond, c.input_side, c.input_side});
  std::uniform_real_distribution<double> u(0, 1);
  for (int k = 0; k < c.n_cond; ++k)
    for (int i = 0; i < c.input_side * c.input_side; ++i) {
      t.ptr(2 * k, 0, 0)[i] = 2 * u(rng) - 1;
      t.ptr(2 * k + 1, 0, 0)[i] = u(rng);
    }
  return t;
}

// --- plain-loop reference layers, [C,H,W] ---

T conv_ref(const T& x, const T& w, const T* b, int stride, int pad) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0), k = w.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  T y({cout, ho, wo});
  for (int o = 0; o < cout; ++o)
    for (int yy = 0; yy < ho; ++yy)
      for (int xx = 0; xx < wo; ++xx) {
        double s = b ? (*b)[o] : 0.0;
        for (int c = 0; c < cin; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = yy * stride + ky - pad, ix = xx * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              s += w[((o * cin + c) * k + ky) * k + kx] * x.at(c, iy, ix);
            }
        y.at(o, yy, xx) = s;
      }
  return y;
}

T map_ref(T x, double (*f)(double)) {
  for (auto& v : x.data) v = f(v);
  return x;
}
double silu_d(double v) { return v / (1 + std::exp(-v)); }
double relu_d(double v) { return v > 0 ? v : 0; }

T gn_ref(const T& x, int groups) {
  T y(x.shape);
  const std::size_t per = x.numel() / groups;
  for (int g = 0; g < groups; ++g) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < per; ++i) m += x[g * per + i];
    m /= per;
    for (std::size_t i = 0; i < per; ++i) v += (x[g * per + i] - m) * (x[g * per + i] - m);
    v /= per;
    for (std::size_t i = 0; i < per; ++i) y[g * per + i] = (x[g * per + i] - m) / std::sqrt(v + 1e-5);
  }
  return y;
}

T add_ref(T a, const T& b) {
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
  return a;
}

struct Ref {
  const ParamSet<double>& p;
  const DenoiserConfig& c;
  const T& fused;

  T site_mod(const std::string& pre, const T& h) const {
    const auto trunk = map_ref(conv_ref(fused, p[pre + ".trunk.w"], &p[pre + ".trunk.b"], 1, 1), relu_d);
    const auto g = conv_ref(trunk, p[pre + ".gamma.w"], &p[pre + ".gamma.b"], 1, 1);
    const auto b = conv_ref(trunk, p[pre + ".beta.w"], &p[pre + ".beta.b"], 1, 1);
    auto n = gn_ref(h, c.gn_groups);
    for (std::size_t i = 0; i < n.numel(); ++i) n[i] = n[i] * (1 + g[i]) + b[i];
    return n;
  }

  T block(const std::string& name, const T& x, const std::vector<double>& temb) const {
    auto h = map_ref(site_mod(name + ".norm1", x), silu_d);
    h = conv_ref(h, p[name + ".conv1.w"], &p[name + ".conv1.b"], 1, 1);
    const auto& tw = p[name + ".temb.w"];
    const auto& tb = p[name + ".temb.b"];
    for (int o = 0; o < h.dim(0); ++o) {
      double s = tb[o];
      for (int e = 0; e < c.embed_dim; ++e) s += tw[o * c.embed_dim + e] * temb[e];
      for (int i = 0; i < h.dim(1) * h.dim(2); ++i) h.ptr(o, 0, 0)[i] += s;
    }
    h = map_ref(site_mod(name + ".norm2", h), silu_d);
    h = conv_ref(h, p[name + ".conv2.w"], &p[name + ".conv2.b"], 1, 1);
    const T skip = x.dim(0) != h.dim(0)
                       ? conv_ref(x, p[name + ".skip.w"], &p[name + ".skip.b"], 1, 0)
                       : x;
    return add_ref(h, skip);
  }
};

// depth 1: in -> down0 -> mid -> concat(down0) -> up0 -> silu -> out
T forward_ref(const Denoiser<double>& m, const T& x, double step, const T& cond) {
  const auto& p = m.params();
  const auto& c = m.config();
  T fused({c.n_cond, c.input_side, c.input_side});
  for (int k = 0; k < c.n_cond; ++k)
    for (int i = 0; i < c.input_side * c.input_side; ++i)
      fused.ptr(k, 0, 0)[i] = p["fuse.w"][0] * cond.ptr(2 * k, 0, 0)[i] + p["fuse.w"][1] * cond.ptr(2 * k + 1, 0, 0)[i] +
                              p["fuse.b"][0];
  const auto emb = nn::timestep_embedding<double>(step, c.embed_dim);
  std::vector<double> temb(c.embed_dim);
  for (int o = 0; o < c.embed_dim; ++o) {
    double s = p["time.b"][o];
    for (int e = 0; e < c.embed_dim; ++e) s += p["time.w"][o * c.embed_dim + e] * emb[e];
    temb[o] = silu_d(s);
  }
  Ref r{p, c, fused};
  auto h = conv_ref(x, p["in.w"], &p["in.b"], 1, 1);
  const auto d0 = r.block("down0", h, temb);
  auto mid = r.block("mid", d0, temb);
  T cat({mid.dim(0) + d0.dim(0), mid.dim(1), mid.dim(2)});
  std::copy(mid.data.begin(), mid.data.end(), cat.data.begin());
  std::copy(d0.data.begin(), d0.data.end(), cat.data.begin() + static_cast<std::ptrdiff_t>(mid.numel()));
  const auto u0 = r.block("up0", cat, temb);
  return conv_ref(map_ref(u0, silu_d), p["out.w"], &p["out.b"], 1, 1);
}

double rel_err(const T& a, const T& b) {
  double n = 0, d = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    n += (a[i] - b[i]) * (a[i] - b[i]);
    d += b[i] * b[i];
  }
  return std::sqrt(n) / std::max(std::sqrt(d), 1e-300);
}

}  // namespace

TEST(DenoiserConfig, Validation) {
  EXPECT_NO_THROW(DenoiserConfig{}.check());
  auto c = DenoiserConfig{};
  c.input_side = 30;
  EXPECT_THROW(c.check(), ConfigError);
  c = DenoiserConfig{};
  c.gn_groups = 3;
  EXPECT_THROW(c.check(), ConfigError);
  c = DenoiserConfig{};
  c.embed_dim = 7;
  EXPECT_THROW(c.check(), ConfigError);
}

TEST(DenoiserConfig, CanonicalIsStableAndDistinct) {
  DenoiserConfig a, b;
  EXPECT_EQ(a.canonical(), b.canonical());
  b.depth = 2;
  EXPECT_NE(a.canonical(), b.canonical());
}

TEST(Normalization, PercentUnitRoundTrip) {
  EXPECT_DOUBLE_EQ(percent_to_unit(0), -1);
  EXPECT_DOUBLE_EQ(percent_to_unit(100), 1);
  EXPECT_DOUBLE_EQ(unit_to_percent(percent_to_unit(37.5)), 37.5);
  EXPECT_DOUBLE_EQ(unit_to_percent(1.3), 100);
  EXPECT_DOUBLE_EQ(unit_to_percent(-2), 0);
}

TEST(ConditioningStack, TensorLayoutAndChecks) {
  ConditioningStack s;
  for (int k = 0; k < 2; ++k) {
    s.imperviousness.push_back(Grid::continuous(4, 4, 30, 25.0 * k));
    s.likelihood.push_back(Grid::continuous(4, 4, 30, 0.1 * (k + 1)));
  }
  s.imperviousness[1].set_nodata(3);
  EXPECT_NO_THROW(s.check(2, 4));
  EXPECT_THROW(s.check(3, 4), ShapeError);
  EXPECT_THROW(s.check(2, 8), ShapeError);
  const auto t = s.to_tensor<double>();
  ASSERT_EQ(t.shape, (std::vector<int>{4, 4, 4}));
  EXPECT_DOUBLE_EQ(t.at(0, 0, 0), -1.0);
  EXPECT_DOUBLE_EQ(t.at(1, 0, 0), 0.1);
  EXPECT_DOUBLE_EQ(t.at(2, 0, 0), -0.5);
  EXPECT_DOUBLE_EQ(t.at(2, 0, 3), -1.0);
  EXPECT_DOUBLE_EQ(t.at(3, 2, 2), 0.2);
}

TEST(FuseConditions, ProjectionAndConstant) {
  std::mt19937_64 rng(1);
  const auto stack = random_tensor({6, 4, 4}, rng);
  const auto a = fuse_conditions<double>(stack, {1, 0}, 0);
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 16; ++i) EXPECT_EQ(a.ptr(k, 0, 0)[i], stack.ptr(2 * k, 0, 0)[i]);
  const auto b = fuse_conditions<double>(stack, {0, 0}, 0.7);
  for (double v : b.data) EXPECT_EQ(v, 0.7);
}

TEST(FuseConditions, MatchesAffineOracle) {
  std::mt19937_64 rng(2);
  const auto stack = random_tensor({6, 5, 5}, rng);
  const auto y = fuse_conditions<double>(stack, {0.3, -1.7}, 0.2);
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 25; ++i)
      EXPECT_NEAR(y.ptr(k, 0, 0)[i], 0.3 * stack.ptr(2 * k, 0, 0)[i] - 1.7 * stack.ptr(2 * k + 1, 0, 0)[i] + 0.2, 1e-15);
}

TEST(FuseConditions, PairPermutationInvariance) {
  std::mt19937_64 rng(3);
  const auto stack = random_tensor({6, 3, 3}, rng);
  T swapped(stack.shape);
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 9; ++i) {
      swapped.ptr(2 * k, 0, 0)[i] = stack.ptr(2 * k + 1, 0, 0)[i];
      swapped.ptr(2 * k + 1, 0, 0)[i] = stack.ptr(2 * k, 0, 0)[i];
    }
  const auto a = fuse_conditions<double>(stack, {0.4, 0.9}, -0.1);
  const auto b = fuse_conditions<double>(swapped, {0.9, 0.4}, -0.1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Spade, ZeroAndBiasOnlySites) {
  Denoiser<double> m(tiny());
  std::mt19937_64 rng(4);
  const auto fused = random_tensor({2, 8, 8}, rng);
  const auto& site = m.blocks()[0].norm1;
  auto [g0, b0] = m.spade(fused, site, 0);
  for (double v : g0.data) EXPECT_EQ(v, 0.0);
  for (double v : b0.data) EXPECT_EQ(v, 0.0);
  for (auto& v : m.params().tensors[site.gamma_b].data) v = 0.5;
  auto [g1, b1] = m.spade(fused, site, 0);
  for (double v : g1.data) EXPECT_EQ(v, 0.5);
}

TEST(Spade, MatchesConvOracleAndNearestDownsample) {
  DenoiserConfig c = tiny(16);
  c.depth = 2;
  Denoiser<double> m(c);
  m.randomize(5);
  std::mt19937_64 rng(5);
  const auto fused = random_tensor({2, 16, 16}, rng);
  const auto& site = m.blocks()[1].norm1;  // level 1
  ASSERT_EQ(m.blocks()[1].level, 1);
  const auto& p = m.params();
  const auto trunk = map_ref(conv_ref(fused, p.tensors[site.trunk_w], &p.tensors[site.trunk_b], 1, 1), relu_d);
  const auto full = conv_ref(trunk, p.tensors[site.gamma_w], &p.tensors[site.gamma_b], 1, 1);
  auto [g, b] = m.spade(fused, site, 1);
  ASSERT_EQ(g.shape, (std::vector<int>{full.dim(0), 8, 8}));
  for (int ch = 0; ch < g.dim(0); ++ch)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) EXPECT_NEAR(g.at(ch, y, x), full.at(ch, 2 * y, 2 * x), 1e-12);
}

TEST(CondGroupNorm, IdentityModulationAndConstantChannels) {
  std::mt19937_64 rng(6);
  const auto h = random_tensor({4, 3, 3}, rng);
  const T zero(h.shape);
  const auto y = cond_group_norm(h, zero, zero, 2);
  const auto ref = gn_ref(h, 2);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);

  T flat(h.shape, 3.0);
  const auto gamma = random_tensor(h.shape, rng), beta = random_tensor(h.shape, rng);
  const auto z = cond_group_norm(flat, gamma, beta, 2);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(z[i], beta[i], 1e-12);
  EXPECT_THROW(cond_group_norm(h, zero, zero, 3), ShapeError);
}

TEST(CondGroupNorm, MatchesStatisticsOracle) {
  std::mt19937_64 rng(7);
  const auto h = random_tensor({4, 5, 5}, rng, -3, 3);
  const auto g = random_tensor(h.shape, rng), b = random_tensor(h.shape, rng);
  const auto y = cond_group_norm(h, g, b, 4);
  const auto n = gn_ref(h, 4);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(y[i], n[i] * (1 + g[i]) + b[i], 1e-12);
}

TEST(Forward, ZeroParametersGiveZeroOutput) {
  Denoiser<double> m(tiny());
  std::mt19937_64 rng(8);
  const auto y = m.forward(random_tensor({1, 8, 8}, rng), 10, cond_for(m.config(), rng));
  for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ShapePreservedAcrossSides) {
  for (int side : {16, 32, 64}) {
    DenoiserConfig c;
    c.input_side = side;
    c.depth = 3;
    Denoiser<float> m(c);
    m.initialize(1);
    std::mt19937_64 rng(side);
    const auto x = random_tensor({1, side, side}, rng).cast<float>();
    const auto y = m.forward(x, 500, cond_for(c, rng).cast<float>());
    EXPECT_EQ(y.shape, x.shape);
  }
}

TEST(Forward, MatchesLayerByLayerOracle) {
  Denoiser<double> m(tiny());
  m.randomize(9, 0.5);
  std::mt19937_64 rng(9);
  const auto x = random_tensor({1, 8, 8}, rng);
  const auto cond = cond_for(m.config(), rng);
  EXPECT_LT(rel_err(m.forward(x, 37, cond), forward_ref(m, x, 37, cond)), 1e-12);
}

TEST(Forward, DeterministicAndShapeChecked) {
  Denoiser<double> m(tiny());
  m.randomize(10);
  std::mt19937_64 rng(10);
  const auto x = random_tensor({1, 8, 8}, rng);
  const auto cond = cond_for(m.config(), rng);
  EXPECT_EQ(m.forward(x, 5, cond).data, m.forward(x, 5, cond).data);
  EXPECT_THROW(m.forward(random_tensor({1, 4, 4}, rng), 5, cond), ShapeError);
  EXPECT_THROW(m.forward(x, 5, random_tensor({2, 8, 8}, rng)), ShapeError);
}

TEST(Forward, ZeroSitesIgnoreConditioning) {
  Denoiser<double> m(tiny());
  m.initialize(11);
  // Non-trivial output weights; gamma / beta convs stay zero.
  std::mt19937_64 rng(11);
  for (auto& v : m.params()["out.w"].data) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  const auto x = random_tensor({1, 8, 8}, rng);
  const auto y1 = m.forward(x, 3, cond_for(m.config(), rng));
  const auto y2 = m.forward(x, 3, cond_for(m.config(), rng));
  EXPECT_EQ(y1.data, y2.data);
  bool nonzero = false;
  for (double v : y1.data) nonzero = nonzero || v != 0.0;
  EXPECT_TRUE(nonzero);
}

TEST(Initialize, ZeroGroupsAndDeterminism) {
  Denoiser<float> a(DenoiserConfig{}), b(DenoiserConfig{});
  a.initialize(3);
  b.initialize(3);
  EXPECT_EQ(a.params().tensors, b.params().tensors);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& n = a.params().names[i];
    const bool zero = n.find(".gamma.") != std::string::npos || n.find(".beta.") != std::string::npos ||
                      n.rfind("out.", 0) == 0 || n.substr(n.size() - 2) == ".b";
    double s = 0;
    for (float v : a.params().tensors[i].data) s += std::abs(v);
    if (zero) {
      EXPECT_EQ(s, 0.0) << n;
    } else {
      EXPECT_GT(s, 0.0) << n;
    }
  }
}

namespace {

std::vector<NoiseItem<double>> make_batch(const Denoiser<double>& m, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<NoiseItem<double>> b;
  const int s = m.config().input_side;
  for (int i = 0; i < n; ++i)
    b.push_back({random_tensor({1, s, s}, rng), static_cast<double>(10 + 40 * i), cond_for(m.config(), rng),
                 random_tensor({1, s, s}, rng)});
  return b;
}

}  // namespace

TEST(Gradients, FiniteDifferencesPerParameterGroup) {
  Denoiser<double> m(tiny());
  m.randomize(12, 0.4);
  const auto batch = make_batch(m, 2, 12);
  ParamSet<double> g;
  loss_and_gradients(m, batch, g);
  ParamSet<double> scratch;
  const double h = 1e-4;
  for (std::size_t p = 0; p < m.params().size(); ++p) {
    auto& w = m.params().tensors[p].data;
    double num2 = 0, diff2 = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double keep = w[i];
      w[i] = keep + h;
      const double up = loss_and_gradients(m, batch, scratch);
      w[i] = keep - h;
      const double dn = loss_and_gradients(m, batch, scratch);
      w[i] = keep;
      const double fd = (up - dn) / (2 * h);
      num2 += fd * fd;
      diff2 += (fd - g.tensors[p][i]) * (fd - g.tensors[p][i]);
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(num2), 1e-12);
    EXPECT_LT(rel, 1e-4) << m.params().names[p];
    EXPECT_GT(num2, 0.0) << m.params().names[p];
  }
}

TEST(Gradients, DeadBranchHasZeroGradient) {
  Denoiser<double> m(tiny());
  m.randomize(13);
  // A trunk that ReLU zeroes everywhere cuts its gamma / beta convs off.
  const auto& site = m.blocks()[0].norm1;
  for (auto& v : m.params().tensors[site.trunk_w].data) v = 0;
  for (auto& v : m.params().tensors[site.trunk_b].data) v = -1;
  ParamSet<double> g;
  loss_and_gradients(m, make_batch(m, 1, 13), g);
  for (double v : g.tensors[site.gamma_w].data) EXPECT_EQ(v, 0.0);
  for (double v : g.tensors[site.beta_w].data) EXPECT_EQ(v, 0.0);
}

TEST(Gradients, LinearInLossScale) {
  Denoiser<double> m(tiny());
  m.randomize(14);
  const auto batch = make_batch(m, 2, 14);
  ParamSet<double> g1, g2;
  const double l1 = loss_and_gradients(m, batch, g1, 1, 1.0);
  const double l2 = loss_and_gradients(m, batch, g2, 1, 2.0);
  EXPECT_NEAR(l2, 2 * l1, 1e-12 * l1);
  for (std::size_t p = 0; p < g1.size(); ++p)
    for (std::size_t i = 0; i < g1.tensors[p].numel(); ++i)
      EXPECT_NEAR(g2.tensors[p][i], 2 * g1.tensors[p][i], 1e-12 + 1e-10 * std::abs(g1.tensors[p][i]));
}

TEST(Gradients, ThreadCountDoesNotChangeResult) {
  Denoiser<double> m(tiny());
  m.randomize(15);
  const auto batch = make_batch(m, 4, 15);
  ParamSet<double> g1, g3;
  EXPECT_EQ(loss_and_gradients(m, batch, g1, 1), loss_and_gradients(m, batch, g3, 3));
  EXPECT_EQ(g1.tensors, g3.tensors);
}

TEST(Gradients, NonFiniteNamesTensor) {
  Denoiser<double> m(tiny());
  m.randomize(16);
  m.params()["out.b"][0] = std::nan("");
  ParamSet<double> g;
  try {
    loss_and_gradients(m, make_batch(m, 1, 16), g);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite gradient in"), std::string::npos);
  }
}
