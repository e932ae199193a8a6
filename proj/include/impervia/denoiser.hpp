#pragma once

// Conditional UNet noise predictor.
//
// Conditioning enters in two stages. A single 1x1 conv (2 -> 1 channel) is
// shared by every (imperviousness, likelihood) pair and its N outputs are
// stacked into the fused feature. Every normalization site then owns a small
// [conv, ReLU] trunk over the fused feature followed by two parallel convs
// that regress gamma and beta; group-normalized activations become
// h_hat * (1 + gamma) + beta. The trunk runs at input resolution and the
// gamma/beta convs are evaluated with stride 2^level, which is exactly the
// nearest-neighbour downsample of their full-resolution output.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "impervia/autograd.hpp"
#include "impervia/errors.hpp"
#include "impervia/raster.hpp"

namespace impervia {

struct DenoiserConfig {
  int depth = 3;
  int base_channels = 8;
  int gn_groups = 4;
  int embed_dim = 32;
  int n_cond = 3;
  int input_side = 32;

  int channels(int level) const { return base_channels << level; }

  void check() const {
    if (depth < 1 || depth > 6) throw ConfigError("depth must be in [1,6]");
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (embed_dim < 2 || embed_dim % 2) throw ConfigError("embed_dim must be even and >= 2");
    if (n_cond < 1) throw ConfigError("n_cond must be >= 1");
    if (input_side < 1 || input_side % (1 << (depth - 1)))
      throw ConfigError("input_side must be divisible by 2^(depth-1)");
    if (gn_groups < 1) throw ConfigError("gn_groups must be >= 1");
    for (int l = 0; l < depth; ++l) {
      const int up_in = (l == depth - 1 ? channels(l) : channels(l + 1)) + channels(l);
      if (channels(l) % gn_groups || up_in % gn_groups)
        throw ConfigError("gn_groups must divide every block's channel count");
    }
  }

  /// Stable textual form used for checkpoint digests and manifests.
  std::string canonical() const {
    std::ostringstream os;
    os << "base_channels=" << base_channels << "\ndepth=" << depth << "\nembed_dim=" << embed_dim
       << "\ngn_groups=" << gn_groups << "\ninput_side=" << input_side << "\nn_cond=" << n_cond << "\n";
    return os.str();
  }

  bool operator==(const DenoiserConfig&) const = default;
};

/// Normalization of imperviousness percent to the model's [-1,1] range.
inline double percent_to_unit(double p) { return p / 50.0 - 1.0; }
inline double unit_to_percent(double x) { return std::clamp((x + 1.0) * 50.0, 0.0, 100.0); }

/// N aligned (imperviousness, likelihood) pairs in chronological order.
struct ConditioningStack {
  std::vector<Grid> imperviousness;  // percent
  std::vector<Grid> likelihood;      // [0,1]
  std::vector<int> years;

  std::size_t size() const { return imperviousness.size(); }

  void check(int n_cond, int side) const {
    if (imperviousness.size() != likelihood.size())
      throw ShapeError("conditioning stack has unpaired layers");
    if (static_cast<int>(size()) != n_cond)
      throw ShapeError("conditioning stack has " + std::to_string(size()) + " pairs, model expects " +
                       std::to_string(n_cond));
    for (std::size_t k = 0; k < size(); ++k) {
      require_same_shape(imperviousness[k], likelihood[k], "conditioning pair");
      if (static_cast<int>(imperviousness[k].width) != side || static_cast<int>(imperviousness[k].height) != side)
        throw ShapeError("conditioning side does not match model input_side");
    }
  }

  /// [2N,S,S] tensor: channel 2k = imperviousness in [-1,1], 2k+1 = likelihood.
  /// Nodata becomes 0% imperviousness and zero likelihood.
  template <class Real>
  nn::Tensor<Real> to_tensor() const {
    const int n = static_cast<int>(size());
    const int h = static_cast<int>(imperviousness.at(0).height), w = static_cast<int>(imperviousness.at(0).width);
    nn::Tensor<Real> t({2 * n, h, w});
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < h * w; ++i) {
        const auto& im = imperviousness[k];
        const auto& lk = likelihood[k];
        (t.ptr(2 * k, 0, 0))[i] = static_cast<Real>(im.valid[i] ? percent_to_unit(im.values[i]) : -1.0);
        (t.ptr(2 * k + 1, 0, 0))[i] = static_cast<Real>(lk.valid[i] ? lk.values[i] : 0.0);
      }
    return t;
  }
};

/// Named parameter tensors in a fixed declaration order.
template <class Real>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<nn::Tensor<Real>> tensors;

  int add(std::string name, std::vector<int> shape) {
    names.push_back(std::move(name));
    tensors.emplace_back(std::move(shape));
    return static_cast<int>(tensors.size() - 1);
  }

  int index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw SchemaError("no parameter named " + name);
  }

  nn::Tensor<Real>& operator[](const std::string& name) { return tensors[index(name)]; }
  const nn::Tensor<Real>& operator[](const std::string& name) const { return tensors[index(name)]; }

  std::size_t size() const { return tensors.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  /// Same names and shapes, zero values.
  ParamSet zeros_like() const {
    ParamSet z;
    z.names = names;
    for (const auto& t : tensors) z.tensors.emplace_back(t.shape);
    return z;
  }

  template <class Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> o;
    o.names = names;
    for (const auto& t : tensors) o.tensors.push_back(t.template cast<Other>());
    return o;
  }
};

template <class Real>
class Denoiser {
 public:
  struct SpadeSite {
    int trunk_w, trunk_b, gamma_w, gamma_b, beta_w, beta_b;
  };
  struct Block {
    int level, cin, cout;
    SpadeSite norm1, norm2;
    int conv1_w, conv1_b, temb_w, temb_b, conv2_w, conv2_b;
    int skip_w = -1, skip_b = -1;
  };

  explicit Denoiser(DenoiserConfig cfg) : cfg_(cfg) {
    cfg_.check();
    build();
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamSet<Real>& params() { return params_; }
  const ParamSet<Real>& params() const { return params_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  /// Standard initialization: uniform(+-1/sqrt(fan_in)) conv and linear
  /// weights, zero biases, zero gamma/beta convs and zero output conv.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_.tensors[i];
      const auto& name = params_.names[i];
      std::fill(t.data.begin(), t.data.end(), Real(0));
      const bool zero = ends_with(name, ".b") || name.find(".gamma.") != std::string::npos ||
                        name.find(".beta.") != std::string::npos || name.rfind("out.", 0) == 0;
      if (zero) continue;
      const std::size_t fan_in = t.numel() / static_cast<std::size_t>(t.dim(0));
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : t.data) v = static_cast<Real>(u(rng));
    }
  }

  /// Fills every tensor, biases and zero-initialized ones included, with
  /// uniform noise of the given scale. Used to exercise all gradient paths.
  void randomize(std::uint64_t seed, double scale = 0.3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& t : params_.tensors)
      for (auto& v : t.data) v = static_cast<Real>(u(rng));
  }

  // -------------------------------------------------------------------------
  // Graph construction

  struct Graph {
    nn::Var output;
    nn::Var fused;
  };

  /// Records the forward pass for one sample on `tape`. `x` is [1,S,S],
  /// `cond` is [2N,S,S].
  Graph record(nn::Tape<Real>& tape, const nn::Tensor<Real>& x, double step, const nn::Tensor<Real>& cond) const {
    check_inputs(x, cond);
    std::vector<nn::Var> p(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) p[i] = tape.parameter(params_.tensors[i], static_cast<int>(i));

    auto xv = tape.constant(x);
    auto cv = tape.constant(cond);
    auto fused = nn::fuse_pairs(tape, cv, p[fuse_w_], p[fuse_b_]);

    auto emb = tape.constant(nn::timestep_embedding<Real>(step, cfg_.embed_dim));
    auto temb = nn::silu(tape, nn::linear(tape, emb, p[time_w_], p[time_b_]));

    auto h = nn::conv2d(tape, xv, p[in_w_], p[in_b_]);
    std::vector<nn::Var> skips(cfg_.depth);
    std::size_t bi = 0;
    for (int l = 0; l < cfg_.depth; ++l) {
      h = res_block(tape, p, blocks_[bi++], h, fused, temb);
      skips[l] = h;
      if (l < cfg_.depth - 1) h = nn::avg_pool2(tape, h);
    }
    h = res_block(tape, p, blocks_[bi++], h, fused, temb);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      h = nn::concat(tape, h, skips[l]);
      h = res_block(tape, p, blocks_[bi++], h, fused, temb);
      if (l > 0) h = nn::upsample2(tape, h);
    }
    auto out = nn::conv2d(tape, nn::silu(tape, h), p[out_w_], p[out_b_]);
    return {out, fused};
  }

  /// Predicted noise for one sample.
  nn::Tensor<Real> forward(const nn::Tensor<Real>& x, double step, const nn::Tensor<Real>& cond) const {
    nn::Tape<Real> tape(false);
    auto g = record(tape, x, step, cond);
    return tape.value(g.output);
  }

  /// gamma / beta maps of one normalization site for a given fused feature.
  std::pair<nn::Tensor<Real>, nn::Tensor<Real>> spade(const nn::Tensor<Real>& fused, const SpadeSite& site,
                                                      int level) const {
    nn::Tape<Real> tape(false);
    std::vector<nn::Var> p(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) p[i] = tape.parameter(params_.tensors[i], static_cast<int>(i));
    auto [g, b] = spade_site(tape, p, site, tape.constant(fused), level);
    return {tape.value(g), tape.value(b)};
  }

  int fuse_w_index() const { return fuse_w_; }
  int fuse_b_index() const { return fuse_b_; }

 private:
  static bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  }

  void check_inputs(const nn::Tensor<Real>& x, const nn::Tensor<Real>& cond) const {
    const int s = cfg_.input_side;
    if (x.shape != std::vector<int>{1, s, s})
      throw ShapeError("denoiser input " + nn::shape_str(x.shape) + " does not match input_side " + std::to_string(s));
    if (cond.shape != std::vector<int>{2 * cfg_.n_cond, s, s})
      throw ShapeError("conditioning tensor " + nn::shape_str(cond.shape) + " does not match n_cond " +
                       std::to_string(cfg_.n_cond));
  }

  SpadeSite add_site(const std::string& prefix, int channels) {
    const int hid = cfg_.base_channels, n = cfg_.n_cond;
    SpadeSite s{};
    s.trunk_w = params_.add(prefix + ".trunk.w", {hid, n, 3, 3});
    s.trunk_b = params_.add(prefix + ".trunk.b", {hid});
    s.gamma_w = params_.add(prefix + ".gamma.w", {channels, hid, 3, 3});
    s.gamma_b = params_.add(prefix + ".gamma.b", {channels});
    s.beta_w = params_.add(prefix + ".beta.w", {channels, hid, 3, 3});
    s.beta_b = params_.add(prefix + ".beta.b", {channels});
    return s;
  }

  void add_block(const std::string& name, int level, int cin, int cout) {
    Block b{};
    b.level = level;
    b.cin = cin;
    b.cout = cout;
    b.norm1 = add_site(name + ".norm1", cin);
    b.conv1_w = params_.add(name + ".conv1.w", {cout, cin, 3, 3});
    b.conv1_b = params_.add(name + ".conv1.b", {cout});
    b.temb_w = params_.add(name + ".temb.w", {cout, cfg_.embed_dim});
    b.temb_b = params_.add(name + ".temb.b", {cout});
    b.norm2 = add_site(name + ".norm2", cout);
    b.conv2_w = params_.add(name + ".conv2.w", {cout, cout, 3, 3});
    b.conv2_b = params_.add(name + ".conv2.b", {cout});
    if (cin != cout) {
      b.skip_w = params_.add(name + ".skip.w", {cout, cin, 1, 1});
      b.skip_b = params_.add(name + ".skip.b", {cout});
    }
    blocks_.push_back(b);
  }

  void build() {
    const int e = cfg_.embed_dim;
    fuse_w_ = params_.add("fuse.w", {1, 2, 1, 1});
    fuse_b_ = params_.add("fuse.b", {1});
    time_w_ = params_.add("time.w", {e, e});
    time_b_ = params_.add("time.b", {e});
    in_w_ = params_.add("in.w", {cfg_.base_channels, 1, 3, 3});
    in_b_ = params_.add("in.b", {cfg_.base_channels});
    int c = cfg_.base_channels;
    for (int l = 0; l < cfg_.depth; ++l) {
      add_block("down" + std::to_string(l), l, c, cfg_.channels(l));
      c = cfg_.channels(l);
    }
    add_block("mid", cfg_.depth - 1, c, c);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      add_block("up" + std::to_string(l), l, c + cfg_.channels(l), cfg_.channels(l));
      c = cfg_.channels(l);
    }
    out_w_ = params_.add("out.w", {1, cfg_.base_channels, 3, 3});
    out_b_ = params_.add("out.b", {1});
  }

  std::pair<nn::Var, nn::Var> spade_site(nn::Tape<Real>& tape, const std::vector<nn::Var>& p, const SpadeSite& s,
                                         nn::Var fused, int level) const {
    auto trunk = nn::relu(tape, nn::conv2d(tape, fused, p[s.trunk_w], p[s.trunk_b]));
    const int stride = 1 << level;
    auto gamma = nn::conv2d(tape, trunk, p[s.gamma_w], p[s.gamma_b], stride, 1);
    auto beta = nn::conv2d(tape, trunk, p[s.beta_w], p[s.beta_b], stride, 1);
    return {gamma, beta};
  }

  nn::Var res_block(nn::Tape<Real>& tape, const std::vector<nn::Var>& p, const Block& b, nn::Var x, nn::Var fused,
                    nn::Var temb) const {
    auto [g1, b1] = spade_site(tape, p, b.norm1, fused, b.level);
    auto h = nn::modulate(tape, nn::group_norm(tape, x, cfg_.gn_groups), g1, b1);
    h = nn::conv2d(tape, nn::silu(tape, h), p[b.conv1_w], p[b.conv1_b]);
    h = nn::add_channel(tape, h, nn::linear(tape, temb, p[b.temb_w], p[b.temb_b]));
    auto [g2, b2] = spade_site(tape, p, b.norm2, fused, b.level);
    h = nn::modulate(tape, nn::group_norm(tape, h, cfg_.gn_groups), g2, b2);
    h = nn::conv2d(tape, nn::silu(tape, h), p[b.conv2_w], p[b.conv2_b]);
    auto skip = b.skip_w >= 0 ? nn::conv2d(tape, x, p[b.skip_w], p[b.skip_b], 1, 0) : x;
    return nn::add(tape, h, skip);
  }

  DenoiserConfig cfg_;
  ParamSet<Real> params_;
  std::vector<Block> blocks_;
  int fuse_w_ = -1, fuse_b_ = -1, time_w_ = -1, time_b_ = -1, in_w_ = -1, in_b_ = -1, out_w_ = -1, out_b_ = -1;
};

// ---------------------------------------------------------------------------
// Stand-alone pieces of the conditioning path

/// Shared 1x1 fusion of every (imperviousness, likelihood) pair. `weights`
/// are (w_imperviousness, w_likelihood).
template <class Real>
nn::Tensor<Real> fuse_conditions(const nn::Tensor<Real>& stack, std::array<Real, 2> weights, Real bias) {
  nn::Tape<Real> tape(false);
  nn::Tensor<Real> w({1, 2, 1, 1});
  w[0] = weights[0];
  w[1] = weights[1];
  auto out = nn::fuse_pairs(tape, tape.constant(stack), tape.constant(w), tape.constant(nn::Tensor<Real>({1}, bias)));
  return tape.value(out);
}

/// Group normalization of h followed by h_hat * (1 + gamma) + beta.
template <class Real>
nn::Tensor<Real> cond_group_norm(const nn::Tensor<Real>& h, const nn::Tensor<Real>& gamma,
                                 const nn::Tensor<Real>& beta, int groups) {
  nn::Tape<Real> tape(false);
  auto n = nn::group_norm(tape, tape.constant(h), groups);
  auto out = nn::modulate(tape, n, tape.constant(gamma), tape.constant(beta));
  return tape.value(out);
}

// ---------------------------------------------------------------------------
// Gradients

/// One supervised item: noisy input, its step, conditioning, and the noise
/// that produced it.
template <class Real>
struct NoiseItem {
  nn::Tensor<Real> x_t;
  double step = 1;
  nn::Tensor<Real> cond;
  nn::Tensor<Real> eps;
};

/// Mean over the batch of per-item MSE, and its exact gradient with respect
/// to every parameter. Items are differentiated independently (optionally on
/// `threads` workers) and summed in item order, so results do not depend on
/// the thread count. `loss_scale` multiplies the loss.
template <class Real>
double loss_and_gradients(const Denoiser<Real>& model, const std::vector<NoiseItem<Real>>& batch,
                          ParamSet<Real>& grads, int threads = 1, double loss_scale = 1.0) {
  if (batch.empty()) throw ShapeError("empty batch");
  grads = model.params().zeros_like();
  const std::size_t n = batch.size();
  std::vector<ParamSet<Real>> per(n);
  std::vector<double> losses(n);
  const Real item_scale = static_cast<Real>(loss_scale / static_cast<double>(n));
  auto work = [&](std::size_t i) {
    nn::Tape<Real> tape(true);
    auto g = model.record(tape, batch[i].x_t, batch[i].step, batch[i].cond);
    auto loss = nn::mse(tape, g.output, batch[i].eps, item_scale);
    losses[i] = tape.value(loss)[0];
    tape.backward(loss);
    per[i] = model.params().zeros_like();
    tape.for_each_param_grad([&](int idx, const nn::Tensor<Real>& gt) {
      auto& dst = per[i].tensors[idx].data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += gt.data[k];
    });
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) work(i);
      });
    for (auto& th : pool) th.join();
  }
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += losses[i];
    for (std::size_t p = 0; p < grads.size(); ++p) {
      auto& dst = grads.tensors[p].data;
      const auto& src = per[i].tensors[p].data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  for (std::size_t p = 0; p < grads.size(); ++p)
    for (auto v : grads.tensors[p].data)
      if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite gradient in " + grads.names[p]);
  return total;
}

}  // namespace impervia
