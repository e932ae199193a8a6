#pragma once

// Minimal reverse-mode differentiation over small dense tensors. A Tape
// records every op together with a closure that pushes the output gradient
// back into the op's inputs; `Tape::backward` replays them in reverse.
//
// Activations are per-sample [C,H,W] tensors; batching happens one level up
// by running one tape per sample and summing parameter gradients in a fixed
// order.

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "impervia/errors.hpp"

namespace impervia::nn {

template <class Real>
struct Tensor {
  std::vector<int> shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, Real fill = Real(0)) : shape(std::move(s)) {
    data.assign(count(shape), fill);
  }

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
  }

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape[i]; }
  int rank() const { return static_cast<int>(shape.size()); }
  bool operator==(const Tensor&) const = default;
  bool empty() const { return data.empty(); }

  Real& operator[](std::size_t i) { return data[i]; }
  Real operator[](std::size_t i) const { return data[i]; }

  // [C,H,W] accessors
  Real& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x]; }
  Real at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  Real* ptr(int c, int y, int x) { return &at(c, y, x); }
  const Real* ptr(int c, int y, int x) const {
    return data.data() + (static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x;
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t.shape = shape;
    t.data.assign(data.begin(), data.end());
    return t;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

template <class Real>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    Backward backward;
    int param = -1;
    bool needs_grad = false;
  };

  /// With `record` false no backward closures are kept (inference).
  explicit Tape(bool record = true) : record_(record) {}

  Var constant(Tensor<Real> v) {
    nodes_.push_back(Node{std::move(v), {}, {}, -1, false});
    return Var{nodes_.size() - 1};
  }

  Var parameter(const Tensor<Real>& v, int index) {
    nodes_.push_back(Node{v, {}, {}, index, record_});
    return Var{nodes_.size() - 1};
  }

  Var record(Tensor<Real> v, std::initializer_list<Var> inputs, Backward back) {
    bool ng = false;
    if (record_)
      for (Var in : inputs) ng = ng || nodes_[in.id].needs_grad;
    nodes_.push_back(Node{std::move(v), {}, ng ? std::move(back) : Backward{}, -1, ng});
    return Var{nodes_.size() - 1};
  }

  const Tensor<Real>& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  Tensor<Real>& grad(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<Real>(n.value.shape);
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  const Tensor<Real>& grad_of(std::size_t id) const { return nodes_[id].grad; }

  /// Seeds d(out)/d(out) = 1 for a scalar output and propagates.
  void backward(Var out) {
    if (nodes_[out.id].value.numel() != 1) throw ShapeError("backward needs a scalar output");
    grad(out)[0] = Real(1);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  /// Calls f(param_index, grad) for every parameter leaf that got a gradient.
  template <class F>
  void for_each_param_grad(F&& f) const {
    for (const auto& n : nodes_)
      if (n.param >= 0 && !n.grad.empty()) f(n.param, n.grad);
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  bool record_;
};

// ---------------------------------------------------------------------------
// Ops

namespace detail {

inline int out_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Range of output indices o with 0 <= o*stride + k - pad < in.
inline std::pair<int, int> valid_range(int out, int in, int k, int stride, int pad) {
  int lo = 0;
  while (lo < out && lo * stride + k - pad < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride + k - pad >= in) --hi;
  return {lo, hi};
}

/// Unfolds x [Cin,H,W] into columns [Cin*K*K, Ho*Wo] (zero padded).
template <class Real>
void im2col(const Tensor<Real>& X, int k, int stride, int pad, int ho, int wo, std::vector<Real>& cols) {
  const int cin = X.dim(0), h = X.dim(1), wd = X.dim(2);
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  cols.assign(static_cast<std::size_t>(cin) * k * k * plane, Real(0));
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky) {
      auto [oy0, oy1] = valid_range(ho, h, ky, stride, pad);
      for (int kx = 0; kx < k; ++kx) {
        auto [ox0, ox1] = valid_range(wo, wd, kx, stride, pad);
        Real* row = cols.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * plane;
        for (int oy = oy0; oy < oy1; ++oy) {
          const Real* in = X.ptr(ci, oy * stride + ky - pad, 0);
          Real* out = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = ox0; ox < ox1; ++ox) out[ox] = in[ox * stride + kx - pad];
        }
      }
    }
}

/// Adds columns [Cin*K*K, Ho*Wo] back onto dX [Cin,H,W].
template <class Real>
void col2im(const Real* cols, int k, int stride, int pad, int ho, int wo, Tensor<Real>& dX) {
  const int cin = dX.dim(0), h = dX.dim(1), wd = dX.dim(2);
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky) {
      auto [oy0, oy1] = valid_range(ho, h, ky, stride, pad);
      for (int kx = 0; kx < k; ++kx) {
        auto [ox0, ox1] = valid_range(wo, wd, kx, stride, pad);
        const Real* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * plane;
        for (int oy = oy0; oy < oy1; ++oy) {
          Real* d = dX.ptr(ci, oy * stride + ky - pad, 0);
          const Real* g = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = ox0; ox < ox1; ++ox) d[ox * stride + kx - pad] += g[ox];
        }
      }
    }
}

template <class Real>
using RowMajor = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

/// 2-D convolution of x [Cin,H,W] with w [Cout,Cin,K,K] and optional bias
/// [Cout], zero padding `pad`, step `stride`. Lowered to one matrix product
/// over the unfolded input.
template <class Real>
Var conv2d(Tape<Real>& t, Var x, Var w, Var b, int stride = 1, int pad = 1) {
  using Mat = detail::RowMajor<Real>;
  const auto& X = t.value(x);
  const auto& W = t.value(w);
  const int cin = X.dim(0), h = X.dim(1), wd = X.dim(2);
  const int cout = W.dim(0), k = W.dim(2);
  if (W.dim(1) != cin || W.dim(3) != k)
    throw ShapeError("conv2d: weight " + shape_str(W.shape) + " vs input " + shape_str(X.shape));
  const int ho = detail::out_extent(h, k, stride, pad), wo = detail::out_extent(wd, k, stride, pad);
  const int rows = cin * k * k, plane = ho * wo;
  std::vector<Real> cols;
  detail::im2col(X, k, stride, pad, ho, wo, cols);
  Tensor<Real> Y({cout, ho, wo});
  Eigen::Map<Mat> y(Y.data.data(), cout, plane);
  y.noalias() = Eigen::Map<const Mat>(W.data.data(), cout, rows) * Eigen::Map<const Mat>(cols.data(), rows, plane);
  if (b.valid()) {
    const auto& B = t.value(b);
    for (int co = 0; co < cout; ++co) y.row(co).array() += B[co];
  }
  return t.record(std::move(Y), {x, w, b.valid() ? b : w}, [x, w, b, stride, pad](Tape<Real>& t, std::size_t self) {
    using Mat = detail::RowMajor<Real>;
    const auto& X = t.value(x);
    const auto& W = t.value(w);
    const auto& dY = t.grad_of(self);
    const int cin = X.dim(0);
    const int cout = W.dim(0), k = W.dim(2);
    const int ho = dY.dim(1), wo = dY.dim(2);
    const int rows = cin * k * k, plane = ho * wo;
    Eigen::Map<const Mat> g(dY.data.data(), cout, plane);
    if (b.valid() && t.needs_grad(b)) {
      auto& dB = t.grad(b);
      for (int co = 0; co < cout; ++co) dB[co] += g.row(co).sum();
    }
    if (t.needs_grad(w)) {
      std::vector<Real> cols;
      detail::im2col(X, k, stride, pad, ho, wo, cols);
      Eigen::Map<Mat> dw(t.grad(w).data.data(), cout, rows);
      dw.noalias() += g * Eigen::Map<const Mat>(cols.data(), rows, plane).transpose();
    }
    if (t.needs_grad(x)) {
      Mat dcols = Eigen::Map<const Mat>(W.data.data(), cout, rows).transpose() * g;
      detail::col2im(dcols.data(), k, stride, pad, ho, wo, t.grad(x));
    }
  });
}

/// y = W x + b for a vector x [In], W [Out,In].
template <class Real>
Var linear(Tape<Real>& t, Var x, Var w, Var b) {
  const auto& X = t.value(x);
  const auto& W = t.value(w);
  const int out = W.dim(0), in = W.dim(1);
  if (static_cast<int>(X.numel()) != in) throw ShapeError("linear: input size mismatch");
  Tensor<Real> Y({out});
  const auto& B = t.value(b);
  for (int o = 0; o < out; ++o) {
    Real s = B[o];
    for (int i = 0; i < in; ++i) s += W[static_cast<std::size_t>(o) * in + i] * X[i];
    Y[o] = s;
  }
  return t.record(std::move(Y), {x, w, b}, [x, w, b](Tape<Real>& t, std::size_t self) {
    const auto& X = t.value(x);
    const auto& W = t.value(w);
    const auto& dY = t.grad_of(self);
    const int out = W.dim(0), in = W.dim(1);
    if (t.needs_grad(b)) {
      auto& dB = t.grad(b);
      for (int o = 0; o < out; ++o) dB[o] += dY[o];
    }
    if (t.needs_grad(w)) {
      auto& dW = t.grad(w);
      for (int o = 0; o < out; ++o)
        for (int i = 0; i < in; ++i) dW[static_cast<std::size_t>(o) * in + i] += dY[o] * X[i];
    }
    if (t.needs_grad(x)) {
      auto& dX = t.grad(x);
      for (int o = 0; o < out; ++o)
        for (int i = 0; i < in; ++i) dX[i] += W[static_cast<std::size_t>(o) * in + i] * dY[o];
    }
  });
}

template <class Real>
Var silu(Tape<Real>& t, Var x) {
  auto Y = t.value(x);
  for (auto& v : Y.data) v = v / (Real(1) + std::exp(-v));
  return t.record(std::move(Y), {x}, [x](Tape<Real>& t, std::size_t self) {
    const auto& X = t.value(x);
    const auto& dY = t.grad_of(self);
    auto& dX = t.grad(x);
    for (std::size_t i = 0; i < X.numel(); ++i) {
      const Real s = Real(1) / (Real(1) + std::exp(-X[i]));
      dX[i] += dY[i] * s * (Real(1) + X[i] * (Real(1) - s));
    }
  });
}

template <class Real>
Var relu(Tape<Real>& t, Var x) {
  auto Y = t.value(x);
  for (auto& v : Y.data) v = v > Real(0) ? v : Real(0);
  return t.record(std::move(Y), {x}, [x](Tape<Real>& t, std::size_t self) {
    const auto& X = t.value(x);
    const auto& dY = t.grad_of(self);
    auto& dX = t.grad(x);
    for (std::size_t i = 0; i < X.numel(); ++i)
      if (X[i] > Real(0)) dX[i] += dY[i];
  });
}

template <class Real>
Var add(Tape<Real>& t, Var a, Var b) {
  if (t.value(a).shape != t.value(b).shape) throw ShapeError("add: shape mismatch");
  auto Y = t.value(a);
  const auto& B = t.value(b);
  for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] += B[i];
  return t.record(std::move(Y), {a, b}, [a, b](Tape<Real>& t, std::size_t self) {
    const auto& dY = t.grad_of(self);
    for (Var v : {a, b})
      if (t.needs_grad(v)) {
        auto& d = t.grad(v);
        for (std::size_t i = 0; i < dY.numel(); ++i) d[i] += dY[i];
      }
  });
}

/// x [C,H,W] plus a per-channel vector v [C].
template <class Real>
Var add_channel(Tape<Real>& t, Var x, Var v) {
  auto Y = t.value(x);
  const auto& V = t.value(v);
  const int c = Y.dim(0), hw = Y.dim(1) * Y.dim(2);
  if (static_cast<int>(V.numel()) != c) throw ShapeError("add_channel: channel mismatch");
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) (Y.ptr(ch, 0, 0))[i] += V[ch];
  return t.record(std::move(Y), {x, v}, [x, v](Tape<Real>& t, std::size_t self) {
    const auto& dY = t.grad_of(self);
    const int c = dY.dim(0), hw = dY.dim(1) * dY.dim(2);
    if (t.needs_grad(x)) {
      auto& dX = t.grad(x);
      for (std::size_t i = 0; i < dY.numel(); ++i) dX[i] += dY[i];
    }
    if (t.needs_grad(v)) {
      auto& dV = t.grad(v);
      for (int ch = 0; ch < c; ++ch) {
        Real s = 0;
        for (int i = 0; i < hw; ++i) s += (dY.ptr(ch, 0, 0))[i];
        dV[ch] += s;
      }
    }
  });
}

inline constexpr double kGroupNormEps = 1e-5;

/// Group normalization without affine parameters: per group of C/groups
/// channels, subtract the mean and divide by sqrt(var + eps).
template <class Real>
Var group_norm(Tape<Real>& t, Var x, int groups) {
  const auto& X = t.value(x);
  const int c = X.dim(0);
  if (groups <= 0 || c % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible by " + std::to_string(groups) +
                     " groups");
  const std::size_t per = X.numel() / static_cast<std::size_t>(groups);
  Tensor<Real> Y(X.shape);
  std::vector<Real> inv_std(groups);
  for (int g = 0; g < groups; ++g) {
    const Real* in = X.data.data() + g * per;
    double mean = 0;
    for (std::size_t i = 0; i < per; ++i) mean += in[i];
    mean /= static_cast<double>(per);
    double var = 0;
    for (std::size_t i = 0; i < per; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<double>(per);
    const double is = 1.0 / std::sqrt(var + kGroupNormEps);
    inv_std[g] = static_cast<Real>(is);
    Real* out = Y.data.data() + g * per;
    for (std::size_t i = 0; i < per; ++i) out[i] = static_cast<Real>((in[i] - mean) * is);
  }
  return t.record(std::move(Y), {x}, [x, groups, inv_std](Tape<Real>& t, std::size_t self) {
    const auto& Xh = t.value(Var{self});
    const auto& dY = t.grad_of(self);
    auto& dX = t.grad(x);
    const std::size_t per = Xh.numel() / static_cast<std::size_t>(groups);
    for (int g = 0; g < groups; ++g) {
      const Real* xh = Xh.data.data() + g * per;
      const Real* gy = dY.data.data() + g * per;
      double m1 = 0, m2 = 0;
      for (std::size_t i = 0; i < per; ++i) {
        m1 += gy[i];
        m2 += gy[i] * xh[i];
      }
      m1 /= static_cast<double>(per);
      m2 /= static_cast<double>(per);
      Real* d = dX.data.data() + g * per;
      for (std::size_t i = 0; i < per; ++i)
        d[i] += static_cast<Real>(inv_std[g] * (gy[i] - m1 - xh[i] * m2));
    }
  });
}

/// h * (1 + gamma) + beta, all [C,H,W].
template <class Real>
Var modulate(Tape<Real>& t, Var h, Var gamma, Var beta) {
  const auto& H = t.value(h);
  const auto& G = t.value(gamma);
  const auto& B = t.value(beta);
  if (H.shape != G.shape || H.shape != B.shape)
    throw ShapeError("modulate: " + shape_str(H.shape) + " vs gamma " + shape_str(G.shape) + " / beta " +
                     shape_str(B.shape));
  Tensor<Real> Y(H.shape);
  for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] = H[i] * (Real(1) + G[i]) + B[i];
  return t.record(std::move(Y), {h, gamma, beta}, [h, gamma, beta](Tape<Real>& t, std::size_t self) {
    const auto& H = t.value(h);
    const auto& G = t.value(gamma);
    const auto& dY = t.grad_of(self);
    if (t.needs_grad(h)) {
      auto& d = t.grad(h);
      for (std::size_t i = 0; i < dY.numel(); ++i) d[i] += dY[i] * (Real(1) + G[i]);
    }
    if (t.needs_grad(gamma)) {
      auto& d = t.grad(gamma);
      for (std::size_t i = 0; i < dY.numel(); ++i) d[i] += dY[i] * H[i];
    }
    if (t.needs_grad(beta)) {
      auto& d = t.grad(beta);
      for (std::size_t i = 0; i < dY.numel(); ++i) d[i] += dY[i];
    }
  });
}

/// 2x2 average pooling; H and W must be even.
template <class Real>
Var avg_pool2(Tape<Real>& t, Var x) {
  const auto& X = t.value(x);
  const int c = X.dim(0), h = X.dim(1), w = X.dim(2);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial size");
  Tensor<Real> Y({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int xx = 0; xx < w / 2; ++xx)
        Y.at(ch, y, xx) = Real(0.25) * (X.at(ch, 2 * y, 2 * xx) + X.at(ch, 2 * y, 2 * xx + 1) +
                                        X.at(ch, 2 * y + 1, 2 * xx) + X.at(ch, 2 * y + 1, 2 * xx + 1));
  return t.record(std::move(Y), {x}, [x](Tape<Real>& t, std::size_t self) {
    const auto& dY = t.grad_of(self);
    auto& dX = t.grad(x);
    for (int ch = 0; ch < dY.dim(0); ++ch)
      for (int y = 0; y < dY.dim(1); ++y)
        for (int xx = 0; xx < dY.dim(2); ++xx) {
          const Real g = Real(0.25) * dY.at(ch, y, xx);
          dX.at(ch, 2 * y, 2 * xx) += g;
          dX.at(ch, 2 * y, 2 * xx + 1) += g;
          dX.at(ch, 2 * y + 1, 2 * xx) += g;
          dX.at(ch, 2 * y + 1, 2 * xx + 1) += g;
        }
  });
}

/// Nearest-neighbour 2x upsampling.
template <class Real>
Var upsample2(Tape<Real>& t, Var x) {
  const auto& X = t.value(x);
  const int c = X.dim(0), h = X.dim(1), w = X.dim(2);
  Tensor<Real> Y({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) Y.at(ch, y, xx) = X.at(ch, y / 2, xx / 2);
  return t.record(std::move(Y), {x}, [x](Tape<Real>& t, std::size_t self) {
    const auto& dY = t.grad_of(self);
    auto& dX = t.grad(x);
    for (int ch = 0; ch < dY.dim(0); ++ch)
      for (int y = 0; y < dY.dim(1); ++y)
        for (int xx = 0; xx < dY.dim(2); ++xx) dX.at(ch, y / 2, xx / 2) += dY.at(ch, y, xx);
  });
}

/// Channel concatenation of two [C,H,W] tensors.
template <class Real>
Var concat(Tape<Real>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.dim(1) != B.dim(1) || A.dim(2) != B.dim(2)) throw ShapeError("concat: spatial mismatch");
  Tensor<Real> Y({A.dim(0) + B.dim(0), A.dim(1), A.dim(2)});
  std::copy(A.data.begin(), A.data.end(), Y.data.begin());
  std::copy(B.data.begin(), B.data.end(), Y.data.begin() + static_cast<std::ptrdiff_t>(A.numel()));
  return t.record(std::move(Y), {a, b}, [a, b](Tape<Real>& t, std::size_t self) {
    const auto& dY = t.grad_of(self);
    const std::size_t na = t.value(a).numel();
    if (t.needs_grad(a)) {
      auto& d = t.grad(a);
      for (std::size_t i = 0; i < na; ++i) d[i] += dY[i];
    }
    if (t.needs_grad(b)) {
      auto& d = t.grad(b);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += dY[na + i];
    }
  });
}

/// Shared 1x1 fusion over channel pairs: stack [2N,H,W] holds (a_k, b_k) at
/// channels (2k, 2k+1); output channel k is w0*a_k + w1*b_k + bias.
template <class Real>
Var fuse_pairs(Tape<Real>& t, Var stack, Var w, Var bias) {
  const auto& S = t.value(stack);
  const auto& W = t.value(w);
  const Real b = t.value(bias)[0];
  if (S.dim(0) % 2) throw ShapeError("fuse_pairs: odd channel count");
  const int n = S.dim(0) / 2, hw = S.dim(1) * S.dim(2);
  Tensor<Real> Y({n, S.dim(1), S.dim(2)});
  for (int k = 0; k < n; ++k) {
    const Real* a = S.ptr(2 * k, 0, 0);
    const Real* l = S.ptr(2 * k + 1, 0, 0);
    Real* o = Y.ptr(k, 0, 0);
    for (int i = 0; i < hw; ++i) o[i] = W[0] * a[i] + W[1] * l[i] + b;
  }
  return t.record(std::move(Y), {stack, w, bias}, [stack, w, bias](Tape<Real>& t, std::size_t self) {
    const auto& S = t.value(stack);
    const auto& W = t.value(w);
    const auto& dY = t.grad_of(self);
    const int n = dY.dim(0), hw = dY.dim(1) * dY.dim(2);
    Real g0 = 0, g1 = 0, gb = 0;
    for (int k = 0; k < n; ++k) {
      const Real* a = S.ptr(2 * k, 0, 0);
      const Real* l = S.ptr(2 * k + 1, 0, 0);
      const Real* g = dY.ptr(k, 0, 0);
      for (int i = 0; i < hw; ++i) {
        g0 += g[i] * a[i];
        g1 += g[i] * l[i];
        gb += g[i];
      }
    }
    if (t.needs_grad(w)) {
      t.grad(w)[0] += g0;
      t.grad(w)[1] += g1;
    }
    if (t.needs_grad(bias)) t.grad(bias)[0] += gb;
    if (t.needs_grad(stack)) {
      auto& dS = t.grad(stack);
      for (int k = 0; k < n; ++k)
        for (int i = 0; i < hw; ++i) {
          (dS.ptr(2 * k, 0, 0))[i] += W[0] * (dY.ptr(k, 0, 0))[i];
          (dS.ptr(2 * k + 1, 0, 0))[i] += W[1] * (dY.ptr(k, 0, 0))[i];
        }
    }
  });
}

/// Mean squared error against a constant target; returns a scalar.
template <class Real>
Var mse(Tape<Real>& t, Var pred, const Tensor<Real>& target, Real scale = Real(1)) {
  const auto& P = t.value(pred);
  if (P.shape != target.shape) throw ShapeError("mse: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < P.numel(); ++i) s += (double(P[i]) - target[i]) * (double(P[i]) - target[i]);
  Tensor<Real> Y({1}, static_cast<Real>(scale * s / static_cast<double>(P.numel())));
  return t.record(std::move(Y), {pred}, [pred, target, scale](Tape<Real>& t, std::size_t self) {
    const auto& P = t.value(pred);
    const Real g = t.grad_of(self)[0] * scale * Real(2) / static_cast<Real>(P.numel());
    auto& dP = t.grad(pred);
    for (std::size_t i = 0; i < P.numel(); ++i) dP[i] += g * (P[i] - target[i]);
  });
}

/// Sinusoidal embedding of a diffusion step: half sines, half cosines with
/// geometrically spaced frequencies.
template <class Real>
Tensor<Real> timestep_embedding(double step, int dim) {
  Tensor<Real> e({dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    e[i] = static_cast<Real>(std::sin(step * freq));
    e[half + i] = static_cast<Real>(std::cos(step * freq));
  }
  return e;
}

}  // namespace impervia::nn
