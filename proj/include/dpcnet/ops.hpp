#pragma once

// Differentiable operations. Every function takes Var handles living on the
// same Graph and appends exactly one node.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dpcnet/autodiff.hpp"
#include "dpcnet/kernels.hpp"

namespace dpcnet {

using kernels::ConvOptions;

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  std::array<std::size_t, 4> out{};
  const auto da = a.dims();
  const auto db = b.dims();
  for (std::size_t i = 0; i < 4; ++i) {
    if (da[i] == db[i] || db[i] == 1) {
      out[i] = da[i];
    } else if (da[i] == 1) {
      out[i] = db[i];
    } else {
      throw DimensionError(std::string(op) + ": cannot broadcast " + a.str() + " with " +
                           b.str());
    }
  }
  return Shape::from_dims(out);
}

// Strides of `s` when read as if it had shape `out` (zero on broadcast axes).
inline std::array<std::size_t, 4> broadcast_strides(const Shape& s, const Shape& out) {
  auto st = s.strides();
  const auto d = s.dims();
  const auto o = out.dims();
  for (std::size_t i = 0; i < 4; ++i) {
    if (d[i] == 1 && o[i] != 1) st[i] = 0;
  }
  return st;
}

template <typename T, typename F>
Tensor<T> broadcast_apply(const Tensor<T>& a, const Tensor<T>& b, const Shape& out, F f) {
  Tensor<T> r(out);
  if (a.shape() == out && b.shape() == out) {
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = f(a[i], b[i]);
    return r;
  }
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  std::size_t k = 0;
  for (std::size_t n = 0; n < out.n; ++n) {
    for (std::size_t c = 0; c < out.c; ++c) {
      for (std::size_t h = 0; h < out.h; ++h) {
        const T* pa = a.ptr() + n * sa[0] + c * sa[1] + h * sa[2];
        const T* pb = b.ptr() + n * sb[0] + c * sb[1] + h * sb[2];
        for (std::size_t w = 0; w < out.w; ++w) r[k++] = f(pa[w * sa[3]], pb[w * sb[3]]);
      }
    }
  }
  return r;
}

// Sums `g` down to `target` over the axes where target has extent 1.
template <typename T>
Tensor<T> sum_to(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor<T> r(target);
  const auto st = broadcast_strides(target, g.shape());
  const Shape& s = g.shape();
  std::size_t k = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t h = 0; h < s.h; ++h) {
        T* pr = r.ptr() + n * st[0] + c * st[1] + h * st[2];
        for (std::size_t w = 0; w < s.w; ++w) pr[w * st[3]] += g[k++];
      }
    }
  }
  return r;
}

template <typename T>
void check_same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw ContractError("operands live on different graphs");
}

template <typename T, typename F, typename D>
Var<T> unary(const char* op, const Var<T>& x, F f, D dfdx) {
  Tensor<T> y(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  const NodeId xi = x.id();
  return x.graph().record(op, {xi}, std::move(y), [xi, dfdx](Graph<T>& g, NodeId self) {
    const Tensor<T>& xv = g.value(xi);
    const Tensor<T>& yv = g.value(self);
    const Tensor<T>& gy = g.grad(self);
    Tensor<T> gx(xv.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gy[i] * dfdx(xv[i], yv[i]);
    g.accumulate(xi, std::move(gx));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with NCHW broadcasting (extent-1 axes stretch).

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b);
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = detail::broadcast_apply(a.value(), b.value(), out, [](T x, T z) { return x + z; });
  const NodeId ai = a.id(), bi = b.id();
  return a.graph().record("add", {ai, bi}, std::move(y), [ai, bi](Graph<T>& g, NodeId self) {
    const Tensor<T>& gy = g.grad(self);
    if (g.needs_grad(ai)) g.accumulate(ai, detail::sum_to(gy, g.value(ai).shape()));
    if (g.needs_grad(bi)) g.accumulate(bi, detail::sum_to(gy, g.value(bi).shape()));
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b);
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = detail::broadcast_apply(a.value(), b.value(), out, [](T x, T z) { return x - z; });
  const NodeId ai = a.id(), bi = b.id();
  return a.graph().record("sub", {ai, bi}, std::move(y), [ai, bi](Graph<T>& g, NodeId self) {
    const Tensor<T>& gy = g.grad(self);
    if (g.needs_grad(ai)) g.accumulate(ai, detail::sum_to(gy, g.value(ai).shape()));
    if (g.needs_grad(bi)) {
      Tensor<T> gb = detail::sum_to(gy, g.value(bi).shape());
      gb *= T{-1};
      g.accumulate(bi, std::move(gb));
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b);
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = detail::broadcast_apply(a.value(), b.value(), out, [](T x, T z) { return x * z; });
  const NodeId ai = a.id(), bi = b.id();
  return a.graph().record("mul", {ai, bi}, std::move(y), [ai, bi, out](Graph<T>& g, NodeId self) {
    const Tensor<T>& gy = g.grad(self);
    const Tensor<T>& av = g.value(ai);
    const Tensor<T>& bv = g.value(bi);
    auto prod = [](T x, T z) { return x * z; };
    if (g.needs_grad(ai)) {
      g.accumulate(ai, detail::sum_to(detail::broadcast_apply(gy, bv, out, prod), av.shape()));
    }
    if (g.needs_grad(bi)) {
      g.accumulate(bi, detail::sum_to(detail::broadcast_apply(gy, av, out, prod), bv.shape()));
    }
  });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return 2 * v; });
}

// Subgradient 0 at the origin.
namespace detail {

// Folds the sign pattern of x into the graph's branch trace, when enabled.
template <typename T>
void trace_signs(const Var<T>& x) {
  Graph<T>& g = x.graph();
  if (!g.tracing_branches()) return;
  const Tensor<T>& v = x.value();
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    word = (word << 2) | (v[i] > 0 ? 1u : (v[i] < 0 ? 2u : 0u));
    if (i % 32 == 31) {
      g.trace_branch(word);
      word = 0;
    }
  }
  g.trace_branch(word);
}

}  // namespace detail

template <typename T>
Var<T> abs(const Var<T>& x) {
  detail::trace_signs(x);
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > 0 ? T{1} : (v < 0 ? T{-1} : T{0}); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  detail::trace_signs(x);
  return detail::unary<T>(
      "relu", x, [](T v) { return v > 0 ? v : T{0}; }, [](T v, T) { return v > 0 ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
      [](T, T y) { return y * (T{1} - y); });
}

// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T{1} + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T{1} + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  const NodeId xi = x.id();
  return x.graph().record("sum", {xi}, Tensor<T>(Shape{1, 1, 1, 1}, s),
                          [xi](Graph<T>& g, NodeId self) {
                            g.accumulate(xi, Tensor<T>(g.value(xi).shape(), g.grad(self)[0]));
                          });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const T inv = T{1} / static_cast<T>(x.value().size());
  T s{0};
  for (T v : x.value().data()) s += v;
  const NodeId xi = x.id();
  return x.graph().record("mean", {xi}, Tensor<T>(Shape{1, 1, 1, 1}, s * inv),
                          [xi, inv](Graph<T>& g, NodeId self) {
                            g.accumulate(xi,
                                         Tensor<T>(g.value(xi).shape(), g.grad(self)[0] * inv));
                          });
}

namespace detail {
inline Shape collapse_axis(Shape s, std::size_t axis) {
  auto d = s.dims();
  d[axis] = 1;
  return Shape::from_dims(d);
}
}  // namespace detail

// Mean along one axis, keeping it with extent 1.
template <typename T>
Var<T> mean_axis(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  const Shape os = detail::collapse_axis(s, axis);
  Tensor<T> y(os);
  const T inv = T{1} / static_cast<T>(s[axis]);
  std::size_t k = 0;
  kernels::for_each_fibre(s, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    T acc{0};
    for (std::size_t i = 0; i < len; ++i) acc += x.value()[base + i * stride];
    y[k++] = acc * inv;
  });
  const NodeId xi = x.id();
  return x.graph().record("mean_axis", {xi}, std::move(y),
                          [xi, axis, inv](Graph<T>& g, NodeId self) {
                            const Tensor<T>& gy = g.grad(self);
                            Tensor<T> gx(g.value(xi).shape());
                            std::size_t k = 0;
                            kernels::for_each_fibre(
                                gx.shape(), axis,
                                [&](std::size_t base, std::size_t stride, std::size_t len) {
                                  const T v = gy[k++] * inv;
                                  for (std::size_t i = 0; i < len; ++i) gx[base + i * stride] = v;
                                });
                            g.accumulate(xi, std::move(gx));
                          });
}

// Max along one axis (keepdim). Gradient routes to the first maximiser.
template <typename T>
Var<T> max_axis(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  Tensor<T> y(detail::collapse_axis(s, axis));
  std::vector<std::size_t> arg(y.size());
  std::size_t k = 0;
  kernels::for_each_fibre(s, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    std::size_t best = base;
    for (std::size_t i = 1; i < len; ++i) {
      if (x.value()[base + i * stride] > x.value()[best]) best = base + i * stride;
    }
    arg[k] = best;
    y[k++] = x.value()[best];
  });
  if (x.graph().tracing_branches()) {
    for (std::size_t a : arg) x.graph().trace_branch(a);
  }
  const NodeId xi = x.id();
  return x.graph().record("max_axis", {xi}, std::move(y),
                          [xi, arg = std::move(arg)](Graph<T>& g, NodeId self) {
                            const Tensor<T>& gy = g.grad(self);
                            Tensor<T> gx(g.value(xi).shape());
                            for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += gy[i];
                            g.accumulate(xi, std::move(gx));
                          });
}

// ---------------------------------------------------------------------------
// Layout.

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(shape);
  const NodeId xi = x.id();
  return x.graph().record("reshape", {xi}, std::move(y), [xi](Graph<T>& g, NodeId self) {
    g.accumulate(xi, g.grad(self).reshaped(g.value(xi).shape()));
  });
}

namespace detail {
template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::array<std::size_t, 4>& perm) {
  const auto d = x.shape().dims();
  const auto st = x.shape().strides();
  const Shape os{d[perm[0]], d[perm[1]], d[perm[2]], d[perm[3]]};
  const std::array<std::size_t, 4> ist{st[perm[0]], st[perm[1]], st[perm[2]], st[perm[3]]};
  Tensor<T> y(os);
  std::size_t k = 0;
  for (std::size_t a = 0; a < os.n; ++a) {
    for (std::size_t b = 0; b < os.c; ++b) {
      for (std::size_t c = 0; c < os.h; ++c) {
        const T* src = x.ptr() + a * ist[0] + b * ist[1] + c * ist[2];
        for (std::size_t e = 0; e < os.w; ++e) y[k++] = src[e * ist[3]];
      }
    }
  }
  return y;
}
}  // namespace detail

// Output axis i is input axis perm[i].
template <typename T>
Var<T> permute(const Var<T>& x, std::array<std::size_t, 4> perm) {
  std::array<std::size_t, 4> inv{};
  std::array<bool, 4> seen{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (perm[i] > 3 || seen[perm[i]]) throw ContractError("permute: invalid permutation");
    seen[perm[i]] = true;
    inv[perm[i]] = i;
  }
  const NodeId xi = x.id();
  return x.graph().record("permute", {xi}, detail::permute_tensor(x.value(), perm),
                          [xi, inv](Graph<T>& g, NodeId self) {
                            g.accumulate(xi, detail::permute_tensor(g.grad(self), inv));
                          });
}

// Swaps the trailing two axes.
template <typename T>
Var<T> transpose(const Var<T>& x) {
  return permute(x, {0, 1, 3, 2});
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  const Shape& s0 = xs.front().shape();
  std::size_t channels = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw DimensionError("concat_channels: " + s0.str() + " vs " + s.str());
    }
    detail::check_same_graph(xs.front(), x);
    channels += s.c;
    ids.push_back(x.id());
    widths.push_back(s.c);
  }
  Tensor<T> y(Shape{s0.n, channels, s0.h, s0.w});
  const std::size_t hw = s0.plane();
  for (std::size_t n = 0; n < s0.n; ++n) {
    std::size_t c0 = 0;
    for (const auto& x : xs) {
      const std::size_t cc = x.shape().c;
      std::copy_n(x.value().plane(n, 0), cc * hw, y.plane(n, c0));
      c0 += cc;
    }
  }
  return xs.front().graph().record(
      "concat", ids, std::move(y), [ids, widths](Graph<T>& g, NodeId self) {
        const Tensor<T>& gy = g.grad(self);
        const Shape& s = gy.shape();
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (g.needs_grad(ids[i])) {
            Tensor<T> gx(Shape{s.n, widths[i], s.h, s.w});
            for (std::size_t n = 0; n < s.n; ++n) {
              std::copy_n(gy.plane(n, c0), widths[i] * s.plane(), gx.plane(n, 0));
            }
            g.accumulate(ids[i], std::move(gx));
          }
          c0 += widths[i];
        }
      });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (begin + count > s.c) {
    throw DimensionError("slice_channels: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + s.str());
  }
  Tensor<T> y(Shape{s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(x.value().plane(n, begin), count * s.plane(), y.plane(n, 0));
  }
  const NodeId xi = x.id();
  return x.graph().record("slice", {xi}, std::move(y),
                          [xi, begin, count](Graph<T>& g, NodeId self) {
                            const Tensor<T>& gy = g.grad(self);
                            Tensor<T> gx(g.value(xi).shape());
                            for (std::size_t n = 0; n < gx.shape().n; ++n) {
                              std::copy_n(gy.plane(n, 0), count * gx.shape().plane(),
                                          gx.plane(n, begin));
                            }
                            g.accumulate(xi, std::move(gx));
                          });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution.

// Batched over (N, C): [N,C,M,K] x [N,C,K,P] -> [N,C,M,P]. Rank-2 operands are
// 1x1xMxK tensors.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b);
  Tensor<T> y = kernels::matmul_forward(a.value(), b.value());
  const NodeId ai = a.id(), bi = b.id();
  return a.graph().record("matmul", {ai, bi}, std::move(y), [ai, bi](Graph<T>& g, NodeId self) {
    const Tensor<T>& gy = g.grad(self);
    const Tensor<T>& av = g.value(ai);
    const Tensor<T>& bv = g.value(bi);
    const Shape& sa = av.shape();
    const Shape& sb = bv.shape();
    const std::size_t batches = sa.n * sa.c;
    const std::size_t m = sa.h, k = sa.w, p = sb.w;
    if (g.needs_grad(ai)) {
      Tensor<T> ga(sa);
      for (std::size_t i = 0; i < batches; ++i) {
        kernels::gemm(gy.ptr() + i * m * p, bv.ptr() + i * k * p, ga.ptr() + i * m * k, m, p, k,
                      false, true);
      }
      g.accumulate(ai, std::move(ga));
    }
    if (g.needs_grad(bi)) {
      Tensor<T> gb(sb);
      for (std::size_t i = 0; i < batches; ++i) {
        kernels::gemm(av.ptr() + i * m * k, gy.ptr() + i * m * p, gb.ptr() + i * k * p, k, m, p,
                      true, false);
      }
      g.accumulate(bi, std::move(gb));
    }
  });
}

// Cross-correlation. Weights O x (C/groups) x k x k; bias optional.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>* bias, ConvOptions opts = {}) {
  detail::check_same_graph(x, w);
  Tensor<T> y = kernels::conv2d_forward(x.value(), w.value(), bias ? &bias->value() : nullptr, opts);
  std::vector<NodeId> ids{x.id(), w.id()};
  if (bias) ids.push_back(bias->id());
  return x.graph().record("conv2d", ids, std::move(y), [ids, opts](Graph<T>& g, NodeId self) {
    const Tensor<T>& xv = g.value(ids[0]);
    const Tensor<T>& wv = g.value(ids[1]);
    std::optional<Tensor<T>> gx, gw, gb;
    if (g.needs_grad(ids[0])) gx.emplace(xv.shape());
    if (g.needs_grad(ids[1])) gw.emplace(wv.shape());
    if (ids.size() > 2 && g.needs_grad(ids[2])) gb.emplace(g.value(ids[2]).shape());
    kernels::conv2d_backward(xv, wv, g.grad(self), opts, gx ? &*gx : nullptr,
                             gw ? &*gw : nullptr, gb ? &*gb : nullptr);
    if (gx) g.accumulate(ids[0], std::move(*gx));
    if (gw) g.accumulate(ids[1], std::move(*gw));
    if (gb) g.accumulate(ids[2], std::move(*gb));
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::nullptr_t, ConvOptions opts = {}) {
  return conv2d(x, w, static_cast<const Var<T>*>(nullptr), opts);
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, ConvOptions opts = {}) {
  return conv2d(x, w, &bias, opts);
}

// ---------------------------------------------------------------------------
// Normalisation.

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  Tensor<T> y = kernels::softmax_forward(x.value(), axis);
  const NodeId xi = x.id();
  return x.graph().record("softmax", {xi}, std::move(y), [xi, axis](Graph<T>& g, NodeId self) {
    g.accumulate(xi, kernels::softmax_backward(g.value(self), g.grad(self), axis));
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-position normalisation over channels with per-channel affine.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& bias,
                  T eps = static_cast<T>(kLayerNormEps)) {
  auto xhat = std::make_shared<Tensor<T>>();
  auto inv_std = std::make_shared<std::vector<T>>();
  Tensor<T> y =
      kernels::layer_norm_forward(x.value(), scale.value(), bias.value(), eps, xhat.get(),
                                  inv_std.get());
  const NodeId xi = x.id(), si = scale.id(), bi = bias.id();
  return x.graph().record(
      "layer_norm", {xi, si, bi}, std::move(y),
      [xi, si, bi, xhat, inv_std](Graph<T>& g, NodeId self) {
        const Tensor<T>& sv = g.value(si);
        std::optional<Tensor<T>> gx, gs, gb;
        if (g.needs_grad(xi)) gx.emplace(xhat->shape());
        if (g.needs_grad(si)) gs.emplace(sv.shape());
        if (g.needs_grad(bi)) gb.emplace(g.value(bi).shape());
        kernels::layer_norm_backward(*xhat, *inv_std, sv, g.grad(self), gx ? &*gx : nullptr,
                                     gs ? &*gs : nullptr, gb ? &*gb : nullptr);
        if (gx) g.accumulate(xi, std::move(*gx));
        if (gs) g.accumulate(si, std::move(*gs));
        if (gb) g.accumulate(bi, std::move(*gb));
      });
}

// x / max(||x||, eps) along one axis.
template <typename T>
Var<T> l2_normalize(const Var<T>& x, std::size_t axis, T eps = T(1e-12)) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  std::vector<T> norms;
  kernels::for_each_fibre(xv.shape(), axis,
                          [&](std::size_t base, std::size_t stride, std::size_t len) {
                            T s{0};
                            for (std::size_t i = 0; i < len; ++i) {
                              s += xv[base + i * stride] * xv[base + i * stride];
                            }
                            const T nrm = std::max(std::sqrt(s), eps);
                            norms.push_back(nrm);
                            for (std::size_t i = 0; i < len; ++i) {
                              y[base + i * stride] = xv[base + i * stride] / nrm;
                            }
                          });
  const NodeId xi = x.id();
  return x.graph().record(
      "l2_normalize", {xi}, std::move(y),
      [xi, axis, eps, norms = std::move(norms)](Graph<T>& g, NodeId self) {
        const Tensor<T>& yv = g.value(self);
        const Tensor<T>& gy = g.grad(self);
        Tensor<T> gx(yv.shape());
        std::size_t k = 0;
        kernels::for_each_fibre(
            yv.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
              const T nrm = norms[k++];
              if (nrm <= eps) {
                for (std::size_t i = 0; i < len; ++i) gx[base + i * stride] = gy[base + i * stride] / eps;
                return;
              }
              T d{0};
              for (std::size_t i = 0; i < len; ++i) d += yv[base + i * stride] * gy[base + i * stride];
              for (std::size_t i = 0; i < len; ++i) {
                const std::size_t j = base + i * stride;
                gx[j] = (gy[j] - yv[j] * d) / nrm;
              }
            });
        g.accumulate(xi, std::move(gx));
      });
}

// ---------------------------------------------------------------------------
// Resampling.

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = y.plane(n, c);
      for (std::size_t h = 0; h < 2 * s.h; ++h) {
        for (std::size_t w = 0; w < 2 * s.w; ++w) dst[h * 2 * s.w + w] = src[(h / 2) * s.w + w / 2];
      }
    }
  }
  const NodeId xi = x.id();
  return x.graph().record("upsample", {xi}, std::move(y), [xi](Graph<T>& g, NodeId self) {
    const Tensor<T>& gy = g.grad(self);
    const Shape& s = g.value(xi).shape();
    Tensor<T> gx(s);
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const T* src = gy.plane(n, c);
        T* dst = gx.plane(n, c);
        for (std::size_t h = 0; h < 2 * s.h; ++h) {
          for (std::size_t w = 0; w < 2 * s.w; ++w) dst[(h / 2) * s.w + w / 2] += src[h * 2 * s.w + w];
        }
      }
    }
    g.accumulate(xi, std::move(gx));
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ConfigError("avg_pool2: odd spatial extent in " + s.str());
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> y(os);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = y.plane(n, c);
      for (std::size_t h = 0; h < os.h; ++h) {
        for (std::size_t w = 0; w < os.w; ++w) {
          const T* p = src + 2 * h * s.w + 2 * w;
          dst[h * os.w + w] = T(0.25) * ((p[0] + p[1]) + (p[s.w] + p[s.w + 1]));
        }
      }
    }
  }
  const NodeId xi = x.id();
  return x.graph().record("avg_pool", {xi}, std::move(y), [xi](Graph<T>& g, NodeId self) {
    const Tensor<T>& gy = g.grad(self);
    const Shape& s = g.value(xi).shape();
    Tensor<T> gx(s);
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const T* src = gy.plane(n, c);
        T* dst = gx.plane(n, c);
        for (std::size_t h = 0; h < s.h; ++h) {
          for (std::size_t w = 0; w < s.w; ++w) {
            dst[h * s.w + w] = T(0.25) * src[(h / 2) * (s.w / 2) + w / 2];
          }
        }
      }
    }
    g.accumulate(xi, std::move(gx));
  });
}

}  // namespace dpcnet
