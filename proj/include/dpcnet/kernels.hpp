#pragma once

// Plain forward/backward kernels over Tensor. The differentiable wrappers in
// ops.hpp record these on the tape; nothing here knows about graphs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dpcnet/tensor.hpp"

namespace dpcnet::kernels {

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// Output extent of a strided window sweep. Trailing input rows that no window
// reaches are allowed only when they lie entirely in the zero padding.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t padding) {
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (in + 2 * padding < k) {
    throw ConfigError("conv2d: kernel " + std::to_string(k) + " larger than padded extent " +
                      std::to_string(in + 2 * padding));
  }
  const std::size_t span = in + 2 * padding - k;
  if (span % stride > padding) {
    throw ConfigError("conv2d: extent " + std::to_string(in) + " with kernel " +
                      std::to_string(k) + ", stride " + std::to_string(stride) +
                      ", padding " + std::to_string(padding) +
                      " leaves input pixels uncovered (non-integral output extent)");
  }
  return span / stride + 1;
}

inline Shape conv_out_shape(const Shape& x, const Shape& w, const ConvOptions& o) {
  if (w.h != w.w || w.h % 2 == 0) {
    throw ConfigError("conv2d: kernel must be square with odd extent, got " + w.str());
  }
  if (o.groups == 0 || x.c % o.groups != 0 || w.n % o.groups != 0 || w.c * o.groups != x.c) {
    throw DimensionError("conv2d: input " + x.str() + " incompatible with weights " + w.str() +
                         " at groups=" + std::to_string(o.groups));
  }
  return {x.n, w.n, conv_out_extent(x.h, w.h, o.stride, o.padding),
          conv_out_extent(x.w, w.w, o.stride, o.padding)};
}

namespace detail {

// Range of output columns whose tap at kernel column `kw` lands inside [0, in).
inline void valid_range(std::size_t out, std::size_t in, std::size_t kw, std::size_t stride,
                        std::size_t padding, std::size_t& lo, std::size_t& hi) {
  // ow*stride + kw - padding in [0, in)
  lo = kw >= padding ? 0 : (padding - kw + stride - 1) / stride;
  if (in + padding <= kw) {
    hi = 0;
  } else {
    hi = std::min(out, (in + padding - kw - 1) / stride + 1);
  }
  if (hi < lo) hi = lo;
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

namespace detail {

// Unfolds one image of a dense (groups = 1) convolution into a
// (C*k*k) x (OH*OW) matrix; out-of-range taps are zero.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            const ConvOptions& o, std::size_t OH, std::size_t OW, T* col) {
  const std::size_t P = OH * OW;
  std::fill(col, col + C * k * k * P, T{0});
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = x + c * H * W;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        T* dst = col + ((c * k + kh) * k + kw) * P;
        std::size_t lo, hi;
        valid_range(OW, W, kw, o.stride, o.padding, lo, hi);
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * o.stride + kh) -
                                    static_cast<std::ptrdiff_t>(o.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          const T* srow = src + static_cast<std::size_t>(ih) * W;
          T* drow = dst + oh * OW;
          for (std::size_t ow = lo; ow < hi; ++ow) drow[ow] = srow[ow * o.stride + kw - o.padding];
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image.
template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            const ConvOptions& o, std::size_t OH, std::size_t OW, T* gx) {
  const std::size_t P = OH * OW;
  for (std::size_t c = 0; c < C; ++c) {
    T* dst = gx + c * H * W;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const T* src = col + ((c * k + kh) * k + kw) * P;
        std::size_t lo, hi;
        valid_range(OW, W, kw, o.stride, o.padding, lo, hi);
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * o.stride + kh) -
                                    static_cast<std::ptrdiff_t>(o.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          T* drow = dst + static_cast<std::size_t>(ih) * W;
          const T* srow = src + oh * OW;
          for (std::size_t ow = lo; ow < hi; ++ow) drow[ow * o.stride + kw - o.padding] += srow[ow];
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p,
          bool trans_a, bool trans_b);

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         const ConvOptions& o) {
  const Shape os = conv_out_shape(x.shape(), w.shape(), o);
  if (bias && bias->size() != os.c) {
    throw DimensionError("conv2d: bias " + bias->shape().str() + " for " +
                         std::to_string(os.c) + " output channels");
  }
  Tensor<T> out(os);
  const std::size_t k = w.shape().h;
  const std::size_t cg = w.shape().c;
  const std::size_t og = os.c / o.groups;
  const std::size_t H = x.shape().h, W = x.shape().w;
  const bool pointwise = k == 1 && o.stride == 1 && o.padding == 0;

  if (o.groups == 1 && (pointwise || os.c >= 4)) {
    const std::size_t K = cg * k * k;
    std::vector<T> col(pointwise ? 0 : K * os.plane());
    for (std::size_t n = 0; n < os.n; ++n) {
      T* dst = out.plane(n, 0);
      if (bias) {
        for (std::size_t oc = 0; oc < os.c; ++oc) {
          std::fill(dst + oc * os.plane(), dst + (oc + 1) * os.plane(), (*bias)[oc]);
        }
      }
      const T* cols = x.plane(n, 0);
      if (!pointwise) {
        detail::im2col(cols, cg, H, W, k, o, os.h, os.w, col.data());
        cols = col.data();
      }
      gemm(w.ptr(), cols, dst, os.c, K, os.plane(), false, false);
    }
    return out;
  }

  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t oc = 0; oc < os.c; ++oc) {
      T* dst = out.plane(n, oc);
      if (bias) std::fill(dst, dst + os.plane(), (*bias)[oc]);
      const std::size_t g = oc / og;
      for (std::size_t icl = 0; icl < cg; ++icl) {
        const T* src = x.plane(n, g * cg + icl);
        const T* wk = w.ptr() + (oc * cg + icl) * k * k;
        if (pointwise) {
          detail::axpy(wk[0], src, dst, os.plane());
          continue;
        }
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T wv = wk[kh * k + kw];
            std::size_t lo, hi;
            detail::valid_range(os.w, W, kw, o.stride, o.padding, lo, hi);
            for (std::size_t oh = 0; oh < os.h; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * o.stride + kh) -
                                        static_cast<std::ptrdiff_t>(o.padding);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              const T* srow = src + static_cast<std::size_t>(ih) * W;
              T* drow = dst + oh * os.w;
              if (o.stride == 1) {
                for (std::size_t ow = lo; ow < hi; ++ow) drow[ow] += wv * srow[ow + kw - o.padding];
              } else {
                for (std::size_t ow = lo; ow < hi; ++ow) {
                  drow[ow] += wv * srow[ow * o.stride + kw - o.padding];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Accumulates into gx / gw / gb when non-null (each must be pre-shaped).
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout,
                     const ConvOptions& o, Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const Shape& os = gout.shape();
  const std::size_t k = w.shape().h;
  const std::size_t cg = w.shape().c;
  const std::size_t og = os.c / o.groups;
  const std::size_t H = x.shape().h, W = x.shape().w;
  const bool pointwise = k == 1 && o.stride == 1 && o.padding == 0;

  if (o.groups == 1 && (pointwise || os.c >= 4)) {
    const std::size_t K = cg * k * k;
    const std::size_t P = os.plane();
    std::vector<T> col(pointwise ? 0 : K * P);
    std::vector<T> gcol(gx && !pointwise ? K * P : 0);
    for (std::size_t n = 0; n < os.n; ++n) {
      const T* go = gout.plane(n, 0);
      if (gb) {
        for (std::size_t oc = 0; oc < os.c; ++oc) {
          T s{0};
          for (std::size_t i = 0; i < P; ++i) s += go[oc * P + i];
          (*gb)[oc] += s;
        }
      }
      if (gw) {
        const T* cols = x.plane(n, 0);
        if (!pointwise) {
          detail::im2col(cols, cg, H, W, k, o, os.h, os.w, col.data());
          cols = col.data();
        }
        gemm(go, cols, gw->ptr(), os.c, P, K, false, true);
      }
      if (gx && pointwise) {
        gemm(w.ptr(), go, gx->plane(n, 0), K, os.c, P, true, false);
      } else if (gx) {
        std::fill(gcol.begin(), gcol.end(), T{0});
        gemm(w.ptr(), go, gcol.data(), K, os.c, P, true, false);
        detail::col2im(gcol.data(), cg, H, W, k, o, os.h, os.w, gx->plane(n, 0));
      }
    }
    return;
  }

  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t oc = 0; oc < os.c; ++oc) {
      const T* go = gout.plane(n, oc);
      if (gb) {
        T s{0};
        for (std::size_t i = 0; i < os.plane(); ++i) s += go[i];
        (*gb)[oc] += s;
      }
      const std::size_t g = oc / og;
      for (std::size_t icl = 0; icl < cg; ++icl) {
        const std::size_t ic = g * cg + icl;
        const T* src = x.plane(n, ic);
        T* gsrc = gx ? gx->plane(n, ic) : nullptr;
        const std::size_t wbase = (oc * cg + icl) * k * k;
        if (pointwise) {
          if (gw) (*gw)[wbase] += detail::dot(go, src, os.plane());
          if (gsrc) detail::axpy(w[wbase], go, gsrc, os.plane());
          continue;
        }
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T wv = w[wbase + kh * k + kw];
            std::size_t lo, hi;
            detail::valid_range(os.w, W, kw, o.stride, o.padding, lo, hi);
            T acc{0};
            for (std::size_t oh = 0; oh < os.h; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * o.stride + kh) -
                                        static_cast<std::ptrdiff_t>(o.padding);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              const std::size_t row = static_cast<std::size_t>(ih) * W;
              const T* grow = go + oh * os.w;
              if (o.stride == 1 && hi > lo) {
                const std::size_t first = row + lo + kw - o.padding;
                if (gw) acc += detail::dot(grow + lo, src + first, hi - lo);
                if (gsrc) detail::axpy(wv, grow + lo, gsrc + first, hi - lo);
              } else if (o.stride != 1) {
                for (std::size_t ow = lo; ow < hi; ++ow) {
                  const std::size_t iw = ow * o.stride + kw - o.padding;
                  if (gw) acc += grow[ow] * src[row + iw];
                  if (gsrc) gsrc[row + iw] += wv * grow[ow];
                }
              }
            }
            if (gw) (*gw)[wbase + kh * k + kw] += acc;
          }
        }
      }
    }
  }
}

namespace detail {

// y += a0*x0 + a1*x1 + a2*x2 + a3*x3, one pass over y.
template <typename T>
void axpy4(const T* a, const T* x0, const T* x1, const T* x2, const T* x3, T* y, std::size_t n) {
  const T a0 = a[0], a1 = a[1], a2 = a[2], a3 = a[3];
  for (std::size_t i = 0; i < n; ++i) y[i] += (a0 * x0[i] + a1 * x1[i]) + (a2 * x2[i] + a3 * x3[i]);
}

}  // namespace detail

// c (m x p) += op(a) · op(b), where op transposes when requested. Untransposed
// a is m x k and b is k x p.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p,
          bool trans_a, bool trans_b) {
  if (!trans_b) {
    T coef[4];
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * p;
      auto at = [&](std::size_t kk) { return trans_a ? a[kk * m + i] : a[i * k + kk]; };
      std::size_t kk = 0;
      for (; kk + 4 <= k; kk += 4) {
        for (std::size_t j = 0; j < 4; ++j) coef[j] = at(kk + j);
        detail::axpy4(coef, b + kk * p, b + (kk + 1) * p, b + (kk + 2) * p, b + (kk + 3) * p, crow,
                      p);
      }
      for (; kk < k; ++kk) detail::axpy(at(kk), b + kk * p, crow, p);
    }
  } else if (!trans_a) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < p; ++j) c[i * p + j] += detail::dot(a + i * k, b + j * k, k);
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < p; ++j) {
        T s{0};
        for (std::size_t kk = 0; kk < k; ++kk) s += a[kk * m + i] * b[j * k + kk];
        c[i * p + j] += s;
      }
    }
  }
}

template <typename T>
Tensor<T> matmul_forward(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.c != sb.c || sa.w != sb.h) {
    throw DimensionError("matmul: cannot multiply " + sa.str() + " by " + sb.str());
  }
  Tensor<T> out(Shape{sa.n, sa.c, sa.h, sb.w});
  const std::size_t batches = sa.n * sa.c;
  for (std::size_t bi = 0; bi < batches; ++bi) {
    gemm(a.ptr() + bi * sa.plane(), b.ptr() + bi * sb.plane(), out.ptr() + bi * sa.h * sb.w,
         sa.h, sa.w, sb.w, false, false);
  }
  return out;
}

// Walks every 1-D fibre along `axis`: fn(base_offset, stride, length).
template <typename F>
void for_each_fibre(const Shape& s, std::size_t axis, F&& fn) {
  const auto dims = s.dims();
  const auto strides = s.strides();
  const std::size_t len = dims[axis];
  const std::size_t stride = strides[axis];
  std::size_t before = 1;
  for (std::size_t i = 0; i < axis; ++i) before *= dims[i];
  for (std::size_t o = 0; o < before; ++o) {
    for (std::size_t in = 0; in < stride; ++in) fn(o * len * stride + in, stride, len);
  }
}

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x, std::size_t axis) {
  if (axis > 3) throw ContractError("softmax: axis " + std::to_string(axis) + " out of range");
  Tensor<T> y(x.shape());
  for_each_fibre(x.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, x[base + i * stride]);
    T sum{0};
    for (std::size_t i = 0; i < len; ++i) {
      const T e = std::exp(x[base + i * stride] - mx);
      y[base + i * stride] = e;
      sum += e;
    }
    const T inv = T{1} / sum;
    for (std::size_t i = 0; i < len; ++i) y[base + i * stride] *= inv;
  });
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& gy, std::size_t axis) {
  Tensor<T> gx(y.shape());
  for_each_fibre(y.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    T s{0};
    for (std::size_t i = 0; i < len; ++i) s += gy[base + i * stride] * y[base + i * stride];
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t j = base + i * stride;
      gx[j] = y[j] * (gy[j] - s);
    }
  });
  return gx;
}

// Normalises over the channel axis at every (n, h, w). Writes the
// standardised values and per-position inverse std for the backward pass.
template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& bias,
                             T eps, Tensor<T>* xhat_out, std::vector<T>* inv_std_out) {
  const Shape& s = x.shape();
  if (scale.size() != s.c || bias.size() != s.c) {
    throw DimensionError("layer_norm: affine parameters " + scale.shape().str() + "/" +
                         bias.shape().str() + " for input " + s.str());
  }
  Tensor<T> y(s);
  Tensor<T> xhat(s);
  std::vector<T> inv_std(s.n * s.plane());
  const std::size_t hw = s.plane();
  std::vector<T> mean(hw), var(hw);
  for (std::size_t n = 0; n < s.n; ++n) {
    std::fill(mean.begin(), mean.end(), T{0});
    std::fill(var.begin(), var.end(), T{0});
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) mean[i] += p[i];
    }
    for (auto& m : mean) m /= static_cast<T>(s.c);
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        const T d = p[i] - mean[i];
        var[i] += d * d;
      }
    }
    T* is = inv_std.data() + n * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      is[i] = T{1} / std::sqrt(var[i] / static_cast<T>(s.c) + eps);
    }
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.plane(n, c);
      T* xh = xhat.plane(n, c);
      T* py = y.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        xh[i] = (p[i] - mean[i]) * is[i];
        py[i] = xh[i] * scale[c] + bias[c];
      }
    }
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& xhat, const std::vector<T>& inv_std,
                         const Tensor<T>& scale, const Tensor<T>& gy, Tensor<T>* gx,
                         Tensor<T>* gscale, Tensor<T>* gbias) {
  const Shape& s = xhat.shape();
  const std::size_t hw = s.plane();
  std::vector<T> m1(hw), m2(hw);
  for (std::size_t n = 0; n < s.n; ++n) {
    std::fill(m1.begin(), m1.end(), T{0});
    std::fill(m2.begin(), m2.end(), T{0});
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* g = gy.plane(n, c);
      const T* xh = xhat.plane(n, c);
      if (gscale) (*gscale)[c] += detail::dot(g, xh, hw);
      if (gbias) {
        T acc{0};
        for (std::size_t i = 0; i < hw; ++i) acc += g[i];
        (*gbias)[c] += acc;
      }
      for (std::size_t i = 0; i < hw; ++i) {
        const T gh = g[i] * scale[c];
        m1[i] += gh;
        m2[i] += gh * xh[i];
      }
    }
    if (!gx) continue;
    const T invc = T{1} / static_cast<T>(s.c);
    const T* is = inv_std.data() + n * hw;
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* g = gy.plane(n, c);
      const T* xh = xhat.plane(n, c);
      T* out = gx->plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        out[i] += is[i] * (g[i] * scale[c] - m1[i] * invc - xh[i] * m2[i] * invc);
      }
    }
  }
}

}  // namespace dpcnet::kernels
