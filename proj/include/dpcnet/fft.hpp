#pragma once

// Real 2-D FFT applied independently to every (n, c) plane.
//
// Conventions: the forward transform is unnormalised,
//   X[k1,k2] = sum_{n1,n2} x[n1,n2] exp(-2 pi i (k1 n1 / H + k2 n2 / W)),
// and only the non-redundant half k2 in [0, W/2] is stored. The inverse
// carries the 1/(H*W) factor. Both extents must be powers of two.
//
// The inverse is the real-linear map
//   y[n] = 1/(HW) * Re sum_{k1, k2 <= W/2} c(k2) X[k1,k2] exp(+2 pi i k.n / N)
// with c = 1 on the DC and Nyquist columns and 2 elsewhere, which equals the
// usual Hermitian-extension inverse and is what the gradient rules assume.

#include <cmath>
#include <complex>
#include <map>
#include <numbers>
#include <vector>

#include "dpcnet/autodiff.hpp"
#include "dpcnet/tensor.hpp"

namespace dpcnet {

namespace fft_detail {

inline void require_power_of_two(std::size_t extent, const char* axis) {
  if (!is_power_of_two(extent)) {
    throw ConfigError(std::string("FFT extent ") + axis + "=" + std::to_string(extent) +
                      " is not a power of two");
  }
}

template <typename T>
const std::vector<std::complex<T>>& twiddles(std::size_t n) {
  thread_local std::map<std::size_t, std::vector<std::complex<T>>> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<std::complex<T>> tw(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    tw[k] = {static_cast<T>(std::cos(a)), static_cast<T>(std::sin(a))};
  }
  return cache.emplace(n, std::move(tw)).first->second;
}

// In-place iterative radix-2 Cooley-Tukey. inverse flips the exponent sign
// and does not normalise.
template <typename T>
void fft_inplace(std::complex<T>* a, std::size_t n, bool inverse) {
  if (n <= 1) return;
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const auto& tw = twiddles<T>(n);
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < half; ++j) {
        const T wr = tw[j * step].real();
        const T wi = inverse ? -tw[j * step].imag() : tw[j * step].imag();
        const std::complex<T> u = a[i + j];
        const std::complex<T> b = a[i + j + half];
        const std::complex<T> v{b.real() * wr - b.imag() * wi, b.real() * wi + b.imag() * wr};
        a[i + j] = u + v;
        a[i + j + half] = u - v;
      }
    }
  }
}

}  // namespace fft_detail

// Half spectrum of a real NCHW tensor: N x C x H x (W/2+1) complex bins.
template <typename T>
class SpectrumTensor {
 public:
  SpectrumTensor() = default;
  SpectrumTensor(Shape shape, std::size_t width) : shape_(shape), width_(width), data_(shape.size()) {
    if (shape.w != width / 2 + 1) {
      throw ContractError("spectrum layout " + shape.str() + " does not match signal width " +
                          std::to_string(width));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t signal_width() const { return width_; }

  std::complex<T>& at(std::size_t n, std::size_t c, std::size_t h, std::size_t k) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + k];
  }
  const std::complex<T>& at(std::size_t n, std::size_t c, std::size_t h, std::size_t k) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + k];
  }

  std::vector<std::complex<T>>& bins() { return data_; }
  const std::vector<std::complex<T>>& bins() const { return data_; }

  // Interleaved (re, im) scalar view.
  const T* interleaved() const { return reinterpret_cast<const T*>(data_.data()); }

 private:
  Shape shape_{};
  std::size_t width_ = 0;
  std::vector<std::complex<T>> data_;
};

template <typename T>
SpectrumTensor<T> rfft2(const Tensor<T>& x) {
  const Shape& s = x.shape();
  fft_detail::require_power_of_two(s.h, "H");
  fft_detail::require_power_of_two(s.w, "W");
  const std::size_t wf = s.w / 2 + 1;
  SpectrumTensor<T> out(Shape{s.n, s.c, s.h, wf}, s.w);
  std::vector<std::complex<T>> row(s.w), col(s.h);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = x.plane(n, c);
      for (std::size_t h = 0; h < s.h; ++h) {
        for (std::size_t w = 0; w < s.w; ++w) row[w] = {p[h * s.w + w], T{0}};
        fft_detail::fft_inplace(row.data(), s.w, false);
        for (std::size_t k = 0; k < wf; ++k) out.at(n, c, h, k) = row[k];
      }
      for (std::size_t k = 0; k < wf; ++k) {
        for (std::size_t h = 0; h < s.h; ++h) col[h] = out.at(n, c, h, k);
        fft_detail::fft_inplace(col.data(), s.h, false);
        for (std::size_t h = 0; h < s.h; ++h) out.at(n, c, h, k) = col[h];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> irfft2(const SpectrumTensor<T>& spec, std::size_t width) {
  const Shape& s = spec.shape();
  if (s.w != width / 2 + 1 || spec.signal_width() != width) {
    throw ContractError("irfft2: spectrum " + s.str() + " cannot produce width " +
                        std::to_string(width));
  }
  fft_detail::require_power_of_two(s.h, "H");
  fft_detail::require_power_of_two(width, "W");
  const std::size_t wf = s.w;
  Tensor<T> out(Shape{s.n, s.c, s.h, width});
  std::vector<std::complex<T>> cols(s.h * wf), col(s.h), row(width);
  const T norm = T{1} / static_cast<T>(s.h * width);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t k = 0; k < wf; ++k) {
        for (std::size_t h = 0; h < s.h; ++h) col[h] = spec.at(n, c, h, k);
        fft_detail::fft_inplace(col.data(), s.h, true);
        for (std::size_t h = 0; h < s.h; ++h) cols[h * wf + k] = col[h];
      }
      T* p = out.plane(n, c);
      for (std::size_t h = 0; h < s.h; ++h) {
        const std::complex<T>* z = cols.data() + h * wf;
        row[0] = {z[0].real(), T{0}};
        if (width > 1) {
          const std::size_t nyq = width / 2;
          for (std::size_t k = 1; k < nyq; ++k) {
            row[k] = z[k];
            row[width - k] = std::conj(z[k]);
          }
          row[nyq] = {z[nyq].real(), T{0}};
        }
        fft_detail::fft_inplace(row.data(), width, true);
        for (std::size_t w = 0; w < width; ++w) p[h * width + w] = row[w].real() * norm;
      }
    }
  }
  return out;
}

// Stacked real layout used inside networks: N x 2C x H x (W/2+1) with the
// real parts in channels [0, C) and imaginary parts in [C, 2C).
template <typename T>
Tensor<T> stack_spectrum(const SpectrumTensor<T>& spec) {
  const Shape& s = spec.shape();
  Tensor<T> out(Shape{s.n, 2 * s.c, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* re = out.plane(n, c);
      T* im = out.plane(n, s.c + c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const auto& z = spec.at(n, c, i / s.w, i % s.w);
        re[i] = z.real();
        im[i] = z.imag();
      }
    }
  }
  return out;
}

template <typename T>
SpectrumTensor<T> unstack_spectrum(const Tensor<T>& stacked, std::size_t width) {
  const Shape& s = stacked.shape();
  if (s.c % 2 != 0 || s.w != width / 2 + 1) {
    throw ContractError("unstack_spectrum: layout " + s.str() + " is not a stacked spectrum of width " +
                        std::to_string(width));
  }
  const std::size_t c2 = s.c / 2;
  SpectrumTensor<T> spec(Shape{s.n, c2, s.h, s.w}, width);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < c2; ++c) {
      const T* re = stacked.plane(n, c);
      const T* im = stacked.plane(n, c2 + c);
      for (std::size_t i = 0; i < s.plane(); ++i) spec.at(n, c, i / s.w, i % s.w) = {re[i], im[i]};
    }
  }
  return spec;
}

namespace fft_detail {

// Multiplies every bin by c(k2)^power (c = 1 on DC/Nyquist, 2 elsewhere).
template <typename T>
void weight_columns(Tensor<T>& stacked, std::size_t width, T mid_factor) {
  const Shape& s = stacked.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* p = stacked.plane(n, c);
      for (std::size_t h = 0; h < s.h; ++h) {
        for (std::size_t k = 0; k < s.w; ++k) {
          const bool edge = k == 0 || 2 * k == width;
          if (!edge) p[h * s.w + k] *= mid_factor;
        }
      }
    }
  }
}

}  // namespace fft_detail

// Differentiable forward transform producing the stacked layout.
template <typename T>
Var<T> rfft2(const Var<T>& x) {
  const std::size_t width = x.shape().w;
  const std::size_t height = x.shape().h;
  Tensor<T> y = stack_spectrum(rfft2(x.value()));
  const NodeId xi = x.id();
  return x.graph().record("rfft2", {xi}, std::move(y),
                          [xi, width, height](Graph<T>& g, NodeId self) {
                            // d/dx = Re sum_k G[k] e^{+i theta} = HW * irfft(G / c)
                            Tensor<T> gs = g.grad(self);
                            fft_detail::weight_columns(gs, width, T(0.5));
                            Tensor<T> gx = irfft2(unstack_spectrum(gs, width), width);
                            gx *= static_cast<T>(width * height);
                            g.accumulate(xi, std::move(gx));
                          });
}

// Differentiable inverse from the stacked layout back to N x C x H x width.
template <typename T>
Var<T> irfft2(const Var<T>& stacked, std::size_t width) {
  Tensor<T> y = irfft2(unstack_spectrum(stacked.value(), width), width);
  const NodeId si = stacked.id();
  return stacked.graph().record(
      "irfft2", {si}, std::move(y), [si, width](Graph<T>& g, NodeId self) {
        // d/dZ = c / (HW) * rfft(g)
        const Tensor<T>& gy = g.grad(self);
        Tensor<T> gs = stack_spectrum(rfft2(gy));
        fft_detail::weight_columns(gs, width, T(2));
        gs *= T{1} / static_cast<T>(gy.shape().h * width);
        g.accumulate(si, std::move(gs));
      });
}

}  // namespace dpcnet
