#pragma once

// Luminance-channel fidelity metrics on unit dynamic range.

#include <cmath>
#include <limits>
#include <vector>

#include "dpcnet/tensor.hpp"

namespace dpcnet {

// BT.601 luma of an N x 3 x H x W RGB tensor in [0, 1]; returns N x 1 x H x W.
template <typename T>
Tensor<double> rgb_to_y(const Tensor<T>& rgb) {
  const Shape& s = rgb.shape();
  if (s.c != 3) throw DimensionError("rgb_to_y expects 3 channels, got " + s.str());
  Tensor<double> y(Shape{s.n, 1, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* r = rgb.plane(n, 0);
    const T* g = rgb.plane(n, 1);
    const T* b = rgb.plane(n, 2);
    double* out = y.plane(n, 0);
    for (std::size_t i = 0; i < s.plane(); ++i) {
      out[i] = 16.0 / 255.0 + (65.481 * static_cast<double>(r[i]) +
                               128.553 * static_cast<double>(g[i]) +
                               24.966 * static_cast<double>(b[i])) / 255.0;
    }
  }
  return y;
}

// 10 log10(1 / MSE) on Y; +infinity when the images are identical.
template <typename T>
double psnr_y(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("psnr_y: " + pred.shape().str() + " vs " + gt.shape().str());
  }
  const Tensor<double> a = rgb_to_y(pred);
  const Tensor<double> b = rgb_to_y(gt);
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> taps(size);
  const double centre = static_cast<double>(size - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - centre;
    taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += taps[i];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

// Mean SSIM over every fully-contained window position of two single-channel
// planes (N x 1 x H x W, averaged over N as well).
inline double ssim_plane(const Tensor<double>& a, const Tensor<double>& b,
                         const SsimOptions& o = {}) {
  const Shape& s = a.shape();
  if (s != b.shape() || s.c != 1) {
    throw DimensionError("ssim: planes " + s.str() + " and " + b.shape().str());
  }
  if (s.h < o.window || s.w < o.window) {
    throw ContractError("ssim: image " + s.str() + " smaller than the " +
                        std::to_string(o.window) + "x" + std::to_string(o.window) + " window");
  }
  const auto taps = gaussian_taps(o.window, o.sigma);
  const double c1 = o.k1 * o.k1;
  const double c2 = o.k2 * o.k2;
  const std::size_t oh = s.h - o.window + 1;
  const std::size_t ow = s.w - o.window + 1;

  // Separable filtering of the five moment maps: horizontal then vertical.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> rows(s.h * ow, 0.0);
    for (std::size_t y = 0; y < s.h; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < o.window; ++k) acc += taps[k] * src[y * s.w + x + k];
        rows[y * ow + x] = acc;
      }
    }
    std::vector<double> out(oh * ow, 0.0);
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < o.window; ++k) acc += taps[k] * rows[(y + k) * ow + x];
        out[y * ow + x] = acc;
      }
    }
    return out;
  };

  double total = 0.0;
  std::vector<double> pa(s.plane()), pb(s.plane()), paa(s.plane()), pbb(s.plane()),
      pab(s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* x = a.plane(n, 0);
    const double* y = b.plane(n, 0);
    for (std::size_t i = 0; i < s.plane(); ++i) {
      pa[i] = x[i];
      pb[i] = y[i];
      paa[i] = x[i] * x[i];
      pbb[i] = y[i] * y[i];
      pab[i] = x[i] * y[i];
    }
    const auto mu_a = filter(pa), mu_b = filter(pb);
    const auto e_aa = filter(paa), e_bb = filter(pbb), e_ab = filter(pab);
    for (std::size_t i = 0; i < oh * ow; ++i) {
      const double va = e_aa[i] - mu_a[i] * mu_a[i];
      const double vb = e_bb[i] - mu_b[i] * mu_b[i];
      const double cov = e_ab[i] - mu_a[i] * mu_b[i];
      const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
      const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
      total += num / den;
    }
  }
  return total / static_cast<double>(s.n * oh * ow);
}

template <typename T>
double ssim_y(const Tensor<T>& pred, const Tensor<T>& gt, const SsimOptions& o = {}) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("ssim_y: " + pred.shape().str() + " vs " + gt.shape().str());
  }
  return ssim_plane(rgb_to_y(pred), rgb_to_y(gt), o);
}

}  // namespace dpcnet
