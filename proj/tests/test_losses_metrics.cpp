#include <gtest/gtest.h>

#include <algorithm>
#include <complex>
#include <numbers>
#include <numeric>
#include <random>

#include "support.hpp"

using namespace dpcnet;
using dpcnet::test::random;

namespace {

double scalar(const Var<double>& v) { return v.value()[0]; }

Tensor<double> offset(const Tensor<double>& x, double d) {
  Tensor<double> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + d;
  return y;
}

double naive_l1(const Tensor<double>& a, const Tensor<double>& b) {
  double t = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) t += std::abs(a[i] - b[i]);
  return t / static_cast<double>(a.size());
}

// Mean |Re| and |Im| differences over the half spectrum, by direct DFT.
double naive_fft_loss(const Tensor<double>& a, const Tensor<double>& b) {
  const Shape& s = a.shape();
  const std::size_t half = s.w / 2 + 1;
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t u = 0; u < s.h; ++u)
        for (std::size_t v = 0; v < half; ++v) {
          std::complex<double> acc = 0.0;
          for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x) {
              const double ph = -2.0 * std::numbers::pi *
                                (static_cast<double>(u * y) / s.h + static_cast<double>(v * x) / s.w);
              acc += (a.at(n, c, y, x) - b.at(n, c, y, x)) * std::polar(1.0, ph);
            }
          total += std::abs(acc.real()) + std::abs(acc.imag());
        }
  return total / static_cast<double>(2 * s.n * s.c * s.h * half);
}

Tensor<double> rgb(std::size_t h, std::size_t w, double r, double g, double b) {
  Tensor<double> t(Shape{1, 3, h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    t[i] = r;
    t[h * w + i] = g;
    t[2 * h * w + i] = b;
  }
  return t;
}

}  // namespace

TEST(LossWeights, Defaults) {
  const LossWeights w;
  EXPECT_EQ(w.l1, 1.0);
  EXPECT_EQ(w.perceptual, 0.2);
  EXPECT_EQ(w.fft, 0.05);
}

TEST(L1Loss, Examples) {
  Graph<double> g;
  const auto x = random(Shape{1, 3, 4, 4}, 1);
  EXPECT_EQ(scalar(l1_loss(g.constant(x), g.constant(x))), 0.0);
  EXPECT_NEAR(scalar(l1_loss(g.constant(offset(x, 0.5)), g.constant(x))), 0.5, 1e-15);
  const auto y = random(Shape{2, 3, 5, 7}, 2), z = random(Shape{2, 3, 5, 7}, 3);
  EXPECT_NEAR(scalar(l1_loss(g.constant(y), g.constant(z))), naive_l1(y, z), 1e-15);
  EXPECT_THROW(l1_loss(g.constant(y), g.constant(x)), DimensionError);
}

TEST(FftLoss, Examples) {
  Graph<double> g;
  const auto x = random(Shape{1, 3, 8, 8}, 4);
  EXPECT_EQ(scalar(fft_loss(g.constant(x), g.constant(x))), 0.0);
  // A constant offset d lands on the DC bin as d*H*W; every other stacked
  // coordinate is zero. 8x8 gives 64 d / (2 * 8 * 5) = 0.8 d.
  EXPECT_NEAR(scalar(fft_loss(g.constant(offset(x, 0.25)), g.constant(x))), 0.8 * 0.25, 1e-13);
  const auto a = random(Shape{2, 2, 4, 8}, 5), b = random(Shape{2, 2, 4, 8}, 6);
  EXPECT_NEAR(scalar(fft_loss(g.constant(a), g.constant(b))), naive_fft_loss(a, b), 1e-12);
  EXPECT_THROW(fft_loss(g.constant(a), g.constant(x)), DimensionError);
}

TEST(PerceptualLoss, Examples) {
  const FeatureExtractor<double> fx;
  for (const auto& p : fx.parameters()) EXPECT_TRUE(p->frozen);
  Graph<double> g;
  const auto a = random(Shape{1, 3, 8, 8}, 7, 0, 1), b = random(Shape{1, 3, 8, 8}, 8, 0, 1);
  const auto va = g.constant(a), vb = g.constant(b);
  EXPECT_EQ(scalar(perceptual_proxy_loss(g, va, va, fx)), 0.0);
  EXPECT_EQ(scalar(perceptual_proxy_loss(g, va, vb, fx)), scalar(perceptual_proxy_loss(g, vb, va, fx)));
  const auto fa1 = fx.stage(g, 0, va), fb1 = fx.stage(g, 0, vb);
  const auto fa2 = fx.stage(g, 1, fa1), fb2 = fx.stage(g, 1, fb1);
  EXPECT_EQ(fa1.shape(), (Shape{1, 8, 4, 4}));
  EXPECT_EQ(fa2.shape(), (Shape{1, 16, 2, 2}));
  const double expect = 0.5 * (naive_l1(fa1.value(), fb1.value()) + naive_l1(fa2.value(), fb2.value()));
  EXPECT_NEAR(scalar(perceptual_proxy_loss(g, va, vb, fx)), expect, 1e-15);
  EXPECT_GT(expect, 0.0);
}

TEST(PerceptualLoss, GradientReachesPredictionOnly) {
  const FeatureExtractor<double> fx;
  Graph<double> g;
  const auto p = g.leaf(random(Shape{1, 3, 8, 8}, 9, 0, 1));
  g.backward(perceptual_proxy_loss(g, p, g.constant(random(Shape{1, 3, 8, 8}, 10, 0, 1)), fx));
  ASSERT_TRUE(g.has_grad(p.id()));
  for (const auto& q : fx.parameters())
    for (double v : q->grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(TotalLoss, Examples) {
  const FeatureExtractor<double> fx;
  Graph<double> g;
  const auto a = g.constant(random(Shape{1, 3, 8, 8}, 11, 0, 1));
  const auto b = g.constant(random(Shape{1, 3, 8, 8}, 12, 0, 1));
  EXPECT_EQ(scalar(total_loss(g, a, a, LossWeights{}, fx)), 0.0);
  EXPECT_EQ(scalar(total_loss(g, a, b, LossWeights{1, 0, 0}, fx)), scalar(l1_loss(a, b)));
  const double l1 = naive_l1(a.value(), b.value());
  const double ff = naive_fft_loss(a.value(), b.value());
  const double pc = scalar(perceptual_proxy_loss(g, a, b, fx));
  EXPECT_NEAR(scalar(total_loss(g, a, b, LossWeights{}, fx)), 1.0 * l1 + 0.2 * pc + 0.05 * ff, 1e-12);
}

TEST(Losses, NonNegativeAndZeroOnlyAtEquality) {
  const FeatureExtractor<double> fx;
  for (std::uint64_t seed = 13; seed < 18; ++seed) {
    Graph<double> g;
    const auto a = g.constant(random(Shape{1, 3, 8, 8}, seed, 0, 1));
    auto bv = a.value();
    bv[seed % bv.size()] += 1e-3;
    const auto b = g.constant(bv);
    EXPECT_GT(scalar(l1_loss(a, b)), 0.0);
    EXPECT_GT(scalar(fft_loss(a, b)), 0.0);
    EXPECT_GE(scalar(perceptual_proxy_loss(g, a, b, fx)), 0.0);
    EXPECT_GT(scalar(total_loss(g, a, b, LossWeights{}, fx)), 0.0);
  }
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  GradSuiteOptions o;
  gradsuite::Runner run(o);
  gradsuite::loss_checks(run);
  for (const auto& r : run.take()) {
    EXPECT_TRUE(r.report.passed()) << r.name << ": " << r.report.max_rel_error << " at " << r.report.worst;
  }
}

TEST(RgbToY, Bt601Values) {
  EXPECT_NEAR(rgb_to_y(rgb(1, 1, 0, 0, 0))[0], 16.0 / 255.0, 1e-15);
  EXPECT_NEAR(rgb_to_y(rgb(1, 1, 1, 1, 1))[0], 235.0 / 255.0, 1e-15);
  EXPECT_NEAR(rgb_to_y(rgb(1, 1, 1, 0, 0))[0], (16.0 + 65.481) / 255.0, 1e-15);
  EXPECT_THROW(rgb_to_y(Tensor<double>(Shape{1, 1, 2, 2})), DimensionError);
}

TEST(Psnr, Examples) {
  const auto x = random(Shape{1, 3, 8, 8}, 18, 0.2, 0.7);
  EXPECT_TRUE(std::isinf(psnr_y(x, x)));
  // Shifting all channels by d moves Y by d * 219 / 255.
  const double d = 0.1 * 255.0 / 219.0;
  EXPECT_NEAR(psnr_y(offset(x, d), x), 20.0, 1e-9);
  const auto a = random(Shape{2, 3, 6, 6}, 19, 0, 1), b = random(Shape{2, 3, 6, 6}, 20, 0, 1);
  const auto ya = rgb_to_y(a), yb = rgb_to_y(b);
  double se = 0.0;
  for (std::size_t i = 0; i < ya.size(); ++i) se += (ya[i] - yb[i]) * (ya[i] - yb[i]);
  EXPECT_NEAR(psnr_y(a, b), 10.0 * std::log10(static_cast<double>(ya.size()) / se), 1e-12);
}

TEST(Psnr, PermutationInvariant) {
  const auto a = random(Shape{1, 3, 6, 6}, 21, 0, 1), b = random(Shape{1, 3, 6, 6}, 22, 0, 1);
  std::vector<std::size_t> perm(36);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(23));
  Tensor<double> pa(a.shape()), pb(b.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 36; ++i) {
      pa[c * 36 + i] = a[c * 36 + perm[i]];
      pb[c * 36 + i] = b[c * 36 + perm[i]];
    }
  EXPECT_NEAR(psnr_y(pa, pb), psnr_y(a, b), 1e-12);
}

TEST(Ssim, IdentityIsOne) {
  for (std::uint64_t seed : {24, 25, 26}) {
    const auto x = random(Shape{1, 3, 16, 16}, seed, 0, 1);
    EXPECT_NEAR(ssim_y(x, x), 1.0, 1e-12);
  }
}

TEST(Ssim, InvertedHighContrastPatternIsLow) {
  Tensor<double> x(Shape{1, 3, 16, 16});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) x.at(0, c, i, j) = ((i / 2 + j / 2) % 2) ? 1.0 : 0.0;
  Tensor<double> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = 1.0 - x[i];
  EXPECT_LT(ssim_y(y, x), 0.5);
}

TEST(Ssim, MatchesLiteralSlidingWindow) {
  const auto a = random(Shape{1, 3, 16, 16}, 27, 0, 1), b = random(Shape{1, 3, 16, 16}, 28, 0, 1);
  const auto ya = rgb_to_y(a), yb = rgb_to_y(b);
  // Unseparated 11x11 Gaussian built from scratch.
  double wsum = 0.0, w[11][11];
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) wsum += (w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5));
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  for (std::size_t y = 0; y + 11 <= 16; ++y)
    for (std::size_t x = 0; x + 11 <= 16; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double k = w[i][j] / wsum, p = ya.at(0, 0, y + i, x + j), q = yb.at(0, 0, y + i, x + j);
          ma += k * p;
          mb += k * q;
        }
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double k = w[i][j] / wsum, p = ya.at(0, 0, y + i, x + j) - ma, q = yb.at(0, 0, y + i, x + j) - mb;
          saa += k * p * p;
          sbb += k * q * q;
          sab += k * p * q;
        }
      total += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
    }
  EXPECT_NEAR(ssim_y(a, b), total / 36.0, 1e-12);
}

TEST(Ssim, Errors) {
  EXPECT_THROW(ssim_y(Tensor<double>(Shape{1, 3, 8, 16}), Tensor<double>(Shape{1, 3, 8, 16})), ContractError);
  EXPECT_THROW(ssim_y(Tensor<double>(Shape{1, 3, 16, 16}), Tensor<double>(Shape{1, 3, 16, 12})), DimensionError);
}

TEST(GaussianTaps, NormalisedAndSymmetric) {
  const auto t = gaussian_taps(11, 1.5);
  EXPECT_NEAR(std::accumulate(t.begin(), t.end(), 0.0), 1.0, 1e-15);
  for (std::size_t i = 0; i < 11; ++i) EXPECT_DOUBLE_EQ(t[i], t[10 - i]);
  EXPECT_NEAR(t[5] / t[6], std::exp(1.0 / 4.5), 1e-12);
}
