#pragma once

// Training objective: weighted sum of pixel L1, a feature-space L1 on a
// frozen random convolutional extractor, and L1 between spectra.

#include <string>

#include "dpcnet/fft.hpp"
#include "dpcnet/layers.hpp"

namespace dpcnet {

struct LossWeights {
  double l1 = 1.0;
  double perceptual = 0.2;
  double fft = 0.05;
};

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": prediction " + a.shape().str() +
                         " and target " + b.shape().str() + " differ");
  }
}

}  // namespace detail

template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& gt) {
  detail::require_same_shape(pred, gt, "l1_loss");
  return mean(abs(sub(pred, gt)));
}

// Mean over the stacked (real, imaginary) coordinates of the half spectrum.
template <typename T>
Var<T> fft_loss(const Var<T>& pred, const Var<T>& gt) {
  detail::require_same_shape(pred, gt, "fft_loss");
  return mean(abs(sub(rfft2(pred), rfft2(gt))));
}

// Two frozen stages of conv3x3 + ReLU + 2x2 average pooling (3 -> 8 -> 16
// channels), seeded independently of the network.
template <typename T>
class FeatureExtractor {
 public:
  static constexpr std::uint64_t kSeed = 7;
  static constexpr std::size_t kStages = 2;

  explicit FeatureExtractor(std::uint64_t seed = kSeed) {
    Rng rng(seed);
    stages_[0] = ConvLayer<T>::make(store_, "stage0", 3, 8, 3, rng, true, same_padding(3));
    stages_[1] = ConvLayer<T>::make(store_, "stage1", 8, 16, 3, rng, true, same_padding(3));
    for (auto& p : store_) p->frozen = true;
  }

  FeatureExtractor(const FeatureExtractor&) = delete;
  FeatureExtractor& operator=(const FeatureExtractor&) = delete;

  const ParameterStore<T>& parameters() const { return store_; }

  // Output of stage `i` given the output of stage i-1 (or the image).
  Var<T> stage(Graph<T>& g, std::size_t i, const Var<T>& x) const {
    return avg_pool2(relu(stages_[i](g, x)));
  }

 private:
  ParameterStore<T> store_;
  ConvLayer<T> stages_[kStages];
};

// Average over stages of the mean absolute feature difference.
template <typename T>
Var<T> perceptual_proxy_loss(Graph<T>& g, const Var<T>& pred, const Var<T>& gt,
                             const FeatureExtractor<T>& fx) {
  detail::require_same_shape(pred, gt, "perceptual_proxy_loss");
  Var<T> fp = pred;
  Var<T> fg = gt;
  Var<T> total;
  for (std::size_t i = 0; i < FeatureExtractor<T>::kStages; ++i) {
    fp = fx.stage(g, i, fp);
    fg = fx.stage(g, i, fg);
    const Var<T> term = mean(abs(sub(fp, fg)));
    total = total.valid() ? add(total, term) : term;
  }
  return scale(total, T{1} / static_cast<T>(FeatureExtractor<T>::kStages));
}

// l1*L1 + perceptual*Lperc + fft*Lfft. Terms with weight 0 are not evaluated.
template <typename T>
Var<T> total_loss(Graph<T>& g, const Var<T>& pred, const Var<T>& gt, const LossWeights& w,
                  const FeatureExtractor<T>& fx) {
  detail::require_same_shape(pred, gt, "total_loss");
  Var<T> total;
  auto accumulate = [&](double weight, auto&& term) {
    if (weight == 0.0) return;
    const Var<T> v = scale(term(), static_cast<T>(weight));
    total = total.valid() ? add(total, v) : v;
  };
  accumulate(w.l1, [&] { return l1_loss(pred, gt); });
  accumulate(w.perceptual, [&] { return perceptual_proxy_loss(g, pred, gt, fx); });
  accumulate(w.fft, [&] { return fft_loss(pred, gt); });
  if (!total.valid()) total = scale(l1_loss(pred, gt), T{0});
  return total;
}

}  // namespace dpcnet
