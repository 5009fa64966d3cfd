#pragma once

// Parameterised building blocks. Each layer registers its parameters in a
// ParameterStore under a dot-separated prefix and keeps raw pointers to them.
//
// Initialisation: weights ~ U(-a, a) with a = sqrt(1 / fan_in), biases 0,
// norm scales 1.

#include <cmath>
#include <string>

#include "dpcnet/ops.hpp"

namespace dpcnet {

template <typename T>
struct ConvLayer {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  ConvOptions opts{};

  static ConvLayer make(ParameterStore<T>& store, const std::string& name, std::size_t in,
                        std::size_t out, std::size_t k, Rng& rng, bool with_bias = true,
                        ConvOptions opts = {}) {
    if (opts.groups == 0 || in % opts.groups != 0) {
      throw ConfigError("conv '" + name + "': " + std::to_string(in) +
                        " input channels not divisible into " + std::to_string(opts.groups) +
                        " groups");
    }
    const std::size_t fan_in = in / opts.groups * k * k;
    const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
    ConvLayer layer;
    layer.opts = opts;
    layer.weight = &store.add(name + ".weight",
                              Tensor<T>::uniform(Shape{out, in / opts.groups, k, k}, -a, a, rng));
    if (with_bias) layer.bias = &store.add(name + ".bias", Tensor<T>(Shape{1, out, 1, 1}));
    return layer;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const {
    const Var<T> w = g.param(*weight);
    if (bias) {
      const Var<T> b = g.param(*bias);
      return conv2d(x, w, &b, opts);
    }
    return conv2d(x, w, nullptr, opts);
  }

  std::size_t out_channels() const { return weight->value.shape().n; }
};

// "Same" padding for odd k at stride 1.
inline ConvOptions same_padding(std::size_t k, std::size_t groups = 1) {
  return ConvOptions{1, k / 2, groups};
}

template <typename T>
struct NormLayer {
  Parameter<T>* scale = nullptr;
  Parameter<T>* bias = nullptr;

  static NormLayer make(ParameterStore<T>& store, const std::string& name, std::size_t channels) {
    NormLayer n;
    n.scale = &store.add(name + ".scale", Tensor<T>(Shape{1, channels, 1, 1}, T{1}));
    n.bias = &store.add(name + ".bias", Tensor<T>(Shape{1, channels, 1, 1}));
    return n;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const {
    return layer_norm(x, g.param(*scale), g.param(*bias));
  }
};

}  // namespace dpcnet
