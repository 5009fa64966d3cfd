#pragma once

// Dual-path deraining network: DDBlocks (spatial SFEBlock + frequency
// FFEBlock fused by the adaptive fusion module) inside a 3-level
// encoder-decoder with a global residual.

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "dpcnet/attention.hpp"
#include "dpcnet/fft.hpp"

namespace dpcnet {

enum class Fusion { afm, concat };

struct ModelConfig {
  std::size_t levels = 3;
  std::vector<std::size_t> blocks_per_level{2, 3, 4};
  std::vector<std::size_t> heads_per_level{2, 4, 8};
  std::size_t base_channels = 16;
  std::size_t window = 8;
  double ffn_expansion = 2.66;
  // Ablation switches.
  bool frequency_branch = true;
  Fusion fusion = Fusion::afm;
  bool spatial_sa = true;
  bool channel_sa = true;
  AttentionOrder sa_order = AttentionOrder::spatial_first;
  std::uint64_t init_seed = Rng::kDefaultSeed;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }

  void validate() const {
    if (levels == 0) throw ConfigError("model.levels must be positive");
    if (blocks_per_level.size() != levels || heads_per_level.size() != levels) {
      throw ConfigError("model.blocks and model.heads need one entry per level (" +
                        std::to_string(levels) + ")");
    }
    if (base_channels == 0) throw ConfigError("model.base_channels must be positive");
    if (window == 0) throw ConfigError("model.window must be positive");
    if (!spatial_sa && !channel_sa) {
      throw ConfigError("model.spatial_sa and model.channel_sa cannot both be off");
    }
    for (std::size_t l = 0; l < levels; ++l) {
      const std::size_t h = heads_per_level[l];
      if (h == 0 || channels_at(l) % h != 0) {
        throw ConfigError("level " + std::to_string(l) + ": " + std::to_string(channels_at(l)) +
                          " channels not divisible by " + std::to_string(h) + " heads");
      }
    }
  }

  // The configuration used by the gradient suite and the small tests.
  static ModelConfig tiny() {
    ModelConfig c;
    c.blocks_per_level = {1, 1, 1};
    c.heads_per_level = {1, 2, 2};
    c.base_channels = 8;
    c.window = 2;
    return c;
  }
};

// Spatial attention map: sigmoid(conv7x7([mean_c ; max_c])) -> N x 1 x H x W.
// Channel attention map: sigmoid(fc(relu(fc(avgpool)))) -> N x C x 1 x 1.
template <typename T>
struct AfmParams {
  ConvLayer<T> sa_conv;
  ConvLayer<T> ca_reduce;
  ConvLayer<T> ca_expand;
  ConvLayer<T> fuse1;
  ConvLayer<T> fuse2;
  ConvLayer<T> out;

  static AfmParams make(ParameterStore<T>& s, const std::string& name, std::size_t c, Rng& rng) {
    const std::size_t r = std::max<std::size_t>(1, c / 4);
    AfmParams p;
    p.sa_conv = ConvLayer<T>::make(s, name + ".sa_conv", 2, 1, 7, rng, true, same_padding(7));
    p.ca_reduce = ConvLayer<T>::make(s, name + ".ca_reduce", c, r, 1, rng);
    p.ca_expand = ConvLayer<T>::make(s, name + ".ca_expand", r, c, 1, rng);
    p.fuse1 = ConvLayer<T>::make(s, name + ".fuse1", c, c, 1, rng);
    p.fuse2 = ConvLayer<T>::make(s, name + ".fuse2", c, c, 1, rng);
    p.out = ConvLayer<T>::make(s, name + ".out", 2 * c, c, 1, rng);
    return p;
  }
};

template <typename T>
Var<T> afm_spatial_map(Graph<T>& g, const Var<T>& x, const AfmParams<T>& p) {
  const Var<T> pooled = concat_channels<T>({mean_axis(x, 1), max_axis(x, 1)});
  return sigmoid(p.sa_conv(g, pooled));
}

template <typename T>
Var<T> afm_channel_map(Graph<T>& g, const Var<T>& x, const AfmParams<T>& p) {
  const Var<T> pooled = mean_axis(mean_axis(x, 2), 3);
  return sigmoid(p.ca_expand(g, relu(p.ca_reduce(g, pooled))));
}

// F1 = conv(b1*SA(b2) + b2*CA(b1)); F2 = conv(b1*CA(b2) + b2*SA(b1));
// F = conv([F1 ; F2]).
template <typename T>
Var<T> afm_fuse(Graph<T>& g, const Var<T>& b1, const Var<T>& b2, const AfmParams<T>& p) {
  if (b1.shape() != b2.shape()) {
    throw ContractError("afm_fuse: branch shapes " + b1.shape().str() + " and " +
                        b2.shape().str() + " differ");
  }
  const Var<T> sa1 = afm_spatial_map(g, b1, p);
  const Var<T> sa2 = afm_spatial_map(g, b2, p);
  const Var<T> ca1 = afm_channel_map(g, b1, p);
  const Var<T> ca2 = afm_channel_map(g, b2, p);
  const Var<T> f1 = p.fuse1(g, add(mul(b1, sa2), mul(b2, ca1)));
  const Var<T> f2 = p.fuse2(g, add(mul(b1, ca2), mul(b2, sa1)));
  return p.out(g, concat_channels<T>({f1, f2}));
}

// Either the adaptive fusion module or the concat + 1x1 conv ablation.
template <typename T>
struct FusionParams {
  Fusion kind = Fusion::afm;
  AfmParams<T> afm;
  ConvLayer<T> concat;

  static FusionParams make(ParameterStore<T>& s, const std::string& name, std::size_t c,
                           Fusion kind, Rng& rng) {
    FusionParams p;
    p.kind = kind;
    if (kind == Fusion::afm) {
      p.afm = AfmParams<T>::make(s, name + ".afm", c, rng);
    } else {
      p.concat = ConvLayer<T>::make(s, name + ".concat", 2 * c, c, 1, rng);
    }
    return p;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& b1, const Var<T>& b2) const {
    if (kind == Fusion::afm) return afm_fuse(g, b1, b2, afm);
    return concat(g, concat_channels<T>({b1, b2}));
  }
};

template <typename T>
struct SfeParams {
  SctbParams<T> sctb;
  ConvLayer<T> local1;
  ConvLayer<T> local2;
  FusionParams<T> fusion;

  static SfeParams make(ParameterStore<T>& s, const std::string& name, std::size_t c,
                        const SctbConfig& sc, Fusion fusion, Rng& rng) {
    SfeParams p;
    p.sctb = SctbParams<T>::make(s, name + ".sctb", c, sc, rng);
    p.local1 = ConvLayer<T>::make(s, name + ".local1", c, c, 3, rng, true, same_padding(3));
    p.local2 = ConvLayer<T>::make(s, name + ".local2", c, c, 3, rng, true, same_padding(3));
    p.fusion = FusionParams<T>::make(s, name + ".fusion", c, fusion, rng);
    return p;
  }
};

// Transformer branch and convolutional locality branch, fused.
template <typename T>
Var<T> sfeblock_forward(Graph<T>& g, const Var<T>& x, const SfeParams<T>& p) {
  const Var<T> global = sctb_forward(g, x, p.sctb);
  const Var<T> local = gelu(p.local2(g, gelu(p.local1(g, x))));
  return p.fusion(g, global, local);
}

template <typename T>
struct FfeParams {
  ConvLayer<T> conv_in;    // C -> C, 1x1
  ConvLayer<T> spectral1;  // 2C -> 2C, 1x1 over stacked (re, im)
  ConvLayer<T> spectral2;  // 2C -> 2C, 1x1
  ConvLayer<T> conv_out;   // C -> C, 1x1

  static FfeParams make(ParameterStore<T>& s, const std::string& name, std::size_t c, Rng& rng) {
    FfeParams p;
    p.conv_in = ConvLayer<T>::make(s, name + ".conv_in", c, c, 1, rng);
    p.spectral1 = ConvLayer<T>::make(s, name + ".spectral1", 2 * c, 2 * c, 1, rng);
    p.spectral2 = ConvLayer<T>::make(s, name + ".spectral2", 2 * c, 2 * c, 1, rng);
    p.conv_out = ConvLayer<T>::make(s, name + ".conv_out", c, c, 1, rng);
    return p;
  }
};

// y = x + conv(irfft2(mlp(rfft2(conv(x))))), mlp applied per frequency bin.
template <typename T>
Var<T> ffeblock_forward(Graph<T>& g, const Var<T>& x, const FfeParams<T>& p) {
  const std::size_t width = x.shape().w;
  const Var<T> spec = rfft2(p.conv_in(g, x));
  const Var<T> mixed = p.spectral2(g, relu(p.spectral1(g, spec)));
  return add(x, p.conv_out(g, irfft2(mixed, width)));
}

template <typename T>
struct DdParams {
  SfeParams<T> sfe;
  bool frequency = true;
  FfeParams<T> ffe;
  FusionParams<T> fusion;

  static DdParams make(ParameterStore<T>& s, const std::string& name, std::size_t c,
                       const SctbConfig& sc, const ModelConfig& cfg, Rng& rng) {
    DdParams p;
    p.sfe = SfeParams<T>::make(s, name + ".sfe", c, sc, cfg.fusion, rng);
    p.frequency = cfg.frequency_branch;
    if (p.frequency) {
      p.ffe = FfeParams<T>::make(s, name + ".ffe", c, rng);
      p.fusion = FusionParams<T>::make(s, name + ".fusion", c, cfg.fusion, rng);
    }
    return p;
  }
};

template <typename T>
Var<T> ddblock_forward(Graph<T>& g, const Var<T>& x, const DdParams<T>& p) {
  const Var<T> s = sfeblock_forward(g, x, p.sfe);
  if (!p.frequency) return add(s, x);
  const Var<T> f = ffeblock_forward(g, x, p.ffe);
  return add(p.fusion(g, s, f), x);
}

template <typename T>
class DpcNet {
 public:
  explicit DpcNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const std::size_t L = cfg_.levels;
    stem_ = ConvLayer<T>::make(store_, "stem", 3, cfg_.base_channels, 3, rng, true, same_padding(3));
    encoder_.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
      encoder_[l] = make_level("enc" + std::to_string(l), l, rng);
      if (l + 1 < L) {
        down_.push_back(ConvLayer<T>::make(store_, "down" + std::to_string(l), cfg_.channels_at(l),
                                           cfg_.channels_at(l + 1), 3, rng, true,
                                           ConvOptions{2, 1, 1}));
      }
    }
    decoder_.resize(L > 0 ? L - 1 : 0);
    up_.resize(decoder_.size());
    skip_.resize(decoder_.size());
    for (std::size_t l = L - 1; l-- > 0;) {
      const std::string tag = std::to_string(l);
      up_[l] = ConvLayer<T>::make(store_, "up" + tag, cfg_.channels_at(l + 1), cfg_.channels_at(l),
                                  3, rng, true, same_padding(3));
      skip_[l] = ConvLayer<T>::make(store_, "skip" + tag, 2 * cfg_.channels_at(l),
                                    cfg_.channels_at(l), 1, rng);
      decoder_[l] = make_level("dec" + tag, l, rng);
    }
    head_ = ConvLayer<T>::make(store_, "head", cfg_.base_channels, 3, 3, rng, true, same_padding(3));
  }

  DpcNet(const DpcNet&) = delete;
  DpcNet& operator=(const DpcNet&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const ConvLayer<T>& head() const { return head_; }

  void check_input(const Shape& s) const {
    if (s.c != 3) throw DimensionError("dpcnet expects 3 input channels, got " + s.str());
    const std::size_t factor = std::size_t{1} << (cfg_.levels - 1);
    for (std::size_t extent : {s.h, s.w}) {
      if (extent % factor != 0 || !is_power_of_two(extent)) {
        throw ConfigError("input extent " + std::to_string(extent) +
                          " must be a power of two divisible by " + std::to_string(factor));
      }
    }
  }

  // rainy: N x 3 x H x W. Returns rainy + head(decoder(...)), unclamped.
  Var<T> forward(Graph<T>& g, const Var<T>& rainy) const {
    check_input(rainy.shape());
    const std::size_t L = cfg_.levels;
    std::vector<Var<T>> skips;
    Var<T> x = stem_(g, rainy);
    for (std::size_t l = 0; l < L; ++l) {
      for (const auto& b : encoder_[l]) x = ddblock_forward(g, x, b);
      if (l + 1 < L) {
        skips.push_back(x);
        x = down_[l](g, x);
      }
    }
    for (std::size_t l = L - 1; l-- > 0;) {
      x = up_[l](g, upsample_nearest2(x));
      x = skip_[l](g, concat_channels<T>({x, skips[l]}));
      for (const auto& b : decoder_[l]) x = ddblock_forward(g, x, b);
    }
    return add(rainy, head_(g, x));
  }

  // Inference: forward without a tape, clamped to [0, 1].
  Tensor<T> derain(const Tensor<T>& rainy) const {
    Graph<T> g(false);
    Tensor<T> out = forward(g, g.constant(rainy)).value();
    for (auto& v : out.data()) v = std::clamp(v, T{0}, T{1});
    return out;
  }

 private:
  std::vector<DdParams<T>> make_level(const std::string& name, std::size_t level, Rng& rng) {
    SctbConfig sc;
    sc.heads = cfg_.heads_per_level[level];
    sc.window = cfg_.window;
    sc.ffn_expansion = cfg_.ffn_expansion;
    sc.spatial = cfg_.spatial_sa;
    sc.channel = cfg_.channel_sa;
    sc.order = cfg_.sa_order;
    std::vector<DdParams<T>> blocks;
    for (std::size_t b = 0; b < cfg_.blocks_per_level[level]; ++b) {
      blocks.push_back(DdParams<T>::make(store_, name + ".block" + std::to_string(b),
                                         cfg_.channels_at(level), sc, cfg_, rng));
    }
    return blocks;
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
  ConvLayer<T> stem_;
  std::vector<std::vector<DdParams<T>>> encoder_;
  std::vector<ConvLayer<T>> down_;
  std::vector<ConvLayer<T>> up_;
  std::vector<ConvLayer<T>> skip_;
  std::vector<std::vector<DdParams<T>>> decoder_;
  ConvLayer<T> head_;
};

// Copies parameter values between precisions (same config required).
template <typename To, typename From>
void copy_parameters(const ParameterStore<From>& from, ParameterStore<To>& to) {
  if (from.size() != to.size()) throw ContractError("copy_parameters: store sizes differ");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].value.shape() != to[i].value.shape()) {
      throw ContractError("copy_parameters: mismatch at '" + from[i].name + "'");
    }
    to[i].value = from[i].value.template cast<To>();
  }
}

}  // namespace dpcnet
