#pragma once

// Spatial-Channel Transformer Block: window self-attention over ws x ws
// tiles, channel-wise (C x C) self-attention, and the gated depthwise
// feed-forward network, composed as pre-norm residual steps.

#include <cmath>
#include <string>
#include <vector>

#include "dpcnet/layers.hpp"

namespace dpcnet {

// Tiling of an N x C x H x W map into ws x ws windows, bottom/right
// zero-padded to a multiple of ws. Window b = (n * grid_h + i) * grid_w + j.
struct WindowLayout {
  std::size_t window = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_right = 0;
  Shape source{};

  std::size_t count() const { return source.n * grid_h * grid_w; }
  Shape windows_shape() const { return {count(), source.c, window, window}; }

  static WindowLayout for_shape(const Shape& s, std::size_t ws) {
    if (ws == 0) throw ConfigError("window size must be at least 1");
    WindowLayout l;
    l.window = ws;
    l.grid_h = (s.h + ws - 1) / ws;
    l.grid_w = (s.w + ws - 1) / ws;
    l.pad_bottom = l.grid_h * ws - s.h;
    l.pad_right = l.grid_w * ws - s.w;
    l.source = s;
    return l;
  }

  friend bool operator==(const WindowLayout&, const WindowLayout&) = default;
};

namespace detail {

// Visits every (map offset, window offset) pair; padding cells are skipped.
template <typename F>
void for_each_window_cell(const WindowLayout& l, F&& fn) {
  const Shape& s = l.source;
  const std::size_t ws = l.window;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < l.grid_h; ++i) {
      for (std::size_t j = 0; j < l.grid_w; ++j) {
        const std::size_t b = (n * l.grid_h + i) * l.grid_w + j;
        for (std::size_t c = 0; c < s.c; ++c) {
          const std::size_t win = (b * s.c + c) * ws * ws;
          const std::size_t map = (n * s.c + c) * s.plane();
          for (std::size_t y = 0; y < ws && i * ws + y < s.h; ++y) {
            for (std::size_t x = 0; x < ws && j * ws + x < s.w; ++x) {
              fn(map + (i * ws + y) * s.w + j * ws + x, win + y * ws + x);
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> partition_windows(const Tensor<T>& x, const WindowLayout& l) {
  if (x.shape() != l.source) {
    throw ContractError("window_partition: input " + x.shape().str() + " does not match layout " +
                        l.source.str());
  }
  Tensor<T> out(l.windows_shape());
  detail::for_each_window_cell(l, [&](std::size_t m, std::size_t w) { out[w] = x[m]; });
  return out;
}

template <typename T>
Tensor<T> merge_windows(const Tensor<T>& windows, const WindowLayout& l) {
  if (windows.shape() != l.windows_shape()) {
    throw ContractError("window_merge: windows " + windows.shape().str() +
                        " do not match layout " + l.windows_shape().str());
  }
  Tensor<T> out(l.source);
  detail::for_each_window_cell(l, [&](std::size_t m, std::size_t w) { out[m] = windows[w]; });
  return out;
}

template <typename T>
Var<T> window_partition(const Var<T>& x, std::size_t ws, WindowLayout* layout_out = nullptr) {
  const WindowLayout l = WindowLayout::for_shape(x.shape(), ws);
  if (layout_out) *layout_out = l;
  const NodeId xi = x.id();
  return x.graph().record("window_partition", {xi}, partition_windows(x.value(), l),
                          [xi, l](Graph<T>& g, NodeId self) {
                            g.accumulate(xi, merge_windows(g.grad(self), l));
                          });
}

template <typename T>
Var<T> window_merge(const Var<T>& windows, const WindowLayout& l) {
  Tensor<T> y = merge_windows(windows.value(), l);
  const NodeId wi = windows.id();
  return windows.graph().record("window_merge", {wi}, std::move(y),
                                [wi, l](Graph<T>& g, NodeId self) {
                                  g.accumulate(wi, partition_windows(g.grad(self), l));
                                });
}

enum class AttentionKind { spatial, channel };

struct AttentionConfig {
  std::size_t heads = 1;
  AttentionKind dimension = AttentionKind::spatial;
  std::size_t window = 8;

  std::size_t head_dim(std::size_t channels) const {
    if (heads == 0 || channels % heads != 0) {
      throw ConfigError(std::to_string(channels) + " channels not divisible by " +
                        std::to_string(heads) + " heads");
    }
    return channels / heads;
  }
};

// Softmax probability maps captured during a forward pass, for inspection.
template <typename T>
using AttentionProbe = std::vector<Tensor<T>>;

template <typename T>
struct SpatialAttentionParams {
  ConvLayer<T> qkv;   // C -> 3C, 1x1, no bias: the W_Q, W_K, W_V projections
  ConvLayer<T> proj;  // C -> C, 1x1

  static SpatialAttentionParams make(ParameterStore<T>& s, const std::string& name,
                                     std::size_t channels, Rng& rng) {
    return {ConvLayer<T>::make(s, name + ".qkv", channels, 3 * channels, 1, rng, false),
            ConvLayer<T>::make(s, name + ".proj", channels, channels, 1, rng)};
  }
};

template <typename T>
Var<T> spatial_window_attention(Graph<T>& g, const Var<T>& x, const AttentionConfig& cfg,
                                const SpatialAttentionParams<T>& p,
                                AttentionProbe<T>* probe = nullptr) {
  const std::size_t C = x.shape().c;
  const std::size_t d = cfg.head_dim(C);
  const std::size_t h = cfg.heads;
  const Var<T> qkv = p.qkv(g, x);
  WindowLayout layout;
  auto heads_of = [&](std::size_t part) {
    Var<T> win = window_partition(slice_channels(qkv, part * C, C), cfg.window, &layout);
    const std::size_t tokens = cfg.window * cfg.window;
    return reshape(win, Shape{layout.count(), h, d, tokens});
  };
  const Var<T> q = heads_of(0);
  const Var<T> k = heads_of(1);
  const Var<T> v = heads_of(2);
  // [B,h,T,d] x [B,h,d,T] -> [B,h,T,T]
  Var<T> logits = scale(matmul(transpose(q), k), T{1} / std::sqrt(static_cast<T>(d)));
  Var<T> attn = softmax(logits, 3);
  if (probe) probe->push_back(attn.value());
  // [B,h,d,T] x [B,h,T,T]^T -> [B,h,d,T]
  Var<T> out = matmul(v, transpose(attn));
  out = reshape(out, layout.windows_shape());
  return p.proj(g, window_merge(out, layout));
}

template <typename T>
struct ChannelAttentionParams {
  ConvLayer<T> qkv;     // C -> 3C, 1x1, no bias
  ConvLayer<T> qkv_dw;  // 3C depthwise 3x3, no bias
  Parameter<T>* temperature = nullptr;  // 1 x heads x 1 x 1
  ConvLayer<T> proj;

  static ChannelAttentionParams make(ParameterStore<T>& s, const std::string& name,
                                     std::size_t channels, std::size_t heads, Rng& rng) {
    ChannelAttentionParams p;
    p.qkv = ConvLayer<T>::make(s, name + ".qkv", channels, 3 * channels, 1, rng, false);
    p.qkv_dw = ConvLayer<T>::make(s, name + ".qkv_dw", 3 * channels, 3 * channels, 3, rng, false,
                                  same_padding(3, 3 * channels));
    p.temperature = &s.add(name + ".temperature", Tensor<T>(Shape{1, heads, 1, 1}, T{1}));
    p.proj = ConvLayer<T>::make(s, name + ".proj", channels, channels, 1, rng);
    return p;
  }
};

// Transposed attention: per head, a d x d map over channels built from
// L2-normalised query/key rows scaled by a learnable temperature.
template <typename T>
Var<T> channel_wise_attention(Graph<T>& g, const Var<T>& x, const AttentionConfig& cfg,
                              const ChannelAttentionParams<T>& p,
                              AttentionProbe<T>* probe = nullptr) {
  const Shape s = x.shape();
  const std::size_t d = cfg.head_dim(s.c);
  const std::size_t h = cfg.heads;
  const Var<T> qkv = p.qkv_dw(g, p.qkv(g, x));
  auto heads_of = [&](std::size_t part) {
    return reshape(slice_channels(qkv, part * s.c, s.c), Shape{s.n, h, d, s.plane()});
  };
  const Var<T> q = l2_normalize(heads_of(0), 3);
  const Var<T> k = l2_normalize(heads_of(1), 3);
  const Var<T> v = heads_of(2);
  Var<T> logits = mul(matmul(q, transpose(k)), g.param(*p.temperature));
  Var<T> attn = softmax(logits, 3);
  if (probe) probe->push_back(attn.value());
  Var<T> out = reshape(matmul(attn, v), s);
  return p.proj(g, out);
}

inline std::size_t gdfn_hidden(std::size_t channels, double expansion) {
  const auto hidden = static_cast<std::size_t>(std::lround(static_cast<double>(channels) * expansion));
  return hidden == 0 ? 1 : hidden;
}

template <typename T>
struct GdfnParams {
  ConvLayer<T> project_in;   // C -> 2*hidden, 1x1
  ConvLayer<T> dwconv;       // 2*hidden depthwise 3x3
  ConvLayer<T> project_out;  // hidden -> C, 1x1
  std::size_t hidden = 0;

  static GdfnParams make(ParameterStore<T>& s, const std::string& name, std::size_t channels,
                         double expansion, Rng& rng) {
    GdfnParams p;
    p.hidden = gdfn_hidden(channels, expansion);
    p.project_in = ConvLayer<T>::make(s, name + ".project_in", channels, 2 * p.hidden, 1, rng);
    p.dwconv = ConvLayer<T>::make(s, name + ".dwconv", 2 * p.hidden, 2 * p.hidden, 3, rng, true,
                                  same_padding(3, 2 * p.hidden));
    p.project_out = ConvLayer<T>::make(s, name + ".project_out", p.hidden, channels, 1, rng);
    return p;
  }
};

template <typename T>
Var<T> gdfn(Graph<T>& g, const Var<T>& x, const GdfnParams<T>& p) {
  const Var<T> hid = p.dwconv(g, p.project_in(g, x));
  const Var<T> gate = gelu(slice_channels(hid, 0, p.hidden));
  const Var<T> value = slice_channels(hid, p.hidden, p.hidden);
  return p.project_out(g, mul(gate, value));
}

enum class AttentionOrder { spatial_first, channel_first };

struct SctbConfig {
  std::size_t heads = 1;
  std::size_t window = 8;
  double ffn_expansion = 2.66;
  bool spatial = true;
  bool channel = true;
  AttentionOrder order = AttentionOrder::spatial_first;
};

template <typename T>
struct SctbParams {
  SctbConfig cfg;
  NormLayer<T> norm_swa, norm_ffn_s, norm_cwa, norm_ffn_c;
  SpatialAttentionParams<T> swa;
  GdfnParams<T> ffn_s;
  ChannelAttentionParams<T> cwa;
  GdfnParams<T> ffn_c;

  static SctbParams make(ParameterStore<T>& s, const std::string& name, std::size_t channels,
                         const SctbConfig& cfg, Rng& rng) {
    if (!cfg.spatial && !cfg.channel) {
      throw ConfigError("SCTB '" + name + "' needs at least one attention type enabled");
    }
    AttentionConfig{cfg.heads, AttentionKind::spatial, cfg.window}.head_dim(channels);
    SctbParams p;
    p.cfg = cfg;
    auto make_spatial = [&] {
      p.norm_swa = NormLayer<T>::make(s, name + ".norm_swa", channels);
      p.swa = SpatialAttentionParams<T>::make(s, name + ".swa", channels, rng);
      p.norm_ffn_s = NormLayer<T>::make(s, name + ".norm_ffn_s", channels);
      p.ffn_s = GdfnParams<T>::make(s, name + ".ffn_s", channels, cfg.ffn_expansion, rng);
    };
    auto make_channel = [&] {
      p.norm_cwa = NormLayer<T>::make(s, name + ".norm_cwa", channels);
      p.cwa = ChannelAttentionParams<T>::make(s, name + ".cwa", channels, cfg.heads, rng);
      p.norm_ffn_c = NormLayer<T>::make(s, name + ".norm_ffn_c", channels);
      p.ffn_c = GdfnParams<T>::make(s, name + ".ffn_c", channels, cfg.ffn_expansion, rng);
    };
    if (cfg.order == AttentionOrder::spatial_first) {
      if (cfg.spatial) make_spatial();
      if (cfg.channel) make_channel();
    } else {
      if (cfg.channel) make_channel();
      if (cfg.spatial) make_spatial();
    }
    return p;
  }
};

// x <- x + SWA(LN(x)); x <- x + GDFN(LN(x)); x <- x + CWA(LN(x)); x <- x + GDFN(LN(x)),
// with the attention pairs swapped under channel_first.
template <typename T>
Var<T> sctb_forward(Graph<T>& g, Var<T> x, const SctbParams<T>& p,
                    AttentionProbe<T>* probe = nullptr) {
  const SctbConfig& c = p.cfg;
  auto spatial_pair = [&] {
    const AttentionConfig ac{c.heads, AttentionKind::spatial, c.window};
    x = add(x, spatial_window_attention(g, p.norm_swa(g, x), ac, p.swa, probe));
    x = add(x, gdfn(g, p.norm_ffn_s(g, x), p.ffn_s));
  };
  auto channel_pair = [&] {
    const AttentionConfig ac{c.heads, AttentionKind::channel, c.window};
    x = add(x, channel_wise_attention(g, p.norm_cwa(g, x), ac, p.cwa, probe));
    x = add(x, gdfn(g, p.norm_ffn_c(g, x), p.ffn_c));
  };
  if (c.order == AttentionOrder::spatial_first) {
    if (c.spatial) spatial_pair();
    if (c.channel) channel_pair();
  } else {
    if (c.channel) channel_pair();
    if (c.spatial) spatial_pair();
  }
  return x;
}

}  // namespace dpcnet
