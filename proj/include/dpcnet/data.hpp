#pragma once

// Paired rainy/clean corpus: 8-bit RGB PNG I/O, additive streak synthesis,
// procedural clean scenes and aligned patch sampling.
//
// Directory layout: <root>/rainy/<id>.png and <root>/clean/<id>.png.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "dpcnet/tensor.hpp"

namespace dpcnet {

using Image = Tensor<float>;

// ---------------------------------------------------------------------------
// PNG

inline Image load_png(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw FileNotFoundError("no such image: " + path.string());
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw CorruptStreamError("cannot decode " + path.string() + ": " + msg);
  }
  const bool colour = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  const bool alpha = (img.format & PNG_FORMAT_FLAG_ALPHA) != 0;
  const bool wide = (img.format & PNG_FORMAT_FLAG_LINEAR) != 0;
  if (!colour || alpha || wide) {
    png_image_free(&img);
    throw NotRgbError(path.string() + " is not an 8-bit RGB image");
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw CorruptStreamError("cannot decode " + path.string() + ": " + msg);
  }
  const std::size_t h = img.height, w = img.width;
  Image out(Shape{1, 3, h, w});
  for (std::size_t c = 0; c < 3; ++c) {
    float* p = out.plane(0, c);
    for (std::size_t i = 0; i < h * w; ++i) p[i] = static_cast<float>(buf[i * 3 + c]) / 255.0f;
  }
  return out;
}

inline std::uint8_t to_byte(float v) {
  const float q = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f);
  return static_cast<std::uint8_t>(q);
}

// Writes a 1 x 3 x H x W image; values are clamped and rounded to 8 bits.
inline void save_png(const Image& t, const std::filesystem::path& path) {
  const Shape& s = t.shape();
  if (s.n != 1 || s.c != 3) throw DimensionError("save_png expects 1x3xHxW, got " + s.str());
  std::vector<png_byte> buf(s.plane() * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    const float* p = t.plane(0, c);
    for (std::size_t i = 0; i < s.plane(); ++i) buf[i * 3 + c] = to_byte(p[i]);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(s.w);
  img.height = static_cast<png_uint_32>(s.h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot write " + path.string() + ": " + msg);
  }
}

// Rounds every value to the nearest 8-bit level, as a save/load cycle would.
inline Image quantize8(const Image& t) {
  Image out = t;
  for (auto& v : out.data()) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Rain synthesis

struct ImagePair {
  Image rainy;
  Image clean;
  std::string id;
};

struct RainParams {
  double density = 0.02;    // Bernoulli seed rate per pixel
  double angle = 100.0;     // streak direction, degrees from the +x axis
  std::size_t length = 9;   // pixels
  double intensity = 0.6;
  std::uint64_t seed = Rng::kDefaultSeed;
};

// Pixel offsets (dy, dx) of a one-pixel-wide line centred on the origin.
inline std::vector<std::pair<int, int>> line_kernel(std::size_t length, double angle_deg) {
  std::set<std::pair<int, int>> cells;
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double half = (static_cast<double>(length) - 1.0) / 2.0;
  for (std::size_t i = 0; i < std::max<std::size_t>(length, 1); ++i) {
    const double t = static_cast<double>(i) - half;
    cells.emplace(static_cast<int>(std::lround(-t * std::sin(a))),
                  static_cast<int>(std::lround(t * std::cos(a))));
  }
  return {cells.begin(), cells.end()};
}

// Streak layer in [0, intensity] of extent h x w (1 x 1 x h x w).
inline Image synth_streaks(std::size_t h, std::size_t w, const RainParams& p) {
  Rng rng(p.seed);
  Image seeds(Shape{1, 1, h, w});
  for (auto& v : seeds.data()) v = rng.bernoulli(p.density) ? 1.0f : 0.0f;
  const auto kernel = line_kernel(p.length, p.angle);
  Image layer(Shape{1, 1, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (seeds[y * w + x] == 0.0f) continue;
      for (const auto& [dy, dx] : kernel) {
        const auto yy = static_cast<std::ptrdiff_t>(y) + dy;
        const auto xx = static_cast<std::ptrdiff_t>(x) + dx;
        if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) ||
            xx >= static_cast<std::ptrdiff_t>(w)) {
          continue;
        }
        layer[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] += 1.0f;
      }
    }
  }
  const auto gain = static_cast<float>(p.intensity);
  for (auto& v : layer.data()) v = std::min(v, 1.0f) * gain;
  return layer;
}

// rainy = clamp(clean + streaks, 0, 1) on every channel.
inline ImagePair synth_rain(const Image& clean, const RainParams& p, std::string id = {}) {
  const Shape& s = clean.shape();
  const Image layer = synth_streaks(s.h, s.w, p);
  Image rainy = clean;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      float* r = rainy.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        if (layer[i] != 0.0f) r[i] = std::clamp(r[i] + layer[i], 0.0f, 1.0f);
      }
    }
  }
  return {std::move(rainy), clean, std::move(id)};
}

// Procedural clean scene: a two-colour gradient, a few flat shapes and a
// low-amplitude sinusoidal texture.
inline Image make_scene(std::size_t h, std::size_t w, Rng& rng) {
  Image img(Shape{1, 3, h, w});
  float c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = static_cast<float>(rng.uniform(0.1, 0.7));
    c1[c] = static_cast<float>(rng.uniform(0.1, 0.7));
  }
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ux = std::cos(theta), uy = std::sin(theta);
  const double freq = rng.uniform(0.1, 0.5);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / static_cast<double>(w) - 0.5;
      const double fy = static_cast<double>(y) / static_cast<double>(h) - 0.5;
      const auto t = static_cast<float>(std::clamp(0.5 + fx * ux + fy * uy, 0.0, 1.0));
      const auto tex = static_cast<float>(0.04 * std::sin(freq * static_cast<double>(x + 2 * y) + phase));
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(0, c, y, x) = c0[c] + (c1[c] - c0[c]) * t + tex;
      }
    }
  }
  const std::size_t shapes = 2 + rng.below(4);
  for (std::size_t k = 0; k < shapes; ++k) {
    float colour[3];
    for (auto& v : colour) v = static_cast<float>(rng.uniform(0.0, 0.8));
    const bool disc = rng.bernoulli(0.5);
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    const double ry = rng.uniform(2.0, static_cast<double>(h) / 4.0);
    const double rx = rng.uniform(2.0, static_cast<double>(w) / 4.0);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = (static_cast<double>(y) - cy) / ry;
        const double dx = (static_cast<double>(x) - cx) / rx;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (std::size_t c = 0; c < 3; ++c) img.at(0, c, y, x) = colour[c];
      }
    }
  }
  for (auto& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

// Rain parameters drawn for corpus generation.
inline RainParams random_rain(Rng& rng) {
  RainParams p;
  p.density = rng.uniform(0.01, 0.04);
  p.angle = rng.uniform(60.0, 120.0);
  p.length = 5 + rng.below(11);
  p.intensity = rng.uniform(0.3, 0.7);
  p.seed = rng.next_u64();
  return p;
}

// ---------------------------------------------------------------------------
// Patches and batches

namespace detail {

inline Image crop(const Image& t, std::size_t y0, std::size_t x0, std::size_t size, bool flip) {
  const Shape& s = t.shape();
  Image out(Shape{s.n, s.c, size, size});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const std::size_t sx = flip ? x0 + size - 1 - x : x0 + x;
          out.at(n, c, y, x) = t.at(n, c, y0 + y, sx);
        }
      }
    }
  }
  return out;
}

}  // namespace detail

// Same size x size window (and the same optional horizontal flip) from both
// images. Draws y, x, then the flip bit from `rng`.
inline ImagePair patch_sample(const ImagePair& pair, std::size_t size, Rng& rng,
                              bool allow_flip = true) {
  const Shape& s = pair.rainy.shape();
  if (pair.clean.shape() != s) {
    throw ContractError("patch_sample: rainy " + s.str() + " and clean " +
                        pair.clean.shape().str() + " differ");
  }
  if (size == 0 || size > s.h || size > s.w) {
    throw ContractError("patch_sample: patch " + std::to_string(size) + " does not fit image " +
                        s.str());
  }
  const std::size_t y0 = rng.below(s.h - size + 1);
  const std::size_t x0 = rng.below(s.w - size + 1);
  const bool flip = allow_flip && rng.bernoulli(0.5);
  return {detail::crop(pair.rainy, y0, x0, size, flip), detail::crop(pair.clean, y0, x0, size, flip),
          pair.id};
}

// Extends t to h x w (h, w >= current extents) by mirroring about the bottom
// and right edges without repeating the edge pixel.
inline Image reflect_pad(const Image& t, std::size_t h, std::size_t w) {
  const Shape& s = t.shape();
  if (h < s.h || w < s.w) throw ContractError("reflect_pad cannot shrink " + s.str());
  auto mirror = [](std::size_t i, std::size_t n) {
    if (n == 1) return std::size_t{0};
    const std::size_t period = 2 * n - 2;
    i %= period;
    return i < n ? i : period - i;
  };
  Image out(Shape{s.n, s.c, h, w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) out.at(n, c, y, x) = t.at(n, c, mirror(y, s.h), mirror(x, s.w));
      }
    }
  }
  return out;
}

// Top-left h x w region.
inline Image crop_top_left(const Image& t, std::size_t h, std::size_t w) {
  const Shape& s = t.shape();
  if (h > s.h || w > s.w) throw ContractError("crop_top_left beyond " + s.str());
  Image out(Shape{s.n, s.c, h, w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) out.at(n, c, y, x) = t.at(n, c, y, x);
      }
    }
  }
  return out;
}

// Stacks 1 x C x H x W images along the batch axis.
inline Image stack_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("stack_batch: no images");
  const Shape one = images.front()->shape();
  Image out(Shape{images.size(), one.c, one.h, one.w});
  const std::size_t stride = one.size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != one) {
      throw DimensionError("stack_batch: " + images[i]->shape().str() + " vs " + one.str());
    }
    std::copy(images[i]->ptr(), images[i]->ptr() + stride, out.ptr() + i * stride);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus directories

inline std::vector<std::string> png_ids(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw FileNotFoundError("no such directory: " + dir.string());
  }
  std::vector<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Pairs sorted by id. Ids present under only one of rainy/ and clean/ are an
// error listing every offender.
inline std::vector<ImagePair> load_corpus(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) {
    throw FileNotFoundError("no such corpus root: " + root.string());
  }
  const auto rainy = png_ids(root / "rainy");
  const auto clean = png_ids(root / "clean");
  std::vector<std::string> unmatched;
  std::set_symmetric_difference(rainy.begin(), rainy.end(), clean.begin(), clean.end(),
                                std::back_inserter(unmatched));
  if (!unmatched.empty()) {
    std::string list;
    for (const auto& id : unmatched) list += (list.empty() ? "" : ", ") + id;
    throw CorpusError("unpaired ids under " + root.string() + ": " + list);
  }
  if (rainy.empty()) throw CorpusError("empty corpus: " + root.string());
  std::vector<ImagePair> pairs;
  for (const auto& id : rainy) {
    ImagePair p{load_png(root / "rainy" / (id + ".png")), load_png(root / "clean" / (id + ".png")),
                id};
    if (p.rainy.shape() != p.clean.shape()) {
      throw CorpusError("size mismatch for id " + id + ": " + p.rainy.shape().str() + " vs " +
                        p.clean.shape().str());
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline void save_pair(const ImagePair& p, const std::filesystem::path& root) {
  save_png(p.rainy, root / "rainy" / (p.id + ".png"));
  save_png(p.clean, root / "clean" / (p.id + ".png"));
}

// Deterministic synthetic pairs; ids are zero-padded indices.
inline std::vector<ImagePair> generate_pairs(std::size_t count, std::size_t size,
                                             std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ImagePair> out;
  for (std::size_t i = 0; i < count; ++i) {
    char id[24];
    std::snprintf(id, sizeof id, "%04zu", i);
    const Image clean = make_scene(size, size, rng);
    ImagePair p = synth_rain(clean, random_rain(rng), id);
    p.rainy = quantize8(p.rainy);
    p.clean = quantize8(p.clean);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace dpcnet
