#include <gtest/gtest.h>

#include <png.h>

#include <cmath>
#include <fstream>

#include "support.hpp"

using namespace dpcnet;
using dpcnet::test::scratch_dir;

namespace {

void write_raw_png(const std::filesystem::path& path, std::uint32_t w, std::uint32_t h, std::uint32_t format,
                   const std::vector<png_byte>& bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = w;
  img.height = h;
  img.format = format;
  ASSERT_TRUE(png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) << img.message;
}

Image grey(std::size_t h, std::size_t w, float v) { return Image(Shape{1, 3, h, w}, v); }

Image random8(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Image t(s);
  for (auto& v : t.data()) v = static_cast<float>(rng.below(256)) / 255.0f;
  return t;
}

bool in_unit_range(const Image& t) {
  for (float v : t.data())
    if (!(v >= 0.0f && v <= 1.0f)) return false;
  return true;
}

}  // namespace

TEST(Png, ByteFixture) {
  const auto dir = scratch_dir("png_fixture");
  // Row-major RGB bytes of a 2x2 image.
  const std::vector<png_byte> bytes{255, 0, 0, 0, 128, 0, 0, 0, 51, 17, 34, 255};
  write_raw_png(dir / "f.png", 2, 2, PNG_FORMAT_RGB, bytes);
  const Image t = load_png(dir / "f.png");
  ASSERT_EQ(t.shape(), (Shape{1, 3, 2, 2}));
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(t[c * 4 + p], static_cast<float>(bytes[p * 3 + c]) / 255.0f);
}

TEST(Png, RoundTripOn8BitData) {
  const auto dir = scratch_dir("png_roundtrip");
  const Image x = random8(Shape{1, 3, 7, 5}, 1);
  save_png(x, dir / "x.png");
  EXPECT_EQ(load_png(dir / "x.png"), x);
}

TEST(Png, BlackIsZero) {
  const auto dir = scratch_dir("png_black");
  write_raw_png(dir / "b.png", 3, 2, PNG_FORMAT_RGB, std::vector<png_byte>(18, 0));
  const Image b = load_png(dir / "b.png");
  for (float v : b.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Png, SaveRoundsAndClamps) {
  const auto dir = scratch_dir("png_clamp");
  Image x(Shape{1, 3, 1, 2});
  const float in[6] = {-0.5f, 2.0f, 0.5f, 0.499f / 255.0f, 254.6f / 255.0f, 1.0f};
  for (std::size_t i = 0; i < 6; ++i) x[i] = in[i];
  save_png(x, dir / "c.png");
  const Image y = load_png(dir / "c.png");
  const float expect[6] = {0.0f, 1.0f, 128.0f / 255.0f, 0.0f, 1.0f, 1.0f};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], expect[i]) << i;
}

TEST(Png, DistinctErrors) {
  const auto dir = scratch_dir("png_errors");
  EXPECT_THROW(load_png(dir / "missing.png"), FileNotFoundError);
  write_raw_png(dir / "grey.png", 2, 2, PNG_FORMAT_GRAY, std::vector<png_byte>(4, 9));
  EXPECT_THROW(load_png(dir / "grey.png"), NotRgbError);
  write_raw_png(dir / "rgba.png", 2, 2, PNG_FORMAT_RGBA, std::vector<png_byte>(16, 9));
  EXPECT_THROW(load_png(dir / "rgba.png"), NotRgbError);
  {
    std::ofstream f(dir / "bad.png", std::ios::binary);
    f << "\x89PNG\r\n\x1a\n" << std::string(40, 'x');
  }
  EXPECT_THROW(load_png(dir / "bad.png"), CorruptStreamError);
  // Valid header, truncated image data.
  save_png(random8(Shape{1, 3, 16, 16}, 2), dir / "whole.png");
  std::ifstream in(dir / "whole.png", std::ios::binary);
  std::string body((std::istreambuf_iterator<char>(in)), {});
  std::ofstream(dir / "cut.png", std::ios::binary) << body.substr(0, body.size() / 2);
  EXPECT_THROW(load_png(dir / "cut.png"), CorruptStreamError);
  EXPECT_THROW(save_png(Image(Shape{1, 1, 2, 2}), dir / "one.png"), DimensionError);
}

TEST(SynthRain, ZeroIntensityOrDensityKeepsClean) {
  Rng rng(3);
  const Image clean = make_scene(32, 32, rng);
  RainParams p;
  p.intensity = 0.0;
  EXPECT_EQ(synth_rain(clean, p).rainy, clean);
  p = RainParams{};
  p.density = 0.0;
  EXPECT_EQ(synth_rain(clean, p).rainy, clean);
}

TEST(SynthRain, DeterministicPerSeed) {
  const Image clean = grey(32, 32, 0.4f);
  RainParams p;
  p.seed = 11;
  const auto a = synth_rain(clean, p), b = synth_rain(clean, p);
  EXPECT_EQ(a.rainy, b.rainy);
  p.seed = 12;
  EXPECT_NE(synth_rain(clean, p).rainy, a.rainy);
}

TEST(SynthRain, StreakCountMatchesBernoulliRate) {
  // A length-1 kernel makes each seed exactly one changed pixel.
  const std::size_t n = 64 * 64;
  const double rate = 0.01;
  const double mean = static_cast<double>(n) * rate;
  const double sigma = std::sqrt(static_cast<double>(n) * rate * (1.0 - rate));
  ASSERT_EQ(line_kernel(1, 100.0).size(), 1u);
  const Image clean = grey(64, 64, 0.5f);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    RainParams p;
    p.density = rate;
    p.intensity = 0.8;
    p.length = 1;
    p.seed = seed;
    const auto pair = synth_rain(clean, p);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < n; ++i) changed += pair.rainy[i] != 0.5f;
    EXPECT_LT(std::abs(static_cast<double>(changed) - mean), 3.0 * sigma) << "seed " << seed;
  }
}

TEST(SynthRain, PreservesCleanOutsideStreaks) {
  Rng rng(4);
  const Image clean = make_scene(48, 48, rng);
  RainParams p;
  p.seed = 5;
  const auto pair = synth_rain(clean, p);
  const Image layer = synth_streaks(48, 48, p);
  EXPECT_TRUE(in_unit_range(pair.rainy));
  std::size_t streaked = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 48 * 48; ++i) {
      if (layer[i] == 0.0f) {
        EXPECT_EQ(pair.rainy[c * 48 * 48 + i], clean[c * 48 * 48 + i]);
      } else {
        ++streaked;
        EXPECT_GE(pair.rainy[c * 48 * 48 + i], clean[c * 48 * 48 + i]);
      }
    }
  EXPECT_GT(streaked, 0u);
}

TEST(LineKernel, LengthAndDirection) {
  const auto vertical = line_kernel(5, 90.0);
  ASSERT_EQ(vertical.size(), 5u);
  for (const auto& [dy, dx] : vertical) EXPECT_EQ(dx, 0);
  const auto horizontal = line_kernel(5, 0.0);
  ASSERT_EQ(horizontal.size(), 5u);
  for (const auto& [dy, dx] : horizontal) EXPECT_EQ(dy, 0);
}

TEST(PatchSample, FullSizeIsIdentity) {
  const auto pairs = generate_pairs(1, 32, 6);
  Rng rng(7);
  const auto p = patch_sample(pairs[0], 32, rng, false);
  EXPECT_EQ(p.rainy, pairs[0].rainy);
  EXPECT_EQ(p.clean, pairs[0].clean);
}

TEST(PatchSample, CropsAreAligned) {
  const auto pairs = generate_pairs(1, 32, 8);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const auto p = patch_sample(pairs[0], 8, rng);
    // Replay the draws: y0, x0, then the flip bit.
    Rng replay(seed);
    const std::size_t y0 = replay.below(25), x0 = replay.below(25);
    const bool flip = replay.bernoulli(0.5);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t sx = flip ? x0 + 7 - x : x0 + x;
          const float want = pairs[0].rainy.at(0, c, y0 + y, sx) - pairs[0].clean.at(0, c, y0 + y, sx);
          EXPECT_EQ(p.rainy.at(0, c, y, x) - p.clean.at(0, c, y, x), want);
          EXPECT_EQ(p.clean.at(0, c, y, x), pairs[0].clean.at(0, c, y0 + y, sx));
        }
  }
}

TEST(PatchSample, SeededCoordinatesAreReproducible) {
  Image ramp(Shape{1, 3, 16, 16});
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x)
      for (std::size_t c = 0; c < 3; ++c) ramp.at(0, c, y, x) = static_cast<float>(y * 16 + x) / 255.0f;
  const ImagePair pair{ramp, ramp, "r"};
  Rng a(99), b(99);
  for (int i = 0; i < 5; ++i) {
    const auto pa = patch_sample(pair, 4, a, false);
    const auto pb = patch_sample(pair, 4, b, false);
    EXPECT_EQ(pa.rainy, pb.rainy);
  }
  // Rng(99) draws y0 then x0; the patch origin encodes both.
  Rng c(99), replay(99);
  const auto p = patch_sample(pair, 4, c, false);
  const std::size_t y0 = replay.below(13), x0 = replay.below(13);
  EXPECT_EQ(p.rainy.at(0, 0, 0, 0), static_cast<float>(y0 * 16 + x0) / 255.0f);
}

TEST(PatchSample, TooLargeOrMismatched) {
  const auto pairs = generate_pairs(1, 16, 9);
  Rng rng(1);
  EXPECT_THROW(patch_sample(pairs[0], 32, rng), ContractError);
  ImagePair bad{grey(16, 16, 0.1f), grey(8, 8, 0.1f), "x"};
  EXPECT_THROW(patch_sample(bad, 4, rng), ContractError);
}

TEST(GeneratePairs, DeterministicAndInRange) {
  const auto a = generate_pairs(3, 32, 10), b = generate_pairs(3, 32, 10);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].rainy, b[i].rainy);
    EXPECT_EQ(a[i].clean, b[i].clean);
    EXPECT_TRUE(in_unit_range(a[i].rainy));
    EXPECT_TRUE(in_unit_range(a[i].clean));
    EXPECT_NE(a[i].rainy, a[i].clean);
  }
  EXPECT_EQ(a[0].id, "0000");
  EXPECT_EQ(a[2].id, "0002");
}

TEST(Corpus, RoundTripAndSortedIds) {
  const auto dir = scratch_dir("corpus_ok");
  const auto pairs = generate_pairs(3, 16, 11);
  for (auto it = pairs.rbegin(); it != pairs.rend(); ++it) save_pair(*it, dir);
  const auto loaded = load_corpus(dir);
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded[i].id, pairs[i].id);
    EXPECT_EQ(loaded[i].rainy, pairs[i].rainy);
    EXPECT_EQ(loaded[i].clean, pairs[i].clean);
  }
}

TEST(Corpus, Errors) {
  EXPECT_THROW(load_corpus("/nonexistent/dpcnet"), FileNotFoundError);
  const auto dir = scratch_dir("corpus_bad");
  const auto pairs = generate_pairs(2, 16, 12);
  save_pair(pairs[0], dir);
  save_png(pairs[1].rainy, dir / "rainy" / "extra.png");
  try {
    load_corpus(dir);
    FAIL() << "expected CorpusError";
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find("extra"), std::string::npos) << e.what();
  }
  const auto empty = scratch_dir("corpus_empty");
  std::filesystem::create_directories(empty / "rainy");
  std::filesystem::create_directories(empty / "clean");
  EXPECT_THROW(load_corpus(empty), CorpusError);
  const auto sizes = scratch_dir("corpus_sizes");
  save_png(grey(16, 16, 0.2f), sizes / "rainy" / "a.png");
  save_png(grey(8, 8, 0.2f), sizes / "clean" / "a.png");
  EXPECT_THROW(load_corpus(sizes), CorpusError);
}

TEST(Corpus, CheckedInCorpus) {
  const std::filesystem::path root(DPCNET_SOURCE_DIR);
  const auto train = load_corpus(root / "data" / "train");
  const auto test = load_corpus(root / "data" / "test");
  EXPECT_EQ(train.size(), 24u);
  EXPECT_EQ(test.size(), 8u);
  for (const auto* set : {&train, &test})
    for (const auto& p : *set) {
      EXPECT_TRUE(in_unit_range(p.rainy));
      EXPECT_EQ(p.rainy.shape(), (Shape{1, 3, 64, 64}));
    }
  // The generator reproduces the checked-in files.
  const auto regen = generate_pairs(24, 64, 2024);
  EXPECT_EQ(regen[5].rainy, train[5].rainy);
  EXPECT_EQ(regen[5].clean, train[5].clean);
}

TEST(ReflectPad, MirrorsWithoutRepeatingEdge) {
  Image x(Shape{1, 3, 3, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(i % 9);
  const Image y = reflect_pad(x, 4, 5);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 4, 5}));
  // Row 3 mirrors row 1; columns 3 and 4 mirror 1 and 0.
  EXPECT_EQ(y.at(0, 0, 3, 0), x.at(0, 0, 1, 0));
  EXPECT_EQ(y.at(0, 1, 0, 3), x.at(0, 1, 0, 1));
  EXPECT_EQ(y.at(0, 2, 2, 4), x.at(0, 2, 2, 0));
  EXPECT_EQ(crop_top_left(y, 3, 3), x);
  EXPECT_THROW(reflect_pad(x, 2, 3), ContractError);
  EXPECT_THROW(crop_top_left(x, 4, 3), ContractError);
}
