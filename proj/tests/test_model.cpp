#include <gtest/gtest.h>

#include "support.hpp"

using namespace dpcnet;
using dpcnet::test::random;

namespace {

void randomise(ParameterStore<double>& store, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : store) {
    for (auto& v : p->value.data()) v = rng.uniform(-0.5, 0.5);
  }
}

void zero(const ConvLayer<double>& layer) {
  layer.weight->value.fill(0.0);
  if (layer.bias) layer.bias->value.fill(0.0);
}

// 1x1 conv on one N=1 image.
Tensor<double> pointwise(const Tensor<double>& x, const ConvLayer<double>& layer) {
  const Shape& s = x.shape();
  const auto& w = layer.weight->value;
  const std::size_t O = w.shape().n, P = s.plane();
  Tensor<double> y(Shape{1, O, s.h, s.w});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t p = 0; p < P; ++p) {
      double acc = layer.bias ? layer.bias->value[o] : 0.0;
      for (std::size_t c = 0; c < s.c; ++c) acc += w[o * s.c + c] * x[c * P + p];
      y[o * P + p] = acc;
    }
  return y;
}

double sigmoid_ref(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// sigmoid(conv7x7([mean_c ; max_c])) as an H x W map.
Tensor<double> spatial_map(const Tensor<double>& x, const AfmParams<double>& p) {
  const Shape& s = x.shape();
  Tensor<double> pooled(Shape{1, 2, s.h, s.w});
  for (std::size_t i = 0; i < s.plane(); ++i) {
    double total = 0.0, top = -1e300;
    for (std::size_t c = 0; c < s.c; ++c) {
      total += x[c * s.plane() + i];
      top = std::max(top, x[c * s.plane() + i]);
    }
    pooled[i] = total / static_cast<double>(s.c);
    pooled[s.plane() + i] = top;
  }
  const auto& w = p.sa_conv.weight->value;
  Tensor<double> map(Shape{1, 1, s.h, s.w});
  for (long i = 0; i < static_cast<long>(s.h); ++i)
    for (long j = 0; j < static_cast<long>(s.w); ++j) {
      double acc = p.sa_conv.bias->value[0];
      for (std::size_t c = 0; c < 2; ++c)
        for (long a = 0; a < 7; ++a)
          for (long b = 0; b < 7; ++b) {
            const long yi = i + a - 3, xj = j + b - 3;
            if (yi < 0 || xj < 0 || yi >= static_cast<long>(s.h) || xj >= static_cast<long>(s.w)) continue;
            acc += w[(c * 7 + a) * 7 + b] * pooled.at(0, c, yi, xj);
          }
      map.at(0, 0, i, j) = sigmoid_ref(acc);
    }
  return map;
}

// sigmoid(fc(relu(fc(avgpool)))) as a C x 1 x 1 map.
Tensor<double> channel_map(const Tensor<double>& x, const AfmParams<double>& p) {
  const Shape& s = x.shape();
  Tensor<double> pooled(Shape{1, s.c, 1, 1});
  for (std::size_t c = 0; c < s.c; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.plane(); ++i) total += x[c * s.plane() + i];
    pooled[c] = total / static_cast<double>(s.plane());
  }
  auto hidden = pointwise(pooled, p.ca_reduce);
  for (auto& v : hidden.data()) v = std::max(v, 0.0);
  auto out = pointwise(hidden, p.ca_expand);
  for (auto& v : out.data()) v = sigmoid_ref(v);
  return out;
}

// b1 * S(b2) + b2 * C(b1) with S a spatial map and C a channel map.
Tensor<double> gated_sum(const Tensor<double>& b1, const Tensor<double>& sa, const Tensor<double>& b2,
                         const Tensor<double>& ca) {
  const Shape& s = b1.shape();
  Tensor<double> y(s);
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t i = 0; i < s.plane(); ++i)
      y[c * s.plane() + i] = b1[c * s.plane() + i] * sa[i] + b2[c * s.plane() + i] * ca[c];
  return y;
}

Tensor<double> cat(const Tensor<double>& a, const Tensor<double>& b) {
  const Shape& s = a.shape();
  Tensor<double> y(Shape{1, 2 * s.c, s.h, s.w});
  std::copy(a.data().begin(), a.data().end(), y.data().begin());
  std::copy(b.data().begin(), b.data().end(), y.data().begin() + static_cast<long>(a.size()));
  return y;
}

Tensor<double> afm_reference(const Tensor<double>& b1, const Tensor<double>& b2, const AfmParams<double>& p) {
  const auto sa1 = spatial_map(b1, p), sa2 = spatial_map(b2, p);
  const auto ca1 = channel_map(b1, p), ca2 = channel_map(b2, p);
  // F2 = conv(b1 * CA(b2) + b2 * SA(b1)), written with b2 leading.
  const auto f1 = pointwise(gated_sum(b1, sa2, b2, ca1), p.fuse1);
  const auto f2 = pointwise(gated_sum(b2, sa1, b1, ca2), p.fuse2);
  return pointwise(cat(f1, f2), p.out);
}

ModelConfig toy() {
  ModelConfig c = ModelConfig::tiny();
  c.window = 4;
  return c;
}

Tensor<double> run(const DpcNet<double>& net, const Tensor<double>& x) {
  Graph<double> g(false);
  return net.forward(g, g.constant(x)).value();
}

}  // namespace

TEST(Afm, MatchesHandComposition) {
  ParameterStore<double> s;
  Rng rng(1);
  const auto p = AfmParams<double>::make(s, "afm", 4, rng);
  randomise(s, 2);
  const auto b1 = random(Shape{1, 4, 5, 6}, 3);
  const auto b2 = random(Shape{1, 4, 5, 6}, 4);
  Graph<double> g;
  const auto y = afm_fuse(g, g.constant(b1), g.constant(b2), p).value();
  EXPECT_LT(max_abs_diff(y, afm_reference(b1, b2, p)), 1e-13);
}

TEST(Afm, MapsLieInUnitInterval) {
  ParameterStore<double> s;
  Rng rng(5);
  const auto p = AfmParams<double>::make(s, "afm", 4, rng);
  randomise(s, 6);
  Graph<double> g;
  const auto x = g.constant(random(Shape{2, 4, 6, 6}, 7, -3, 3));
  const auto sa = afm_spatial_map(g, x, p).value();
  const auto ca = afm_channel_map(g, x, p).value();
  EXPECT_EQ(sa.shape(), (Shape{2, 1, 6, 6}));
  EXPECT_EQ(ca.shape(), (Shape{2, 4, 1, 1}));
  for (const auto* t : {&sa, &ca})
    for (double v : t->data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
}

TEST(Afm, EqualBranchesGiveEqualPreConvSums) {
  ParameterStore<double> s;
  Rng rng(8);
  const auto p = AfmParams<double>::make(s, "afm", 4, rng);
  randomise(s, 9);
  const auto b = random(Shape{1, 4, 4, 4}, 10);
  const auto sa = spatial_map(b, p), ca = channel_map(b, p);
  // Tied fuse convolutions make the two pre-conv sums identical, so F2 = F1.
  p.fuse2.weight->value = p.fuse1.weight->value;
  p.fuse2.bias->value = p.fuse1.bias->value;
  Graph<double> g;
  const auto y = afm_fuse(g, g.constant(b), g.constant(b), p).value();
  const auto f1 = pointwise(gated_sum(b, sa, b, ca), p.fuse1);
  const auto expect = pointwise(cat(f1, f1), p.out);
  EXPECT_LT(max_abs_diff(y, expect), 1e-13);
}

TEST(Afm, ZeroSecondBranchGatesByConstantMap) {
  ParameterStore<double> s;
  Rng rng(11);
  const auto p = AfmParams<double>::make(s, "afm", 4, rng);
  randomise(s, 12);
  for (const auto* layer : {&p.fuse1, &p.fuse2, &p.out}) layer->bias->value.fill(0.0);
  const auto b1 = random(Shape{1, 4, 4, 4}, 13);
  const auto zero_in = Tensor<double>(b1.shape());
  const auto sa0 = spatial_map(zero_in, p);
  // SA(0) is sigmoid of the 7x7 bias everywhere.
  for (double v : sa0.data()) EXPECT_DOUBLE_EQ(v, sigmoid_ref(p.sa_conv.bias->value[0]));
  Tensor<double> gated(b1.shape());
  for (std::size_t i = 0; i < gated.size(); ++i) gated[i] = b1[i] * sa0[0];
  const auto f1 = pointwise(gated, p.fuse1);
  const auto ca0 = channel_map(zero_in, p);
  Tensor<double> gated2(b1.shape());
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 16; ++i) gated2[c * 16 + i] = b1[c * 16 + i] * ca0[c];
  const auto f2 = pointwise(gated2, p.fuse2);
  Graph<double> g;
  const auto y = afm_fuse(g, g.constant(b1), g.constant(zero_in), p).value();
  EXPECT_LT(max_abs_diff(y, pointwise(cat(f1, f2), p.out)), 1e-13);
}

TEST(Afm, ShapeMismatch) {
  ParameterStore<double> s;
  Rng rng(14);
  const auto p = AfmParams<double>::make(s, "afm", 4, rng);
  Graph<double> g;
  EXPECT_THROW(afm_fuse(g, g.constant(Tensor<double>(Shape{1, 4, 4, 4})),
                        g.constant(Tensor<double>(Shape{1, 4, 4, 2})), p),
               ContractError);
}

TEST(Ffe, ZeroSpectralMlpIsIdentity) {
  ParameterStore<double> s;
  Rng rng(15);
  const auto p = FfeParams<double>::make(s, "ffe", 4, rng);
  randomise(s, 16);
  zero(p.spectral2);
  p.conv_out.bias->value.fill(0.0);
  const auto x = random(Shape{1, 4, 8, 8}, 17);
  Graph<double> g;
  EXPECT_EQ(ffeblock_forward(g, g.constant(x), p).value(), x);
}

TEST(Ffe, MatchesManualComposition) {
  ParameterStore<double> s;
  Rng rng(18);
  const auto p = FfeParams<double>::make(s, "ffe", 2, rng);
  randomise(s, 19);
  const auto x = random(Shape{1, 2, 4, 8}, 20);
  Graph<double> g;
  const auto y = ffeblock_forward(g, g.constant(x), p).value();
  EXPECT_EQ(y.shape(), x.shape());

  auto stacked = stack_spectrum(rfft2(pointwise(x, p.conv_in)));
  auto hidden = pointwise(stacked, p.spectral1);
  for (auto& v : hidden.data()) v = std::max(v, 0.0);
  const auto mixed = pointwise(hidden, p.spectral2);
  const auto back = pointwise(irfft2(unstack_spectrum(mixed, 8), 8), p.conv_out);
  Tensor<double> expect(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) expect[i] = x[i] + back[i];
  EXPECT_LT(max_abs_diff(y, expect), 1e-12);
}

TEST(Ffe, ConstantInputGivesConstantChannels) {
  ParameterStore<double> s;
  Rng rng(21);
  const auto p = FfeParams<double>::make(s, "ffe", 3, rng);
  randomise(s, 22);
  // Zero spectral biases keep every non-DC bin at zero through the MLP.
  p.spectral1.bias->value.fill(0.0);
  p.spectral2.bias->value.fill(0.0);
  Tensor<double> x(Shape{1, 3, 8, 8});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i) x[c * 64 + i] = 0.2 * static_cast<double>(c) - 0.3;
  Graph<double> g;
  const auto y = ffeblock_forward(g, g.constant(x), p).value();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 1; i < 64; ++i) EXPECT_NEAR(y[c * 64 + i], y[c * 64], 1e-13);
}

TEST(Ffe, RejectsNonPowerOfTwo) {
  ParameterStore<double> s;
  Rng rng(23);
  const auto p = FfeParams<double>::make(s, "ffe", 2, rng);
  Graph<double> g;
  EXPECT_THROW(ffeblock_forward(g, g.constant(Tensor<double>(Shape{1, 2, 6, 8})), p), ConfigError);
}

TEST(Sfe, MatchesManualComposition) {
  ParameterStore<double> s;
  Rng rng(24);
  const SctbConfig sc{1, 2, 2.66, true, true, AttentionOrder::spatial_first};
  const auto p = SfeParams<double>::make(s, "sfe", 4, sc, Fusion::afm, rng);
  randomise(s, 25);
  const auto xv = random(Shape{1, 4, 4, 4}, 26);
  Graph<double> g;
  const auto y = sfeblock_forward(g, g.constant(xv), p).value();
  EXPECT_EQ(y.shape(), xv.shape());
  const auto x = g.constant(xv);
  const auto global = sctb_forward(g, x, p.sctb);
  const auto local = gelu(p.local2(g, gelu(p.local1(g, x))));
  EXPECT_EQ(y, afm_fuse(g, global, local, p.fusion.afm).value());
}

TEST(Sfe, ConcatFusionDiffersFromAfm) {
  const SctbConfig sc{1, 2, 2.66, true, true, AttentionOrder::spatial_first};
  ParameterStore<double> s1, s2;
  Rng r1(27), r2(27);
  const auto a = SfeParams<double>::make(s1, "sfe", 4, sc, Fusion::afm, r1);
  const auto c = SfeParams<double>::make(s2, "sfe", 4, sc, Fusion::concat, r2);
  const auto x = random(Shape{1, 4, 4, 4}, 28);
  Graph<double> g;
  const auto ya = sfeblock_forward(g, g.constant(x), a).value();
  const auto yc = sfeblock_forward(g, g.constant(x), c).value();
  EXPECT_EQ(ya.shape(), yc.shape());
  EXPECT_GT(max_abs_diff(ya, yc), 1e-6);
}

TEST(DdBlock, FrequencyOffIsSpatialPathPlusResidual) {
  ModelConfig cfg = toy();
  cfg.frequency_branch = false;
  ParameterStore<double> s;
  Rng rng(29);
  const SctbConfig sc{1, 2, 2.66, true, true, AttentionOrder::spatial_first};
  const auto p = DdParams<double>::make(s, "dd", 4, sc, cfg, rng);
  EXPECT_EQ(s.find("dd.ffe.conv_in.weight"), nullptr);
  const auto xv = random(Shape{1, 4, 4, 4}, 30);
  Graph<double> g;
  const auto y = ddblock_forward(g, g.constant(xv), p).value();
  const auto sfe = sfeblock_forward(g, g.constant(xv), p.sfe).value();
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_EQ(y[i], sfe[i] + xv[i]);
}

TEST(DdBlock, MatchesManualComposition) {
  ParameterStore<double> s;
  Rng rng(31);
  const SctbConfig sc{1, 2, 2.66, true, true, AttentionOrder::spatial_first};
  const auto p = DdParams<double>::make(s, "dd", 4, sc, toy(), rng);
  randomise(s, 32);
  const auto xv = random(Shape{1, 4, 4, 4}, 33);
  Graph<double> g;
  const auto y = ddblock_forward(g, g.constant(xv), p).value();
  EXPECT_EQ(y.shape(), xv.shape());
  const auto x = g.constant(xv);
  const auto sv = sfeblock_forward(g, x, p.sfe).value();
  const auto fv = ffeblock_forward(g, x, p.ffe).value();
  const auto fused = afm_reference(sv, fv, p.fusion.afm);
  Tensor<double> expect(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) expect[i] = fused[i] + xv[i];
  EXPECT_LT(max_abs_diff(y, expect), 1e-12);
}

TEST(DpcNet, ShapeAtTrainingPatchSize) {
  DpcNet<float> net(ModelConfig{});
  const auto x = random<float>(Shape{1, 3, 128, 128}, 34, 0, 1);
  Graph<float> g(false);
  const auto y = net.forward(g, g.constant(x)).value();
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(y.all_finite());
}

TEST(DpcNet, ShapeOnRectangularInput) {
  DpcNet<double> net(toy());
  const auto x = random(Shape{2, 3, 8, 16}, 35, 0, 1);
  EXPECT_EQ(run(net, x).shape(), x.shape());
}

TEST(DpcNet, ZeroHeadIsIdentity) {
  DpcNet<double> net(toy());
  zero(net.head());
  const auto x = random(Shape{1, 3, 16, 16}, 36, 0, 1);
  EXPECT_EQ(run(net, x), x);
  EXPECT_EQ(net.derain(x), x);
}

TEST(DpcNet, DerainClampsToUnitRange) {
  DpcNet<double> net(toy());
  randomise(net.parameters(), 37);
  const auto y = net.derain(random(Shape{1, 3, 8, 8}, 38, 0, 1));
  for (double v : y.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(DpcNet, ParameterCountIsAFunctionOfConfig) {
  DpcNet<double> a(toy());
  ModelConfig reseeded = toy();
  reseeded.init_seed = 99;
  DpcNet<float> b(reseeded);
  EXPECT_EQ(a.parameters().scalar_count(), b.parameters().scalar_count());
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i].name, b.parameters()[i].name);
  DpcNet<double> c(toy());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i].value, c.parameters()[i].value);
}

TEST(DpcNet, EveryAblationRunsAndDiffers) {
  const auto x = random(Shape{1, 3, 16, 16}, 39, 0, 1);
  DpcNet<double> full(toy());
  const auto base = run(full, x);
  std::vector<ModelConfig> variants(5, toy());
  variants[0].frequency_branch = false;
  variants[1].fusion = Fusion::concat;
  variants[2].spatial_sa = false;
  variants[3].channel_sa = false;
  variants[4].sa_order = AttentionOrder::channel_first;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    DpcNet<double> net(variants[i]);
    const auto y = run(net, x);
    EXPECT_EQ(y.shape(), x.shape()) << i;
    EXPECT_TRUE(y.all_finite()) << i;
    EXPECT_GT(max_abs_diff(y, base), 1e-9) << "variant " << i;
  }
}

TEST(DpcNet, InputChecks) {
  DpcNet<double> net(toy());
  EXPECT_THROW(net.check_input(Shape{1, 1, 16, 16}), DimensionError);
  EXPECT_THROW(net.check_input(Shape{1, 3, 12, 16}), ConfigError);
  EXPECT_THROW(net.check_input(Shape{1, 3, 2, 16}), ConfigError);
  EXPECT_NO_THROW(net.check_input(Shape{1, 3, 4, 16}));
  ModelConfig bad = toy();
  bad.heads_per_level = {3, 2, 2};
  EXPECT_THROW(DpcNet<double>{bad}, ConfigError);
  bad = toy();
  bad.blocks_per_level = {1, 1};
  EXPECT_THROW(DpcNet<double>{bad}, ConfigError);
}

TEST(DpcNet, GradientMatchesFiniteDifferences) {
  GradSuiteOptions o;
  gradsuite::Runner run(o);
  gradsuite::network_check(run);
  bool seen = false;
  for (const auto& r : run.take()) {
    seen = seen || r.name == "dpcnet";
    EXPECT_TRUE(r.report.passed()) << r.name << ": " << r.report.max_rel_error << " at " << r.report.worst;
  }
  EXPECT_TRUE(seen);
}
