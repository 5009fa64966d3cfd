#pragma once

// Finite-difference coverage of every differentiable op class, every
// composite block and the full network, in 64-bit arithmetic. Each check is
// named after the op identifier it exercises so a failing backward rule is
// reported under its own name.

#include <functional>
#include <string>
#include <vector>

#include "dpcnet/gradcheck.hpp"
#include "dpcnet/losses.hpp"
#include "dpcnet/model.hpp"

namespace dpcnet {

struct GradSuiteOptions {
  double h = 1e-4;
  double tol = 1e-4;
  std::size_t coords = 3;  // per parameter tensor in block/network checks; 0 = all
  std::size_t input_coords = 24;
  std::uint64_t seed = 1;
  ModelConfig network = ModelConfig::tiny();
  std::size_t extent = 16;
  int points = 2;  // finite-difference stencil, see GradcheckOptions
};

struct GradCheckResult {
  std::string name;
  GradcheckReport report;
};

namespace gradsuite {

using D = double;
using Fn = std::function<Var<D>(Graph<D>&, const Var<D>&)>;

inline Tensor<D> random(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<D>::uniform(s, lo, hi, rng);
}

// Uniform magnitude in [0.1, 1] with random sign: keeps abs/relu away from 0.
inline Tensor<D> off_kink(Shape s, Rng& rng) {
  Tensor<D> t(s);
  for (auto& v : t.data()) v = rng.uniform(0.1, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  return t;
}

// sum(y * R) with a fixed random R, so every output coordinate contributes.
inline Var<D> weighted_sum(Graph<D>& g, const Var<D>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, g.constant(random(y.shape(), rng))));
}

class Runner {
 public:
  explicit Runner(const GradSuiteOptions& o) : o_(o), rng_(o.seed) {}

  Rng& rng() { return rng_; }
  const GradSuiteOptions& options() const { return o_; }

  // d/dx of sum(f(x) * R).
  GradcheckReport input(const Fn& f, const Tensor<D>& x, std::size_t coords = 0) {
    const std::uint64_t wseed = rng_.next_u64();
    GradcheckOptions go;
    go.max_coords = coords;
    go.points = o_.points;
    go.seed = rng_.next_u64();
    return finite_difference_check(
        [&](Graph<D>& g, const Var<D>& v) { return weighted_sum(g, f(g, v), wseed); }, x, o_.h,
        o_.tol, go);
  }

  // d/dtheta of sum(f(x) * R) for every parameter in `store`, plus d/dx.
  GradcheckReport block(ParameterStore<D>& store, const Fn& f, const Tensor<D>& x) {
    GradcheckReport r = input(f, x, o_.input_coords);
    const std::uint64_t wseed = rng_.next_u64();
    GradcheckOptions go;
    go.max_coords = o_.coords;
    go.points = o_.points;
    go.seed = rng_.next_u64();
    r.merge(parameter_gradient_check(
        store, [&](Graph<D>& g) { return weighted_sum(g, f(g, g.constant(x)), wseed); }, o_.h,
        o_.tol, go));
    return r;
  }

  void add(std::string name, GradcheckReport r) { results_.push_back({std::move(name), r}); }

  std::vector<GradCheckResult> take() { return std::move(results_); }

 private:
  GradSuiteOptions o_;
  Rng rng_;
  std::vector<GradCheckResult> results_;
};

inline void primitive_checks(Runner& run) {
  Rng& rng = run.rng();
  const Shape s{2, 3, 4, 4};
  const Shape row{1, 3, 1, 1};

  auto binary = [&](const char* name, auto op, Shape sa, Shape sb) {
    const Tensor<D> a = random(sa, rng);
    const Tensor<D> b = random(sb, rng);
    GradcheckReport r = run.input([&](Graph<D>& g, const Var<D>& x) { return op(x, g.constant(b)); }, a);
    r.merge(run.input([&](Graph<D>& g, const Var<D>& x) { return op(g.constant(a), x); }, b));
    run.add(name, r);
  };
  binary("add", [](auto a, auto b) { return add(a, b); }, s, row);
  binary("sub", [](auto a, auto b) { return sub(a, b); }, s, row);
  binary("mul", [](auto a, auto b) { return mul(a, b); }, s, row);
  binary("matmul", [](auto a, auto b) { return matmul(a, b); }, Shape{2, 2, 3, 5}, Shape{2, 2, 5, 4});

  auto unary = [&](const char* name, auto op, Tensor<D> x) {
    run.add(name, run.input([&](Graph<D>&, const Var<D>& v) { return op(v); }, x));
  };
  unary("scale", [](auto v) { return scale(v, 1.7); }, random(s, rng));
  unary("add_scalar", [](auto v) { return add_scalar(v, -0.3); }, random(s, rng));
  unary("square", [](auto v) { return square(v); }, random(s, rng));
  unary("abs", [](auto v) { return abs(v); }, off_kink(s, rng));
  unary("relu", [](auto v) { return relu(v); }, off_kink(s, rng));
  unary("sigmoid", [](auto v) { return sigmoid(v); }, random(s, rng, -3, 3));
  unary("gelu", [](auto v) { return gelu(v); }, random(s, rng, -3, 3));
  unary("sum", [](auto v) { return scale(sum(v), 0.5); }, random(s, rng));
  unary("mean", [](auto v) { return mean(v); }, random(s, rng));
  unary("mean_axis", [](auto v) { return mean_axis(mean_axis(v, 1), 3); }, random(s, rng));
  unary("max_axis", [](auto v) { return max_axis(v, 1); }, random(s, rng));
  unary("reshape", [](auto v) { return square(reshape(v, Shape{1, 6, 2, 8})); }, random(s, rng));
  unary("permute", [](auto v) { return square(permute(v, {0, 2, 3, 1})); }, random(s, rng));
  unary("slice", [](auto v) { return square(slice_channels(v, 1, 2)); }, random(s, rng));
  unary("softmax", [](auto v) { return softmax(v, 3); }, random(s, rng, -2, 2));
  unary("l2_normalize", [](auto v) { return l2_normalize(v, 3); }, random(s, rng));
  unary("upsample", [](auto v) { return square(upsample_nearest2(v)); }, random(s, rng));
  unary("avg_pool", [](auto v) { return square(avg_pool2(v)); }, random(s, rng));
  unary("rfft2", [](auto v) { return rfft2(v); }, random(s, rng));
  unary("irfft2", [](auto v) { return irfft2(v, 4); }, random(Shape{2, 4, 4, 3}, rng));
  unary("window_partition", [](auto v) { return square(window_partition(v, 3)); },
        random(Shape{1, 2, 5, 5}, rng));
  {
    const WindowLayout l = WindowLayout::for_shape(Shape{1, 2, 5, 5}, 3);
    unary("window_merge", [l](auto v) { return square(window_merge(v, l)); },
          random(l.windows_shape(), rng));
  }
  {
    const Tensor<D> a = random(s, rng);
    const Tensor<D> b = random(Shape{2, 2, 4, 4}, rng);
    GradcheckReport r = run.input(
        [&](Graph<D>& g, const Var<D>& x) { return concat_channels<D>({x, g.constant(b)}); }, a);
    r.merge(run.input(
        [&](Graph<D>& g, const Var<D>& x) { return concat_channels<D>({g.constant(a), x}); }, b));
    run.add("concat", r);
  }
  {
    const Tensor<D> x = random(Shape{1, 4, 5, 5}, rng);
    const Tensor<D> w = random(Shape{4, 2, 3, 3}, rng);
    const Tensor<D> b = random(Shape{1, 4, 1, 1}, rng);
    const ConvOptions strided{2, 1, 2};
    GradcheckReport r = run.input(
        [&](Graph<D>& g, const Var<D>& v) {
          const Var<D> bv = g.constant(b);
          return conv2d(v, g.constant(w), &bv, strided);
        },
        x);
    r.merge(run.input(
        [&](Graph<D>& g, const Var<D>& v) {
          const Var<D> bv = g.constant(b);
          return conv2d(g.constant(x), v, &bv, strided);
        },
        w));
    r.merge(run.input(
        [&](Graph<D>& g, const Var<D>& v) { return conv2d(g.constant(x), g.constant(w), &v, strided); },
        b));
    const Tensor<D> wd = random(Shape{5, 4, 3, 3}, rng);
    r.merge(run.input(
        [&](Graph<D>& g, const Var<D>& v) { return conv2d(v, g.constant(wd), nullptr, ConvOptions{1, 1, 1}); },
        x));
    r.merge(run.input(
        [&](Graph<D>& g, const Var<D>& v) { return conv2d(g.constant(x), v, nullptr, ConvOptions{1, 1, 1}); },
        wd));
    run.add("conv2d", r);
  }
  {
    const Shape ls{2, 8, 3, 3};
    const Shape lrow{1, 8, 1, 1};
    const Tensor<D> x = random(ls, rng);
    const Tensor<D> sc = random(lrow, rng, 0.5, 1.5);
    const Tensor<D> bi = random(lrow, rng);
    GradcheckReport r = run.input(
        [&](Graph<D>& g, const Var<D>& v) { return layer_norm(v, g.constant(sc), g.constant(bi)); }, x);
    r.merge(run.input(
        [&](Graph<D>& g, const Var<D>& v) { return layer_norm(g.constant(x), v, g.constant(bi)); }, sc));
    r.merge(run.input(
        [&](Graph<D>& g, const Var<D>& v) { return layer_norm(g.constant(x), g.constant(sc), v); }, bi));
    run.add("layer_norm", r);
  }
}

// Zero-initialised biases would leave some backward paths untested.
inline void randomise_biases(ParameterStore<D>& store, Rng& rng) {
  for (auto& p : store) {
    const std::string& n = p->name;
    if (n.size() > 5 && n.compare(n.size() - 5, 5, ".bias") == 0) {
      for (auto& v : p->value.data()) v = rng.uniform(-0.2, 0.2);
    }
  }
}

inline void block_checks(Runner& run) {
  Rng& rng = run.rng();
  const std::size_t C = 4;
  const Shape s{1, C, 8, 8};

  auto with_store = [&](const char* name, auto make, auto fwd, const Tensor<D>& x) {
    ParameterStore<D> store;
    Rng init(rng.next_u64());
    const auto params = make(store, init);
    randomise_biases(store, rng);
    run.add(name,
            run.block(store, [&](Graph<D>& g, const Var<D>& v) { return fwd(g, v, params); }, x));
  };

  const AttentionConfig sp{2, AttentionKind::spatial, 4};
  const AttentionConfig ch{2, AttentionKind::channel, 4};
  with_store(
      "spatial_window_attention",
      [&](auto& st, Rng& r) { return SpatialAttentionParams<D>::make(st, "swa", C, r); },
      [&](Graph<D>& g, const Var<D>& v, const auto& p) { return spatial_window_attention(g, v, sp, p); },
      random(Shape{1, C, 6, 6}, rng));
  with_store(
      "channel_wise_attention",
      [&](auto& st, Rng& r) { return ChannelAttentionParams<D>::make(st, "cwa", C, 2, r); },
      [&](Graph<D>& g, const Var<D>& v, const auto& p) { return channel_wise_attention(g, v, ch, p); },
      random(s, rng));
  with_store(
      "gdfn", [&](auto& st, Rng& r) { return GdfnParams<D>::make(st, "ffn", C, 2.66, r); },
      [](Graph<D>& g, const Var<D>& v, const auto& p) { return gdfn(g, v, p); }, random(s, rng));
  SctbConfig sc;
  sc.heads = 2;
  sc.window = 4;
  with_store(
      "sctb", [&](auto& st, Rng& r) { return SctbParams<D>::make(st, "sctb", C, sc, r); },
      [](Graph<D>& g, const Var<D>& v, const auto& p) { return sctb_forward(g, v, p); },
      random(s, rng));
  const Tensor<D> other = random(s, rng);
  with_store(
      "afm", [&](auto& st, Rng& r) { return AfmParams<D>::make(st, "afm", C, r); },
      [&](Graph<D>& g, const Var<D>& v, const auto& p) { return afm_fuse(g, v, g.constant(other), p); },
      random(s, rng));
  with_store(
      "ffeblock", [&](auto& st, Rng& r) { return FfeParams<D>::make(st, "ffe", C, r); },
      [](Graph<D>& g, const Var<D>& v, const auto& p) { return ffeblock_forward(g, v, p); },
      random(s, rng));
  with_store(
      "sfeblock",
      [&](auto& st, Rng& r) { return SfeParams<D>::make(st, "sfe", C, sc, Fusion::afm, r); },
      [](Graph<D>& g, const Var<D>& v, const auto& p) { return sfeblock_forward(g, v, p); },
      random(s, rng));
  const ModelConfig mc = ModelConfig::tiny();
  with_store(
      "ddblock", [&](auto& st, Rng& r) { return DdParams<D>::make(st, "dd", C, sc, mc, r); },
      [&](Graph<D>& g, const Var<D>& v, const auto& p) { return ddblock_forward(g, v, p); },
      random(s, rng));
}

// Loss gradients with respect to the prediction. The target is offset so no
// pixel sits on the |.| kink.
inline void loss_checks(Runner& run) {
  Rng& rng = run.rng();
  const Shape s{1, 3, 16, 16};
  const Tensor<D> pred = random(s, rng, 0.0, 1.0);
  Tensor<D> gt = pred;
  for (auto& v : gt.data()) v += rng.uniform(0.2, 0.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  const FeatureExtractor<D> fx;
  auto check = [&](const char* name, auto loss) {
    GradcheckOptions go;
    go.seed = rng.next_u64();
    go.points = run.options().points;
    go.max_coords = run.options().input_coords * 4;
    run.add(name, finite_difference_check(
                      [&](Graph<D>& g, const Var<D>& v) { return loss(g, v, g.constant(gt)); }, pred,
                      run.options().h, run.options().tol, go));
  };
  check("l1_loss", [](Graph<D>&, const Var<D>& p, const Var<D>& t) { return l1_loss(p, t); });
  check("fft_loss", [](Graph<D>&, const Var<D>& p, const Var<D>& t) { return fft_loss(p, t); });
  check("perceptual_loss", [&](Graph<D>& g, const Var<D>& p, const Var<D>& t) {
    return perceptual_proxy_loss(g, p, t, fx);
  });
  check("total_loss", [&](Graph<D>& g, const Var<D>& p, const Var<D>& t) {
    return total_loss(g, p, t, LossWeights{}, fx);
  });
}

// Full network + L1 against a target offset from the input, with respect to
// every parameter tensor and the input image.
inline void network_check(Runner& run) {
  const GradSuiteOptions& o = run.options();
  Rng& rng = run.rng();
  DpcNet<D> net(o.network);
  randomise_biases(net.parameters(), rng);
  const Shape s{1, 3, o.extent, o.extent};
  const Tensor<D> rainy = random(s, rng, 0.0, 1.0);
  Tensor<D> gt = rainy;
  for (auto& v : gt.data()) v += 0.5;
  auto loss = [&](Graph<D>& g, const Var<D>& x) { return l1_loss(net.forward(g, x), g.constant(gt)); };

  GradcheckOptions go;
  go.points = o.points;
  go.max_coords = o.input_coords;
  go.seed = rng.next_u64();
  GradcheckReport r = finite_difference_check(loss, rainy, o.h, o.tol, go);
  go.max_coords = o.coords;
  go.seed = rng.next_u64();
  r.merge(parameter_gradient_check(
      net.parameters(), [&](Graph<D>& g) { return loss(g, g.constant(rainy)); }, o.h, o.tol, go));
  run.add("dpcnet", r);
}

}  // namespace gradsuite

// Runs every check in a fixed order; one result per op class or block.
inline std::vector<GradCheckResult> run_gradient_suite(const GradSuiteOptions& o = {}) {
  gradsuite::Runner run(o);
  gradsuite::primitive_checks(run);
  gradsuite::block_checks(run);
  gradsuite::loss_checks(run);
  gradsuite::network_check(run);
  return run.take();
}

}  // namespace dpcnet
