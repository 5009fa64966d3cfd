#pragma once

// Central finite-difference verification of analytic gradients. Runs in
// 64-bit: the functions under test are instantiated with T = double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dpcnet/autodiff.hpp"
#include "dpcnet/random.hpp"

namespace dpcnet {

struct GradcheckOptions {
  // Coordinates sampled per tensor; 0 checks all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
  // Gradients are compared relative to max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  // 2: (f(x+h) - f(x-h)) / 2h. 4: the fourth-order central stencil
  // (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h.
  int points = 2;
  // A stencil whose samples take a different relu/abs/max branch than the
  // unperturbed point straddles a kink; its step is divided by 10 until all
  // samples agree, at most this many times.
  int max_shrinks = 4;
};

struct GradcheckReport {
  std::string worst;  // coordinate (or parameter) with the largest error
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coords = 0;
  std::size_t shrunk = 0;    // coordinates evaluated with a reduced step
  std::size_t straddled = 0; // coordinates still straddling a kink at the smallest step
  double tol = 0.0;

  bool passed() const { return std::isfinite(max_rel_error) && max_rel_error < tol; }

  void merge(const GradcheckReport& other) {
    if (other.max_rel_error > max_rel_error || !std::isfinite(other.max_rel_error)) {
      max_rel_error = other.max_rel_error;
      worst = other.worst;
    }
    max_abs_error = std::max(max_abs_error, other.max_abs_error);
    coords += other.coords;
    shrunk += other.shrunk;
    straddled += other.straddled;
  }
};

inline double gradient_relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

struct Sample {
  double value;
  std::uint64_t trace;
};

// Central difference of g(t) = f(x + t e_i) around t = 0. g returns the value
// together with the branch trace of the evaluation; `base` is the trace at
// t = 0.
template <typename G>
double central_difference(G&& g, double h, int points, std::uint64_t base, int max_shrinks,
                          GradcheckReport& report) {
  if (points != 2 && points != 4) throw ContractError("finite differences support 2 or 4 points");
  double numeric = 0.0;
  for (int attempt = 0;; ++attempt, h /= 10) {
    bool smooth = true;
    auto at = [&](double t) {
      const Sample s = g(t);
      smooth = smooth && s.trace == base;
      return s.value;
    };
    if (points == 4) {
      numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
    } else {
      numeric = (at(h) - at(-h)) / (2 * h);
    }
    if (smooth) {
      if (attempt > 0) ++report.shrunk;
      return numeric;
    }
    if (attempt == max_shrinks) {
      ++report.straddled;
      return numeric;
    }
  }
}

inline std::vector<std::size_t> sample_coords(std::size_t size, std::size_t max_coords,
                                              Rng& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_coords == 0 || max_coords >= size) return idx;
  for (std::size_t i = 0; i < max_coords; ++i) {
    std::swap(idx[i], idx[i + rng.below(size - i)]);
  }
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

// f: (Graph<double>&, const Var<double>& x) -> scalar Var<double>.
template <typename F>
GradcheckReport finite_difference_check(F&& f, const Tensor<double>& x, double h, double tol,
                                        const GradcheckOptions& opts = {}) {
  Tensor<double> analytic;
  {
    Graph<double> g;
    Var<double> xv = g.leaf(x, true);
    Var<double> loss = f(g, xv);
    g.backward(loss);
    analytic = g.has_grad(xv.id()) ? g.grad(xv.id()) : Tensor<double>(x.shape());
  }
  auto eval = [&](const Tensor<double>& at) {
    Graph<double> g(false);
    g.enable_branch_trace();
    const double v = f(g, g.leaf(at, false)).value()[0];
    return detail::Sample{v, g.branch_trace()};
  };
  const std::uint64_t base = eval(x).trace;

  GradcheckReport report;
  report.tol = tol;
  Rng rng(opts.seed);
  Tensor<double> probe = x;
  for (std::size_t i : detail::sample_coords(x.size(), opts.max_coords, rng)) {
    const double orig = probe[i];
    const double numeric = detail::central_difference(
        [&](double t) {
          probe[i] = orig + t;
          return eval(probe);
        },
        h, opts.points, base, opts.max_shrinks, report);
    probe[i] = orig;
    const double rel = gradient_relative_error(analytic[i], numeric, opts.floor);
    report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic[i] - numeric));
    if (rel > report.max_rel_error || !std::isfinite(rel)) {
      report.max_rel_error = rel;
      report.worst = "x[" + std::to_string(i) + "]";
    }
    ++report.coords;
  }
  return report;
}

// Checks d(loss)/d(parameter) for every trainable parameter in `store`.
// loss_fn: (Graph<double>&) -> scalar Var<double>, reading parameters via
// Graph::param.
template <typename F>
GradcheckReport parameter_gradient_check(ParameterStore<double>& store, F&& loss_fn, double h,
                                         double tol, const GradcheckOptions& opts = {}) {
  store.zero_grad();
  {
    Graph<double> g;
    g.backward(loss_fn(g));
  }
  auto eval = [&]() {
    Graph<double> g(false);
    g.enable_branch_trace();
    const double v = loss_fn(g).value()[0];
    return detail::Sample{v, g.branch_trace()};
  };
  const std::uint64_t base = eval().trace;

  GradcheckReport report;
  report.tol = tol;
  Rng rng(opts.seed);
  for (auto& p : store) {
    if (p->frozen) continue;
    for (std::size_t i : detail::sample_coords(p->value.size(), opts.max_coords, rng)) {
      const double orig = p->value[i];
      const double numeric = detail::central_difference(
          [&](double t) {
            p->value[i] = orig + t;
            return eval();
          },
          h, opts.points, base, opts.max_shrinks, report);
      p->value[i] = orig;
      const double analytic = p->grad[i];
      const double rel = gradient_relative_error(analytic, numeric, opts.floor);
      report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic - numeric));
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = rel;
        report.worst = p->name + "[" + std::to_string(i) + "]";
      }
      ++report.coords;
    }
  }
  store.zero_grad();
  return report;
}

}  // namespace dpcnet
