#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "dpcnet/dpcnet.hpp"

namespace dpcnet::test {

template <typename T = double>
Tensor<T> random(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return Tensor<T>::uniform(s, lo, hi, rng);
}

// Largest |a - b| / max(|b|, 1).
template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    worst = std::max(worst, d / std::max(1.0, std::abs(static_cast<double>(b[i]))));
  }
  return worst;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dpcnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Runs the forward of f on a fresh tape and returns the value.
template <typename F>
Tensor<double> eval(F&& f) {
  Graph<double> g;
  return f(g).value();
}

}  // namespace dpcnet::test
