#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dpcnet/errors.hpp"
#include "dpcnet/random.hpp"

namespace dpcnet {

// Extents of a rank-4 NCHW tensor.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }

  constexpr std::size_t operator[](std::size_t axis) const {
    switch (axis) {
      case 0: return n;
      case 1: return c;
      case 2: return h;
      default: return w;
    }
  }

  constexpr std::array<std::size_t, 4> dims() const { return {n, c, h, w}; }

  static constexpr Shape from_dims(const std::array<std::size_t, 4>& d) {
    return {d[0], d[1], d[2], d[3]};
  }

  // Row-major strides of the four axes.
  constexpr std::array<std::size_t, 4> strides() const {
    return {c * h * w, h * w, w, 1};
  }

  std::string str() const {
    std::ostringstream os;
    os << '[' << n << 'x' << c << 'x' << h << 'x' << w << ']';
    return os.str();
  }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << s.str();
}

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(shape), data_(shape.size(), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, T{0}); }
  static Tensor ones(Shape shape) { return Tensor(shape, T{1}); }
  static Tensor full(Shape shape, T value) { return Tensor(shape, value); }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }

  // Pointer to the H×W plane of (n, c).
  T* plane(std::size_t n, std::size_t c) { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + offset(n, c, 0, 0);
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out(*this);
    out.reshape(shape);
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape(shape);
    return std::move(*this);
  }

  void reshape(Shape shape) {
    if (shape.size() != shape_.size()) {
      throw DimensionError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    shape_ = shape;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& other) {
    check_same(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_same(const Tensor& other, const char* what) const {
    if (other.shape_ != shape_) {
      throw DimensionError(std::string("shape mismatch in ") + what + ": " +
                           shape_.str() + " vs " + other.shape_.str());
    }
  }

  Shape shape_{};
  std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  }
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

}  // namespace dpcnet
