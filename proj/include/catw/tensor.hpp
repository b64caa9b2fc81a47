#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "catw/errors.hpp"

namespace catw {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// 64-byte aligned storage. Eigen picks vectorization paths by operand
/// alignment, so unaligned buffers make results depend on where malloc put them.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "Tensor supports f32 and f64");
  return std::is_same_v<T, float> ? "f32" : "f64";
}

/// Dense row-major n-d array. An empty shape with no data is the "empty" tensor,
/// used for gradient slots that were never reached.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_shape();
  }
  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}
  Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_numel(shape_))
      throw ContractError("tensor buffer length " + std::to_string(data_.size()) + " does not match shape " +
                          shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    std::normal_distribution<double> nd(0.0, stddev);
    for (auto& v : t.data_) v = static_cast<T>(nd(rng));
    return t;
  }
  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> ud(lo, hi);
    for (auto& v : t.data_) v = static_cast<T>(ud(rng));
    return t;
  }

  bool empty() const noexcept { return data_.empty(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw ContractError("dimension index out of range for shape " + shape_str(shape_));
    return shape_[i];
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  Buffer<T>& vec() noexcept { return data_; }
  const Buffer<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // NCHW accessor.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  T item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ContractError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    Buffer<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Exact equality of shape and bytes.
  bool bit_equal(const Tensor& o) const {
    return shape_ == o.shape_ && std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_)
      throw ContractError(std::string(what) + ": shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

  /// Slice of the leading dimension [begin, end).
  Tensor slice0(std::size_t begin, std::size_t end) const {
    if (rank() == 0 || begin > end || end > shape_[0]) throw ContractError("slice0 out of range");
    Shape s = shape_;
    s[0] = end - begin;
    std::size_t stride = numel() / shape_[0];
    return Tensor(s, Buffer<T>(data_.begin() + begin * stride, data_.begin() + end * stride));
  }

 private:
  void check_shape() const {
    for (auto d : shape_)
      if (d == 0) throw ContractError("tensor dimensions must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  Buffer<T> data_;
};

/// Stacks equally-shaped tensors along a new (or the existing leading unit) dimension.
template <class T>
Tensor<T> stack0(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ContractError("stack0 of empty list");
  Shape inner = items.front().shape();
  if (!inner.empty() && inner[0] == 1) inner.erase(inner.begin());
  Shape s = inner;
  s.insert(s.begin(), items.size());
  Buffer<T> data;
  data.reserve(shape_numel(s));
  for (const auto& t : items) {
    if (t.numel() != shape_numel(inner)) throw ContractError("stack0: inconsistent item shapes");
    data.insert(data.end(), t.vec().begin(), t.vec().end());
  }
  return Tensor<T>(s, std::move(data));
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <class T>
double mean_value(const Tensor<T>& a) {
  double s = 0.0;
  for (auto v : a.vec()) s += v;
  return a.empty() ? 0.0 : s / double(a.numel());
}

}  // namespace catw
