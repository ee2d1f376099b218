#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ien/errors.hpp"

namespace ien {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape);

// Cache-line aligned storage. Eigen's vectorised reductions peel a different
// number of leading elements depending on buffer alignment, which changes the
// summation order; a fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense row-major array. Training runs on Tensor<float>; gradient checks
// use Tensor<double>.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeMismatch("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Rank-3 [C,H,W] accessors.
  T& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  // Accumulates in double so float maps of a few thousand cells stay within 1e-6.
  T sum() const {
    double acc = 0.0;
    for (T v : data_) acc += static_cast<double>(v);
    return static_cast<T>(acc);
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Reinterpret with a new shape of equal size.
  Tensor reshaped(Shape shape) const {
    Tensor out;
    out.shape_ = std::move(shape);
    out.check_dims();
    if (shape_size(out.shape_) != data_.size()) throw ShapeMismatch("reshape to " + shape_string(out.shape_) + " changes size");
    out.data_ = data_;
    return out;
  }

  // Slice along the leading axis: rows [begin, begin+count).
  Tensor slice0(std::size_t begin, std::size_t count) const {
    if (rank() == 0 || begin + count > shape_[0]) {
      throw ShapeMismatch("slice0 out of range on " + shape_string(shape_));
    }
    Shape out_shape = shape_;
    out_shape[0] = count;
    const std::size_t stride = size() / shape_[0];
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                       data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
    return Tensor(std::move(out_shape), std::move(out));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeMismatch("tensor dimensions must be positive: " + shape_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ien
