#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "blockprune/errors.hpp"
#include "blockprune/rng.hpp"

namespace blockprune {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// When enabled, differentiable ops verify every float output is finite.
inline std::atomic<bool>& checked_mode() {
  static std::atomic<bool> flag{false};
  return flag;
}

// Dense row-major array. Value semantics: copies are deep, moves are cheap.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), S{}) {}

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
      throw ShapeError("data length does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    for (S& x : t.data_) x = value;
    return t;
  }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  static Tensor uniform(Shape shape, Rng& rng, S lo, S hi) {
    Tensor t(std::move(shape));
    for (S& x : t.data_) x = static_cast<S>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t extent(std::int64_t axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // 2-D accessors; most kernels view tensors as matrices.
  std::int64_t rows() const { return shape_.size() == 2 ? shape_[0] : numel() / last_extent(); }
  std::int64_t cols() const { return last_extent(); }
  std::int64_t last_extent() const { return shape_.empty() ? 1 : shape_.back(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  S& operator()(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * cols() + j)]; }
  const S& operator()(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * cols() + j)];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(S value) {
    for (S& x : data_) x = value;
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<S>) {
      for (S x : data_)
        if (!std::isfinite(x)) return false;
    }
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<T>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

template <typename S>
void check_finite(const Tensor<S>& t, const char* op) {
  if constexpr (std::is_floating_point_v<S>) {
    if (checked_mode().load(std::memory_order_relaxed) && !t.all_finite())
      throw RunError(std::string("non-finite value produced by ") + op);
  }
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace blockprune
