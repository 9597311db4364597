#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "unihead/numkit/errors.hpp"

namespace unihead {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of arbitrary rank. The storage type behind
/// feature maps, matrices and weight tensors.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 protected:
  Shape shape_;
  std::vector<T> data_;
};

/// H x W x C activation map, row-major h -> w -> c.
template <typename T>
class FeatureMap : public Tensor<T> {
 public:
  FeatureMap() = default;
  FeatureMap(std::size_t h, std::size_t w, std::size_t c, T fill = T{0})
      : Tensor<T>(Shape{h, w, c}, fill) {
    if (h == 0 || w == 0 || c == 0) throw ShapeError("feature map dims must be positive, got " + shape_str(this->shape_));
  }
  FeatureMap(std::size_t h, std::size_t w, std::size_t c, std::vector<T> data)
      : Tensor<T>(Shape{h, w, c}, std::move(data)) {}
  explicit FeatureMap(Tensor<T> t) : Tensor<T>(std::move(t)) {
    if (this->rank() != 3) throw ShapeError("feature map must be rank 3, got " + shape_str(this->shape_));
  }

  std::size_t height() const { return this->shape_[0]; }
  std::size_t width() const { return this->shape_[1]; }
  std::size_t channels() const { return this->shape_[2]; }

  T& operator()(std::size_t y, std::size_t x, std::size_t c) {
    return this->data_[(y * width() + x) * channels() + c];
  }
  const T& operator()(std::size_t y, std::size_t x, std::size_t c) const {
    return this->data_[(y * width() + x) * channels() + c];
  }
};

template <typename T>
class Matrix : public Tensor<T> {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0}) : Tensor<T>(Shape{rows, cols}, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : Tensor<T>(Shape{rows, cols}, std::move(data)) {}
  explicit Matrix(Tensor<T> t) : Tensor<T>(std::move(t)) {
    if (this->rank() != 2) throw ShapeError("matrix must be rank 2, got " + shape_str(this->shape_));
  }

  std::size_t rows() const { return this->shape_[0]; }
  std::size_t cols() const { return this->shape_[1]; }

  T& operator()(std::size_t r, std::size_t c) { return this->data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return this->data_[r * cols() + c]; }
};

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return x - x == T{0}; });
}

}  // namespace unihead
