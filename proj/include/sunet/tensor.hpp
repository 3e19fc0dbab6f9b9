#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sunet {

using Shape = std::vector<std::int64_t>;

/// Raised when tensor extents are inconsistent with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Row-major strides for a contiguous tensor of the given shape.
std::vector<std::int64_t> contiguous_strides(const Shape& shape);

/// Dense row-major array. A rank-0 tensor (empty shape) holds one scalar.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  /// Extent along `axis`; negative axes count from the back.
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }

  /// Multi-index access; bounds are checked.
  T at(std::initializer_list<std::int64_t> index) const;
  T& at(std::initializer_list<std::int64_t> index);

  /// Same data under a new shape with equal element count.
  Tensor reshape(Shape shape) const&;
  Tensor reshape(Shape shape) &&;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::int64_t offset(std::initializer_list<std::int64_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Normalizes a possibly negative axis against `rank`; throws on overflow.
std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank);

}  // namespace sunet
