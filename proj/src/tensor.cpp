#include "sunet/tensor.hpp"

#include <cmath>
#include <sstream>

namespace sunet {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank) {
  const std::int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return a;
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape)
    if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape));
}

}  // namespace

template <typename T>
Tensor<T>::Tensor() : data_(1, T(0)) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (numel(shape_) != static_cast<std::int64_t>(data_.size()))
    throw ShapeError("shape " + to_string(shape_) + " needs " + std::to_string(numel(shape_)) +
                     " values, got " + std::to_string(data_.size()));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  check_extents(shape);
  const auto n = static_cast<std::size_t>(numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t axis) const {
  return shape_[static_cast<std::size_t>(normalize_axis(axis, rank()))];
}

template <typename T>
std::int64_t Tensor<T>::offset(std::initializer_list<std::int64_t> index) const {
  if (static_cast<std::int64_t>(index.size()) != rank())
    throw ShapeError("index rank " + std::to_string(index.size()) + " != tensor rank " +
                     std::to_string(rank()));
  std::int64_t off = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v < 0 || v >= shape_[i]) throw std::out_of_range("tensor index out of range");
    off = off * shape_[i] + v;
    ++i;
  }
  return off;
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  return data_[static_cast<std::size_t>(offset(index))];
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::int64_t> index) {
  return data_[static_cast<std::size_t>(offset(index))];
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (auto v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace sunet
