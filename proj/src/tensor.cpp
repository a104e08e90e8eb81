#include "m3snet/tensor.hpp"

#include <sstream>

namespace m3snet {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor: shape must have at least one axis");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] < 1) {
      throw DimensionError("tensor: axis " + std::to_string(i) + " has extent " +
                           std::to_string(shape[i]) + " in shape " + to_string(shape));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, const std::vector<T>& data)
    : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}

template <typename T>
Tensor<T> Tensor<T>::uninitialized(Shape shape) {
  validate_shape(shape);
  const auto n = static_cast<std::size_t>(numel(shape));
  return Tensor(std::move(shape), Buffer<T>(n));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (static_cast<std::int64_t>(data_.size()) != numel(shape_)) {
    throw DimensionError("tensor: shape " + to_string(shape_) + " needs " +
                         std::to_string(numel(shape_)) + " elements, got " +
                         std::to_string(data_.size()));
  }
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) {
    throw DimensionError("tensor: item() on shape " + to_string(shape_));
  }
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

void require_rank(const Shape& shape, int rank, const char* op, const char* what) {
  if (static_cast<int>(shape.size()) != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have " + std::to_string(rank) +
                         " axes, got shape " + to_string(shape));
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace m3snet
