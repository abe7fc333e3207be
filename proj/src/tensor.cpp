#include "rrca/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace rrca {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

void validate_shape(const Shape& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw std::invalid_argument("tensor shape must be positive, got " +
                                s.str());
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  validate_shape(shape_);
  data_.assign(shape_.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(shape), data_(std::move(data)) {
  validate_shape(shape_);
  if (data_.size() != shape_.numel()) {
    throw std::invalid_argument("tensor data length " +
                                std::to_string(data_.size()) +
                                " does not match shape " + shape_.str());
  }
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
void Parameter<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

template class Tensor<float>;
template class Tensor<double>;
template struct Parameter<float>;
template struct Parameter<double>;

}  // namespace rrca
