#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace rrca {

/// NCHW extent of a 4-D feature map.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Throws std::invalid_argument if any extent is < 1.
void validate_shape(const Shape& s);

/// Dense row-major NCHW tensor. Owns its storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const {
    return data_[offset(n, c, y, x)];
  }

  void fill(T v);

 private:
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w +
           x;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Learnable array. Tied parameters are one object referenced from many
/// tape sites; every site accumulates into the same grad.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;
  int share_count = 0;

  Parameter(std::string name_, Tensor<T> value_)
      : name(std::move(name_)),
        value(std::move(value_)),
        grad(value.numel(), T(0)) {}

  std::size_t numel() const { return value.numel(); }
  void zero_grad();
};

/// Batch-norm running statistics (not learnable).
template <typename T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;

  explicit RunningStats(int channels = 0)
      : mean(channels, T(0)), var(channels, T(1)) {}
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template struct Parameter<float>;
extern template struct Parameter<double>;

}  // namespace rrca
