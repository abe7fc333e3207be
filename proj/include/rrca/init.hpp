#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "rrca/tensor.hpp"

namespace rrca {

struct Fans {
  int fan_in;
  int fan_out;
};

/// Fans of a (cout, cin, kh, kw) kernel; linear weights use kh = kw = 1.
Fans fans_of(const Shape& weight_shape);

/// Xavier/Glorot uniform on +-sqrt(6 / (fan_in + fan_out)). The stream is a
/// pure function of (seed, name).
template <typename T>
std::vector<T> xavier_init(const Shape& weight_shape, std::uint64_t seed,
                           std::string_view name);

}  // namespace rrca
