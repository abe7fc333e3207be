#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rrca {

/// Single-channel row-major image.
template <typename T>
struct Grid {
  int h = 0;
  int w = 0;
  std::vector<T> px;

  Grid() = default;
  Grid(int h_, int w_, T fill = T{}) : h(h_), w(w_), px(static_cast<std::size_t>(h_) * w_, fill) {
    if (h_ < 1 || w_ < 1) {
      throw std::invalid_argument("image size " + std::to_string(h_) + "x" + std::to_string(w_) +
                                  " must be positive");
    }
  }

  std::size_t size() const { return px.size(); }
  T& at(int y, int x) { return px[static_cast<std::size_t>(y) * w + x]; }
  const T& at(int y, int x) const { return px[static_cast<std::size_t>(y) * w + x]; }
  bool same_size(int hh, int ww) const { return h == hh && w == ww; }
  bool operator==(const Grid&) const = default;
};

using Mask = Grid<std::uint8_t>;
using ImageF = Grid<float>;

}  // namespace rrca
