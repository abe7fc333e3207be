#pragma once

// Register-blocked 3x3 stride-1 pad-1 convolution for wide planes. The GEMM
// path in ops.cpp spends most of its time in im2col at full resolution; these
// kernels read a zero-bordered copy of the input instead.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace rrca::detail {

template <typename T>
struct Simd {
  typedef T vec __attribute__((vector_size(64)));
  static constexpr int lanes = 64 / sizeof(T);
};

constexpr int kCoBlock = 4;  // output channels per register block
constexpr int kVecs = 2;     // vectors per output row segment

template <typename T>
constexpr int segment() {
  return kVecs * Simd<T>::lanes;
}

// Row stride of a bordered plane: one zero column on the left and enough on
// the right that every segment load stays inside the row.
template <typename T>
int bordered_width(int w) {
  return (w + segment<T>() - 1) / segment<T>() * segment<T>() + 2;
}

// Copies c planes of h x w into (h + 2) x wb planes with a zero border.
// Only the border is written besides the copied pixels, so a buffer reused
// for same-sized planes is not cleared again.
template <typename T>
void border_planes(const T* x, int c, int h, int w, int wb, std::vector<T>& out) {
  out.resize(static_cast<std::size_t>(c) * (h + 2) * wb);
  for (int ci = 0; ci < c; ++ci) {
    T* plane = out.data() + static_cast<std::size_t>(ci) * (h + 2) * wb;
    std::fill(plane, plane + wb, T(0));
    std::fill(plane + static_cast<std::size_t>(h + 1) * wb, plane + static_cast<std::size_t>(h + 2) * wb,
              T(0));
    for (int y = 0; y < h; ++y) {
      T* row = plane + static_cast<std::size_t>(y + 1) * wb;
      row[0] = T(0);
      std::memcpy(row + 1, x + (static_cast<std::size_t>(ci) * h + y) * w, sizeof(T) * w);
      std::fill(row + 1 + w, row + wb, T(0));
    }
  }
}

// y[co] (+)= sum_ci sum_k wt[co][ci][k] * xb[ci] shifted by k, where xb holds
// bordered planes of width wb.
template <typename T>
void conv3x3_bordered(const T* xb, int cin, int h, int w, int wb, const T* wt, int cout, T* y,
                      bool accumulate) {
  using V = typename Simd<T>::vec;
  constexpr int L = Simd<T>::lanes;
  const std::size_t plane = static_cast<std::size_t>(h + 2) * wb;
  for (int co0 = 0; co0 < cout; co0 += kCoBlock) {
    const int cb = std::min(kCoBlock, cout - co0);
    for (int oy = 0; oy < h; ++oy) {
      for (int x0 = 0; x0 < w; x0 += kVecs * L) {
        V acc[kCoBlock][kVecs];
        for (auto& row : acc)
          for (auto& v : row) v = V{};
        for (int ci = 0; ci < cin; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            const T* row = xb + ci * plane + static_cast<std::size_t>(oy + ky) * wb + x0;
            for (int kx = 0; kx < 3; ++kx) {
              V in[kVecs];
              for (int v = 0; v < kVecs; ++v) std::memcpy(&in[v], row + kx + v * L, sizeof(V));
              for (int c = 0; c < kCoBlock; ++c) {
                const T wv =
                    c < cb ? wt[((static_cast<std::size_t>(co0 + c) * cin + ci) * 3 + ky) * 3 + kx]
                           : T(0);
                for (int v = 0; v < kVecs; ++v) acc[c][v] += wv * in[v];
              }
            }
          }
        }
        const int n = std::min(kVecs * L, w - x0);
        for (int c = 0; c < cb; ++c) {
          T* dst = y + (static_cast<std::size_t>(co0 + c) * h + oy) * w + x0;
          T lanes[kVecs * L];
          std::memcpy(lanes, acc[c], sizeof(lanes));
          if (accumulate) {
            for (int i = 0; i < n; ++i) dst[i] += lanes[i];
          } else {
            std::memcpy(dst, lanes, sizeof(T) * n);
          }
        }
      }
    }
  }
}

// Weights for the input gradient: wf[ci][co][ky][kx] = w[co][ci][2-ky][2-kx].
template <typename T>
std::vector<T> flip_transpose(const T* w, int cout, int cin) {
  std::vector<T> wf(static_cast<std::size_t>(cout) * cin * 9);
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int k = 0; k < 9; ++k)
        wf[(static_cast<std::size_t>(ci) * cout + co) * 9 + (8 - k)] =
            w[(static_cast<std::size_t>(co) * cin + ci) * 9 + k];
  return wf;
}

// dw[co][ci][ky][kx] += sum_{y,x} dy[co][y][x] * xb[ci][y + ky][x + kx].
// dyq holds dy rows padded with zeros to width wq (a multiple of the lanes).
template <typename T>
void conv3x3_weight_grad(const T* xb, int cin, int h, int wb, const T* dyq, int cout, int wq,
                         T* dw) {
  using V = typename Simd<T>::vec;
  constexpr int L = Simd<T>::lanes;
  constexpr int kPair = 2;
  const std::size_t plane = static_cast<std::size_t>(h + 2) * wb;
  const std::size_t dplane = static_cast<std::size_t>(h) * wq;
  for (int co0 = 0; co0 < cout; co0 += kPair) {
    const int cb = std::min(kPair, cout - co0);
    for (int ci = 0; ci < cin; ++ci) {
      V acc[kPair][9];
      for (auto& row : acc)
        for (auto& v : row) v = V{};
      for (int y = 0; y < h; ++y) {
        for (int x0 = 0; x0 < wq; x0 += L) {
          V g[kPair];
          for (int c = 0; c < kPair; ++c) {
            if (c < cb) {
              std::memcpy(&g[c], dyq + (co0 + c) * dplane + static_cast<std::size_t>(y) * wq + x0,
                          sizeof(V));
            } else {
              g[c] = V{};
            }
          }
          for (int ky = 0; ky < 3; ++ky) {
            const T* row = xb + ci * plane + static_cast<std::size_t>(y + ky) * wb + x0;
            for (int kx = 0; kx < 3; ++kx) {
              V in;
              std::memcpy(&in, row + kx, sizeof(V));
              for (int c = 0; c < kPair; ++c) acc[c][ky * 3 + kx] += g[c] * in;
            }
          }
        }
      }
      for (int c = 0; c < cb; ++c) {
        T* dst = dw + (static_cast<std::size_t>(co0 + c) * cin + ci) * 9;
        for (int k = 0; k < 9; ++k) {
          T lanes[L];
          std::memcpy(lanes, &acc[c][k], sizeof(lanes));
          T s = 0;
          for (int i = 0; i < L; ++i) s += lanes[i];
          dst[k] += s;
        }
      }
    }
  }
}

}  // namespace rrca::detail
