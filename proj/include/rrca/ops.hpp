#pragma once

#include <optional>
#include <span>
#include <type_traits>

#include "rrca/tape.hpp"

namespace rrca {

enum class NormMode { Train, Eval };
enum class PoolKind { Max, Avg };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Cross-correlation with zero padding. Weight is (cout, cin, kh, kw), bias is
/// (1, cout, 1, 1). Only stride 1 and square 1x1 / 3x3 kernels are supported.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> bias, int stride,
              int pad);

/// Per-channel batch normalization over (n, h, w). Train mode normalizes with
/// batch statistics (biased variance) and folds them into `stats`
/// (unbiased variance); eval mode reads `stats`.
template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T>& stats,
                   NormMode mode, BatchNormOptions opt = {});

/// 2x2 max pooling, stride 2. Ties resolve to the first element in
/// row-major order.
template <typename T>
Var<T> maxpool2(Var<T> x);

/// x2 bilinear upsampling, align_corners = false.
template <typename T>
Var<T> bilinear_up2(Var<T> x);

/// Per-channel global pooling to (n, c, 1, 1).
template <typename T>
Var<T> global_pool(Var<T> x, PoolKind kind);

template <typename T>
Var<T> relu(Var<T> x);

template <typename T>
Var<T> sigmoid(Var<T> x);

/// Elementwise sum. `b` may be (n, c, 1, 1) and is then broadcast over h, w.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// Elementwise product with the same broadcast rule as add.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> x, T s);

/// Channel concatenation; all parts share n, h, w.
template <typename T>
Var<T> concat_c(std::span<const Var<T>> parts);

/// Affine map of (n, cin, 1, 1) by weight (cout, cin, 1, 1) and optional bias
/// (1, cout, 1, 1).
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<std::type_identity_t<Var<T>>> bias);

/// Sum of all elements to a (1, 1, 1, 1) scalar.
template <typename T>
Var<T> sum(Var<T> x);

/// Numerically stable logistic function on a plain scalar.
template <typename T>
T sigmoid_scalar(T x);

}  // namespace rrca
