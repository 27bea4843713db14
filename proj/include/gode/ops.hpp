#pragma once

// Differentiable primitives. Binary elementwise operations broadcast
// numpy-style: shapes are right-aligned and an axis may differ only when one
// side has extent 1. Every operation throws ShapeError on non-conforming
// shapes and OverflowError when it produces a non-finite value.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "gode/tensor.hpp"

namespace gode {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// Elementwise maximum; ties route the gradient to `a`.
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);
/// Natural log; non-positive inputs yield a non-finite value and throw.
template <typename T>
Tensor<T> log(const Tensor<T>& a);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);

/// [m, k] x [k, n] -> [m, n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// Zero padding; `widths[axis] = {before, after}`, one pair per axis.
template <typename T>
Tensor<T> pad(const Tensor<T>& a, const std::vector<std::pair<std::size_t, std::size_t>>& widths);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a);
/// Sum over one axis; the axis is removed (rank-1 inputs reduce to [1]).
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::size_t axis);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a);
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, std::size_t axis);

/// base + sum_j coeffs[j] * terms[j]; all terms share the shape of base.
template <typename T>
Tensor<T> lincomb(const Tensor<T>& base, const std::vector<Tensor<T>>& terms,
                  std::span<const double> coeffs);
/// sum_j weights[j] * terms[j]; weights are constants. Terms with a zero
/// weight are skipped in the forward pass.
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& terms, std::span<const double> weights);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation of x [N, C_in, H, W] with kernel [C_out, C_in, kh, kw]
/// plus an optional bias [C_out].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Conv2dOptions options);

/// Per-sample, per-group standardisation of x [N, C, ...] followed by a
/// per-channel affine transform with scale/shift of shape [C].
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& scale,
                     const Tensor<T>& shift, double epsilon);

/// [N, C, H, W] -> [N, C]
template <typename T>
Tensor<T> avgpool_global(const Tensor<T>& x);
/// x [N, in] * weight[out, in]^T + bias [out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Row-wise over the last axis of a rank-2 tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits);
/// Mean negative log-likelihood of `labels` under softmax(logits [N, K]).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T factor) {
  return scale(a, factor);
}
template <typename T>
Tensor<T> operator*(T factor, const Tensor<T>& a) {
  return scale(a, factor);
}

}  // namespace gode
