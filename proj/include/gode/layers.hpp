#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gode/bspline.hpp"
#include "gode/ops.hpp"
#include "gode/tensor.hpp"

namespace gode {

using Rng = std::mt19937_64;

template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

/// Zero-mean normal draws with std sqrt(2 / fan_in).
std::vector<double> he_normal(Rng& rng, std::size_t count, std::size_t fan_in);

/// Uniform draws on [-1/sqrt(fan_in), 1/sqrt(fan_in)].
std::vector<double> fan_in_uniform(Rng& rng, std::size_t count, std::size_t fan_in);

/// min(32, C)
std::size_t default_groups(std::size_t channels);

enum class ConvInit {
  he_normal,       // kernel he_normal, bias zero
  fan_in_uniform,  // kernel and bias fan_in_uniform
};

template <typename T>
struct Conv2d {
  Tensor<T> kernel;  // [C_out, C_in, kh, kw]
  Tensor<T> bias;    // [C_out], may be undefined
  Conv2dOptions options;

  static Conv2d init(Rng& rng, std::size_t c_in, std::size_t c_out, std::size_t kernel_size,
                     Conv2dOptions options, ConvInit scheme = ConvInit::he_normal);
  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, kernel, bias, options); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

enum class BiasMode { constant, spline };

/// 3x3, stride 1, padding 1 convolution whose kernel is a spline in t over
/// n control kernels.
template <typename T>
struct TimeVaryingConv {
  BSplineBasis basis;
  std::vector<Tensor<T>> control_kernels;  // n x [C_out, C_in, 3, 3]
  BiasMode bias_mode = BiasMode::constant;
  std::vector<Tensor<T>> biases;  // 1 x [C_out] (constant) or n x [C_out] (spline)

  /// All control kernels start equal, so a fresh layer is constant in t.
  static TimeVaryingConv init(Rng& rng, const BSplineBasis& basis, std::size_t c_in,
                              std::size_t c_out, BiasMode bias_mode);

  Tensor<T> kernel_at(double t) const { return eval_spline(basis, control_kernels, t); }
  Tensor<T> bias_at(double t) const;
  Tensor<T> forward(const Tensor<T>& x, double t) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct GroupNorm {
  std::size_t groups = 1;
  Tensor<T> scale;  // [C]
  Tensor<T> shift;  // [C]
  double epsilon = 1e-5;

  static GroupNorm init(std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x) const { return group_norm(x, groups, scale, shift, epsilon); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  static Linear init(Rng& rng, std::size_t in, std::size_t out);
  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

}  // namespace gode
