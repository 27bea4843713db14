#include "gode/layers.hpp"

#include <algorithm>
#include <cmath>

#include "gode/error.hpp"

namespace gode {
namespace {

template <typename T>
std::vector<T> cast(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

}  // namespace

std::vector<double> he_normal(Rng& rng, std::size_t count, std::size_t fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> out(count);
  for (auto& v : out) v = dist(rng);
  return out;
}

std::vector<double> fan_in_uniform(Rng& rng, std::size_t count, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> out(count);
  for (auto& v : out) v = dist(rng);
  return out;
}

std::size_t default_groups(std::size_t channels) { return std::min<std::size_t>(32, channels); }

template <typename T>
Conv2d<T> Conv2d<T>::init(Rng& rng, std::size_t c_in, std::size_t c_out, std::size_t kernel_size,
                          Conv2dOptions options, ConvInit scheme) {
  const std::size_t fan_in = c_in * kernel_size * kernel_size;
  const Shape shape{c_out, c_in, kernel_size, kernel_size};
  Conv2d conv;
  if (scheme == ConvInit::he_normal) {
    conv.kernel = Tensor<T>::parameter(shape, cast<T>(he_normal(rng, c_out * fan_in, fan_in)));
    conv.bias = Tensor<T>::parameter({c_out}, std::vector<T>(c_out, T(0)));
  } else {
    conv.kernel = Tensor<T>::parameter(shape, cast<T>(fan_in_uniform(rng, c_out * fan_in, fan_in)));
    conv.bias = Tensor<T>::parameter({c_out}, cast<T>(fan_in_uniform(rng, c_out, fan_in)));
  }
  conv.options = options;
  return conv;
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.emplace_back(prefix + ".weight", kernel);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
TimeVaryingConv<T> TimeVaryingConv<T>::init(Rng& rng, const BSplineBasis& basis, std::size_t c_in,
                                            std::size_t c_out, BiasMode bias_mode) {
  const std::size_t fan_in = c_in * 9;
  const auto initial = cast<T>(he_normal(rng, c_out * fan_in, fan_in));
  TimeVaryingConv layer{basis, {}, bias_mode, {}};
  const auto n = static_cast<std::size_t>(basis.n_control());
  for (std::size_t i = 0; i < n; ++i) {
    layer.control_kernels.push_back(Tensor<T>::parameter({c_out, c_in, 3, 3}, initial));
  }
  const std::size_t bias_count = bias_mode == BiasMode::constant ? 1 : n;
  for (std::size_t i = 0; i < bias_count; ++i) {
    layer.biases.push_back(Tensor<T>::parameter({c_out}, std::vector<T>(c_out, T(0))));
  }
  return layer;
}

template <typename T>
Tensor<T> TimeVaryingConv<T>::bias_at(double t) const {
  if (bias_mode == BiasMode::constant) {
    basis.eval(t);  // domain check
    return biases.front();
  }
  return eval_spline(basis, biases, t);
}

template <typename T>
Tensor<T> TimeVaryingConv<T>::forward(const Tensor<T>& x, double t) const {
  return conv2d(x, kernel_at(t), bias_at(t), Conv2dOptions{1, 1});
}

template <typename T>
void TimeVaryingConv<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t i = 0; i < control_kernels.size(); ++i) {
    out.emplace_back(prefix + ".control" + std::to_string(i), control_kernels[i]);
  }
  if (bias_mode == BiasMode::constant) {
    out.emplace_back(prefix + ".bias", biases.front());
  } else {
    for (std::size_t i = 0; i < biases.size(); ++i) {
      out.emplace_back(prefix + ".bias_control" + std::to_string(i), biases[i]);
    }
  }
}

template <typename T>
GroupNorm<T> GroupNorm<T>::init(std::size_t channels) {
  const auto groups = default_groups(channels);
  if (channels % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(channels) +
                      " channels not divisible into " + std::to_string(groups) + " groups");
  }
  return GroupNorm{groups, Tensor<T>::parameter({channels}, std::vector<T>(channels, T(1))),
                   Tensor<T>::parameter({channels}, std::vector<T>(channels, T(0))), 1e-5};
}

template <typename T>
void GroupNorm<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.emplace_back(prefix + ".scale", scale);
  out.emplace_back(prefix + ".shift", shift);
}

template <typename T>
Linear<T> Linear<T>::init(Rng& rng, std::size_t in, std::size_t out) {
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(in)));
  std::vector<T> w(in * out);
  for (auto& v : w) v = static_cast<T>(dist(rng));
  return Linear{Tensor<T>::parameter({out, in}, std::move(w)),
                Tensor<T>::parameter({out}, std::vector<T>(out, T(0)))};
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

template struct Conv2d<float>;
template struct Conv2d<double>;
template struct TimeVaryingConv<float>;
template struct TimeVaryingConv<double>;
template struct GroupNorm<float>;
template struct GroupNorm<double>;
template struct Linear<float>;
template struct Linear<double>;

}  // namespace gode
