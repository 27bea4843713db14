#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gode/tensor.hpp"

namespace gode {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every
/// coordinate of x. f must be deterministic; x is restored afterwards.
/// Throws DomainError if f returns a non-finite value.
template <typename T>
Tensor<T> finite_difference_grad(const std::function<double(const Tensor<T>&)>& f,
                                 const Tensor<T>& x, double eps);

/// max|a - b| / max(max|a|, max|b|, floor). The floor keeps gradients that
/// vanish identically (e.g. a bias cancelled by a following normalisation)
/// from turning rounding noise into a large ratio.
double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor = 1e-6);

struct TensorCheck {
  std::string name;
  std::size_t size = 0;
  double rel_error = 0;
  /// Coordinates whose step was shrunk because they straddle a kink.
  std::size_t refined = 0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0;
  std::string worst;
};

/// Compares backward() through `loss` against central differences for each
/// named parameter. Coordinates whose estimate keeps changing as the step
/// shrinks (a kink of a piecewise-linear op in range) are re-estimated with
/// steps down to eps / 1000. `loss` must build its graph from the given parameters.
GradCheckReport check_gradients(
    const std::function<Tensor<double>()>& loss,
    const std::vector<std::pair<std::string, Tensor<double>>>& params, double eps);

}  // namespace gode
