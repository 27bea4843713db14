#pragma once

// B-spline bases with clamped, uniformly spaced knots on [0, T].
//
// Basis functions follow the Cox-de Boor recursion with the conventions
//   * 0/0 terms (repeated knots) are 0;
//   * the last non-empty knot interval is closed on the right, so the final
//     basis function equals 1 at t = T instead of vanishing.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gode/error.hpp"
#include "gode/ops.hpp"
#include "gode/tensor.hpp"

namespace gode {

class BSplineBasis {
 public:
  /// Throws InvalidBasisError unless degree >= 0, n_control >= degree + 1
  /// and domain_end > 0.
  static BSplineBasis clamped_uniform(int degree, int n_control, double domain_end);

  int degree() const { return degree_; }
  int n_control() const { return n_control_; }
  double domain_end() const { return domain_end_; }
  std::span<const double> knots() const { return knots_; }

  /// (B_{0,k}(t), ..., B_{n-1,k}(t)). Throws DomainError for t outside [0, T].
  std::vector<double> eval(double t) const;

 private:
  BSplineBasis(int degree, int n_control, double domain_end, std::vector<double> knots);

  int degree_;
  int n_control_;
  double domain_end_;
  std::vector<double> knots_;
};

/// sum_i B_{i,k}(t) * control[i]. Basis weights enter as constants, so the
/// gradient reaching control[i] is B_{i,k}(t) times the incoming gradient.
template <typename T>
Tensor<T> eval_spline(const BSplineBasis& basis, const std::vector<Tensor<T>>& control, double t) {
  if (control.size() != static_cast<std::size_t>(basis.n_control())) {
    throw ShapeError("eval_spline: basis has " + std::to_string(basis.n_control()) +
                     " control points, got " + std::to_string(control.size()));
  }
  const auto weights = basis.eval(t);
  return weighted_sum(control, weights);
}

}  // namespace gode
