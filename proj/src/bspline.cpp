#include "gode/bspline.hpp"

#include <cmath>
#include <string>

#include "gode/error.hpp"

namespace gode {

BSplineBasis::BSplineBasis(int degree, int n_control, double domain_end, std::vector<double> knots)
    : degree_(degree), n_control_(n_control), domain_end_(domain_end), knots_(std::move(knots)) {}

BSplineBasis BSplineBasis::clamped_uniform(int degree, int n_control, double domain_end) {
  if (degree < 0) throw InvalidBasisError("bspline: degree must be >= 0, got " + std::to_string(degree));
  if (n_control < degree + 1) {
    throw InvalidBasisError("bspline: need n >= k + 1 control points (n=" +
                            std::to_string(n_control) + ", k=" + std::to_string(degree) + ")");
  }
  if (!(domain_end > 0) || !std::isfinite(domain_end)) {
    throw InvalidBasisError("bspline: domain end T must be positive and finite");
  }
  const int k = degree, n = n_control;
  const int segments = n - k;
  std::vector<double> knots(static_cast<std::size_t>(n + k + 1));
  for (int i = 0; i <= n + k; ++i) {
    if (i <= k) {
      knots[i] = 0.0;
    } else if (i >= n) {
      knots[i] = domain_end;
    } else {
      // Same expression as the fixed-step solver's time grid, so knots and
      // step times coincide bitwise when they are meant to.
      knots[i] = (static_cast<double>(i - k) * domain_end) / static_cast<double>(segments);
    }
  }
  return BSplineBasis(degree, n_control, domain_end, std::move(knots));
}

std::vector<double> BSplineBasis::eval(double t) const {
  if (!(t >= 0.0 && t <= domain_end_)) {
    throw DomainError("bspline: t=" + std::to_string(t) + " outside [0, " +
                      std::to_string(domain_end_) + "]");
  }
  const std::size_t m = knots_.size() - 1;  // number of degree-0 intervals
  std::vector<double> b(m, 0.0);
  if (t == domain_end_) {
    std::size_t last = m;
    while (last-- > 0) {
      if (knots_[last] < knots_[last + 1]) break;
    }
    b[last] = 1.0;
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      if (knots_[i] <= t && t < knots_[i + 1]) {
        b[i] = 1.0;
        break;
      }
    }
  }
  for (int d = 1; d <= degree_; ++d) {
    const std::size_t count = m - static_cast<std::size_t>(d);
    for (std::size_t i = 0; i < count; ++i) {
      double v = 0.0;
      const double left = knots_[i + d] - knots_[i];
      if (left > 0.0) v += (t - knots_[i]) / left * b[i];
      const double right = knots_[i + d + 1] - knots_[i + 1];
      if (right > 0.0) v += (knots_[i + d + 1] - t) / right * b[i + 1];
      b[i] = v;
    }
  }
  b.resize(static_cast<std::size_t>(n_control_));
  return b;
}

}  // namespace gode
