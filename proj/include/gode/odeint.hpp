#pragma once

// Initial-value solvers over tensor states. Gradients are obtained by
// differentiating through the solver steps: run a solve under an active tape
// and call backward() on anything computed from the result.

#include <functional>
#include <string>
#include <string_view>

#include "gode/tensor.hpp"

namespace gode {

enum class SolverMethod { euler, dopri5 };

/// Throws ConfigError for anything but "euler" or "dopri5".
SolverMethod parse_solver_method(std::string_view name);
std::string_view to_string(SolverMethod method);

struct SolverConfig {
  SolverMethod method = SolverMethod::euler;
  double t0 = 0.0;
  double t1 = 1.0;
  double step = 0.05;  // euler
  double rtol = 1e-3;  // dopri5
  double atol = 1e-6;  // dopri5
  int max_steps = 10000;

  void validate() const;
  /// (t1 - t0) / step, required to be within one ulp of an integer.
  int euler_steps() const;
};

struct SolveStats {
  int accepted = 0;
  int rejected = 0;
  int evaluations = 0;
};

/// f(z, t) -> dz/dt with the shape of z.
template <typename T>
using Dynamics = std::function<Tensor<T>(const Tensor<T>&, double)>;

/// z_{j+1} = z_j + h f(z_j, t0 + j h), j = 0..N-1.
template <typename T>
Tensor<T> euler_solve(const Dynamics<T>& f, const Tensor<T>& z0, const SolverConfig& cfg,
                      SolveStats* stats = nullptr);

/// Adaptive Dormand-Prince 5(4) with PI step control. The error norm is the
/// RMS of component errors scaled by atol + rtol * max(|z_old|, |z_new|).
/// Rejected attempts are removed from the active tape.
template <typename T>
Tensor<T> dopri5_solve(const Dynamics<T>& f, const Tensor<T>& z0, const SolverConfig& cfg,
                       SolveStats* stats = nullptr);

template <typename T>
Tensor<T> solve(const Dynamics<T>& f, const Tensor<T>& z0, const SolverConfig& cfg,
                SolveStats* stats = nullptr);

}  // namespace gode
