#include "gode/odeint.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "gode/error.hpp"
#include "gode/ops.hpp"

namespace gode {

SolverMethod parse_solver_method(std::string_view name) {
  if (name == "euler") return SolverMethod::euler;
  if (name == "dopri5") return SolverMethod::dopri5;
  throw ConfigError("solver: unknown method '" + std::string(name) + "' (expected euler or dopri5)");
}

std::string_view to_string(SolverMethod method) {
  switch (method) {
    case SolverMethod::euler:
      return "euler";
    case SolverMethod::dopri5:
      return "dopri5";
  }
  return "unknown";
}

void SolverConfig::validate() const {
  if (!(t1 > t0)) throw ConfigError("solver: need t1 > t0");
  switch (method) {
    case SolverMethod::euler:
      if (!(step > 0)) throw ConfigError("solver: euler step size must be positive");
      euler_steps();
      break;
    case SolverMethod::dopri5:
      if (!(rtol > 0) || !(atol > 0)) throw ConfigError("solver: dopri5 needs rtol > 0 and atol > 0");
      if (max_steps < 1) throw ConfigError("solver: max_steps must be >= 1");
      break;
    default:
      throw ConfigError("solver: unknown method");
  }
}

int SolverConfig::euler_steps() const {
  const double q = (t1 - t0) / step;
  const double n = std::round(q);
  const double ulp = std::nextafter(q, std::numeric_limits<double>::infinity()) - q;
  if (n < 1 || std::abs(q - n) > ulp) {
    throw ConfigError("solver: (t1 - t0) / step = " + std::to_string(q) +
                      " is not an integral number of euler steps");
  }
  return static_cast<int>(n);
}

template <typename T>
Tensor<T> euler_solve(const Dynamics<T>& f, const Tensor<T>& z0, const SolverConfig& cfg,
                      SolveStats* stats) {
  if (cfg.method != SolverMethod::euler) throw ConfigError("euler_solve: config method is not euler");
  cfg.validate();
  const int n = cfg.euler_steps();
  const double span = cfg.t1 - cfg.t0;
  const double h = span / n;
  const std::array<double, 1> coeff{h};
  Tensor<T> z = z0;
  for (int j = 0; j < n; ++j) {
    const double t = cfg.t0 + (static_cast<double>(j) * span) / n;
    try {
      auto dz = f(z, t);
      z = lincomb(z, {dz}, coeff);
    } catch (const OverflowError& e) {
      throw DivergenceError("euler: non-finite state at step " + std::to_string(j) + " (t=" +
                            std::to_string(t) + "): " + e.what());
    }
  }
  if (stats) {
    stats->accepted += n;
    stats->evaluations += n;
  }
  return z;
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr std::array<double, 7> kC{0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
constexpr std::array<std::array<double, 6>, 7> kA{{
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
}};
// Fifth-order weights minus embedded fourth-order weights.
constexpr std::array<double, 7> kE{35.0 / 384 - 5179.0 / 57600,
                                   0.0,
                                   500.0 / 1113 - 7571.0 / 16695,
                                   125.0 / 192 - 393.0 / 640,
                                   -2187.0 / 6784 + 92097.0 / 339200,
                                   11.0 / 84 - 187.0 / 2100,
                                   -1.0 / 40};

constexpr double kSafety = 0.9;
constexpr double kBeta = 0.04;
constexpr double kMinFactor = 0.2;
constexpr double kMaxFactor = 10.0;

}  // namespace

template <typename T>
Tensor<T> dopri5_solve(const Dynamics<T>& f, const Tensor<T>& z0, const SolverConfig& cfg,
                       SolveStats* stats) {
  if (cfg.method != SolverMethod::dopri5) throw ConfigError("dopri5_solve: config method is not dopri5");
  cfg.validate();
  SolveStats local;
  SolveStats& st = stats ? *stats : local;
  auto* tape = Tape<T>::active();

  double t = cfg.t0;
  double h = 0.01 * (cfg.t1 - cfg.t0);
  double err_old = 1e-4;
  Tensor<T> z = z0;
  Tensor<T> k1;
  try {
    k1 = f(z, t);
    ++st.evaluations;
    while (t < cfg.t1) {
      if (st.accepted >= cfg.max_steps) {
        throw NonConvergenceError("dopri5: exceeded max_steps=" + std::to_string(cfg.max_steps) +
                                  " at t=" + std::to_string(t));
      }
      if (h < 1e-14 * std::max(1.0, std::abs(t))) {
        throw NonConvergenceError("dopri5: step size underflow at t=" + std::to_string(t));
      }
      bool last = false;
      if (t + h >= cfg.t1) {
        h = cfg.t1 - t;
        last = true;
      }
      const std::size_t mark = tape ? tape->mark() : 0;

      std::vector<Tensor<T>> k{k1};
      Tensor<T> z_new;
      for (std::size_t s = 1; s < 7; ++s) {
        std::vector<double> coeffs(s);
        for (std::size_t j = 0; j < s; ++j) coeffs[j] = h * kA[s][j];
        auto stage = lincomb(z, k, coeffs);
        if (s == 6) z_new = stage;
        k.push_back(f(stage, t + kC[s] * h));
        ++st.evaluations;
      }

      const auto zv = z.values();
      const auto nv = z_new.values();
      double sum_sq = 0;
      for (std::size_t i = 0; i < zv.size(); ++i) {
        double e = 0;
        for (std::size_t j = 0; j < 7; ++j) e += kE[j] * static_cast<double>(k[j][i]);
        e *= h;
        const double sc = cfg.atol + cfg.rtol * std::max(std::abs(static_cast<double>(zv[i])),
                                                         std::abs(static_cast<double>(nv[i])));
        sum_sq += (e / sc) * (e / sc);
      }
      const double err = std::sqrt(sum_sq / static_cast<double>(zv.size()));
      if (!std::isfinite(err)) throw OverflowError("dopri5: non-finite error estimate");

      if (err <= 1.0) {
        t = last ? cfg.t1 : t + h;
        z = z_new;
        k1 = k[6];
        ++st.accepted;
        double factor = kMaxFactor;
        if (err > 0) {
          factor = kSafety * std::pow(err, -(0.2 - 0.75 * kBeta)) * std::pow(err_old, kBeta);
        }
        h *= std::clamp(factor, kMinFactor, kMaxFactor);
        err_old = std::max(err, 1e-4);
      } else {
        if (tape) tape->rewind(mark);
        ++st.rejected;
        h *= std::max(kMinFactor, kSafety * std::pow(err, -0.2));
      }
    }
  } catch (const OverflowError& e) {
    throw DivergenceError("dopri5: non-finite state after " + std::to_string(st.accepted) +
                          " accepted steps (t=" + std::to_string(t) + "): " + e.what());
  }
  return z;
}

template <typename T>
Tensor<T> solve(const Dynamics<T>& f, const Tensor<T>& z0, const SolverConfig& cfg,
                SolveStats* stats) {
  switch (cfg.method) {
    case SolverMethod::euler:
      return euler_solve(f, z0, cfg, stats);
    case SolverMethod::dopri5:
      return dopri5_solve(f, z0, cfg, stats);
  }
  throw ConfigError("solve: unknown method");
}

template Tensor<float> euler_solve<float>(const Dynamics<float>&, const Tensor<float>&,
                                          const SolverConfig&, SolveStats*);
template Tensor<double> euler_solve<double>(const Dynamics<double>&, const Tensor<double>&,
                                            const SolverConfig&, SolveStats*);
template Tensor<float> dopri5_solve<float>(const Dynamics<float>&, const Tensor<float>&,
                                           const SolverConfig&, SolveStats*);
template Tensor<double> dopri5_solve<double>(const Dynamics<double>&, const Tensor<double>&,
                                             const SolverConfig&, SolveStats*);
template Tensor<float> solve<float>(const Dynamics<float>&, const Tensor<float>&,
                                    const SolverConfig&, SolveStats*);
template Tensor<double> solve<double>(const Dynamics<double>&, const Tensor<double>&,
                                      const SolverConfig&, SolveStats*);

}  // namespace gode
