#pragma once

// Independent oracles used by the test suites. Everything here is written
// against plain loops and stays independent of the library's fast paths.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "vitrm/tensor.hpp"

namespace oracles {

using vitrm::TensorT;

// Triple-loop matrix product.
template <class Real>
std::vector<Real> naive_matmul(const std::vector<Real>& a,
                               const std::vector<Real>& b, std::size_t m,
                               std::size_t k, std::size_t n) {
  std::vector<Real> c(m * n, Real(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p)
        c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

template <class Real>
TensorT<Real> random_tensor(std::size_t rows, std::size_t cols,
                            std::mt19937_64& rng, bool tracked = false,
                            Real spread = Real(1)) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<Real> v(rows * cols);
  for (auto& x : v) x = static_cast<Real>(dist(rng)) * spread;
  return TensorT<Real>::from_values(rows, cols, std::move(v), tracked);
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// Central differences with eps = 1e-4 against the analytic gradient stored
// on `param`. `forward` must recompute the scalar loss from current values.
// The comparison uses |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

template <class Forward>
GradCheckResult check_gradient(TensorT<double>& param, Forward&& forward,
                               double eps = 1e-4) {
  GradCheckResult res;
  double* vals = param.data();
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double keep = vals[i];
    vals[i] = keep + eps;
    const double up = forward();
    vals[i] = keep - eps;
    const double down = forward();
    vals[i] = keep;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic =
        param.has_grad() ? param.grad()[i] : 0.0;
    res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic, numeric));
    ++res.checked;
  }
  return res;
}

// Scalar-loop GELU (tanh form) for spot checks.
inline double gelu_ref(double x) {
  return 0.5 * x *
         (1.0 + std::tanh(0.7978845608028653558798921198687637 *
                          (x + 0.044715 * x * x * x)));
}

}  // namespace oracles
