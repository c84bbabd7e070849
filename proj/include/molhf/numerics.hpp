#pragma once

#include <cmath>
#include <functional>
#include <numbers>

#include "molhf/autodiff.hpp"
#include "molhf/error.hpp"
#include "molhf/rng.hpp"
#include "molhf/tensor.hpp"

namespace molhf {

/// Central-difference gradient of a scalar function. Independent of the tape.
template <class T>
Tensor<T> fd_gradient(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw Error(ErrorCode::InvalidConfig, "fd step must be positive");
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T fp = f(probe);
    probe[i] = orig - h;
    const T fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

/// Central-difference Jacobian of f: ℝᵏ→ℝᵏ (inputs and outputs flattened).
template <class T>
Tensor<T> fd_jacobian(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  const int k = static_cast<int>(x.size());
  Tensor<T> jac({k, k});
  Tensor<T> probe = x;
  for (int i = 0; i < k; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    const T orig = probe[ii];
    probe[ii] = orig + h;
    const Tensor<T> fp = f(probe);
    probe[ii] = orig - h;
    const Tensor<T> fm = f(probe);
    probe[ii] = orig;
    if (fp.size() != x.size() || fm.size() != x.size())
      throw Error(ErrorCode::ShapeMismatch, "fd_jacobian needs a dimension-preserving map");
    for (int r = 0; r < k; ++r)
      jac.at(r, i) = (fp[static_cast<std::size_t>(r)] - fm[static_cast<std::size_t>(r)]) / (T(2) * h);
  }
  return jac;
}

/// log|det ∂f/∂x| from a finite-difference Jacobian and pivoted LU.
template <class T>
T fd_jacobian_logdet(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                     T h = T(1e-5)) {
  const auto lu = LuFactors<T>::factor(fd_jacobian(f, x, h));
  const T logdet = lu.log_abs_det();
  if (!std::isfinite(logdet) || logdet < std::log(T(1e-12)))
    throw Error(ErrorCode::SingularJacobian, "|det| below 1e-12");
  return logdet;
}

template <class T>
T gaussian_logp(const Tensor<T>& z, const Tensor<T>& mean, const Tensor<T>& log_std) {
  z.require_same(mean);
  z.require_same(log_std);
  const T half_log_2pi = T(0.5) * std::log(T(2) * std::numbers::pi_v<T>);
  T acc = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T u = (z[i] - mean[i]) * std::exp(-log_std[i]);
    acc += -half_log_2pi - log_std[i] - T(0.5) * u * u;
  }
  return acc;
}

/// mean + t·exp(log_std)·ε with ε ~ N(0, 1) drawn from `rng`.
template <class T>
Tensor<T> sample_gaussian(const Shape& shape, const Tensor<T>& mean, const Tensor<T>& log_std,
                          T temperature, Rng& rng) {
  if (!(temperature > T(0))) throw Error(ErrorCode::InvalidConfig, "temperature must be positive");
  Tensor<T> out(shape);
  out.require_same(mean);
  out.require_same(log_std);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = mean[i] + temperature * std::exp(log_std[i]) * static_cast<T>(rng.normal());
  return out;
}

/// Relative error with a floor on the denominator.
template <class T>
T relative_error(T a, T b, T floor = T(1e-12)) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <class T>
T max_relative_error(const Tensor<T>& a, const Tensor<T>& b, T floor) {
  a.require_same(b);
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, relative_error(a[i], b[i], floor));
  return m;
}

}  // namespace molhf
