#pragma once

#include <cmath>
#include <vector>

#include "catw/autodiff.hpp"

namespace catw {

/// Forward-process variances. Timesteps are 1-based: betas[t-1] is β_t.
struct NoiseSchedule {
  std::vector<double> betas, alphas, alpha_bars;

  std::size_t steps() const { return betas.size(); }
  double alpha_bar(std::size_t t) const {
    check_t(t);
    return alpha_bars[t - 1];
  }
  double beta(std::size_t t) const {
    check_t(t);
    return betas[t - 1];
  }
  double alpha(std::size_t t) const {
    check_t(t);
    return alphas[t - 1];
  }
  void check_t(std::size_t t) const {
    if (t < 1 || t > betas.size())
      throw ContractError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(betas.size()) + "]");
  }

  static NoiseSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ConfigError("noise schedule needs at least one step");
    NoiseSchedule s;
    double prod = 1.0;
    for (double b : betas) {
      if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta must lie in (0, 1), got " + std::to_string(b));
      prod *= 1.0 - b;
      s.alphas.push_back(1.0 - b);
      s.alpha_bars.push_back(prod);
    }
    s.betas = std::move(betas);
    return s;
  }
};

/// β linearly spaced from beta_start to beta_end inclusive.
inline NoiseSchedule make_linear_schedule(std::size_t T, double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(T);
  for (std::size_t i = 0; i < T; ++i)
    betas[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
  return NoiseSchedule::from_betas(std::move(betas));
}

/// √ᾱ·z0 + √(1−ᾱ)·eps for an explicit ᾱ.
template <class T>
Tensor<T> q_sample_at(const Tensor<T>& z0, double alpha_bar, const Tensor<T>& eps) {
  z0.require_same_shape(eps, "q_sample");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor<T> out(z0.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = T(a * z0[i] + b * eps[i]);
  return out;
}

template <class T>
Tensor<T> q_sample(const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& s) {
  return q_sample_at(z0, s.alpha_bar(t), eps);
}

/// Differentiable batched form with one timestep per sample.
template <class T>
Var<T> q_sample(const Var<T>& z0, const std::vector<std::size_t>& ts, const Tensor<T>& eps, const NoiseSchedule& s) {
  std::vector<T> a, b;
  for (auto t : ts) {
    a.push_back(T(std::sqrt(s.alpha_bar(t))));
    b.push_back(T(std::sqrt(1.0 - s.alpha_bar(t))));
  }
  return add(scale_samples(z0, a), scale_samples(constant(eps), b));
}

}  // namespace catw
