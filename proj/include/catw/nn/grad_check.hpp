#pragma once

// Central finite-difference verification of analytic gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "catw/nn/layers.hpp"

namespace catw {

/// A differentiable scalar function of some f64 leaves.
struct GradProblem {
  std::vector<Var<double>> inputs;
  std::function<Var<double>()> loss;
};

/// Max over every input element of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
inline double max_relative_error(GradProblem& p, double eps) {
  for (auto& v : p.inputs) {
    v->requires_grad = true;
    v->grad = Tensor<double>();
  }
  backward(p.loss());
  double worst = 0.0;
  for (auto& v : p.inputs) {
    Tensor<double> analytic = v->grad.empty() ? Tensor<double>(v->value.shape()) : v->grad;
    for (std::size_t i = 0; i < v->value.numel(); ++i) {
      const double keep = v->value[i];
      v->value[i] = keep + eps;
      const double up = p.loss()->value.item();
      v->value[i] = keep - eps;
      const double down = p.loss()->value.item();
      v->value[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
inline Var<double> project_to_scalar(const Var<double>& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return dot_constant(out, Tensor<double>::randn(out->value.shape(), rng));
}

using GradProblemFactory = std::function<GradProblem(std::uint64_t seed)>;

inline std::map<std::string, GradProblemFactory>& grad_check_registry() {
  static std::map<std::string, GradProblemFactory> registry;
  return registry;
}

inline bool register_grad_check(const std::string& name, GradProblemFactory f) {
  grad_check_registry()[name] = std::move(f);
  return true;
}

namespace detail {

inline Var<double> rand_leaf(Shape s, Rng& rng, double stddev = 1.0) {
  return leaf(Tensor<double>::randn(std::move(s), rng, stddev), true);
}

inline void register_core_checks() {
  static const bool once = [] {
    register_grad_check("conv2d", [](std::uint64_t seed) {
      Rng rng(seed);
      auto x = rand_leaf({2, 2, 5, 5}, rng);
      auto w = rand_leaf({3, 2, 3, 3}, rng, 0.5);
      auto b = rand_leaf({3}, rng);
      return GradProblem{{x, w, b}, [=] { return project_to_scalar(conv2d<double>(x, w, b, 2, 1), seed); }};
    });
    register_grad_check("conv2d_adapted", [](std::uint64_t seed) {
      Rng rng(seed);
      auto x = rand_leaf({1, 2, 4, 4}, rng);
      auto w = rand_leaf({3, 2, 3, 3}, rng, 0.5);
      auto a = rand_leaf({2, 18}, rng, 0.5);
      auto bb = rand_leaf({3, 2}, rng, 0.5);
      return GradProblem{{x, w, a, bb}, [=] {
                           return project_to_scalar(conv2d<double>(x, w, nullptr, 1, 1, {a, bb}), seed);
                         }};
    });
    register_grad_check("attention", [](std::uint64_t seed) {
      Rng rng(seed);
      auto x = rand_leaf({2, 3, 2, 2}, rng);
      auto wq = rand_leaf({3, 3}, rng), wk = rand_leaf({3, 3}, rng), wv = rand_leaf({3, 3}, rng), wo = rand_leaf({3, 3}, rng);
      return GradProblem{{x, wq, wk, wv, wo}, [=] { return project_to_scalar(attention(x, wq, wk, wv, wo), seed); }};
    });
    register_grad_check("adapted_matmul", [](std::uint64_t seed) {
      Rng rng(seed);
      auto x = rand_leaf({3, 4}, rng);
      auto w = rand_leaf({5, 4}, rng);
      auto a = rand_leaf({2, 4}, rng);
      auto b = rand_leaf({5, 2}, rng);  // nonzero up-projection
      return GradProblem{{x, w, a, b}, [=] { return project_to_scalar(adapted_matmul<double>(x, w, {a, b}), seed); }};
    });
    register_grad_check("silu", [](std::uint64_t seed) {
      Rng rng(seed);
      auto x = rand_leaf({2, 3, 2, 2}, rng, 2.0);
      return GradProblem{{x}, [=] { return project_to_scalar(silu(x), seed); }};
    });
    register_grad_check("sigmoid", [](std::uint64_t seed) {
      Rng rng(seed);
      auto x = rand_leaf({2, 3, 2, 2}, rng, 2.0);
      return GradProblem{{x}, [=] { return project_to_scalar(sigmoid(x), seed); }};
    });
    register_grad_check("upsample2x", [](std::uint64_t seed) {
      Rng rng(seed);
      auto x = rand_leaf({1, 2, 3, 3}, rng);
      return GradProblem{{x}, [=] { return project_to_scalar(upsample2x(x), seed); }};
    });
    register_grad_check("add_channel_bias", [](std::uint64_t seed) {
      Rng rng(seed);
      auto x = rand_leaf({2, 3, 2, 2}, rng);
      auto e = rand_leaf({2, 3, 1, 1}, rng);
      return GradProblem{{x, e}, [=] { return project_to_scalar(add_channel_bias(x, e), seed); }};
    });
    register_grad_check("embedding", [](std::uint64_t seed) {
      Rng rng(seed);
      auto t = rand_leaf({4, 3}, rng);
      return GradProblem{{t}, [=] { return project_to_scalar(embedding(t, {1, 3, 1}), seed); }};
    });
    register_grad_check("mse", [](std::uint64_t seed) {
      Rng rng(seed);
      auto a = rand_leaf({2, 3, 2, 2}, rng);
      auto b = rand_leaf({2, 3, 2, 2}, rng);
      return GradProblem{{a, b}, [=] { return mse(a, b); }};
    });
    register_grad_check("residual_block", [](std::uint64_t seed) {
      Rng rng(seed);
      auto g = std::make_shared<ModelGraph<double>>();
      add_residual_block(*g, "res", 2, rng);
      auto x = rand_leaf({1, 2, 3, 3}, rng);
      auto e = rand_leaf({1, 2, 1, 1}, rng);
      std::vector<Var<double>> inputs{x, e};
      for (auto& p : g->params()) {
        p.value() = Tensor<double>::randn(p.value().shape(), rng, 0.5);
        inputs.push_back(p.node);
      }
      return GradProblem{inputs, [=] { return project_to_scalar(residual_block(*g, x, "res", e), seed); }};
    });
    return true;
  }();
  (void)once;
}

}  // namespace detail

/// Runs the named registered check. Unknown names are a contract error.
inline double grad_check(const std::string& op_name, std::uint64_t seed, double eps = 1e-5) {
  detail::register_core_checks();
  auto it = grad_check_registry().find(op_name);
  if (it == grad_check_registry().end()) throw ContractError("no gradient check registered for " + op_name);
  GradProblem p = it->second(seed);
  return max_relative_error(p, eps);
}

inline std::vector<std::string> registered_grad_checks() {
  detail::register_core_checks();
  std::vector<std::string> names;
  for (const auto& [k, v] : grad_check_registry()) names.push_back(k);
  return names;
}

}  // namespace catw
