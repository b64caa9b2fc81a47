#pragma once

#include <cmath>
#include <vector>

#include "catw/nn/graph.hpp"

namespace catw {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list. Parameters whose gradient slot is empty
/// after backward are skipped for that step.
template <class T>
class Adam {
 public:
  Adam(std::vector<Param<T>*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value().shape());
      v_.emplace_back(p->value().shape());
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& node = *params_[i]->node;
      if (node.grad.empty()) continue;
      auto& w = node.value;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.numel(); ++j) {
        const double g = node.grad[j];
        m[j] = T(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g);
        v[j] = T(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g);
        const double mh = m[j] / c1, vh = v[j] / c2;
        w[j] = T(w[j] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  std::size_t steps_taken() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

 private:
  std::vector<Param<T>*> params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace catw
