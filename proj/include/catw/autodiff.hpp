#pragma once

// Tape-free reverse-mode differentiation over Tensor values. Each op returns a
// Var whose node records its parents and a closure that pushes the incoming
// gradient to them. backward() walks the graph in reverse topological order.

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "catw/tensor.hpp"

namespace catw {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until some gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward_fn;
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <class T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

template <class T>
void accumulate_grad(Node<T>& n, const Tensor<T>& g) {
  if (!n.requires_grad) return;
  if (n.grad.empty())
    n.grad = g;
  else
    n.grad += g;
}

namespace detail {

template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(const Tensor<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || (p && p->requires_grad);
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

}  // namespace detail

/// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node that
/// requires a gradient. Leaves accumulate; call zero_grad between steps.
template <class T>
void backward(const Var<T>& loss) {
  if (loss->value.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(loss->value.shape()));
  if (!loss->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  accumulate_grad(*loss, Tensor<T>(loss->value.shape(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(n->grad);
  }
  // Interior nodes keep no gradient once propagated.
  for (Node<T>* n : order)
    if (n->backward_fn) n->grad = Tensor<T>();
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a->value.require_same_shape(b->value, "add");
  return detail::make_node<T>(a->value + b->value, {a, b}, [a, b](const Tensor<T>& g) {
    accumulate_grad(*a, g);
    accumulate_grad(*b, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a->value.require_same_shape(b->value, "sub");
  return detail::make_node<T>(a->value - b->value, {a, b}, [a, b](const Tensor<T>& g) {
    accumulate_grad(*a, g);
    if (b->requires_grad) accumulate_grad(*b, g * T(-1));
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::make_node<T>(a->value * s, {a}, [a, s](const Tensor<T>& g) { accumulate_grad(*a, g * s); });
}

namespace detail {

template <class T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
Tensor<T> logistic(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  ArrayMap<T>(out.data(), Eigen::Index(out.numel())) =
      T(1) / (T(1) + (-ConstArrayMap<T>(x.data(), Eigen::Index(x.numel()))).exp());
  return out;
}

}  // namespace detail

template <class T>
Var<T> silu(const Var<T>& a) {
  const auto n = Eigen::Index(a->value.numel());
  Tensor<T> sig = detail::logistic(a->value);
  Tensor<T> out(a->value.shape());
  detail::ArrayMap<T>(out.data(), n) = detail::ConstArrayMap<T>(a->value.data(), n) * detail::ConstArrayMap<T>(sig.data(), n);
  return detail::make_node<T>(std::move(out), {a}, [a, sig = std::move(sig), n](const Tensor<T>& g) {
    Tensor<T> d(g.shape());
    auto s = detail::ConstArrayMap<T>(sig.data(), n);
    auto x = detail::ConstArrayMap<T>(a->value.data(), n);
    detail::ArrayMap<T>(d.data(), n) = detail::ConstArrayMap<T>(g.data(), n) * (s * (T(1) + x * (T(1) - s)));
    accumulate_grad(*a, d);
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = detail::logistic(a->value);
  auto node = detail::make_node<T>(out, {a}, nullptr);
  if (node->requires_grad) {
    node->backward_fn = [a, out](const Tensor<T>& g) {
      const auto n = Eigen::Index(g.numel());
      Tensor<T> d(g.shape());
      auto o = detail::ConstArrayMap<T>(out.data(), n);
      detail::ArrayMap<T>(d.data(), n) = detail::ConstArrayMap<T>(g.data(), n) * o * (T(1) - o);
      accumulate_grad(*a, d);
    };
  }
  return node;
}

/// Mean over all elements of (a - target)^2.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& target) {
  a->value.require_same_shape(target->value, "mse");
  const std::size_t n = a->value.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = double(a->value[i]) - double(target->value[i]);
    acc += d * d;
  }
  return detail::make_node<T>(Tensor<T>::scalar(T(acc / double(n))), {a, target}, [a, target, n](const Tensor<T>& g) {
    const T k = T(2) * g[0] / T(n);
    Tensor<T> d(a->value.shape());
    for (std::size_t i = 0; i < n; ++i) d[i] = k * (a->value[i] - target->value[i]);
    if (a->requires_grad) accumulate_grad(*a, d);
    if (target->requires_grad) accumulate_grad(*target, d * T(-1));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a->value.numel();
  return detail::make_node<T>(Tensor<T>::scalar(T(mean_value(a->value))), {a}, [a, n](const Tensor<T>& g) {
    accumulate_grad(*a, Tensor<T>(a->value.shape(), g[0] / T(n)));
  });
}

/// Sum of a ⊙ w where w is held constant; d/da = w. Used to inject an
/// externally computed gradient into a graph.
template <class T>
Var<T> dot_constant(const Var<T>& a, const Tensor<T>& w) {
  a->value.require_same_shape(w, "dot_constant");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) acc += double(a->value[i]) * double(w[i]);
  return detail::make_node<T>(Tensor<T>::scalar(T(acc)), {a}, [a, w](const Tensor<T>& g) { accumulate_grad(*a, w * g[0]); });
}

/// x (N×C×H×W) plus e (N×C×1×1) broadcast over space.
template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& e) {
  const auto& s = x->value.shape();
  if (s.size() != 4 || e->value.shape() != Shape{s[0], s[1], 1, 1})
    throw ContractError("add_channel_bias: shapes " + shape_str(s) + " and " + shape_str(e->value.shape()));
  const std::size_t hw = s[2] * s[3];
  Tensor<T> out = x->value;
  for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
    for (std::size_t p = 0; p < hw; ++p) out[nc * hw + p] += e->value[nc];
  return detail::make_node<T>(std::move(out), {x, e}, [x, e, hw](const Tensor<T>& g) {
    accumulate_grad(*x, g);
    if (e->requires_grad) {
      Tensor<T> d(e->value.shape());
      for (std::size_t nc = 0; nc < d.numel(); ++nc) {
        T acc = 0;
        for (std::size_t p = 0; p < hw; ++p) acc += g[nc * hw + p];
        d[nc] = acc;
      }
      accumulate_grad(*e, d);
    }
  });
}

/// x (N×C×H×W) plus p (C×H×W) broadcast over the batch.
template <class T>
Var<T> add_batch_broadcast(const Var<T>& x, const Var<T>& p) {
  const auto& s = x->value.shape();
  const std::size_t per = p->value.numel();
  if (s.size() != 4 || per != s[1] * s[2] * s[3])
    throw ContractError("add_batch_broadcast: shapes " + shape_str(s) + " and " + shape_str(p->value.shape()));
  Tensor<T> out = x->value;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] += p->value[i];
  return detail::make_node<T>(std::move(out), {x, p}, [x, p, per](const Tensor<T>& g) {
    accumulate_grad(*x, g);
    if (p->requires_grad) {
      Tensor<T> d(p->value.shape());
      for (std::size_t n = 0; n < g.numel() / per; ++n)
        for (std::size_t i = 0; i < per; ++i) d[i] += g[n * per + i];
      accumulate_grad(*p, d);
    }
  });
}

/// Rows of a V×D table selected by ids, shaped N×D×1×1.
template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<std::size_t>& ids) {
  const auto& s = table->value.shape();
  if (s.size() != 2) throw ContractError("embedding table must be 2-D");
  const std::size_t dim = s[1];
  Tensor<T> out(Shape{ids.size(), dim, 1, 1});
  for (std::size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] >= s[0]) throw ContractError("embedding id " + std::to_string(ids[n]) + " out of vocabulary " + std::to_string(s[0]));
    std::copy_n(table->value.data() + ids[n] * dim, dim, out.data() + n * dim);
  }
  return detail::make_node<T>(std::move(out), {table}, [table, ids, dim](const Tensor<T>& g) {
    Tensor<T> d(table->value.shape());
    for (std::size_t n = 0; n < ids.size(); ++n)
      for (std::size_t j = 0; j < dim; ++j) d[ids[n] * dim + j] += g[n * dim + j];
    accumulate_grad(*table, d);
  });
}

/// Multiplies sample n (leading dimension) by factors[n].
template <class T>
Var<T> scale_samples(const Var<T>& a, std::vector<T> factors) {
  const std::size_t n = a->value.dim(0);
  if (factors.size() != n) throw ContractError("scale_samples: need one factor per sample");
  const std::size_t per = a->value.numel() / n;
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < per; ++j) out[i * per + j] *= factors[i];
  return detail::make_node<T>(std::move(out), {a}, [a, factors = std::move(factors), per](const Tensor<T>& g) {
    Tensor<T> d = g;
    for (std::size_t i = 0; i < factors.size(); ++i)
      for (std::size_t j = 0; j < per; ++j) d[i * per + j] *= factors[i];
    accumulate_grad(*a, d);
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a->value.reshaped(s);
  return detail::make_node<T>(std::move(out), {a}, [a](const Tensor<T>& g) {
    accumulate_grad(*a, g.reshaped(a->value.shape()));
  });
}

/// Nearest-neighbour 2× spatial upsampling.
template <class T>
Var<T> upsample2x(const Var<T>& x) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw ContractError("upsample2x expects NCHW");
  const std::size_t H = s[2], W = s[3];
  Tensor<T> out(Shape{s[0], s[1], 2 * H, 2 * W});
  for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
    for (std::size_t h = 0; h < 2 * H; ++h)
      for (std::size_t w = 0; w < 2 * W; ++w) out[(nc * 2 * H + h) * 2 * W + w] = x->value[(nc * H + h / 2) * W + w / 2];
  return detail::make_node<T>(std::move(out), {x}, [x, H, W](const Tensor<T>& g) {
    Tensor<T> d(x->value.shape());
    const std::size_t NC = d.numel() / (H * W);
    for (std::size_t nc = 0; nc < NC; ++nc)
      for (std::size_t h = 0; h < 2 * H; ++h)
        for (std::size_t w = 0; w < 2 * W; ++w) d[(nc * H + h / 2) * W + w / 2] += g[(nc * 2 * H + h) * 2 * W + w];
    accumulate_grad(*x, d);
  });
}

}  // namespace catw
