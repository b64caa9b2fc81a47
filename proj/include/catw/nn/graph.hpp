#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "catw/nn/ops.hpp"

namespace catw {

/// Named trainable tensor. The value lives in a leaf node so forward passes can
/// reference it without copying; gradients accumulate in node->grad.
template <class T>
struct Param {
  std::string name;
  Var<T> node;
  bool trainable = true;

  const Tensor<T>& value() const { return node->value; }
  Tensor<T>& value() { return node->value; }
  const Tensor<T>& grad() const { return node->grad; }

  /// Rows and columns of the weight viewed as a matrix (dim 0 vs the rest).
  std::pair<std::size_t, std::size_t> matrix_dims() const {
    const auto& v = node->value;
    return {v.dim(0), v.numel() / v.dim(0)};
  }
};

/// Additive update up·down on a host weight of matrix shape d×k.
template <class T>
struct LowRankAdapter {
  std::string host;
  std::size_t rank = 0;
  Param<T> down;  // r×k
  Param<T> up;    // d×r

  LowRankPath<T> path() const { return {down.node, up.node}; }
  Tensor<T> delta() const {
    const std::size_t d = up.value().dim(0), k = down.value().dim(1);
    Tensor<T> out(Shape{d, k});
    MatMap<T>(out.data(), d, k).noalias() = ConstMatMap<T>(up.value().data(), d, rank) *
                                            ConstMatMap<T>(down.value().data(), rank, k);
    return out;
  }
};

enum class LayerKind { conv, attention };

/// Topology entry. Host weights are the parameters an adapter may wrap.
struct LayerSpec {
  std::string name;
  LayerKind kind;
  std::vector<std::string> hosts;
};

template <class T>
LowRankAdapter<T> make_adapter(const std::string& host, std::size_t d, std::size_t k, std::size_t rank, Rng& rng,
                               double init_std = 0.01) {
  if (rank == 0) throw ConfigError("adapter rank must be positive for host " + host);
  if (rank > std::min(d, k))
    throw ConfigError("adapter rank " + std::to_string(rank) + " exceeds min(d, k) = " + std::to_string(std::min(d, k)) +
                      " for host " + host);
  LowRankAdapter<T> a;
  a.host = host;
  a.rank = rank;
  a.down = Param<T>{host + ".lora_down", leaf(Tensor<T>::randn(Shape{rank, k}, rng, init_std), true), true};
  a.up = Param<T>{host + ".lora_up", leaf(Tensor<T>(Shape{d, rank}), true), true};
  return a;
}

/// Ordered parameter collection plus adapters keyed by host name.
template <class T>
class ModelGraph {
 public:
  ModelGraph() = default;

  ModelGraph(const ModelGraph& o) { copy_from(o); }
  ModelGraph& operator=(const ModelGraph& o) {
    if (this != &o) copy_from(o);
    return *this;
  }
  ModelGraph(ModelGraph&&) noexcept = default;
  ModelGraph& operator=(ModelGraph&&) noexcept = default;

  Param<T>& add_param(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back(Param<T>{name, leaf(std::move(value), trainable), trainable});
    return params_.back();
  }

  void add_layer(LayerSpec spec) {
    for (const auto& h : spec.hosts)
      if (!has_param(h)) throw ContractError("layer " + spec.name + " names unknown host " + h);
    layers_.push_back(std::move(spec));
  }

  bool has_param(const std::string& name) const { return index_.count(name) != 0; }
  Param<T>& param(const std::string& name) { return params_.at(lookup(name)); }
  const Param<T>& param(const std::string& name) const { return params_.at(lookup(name)); }
  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::map<std::string, LowRankAdapter<T>>& adapters() const { return adapters_; }
  std::map<std::string, LowRankAdapter<T>>& adapters() { return adapters_; }
  bool merged() const { return merged_; }

  /// Nodes for the forward pass.
  Var<T> var(const std::string& name) const { return param(name).node; }
  Var<T> maybe_var(const std::string& name) const { return has_param(name) ? param(name).node : nullptr; }
  LowRankPath<T> lora(const std::string& host) const {
    auto it = adapters_.find(host);
    return it == adapters_.end() ? LowRankPath<T>{} : it->second.path();
  }

  void set_trainable(const std::string& name, bool on) {
    auto& p = param(name);
    p.trainable = on;
    p.node->requires_grad = on;
    if (!on) p.node->grad = Tensor<T>();
  }
  void freeze_all() {
    for (auto& p : params_) set_trainable(p.name, false);
  }

  /// Attaches a zero-initialized adapter. Base parameters keep their values;
  /// freezing them is the caller's decision.
  LowRankAdapter<T>& attach_adapter(const std::string& host, std::size_t rank, Rng& rng, double init_std = 0.01) {
    if (!has_param(host)) throw ConfigError("adapter target " + host + " does not resolve to a parameter");
    if (adapters_.count(host)) throw ConfigError("adapter already attached to " + host);
    auto [d, k] = param(host).matrix_dims();
    auto [it, ok] = adapters_.emplace(host, make_adapter<T>(host, d, k, rank, rng, init_std));
    return it->second;
  }

  /// Attaches an adapter with given factors (checkpoint loading).
  void attach_adapter(LowRankAdapter<T> a) {
    if (!has_param(a.host)) throw LoadError("adapter host " + a.host + " does not exist on the base graph");
    if (adapters_.count(a.host)) throw LoadError("adapter already attached to " + a.host);
    auto [d, k] = param(a.host).matrix_dims();
    if (a.up.value().shape() != Shape{d, a.rank} || a.down.value().shape() != Shape{a.rank, k})
      throw LoadError("adapter for host " + a.host + " has factors " + shape_str(a.up.value().shape()) + "·" +
                      shape_str(a.down.value().shape()) + " but host matrix is " + std::to_string(d) + "x" +
                      std::to_string(k));
    adapters_.emplace(a.host, std::move(a));
  }

  /// Removes all adapters; base parameters are untouched.
  void detach_adapters() {
    if (merged_) throw ContractError("cannot detach: graph was merged and carries no adapters");
    if (adapters_.empty()) throw ContractError("cannot detach: graph carries no adapters");
    adapters_.clear();
  }

  /// Copy with every adapter folded into its host weight.
  ModelGraph merged_copy() const {
    ModelGraph out(*this);
    for (const auto& [host, a] : out.adapters_) {
      Tensor<T> delta = a.delta();
      auto& w = out.param(host).value();
      for (std::size_t i = 0; i < w.numel(); ++i) w[i] += delta[i];
    }
    out.adapters_.clear();
    out.merged_ = true;
    return out;
  }

  /// Every parameter that currently takes gradient steps, adapters included.
  std::vector<Param<T>*> trainable_params() {
    std::vector<Param<T>*> out;
    for (auto& p : params_)
      if (p.trainable) out.push_back(&p);
    for (auto& [h, a] : adapters_) {
      if (a.down.trainable) out.push_back(&a.down);
      if (a.up.trainable) out.push_back(&a.up);
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p.node->grad = Tensor<T>();
    for (auto& [h, a] : adapters_) {
      a.down.node->grad = Tensor<T>();
      a.up.node->grad = Tensor<T>();
    }
  }

  std::size_t adapter_param_count() const {
    std::size_t n = 0;
    for (const auto& [h, a] : adapters_) n += a.down.value().numel() + a.up.value().numel();
    return n;
  }

  template <class U>
  ModelGraph<U> cast() const {
    ModelGraph<U> out;
    for (const auto& p : params_) out.add_param(p.name, p.value().template cast<U>(), p.trainable);
    for (const auto& l : layers_) out.add_layer(l);
    for (const auto& [h, a] : adapters_) {
      LowRankAdapter<U> b;
      b.host = a.host;
      b.rank = a.rank;
      b.down = Param<U>{a.down.name, leaf(a.down.value().template cast<U>(), a.down.trainable), a.down.trainable};
      b.up = Param<U>{a.up.name, leaf(a.up.value().template cast<U>(), a.up.trainable), a.up.trainable};
      out.attach_adapter(std::move(b));
    }
    return out;
  }

  /// True when every base parameter is bit-identical to the other graph's.
  bool base_bit_equal(const ModelGraph& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name != o.params_[i].name || !params_[i].value().bit_equal(o.params_[i].value())) return false;
    return true;
  }

  // 2-D convolution with the named layer's weight/bias and any attached adapter.
  Var<T> conv(const Var<T>& x, const std::string& layer, std::size_t stride = 1) const {
    const auto& w = param(layer + ".weight").value();
    const std::size_t pad = w.dim(2) / 2;
    const std::string host = layer + ".weight";
    return conv2d(x, var(host), maybe_var(layer + ".bias"), stride, pad, lora(host));
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return it->second;
  }

  static Param<T> clone_param(const Param<T>& p) {
    return Param<T>{p.name, leaf(p.value(), p.trainable), p.trainable};
  }

  void copy_from(const ModelGraph& o) {
    params_.clear();
    for (const auto& p : o.params_) params_.push_back(clone_param(p));
    index_ = o.index_;
    layers_ = o.layers_;
    adapters_.clear();
    for (const auto& [h, a] : o.adapters_) {
      LowRankAdapter<T> b{a.host, a.rank, clone_param(a.down), clone_param(a.up)};
      adapters_.emplace(h, std::move(b));
    }
    merged_ = o.merged_;
  }

  std::vector<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<LayerSpec> layers_;
  std::map<std::string, LowRankAdapter<T>> adapters_;
  bool merged_ = false;
};

}  // namespace catw
