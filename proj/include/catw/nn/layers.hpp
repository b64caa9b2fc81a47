#pragma once

#include <cmath>
#include <string>

#include "catw/nn/graph.hpp"

namespace catw {

/// y = W·x (+ up·down·x) for x of shape N×k and W of shape d×k. A plain
/// matrix product routed through a 1×1 convolution.
template <class T>
Var<T> adapted_matmul(const Var<T>& x, const Var<T>& weight, const LowRankPath<T>& lora = {}) {
  const auto& xs = x->value.shape();
  const auto& ws = weight->value.shape();
  if (xs.size() != 2 || ws.size() != 2) throw ContractError("adapted_matmul expects N×k input and d×k weight");
  if (xs[1] != ws[1])
    throw ContractError("adapted_matmul: input width " + std::to_string(xs[1]) + " does not match weight columns " +
                        std::to_string(ws[1]));
  if (lora) {
    const std::size_t r = lora.down->value.dim(0);
    if (r > std::min(ws[0], ws[1]))
      throw ConfigError("adapter rank " + std::to_string(r) + " exceeds min(d, k) of the host weight");
  }
  auto x4 = reshape(x, Shape{xs[0], xs[1], 1, 1});
  auto w4 = reshape(weight, Shape{ws[0], ws[1], 1, 1});
  return reshape(conv2d<T>(x4, w4, nullptr, 1, 0, lora), Shape{xs[0], ws[0]});
}

/// Adapter paths for the four attention projections.
template <class T>
struct AttentionAdapters {
  LowRankPath<T> q, k, v, o;
};

/// Single-head spatial self-attention with residual: x + Wo·softmax(QᵀK/√C)·V.
/// Projection weights are C×C (or C×C×1×1) and carry no bias.
template <class T>
Var<T> attention(const Var<T>& x, const Var<T>& wq, const Var<T>& wk, const Var<T>& wv, const Var<T>& wo,
                 const AttentionAdapters<T>& lora = {}) {
  const auto& xs = x->value.shape();
  if (xs.size() != 4) throw ContractError("attention expects NCHW, got " + shape_str(xs));
  const std::size_t C = xs[1];
  auto as_kernel = [C](const Var<T>& w, const char* which) {
    const auto& s = w->value.shape();
    const bool square = (s.size() == 2 && s[0] == s[1]) || (s.size() == 4 && s[0] == s[1] && s[2] == 1 && s[3] == 1);
    if (!square) throw ContractError(std::string("attention: projection ") + which + " must be square, got " + shape_str(s));
    if (s[0] != C) throw ContractError(std::string("attention: projection ") + which + " does not match channels");
    return s.size() == 4 ? w : reshape(w, Shape{C, C, 1, 1});
  };
  auto q = conv2d<T>(x, as_kernel(wq, "Wq"), nullptr, 1, 0, lora.q);
  auto k = conv2d<T>(x, as_kernel(wk, "Wk"), nullptr, 1, 0, lora.k);
  auto v = conv2d<T>(x, as_kernel(wv, "Wv"), nullptr, 1, 0, lora.v);
  auto att = scaled_dot_attention(q, k, v);
  return add(x, conv2d<T>(att, as_kernel(wo, "Wo"), nullptr, 1, 0, lora.o));
}

// ---------------------------------------------------------------------------
// Graph-level builders.

template <class T>
void add_conv_layer(ModelGraph<T>& g, const std::string& name, std::size_t in, std::size_t out, std::size_t k, Rng& rng,
                    double gain = 1.0) {
  const double fan_in = double(in * k * k);
  g.add_param(name + ".weight", Tensor<T>::randn(Shape{out, in, k, k}, rng, gain / std::sqrt(fan_in)));
  g.add_param(name + ".bias", Tensor<T>(Shape{out}));
  g.add_layer({name, LayerKind::conv, {name + ".weight"}});
}

template <class T>
void add_attention_layer(ModelGraph<T>& g, const std::string& name, std::size_t channels, Rng& rng) {
  const double s = 1.0 / std::sqrt(double(channels));
  for (const char* p : {"q", "k", "v"})
    g.add_param(name + "." + p + ".weight", Tensor<T>::randn(Shape{channels, channels, 1, 1}, rng, s));
  // Small output projection so the block starts near identity.
  g.add_param(name + ".o.weight", Tensor<T>::randn(Shape{channels, channels, 1, 1}, rng, 0.1 * s));
  g.add_layer({name, LayerKind::attention, {name + ".q.weight", name + ".k.weight", name + ".v.weight", name + ".o.weight"}});
}

template <class T>
Var<T> attention_block(const ModelGraph<T>& g, const Var<T>& x, const std::string& name) {
  AttentionAdapters<T> lora{g.lora(name + ".q.weight"), g.lora(name + ".k.weight"), g.lora(name + ".v.weight"),
                            g.lora(name + ".o.weight")};
  return attention(x, g.var(name + ".q.weight"), g.var(name + ".k.weight"), g.var(name + ".v.weight"),
                   g.var(name + ".o.weight"), lora);
}

template <class T>
void add_residual_block(ModelGraph<T>& g, const std::string& name, std::size_t channels, Rng& rng) {
  add_conv_layer(g, name + ".conv1", channels, channels, 3, rng);
  add_conv_layer(g, name + ".conv2", channels, channels, 3, rng, 0.3);
}

/// x + conv2(silu(conv1(silu(x)) [+ emb])). emb, when given, is N×C×1×1.
template <class T>
Var<T> residual_block(const ModelGraph<T>& g, const Var<T>& x, const std::string& name, const Var<T>& emb = nullptr) {
  auto h = g.conv(silu(x), name + ".conv1");
  if (emb) h = add_channel_bias(h, emb);
  h = g.conv(silu(h), name + ".conv2");
  return add(x, h);
}

}  // namespace catw
