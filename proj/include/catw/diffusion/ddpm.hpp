#pragma once

// Concept-token conditioned ε-prediction denoiser over autoencoder latents,
// its training loss, fine-tuning, and ancestral sampling.

#include <cmath>
#include <functional>
#include <json.hpp>
#include <numbers>
#include <span>
#include <vector>

#include "catw/ae/autoencoder.hpp"
#include "catw/diffusion/schedule.hpp"

namespace catw {

struct DenoiserConfig {
  std::size_t latent_channels = 4;
  std::size_t latent_size = 8;
  std::size_t width = 64;
  std::size_t concept_vocab = 9;
  std::size_t time_dim = 32;
  bool attention = true;
  // Latents are multiplied by this before entering the diffusion process.
  double latent_scale = 1.0;

  Shape latent_shape(std::size_t n) const { return {n, latent_channels, latent_size, latent_size}; }
  void validate() const {
    if (concept_vocab < 1) throw ConfigError("concept_vocab must be at least 1");
    if (latent_channels == 0 || latent_size == 0 || width == 0 || time_dim == 0 || time_dim % 2)
      throw ConfigError("denoiser sizes must be positive (time_dim even)");
    if (!(latent_scale > 0.0)) throw ConfigError("latent_scale must be positive");
  }
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"latent_channels", c.latent_channels}, {"latent_size", c.latent_size}, {"width", c.width},
       {"concept_vocab", c.concept_vocab},     {"time_dim", c.time_dim},       {"attention", c.attention},
       {"latent_scale", c.latent_scale}};
}
inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c.latent_channels = j.at("latent_channels");
  c.latent_size = j.at("latent_size");
  c.width = j.at("width");
  c.concept_vocab = j.at("concept_vocab");
  c.time_dim = j.at("time_dim");
  c.attention = j.at("attention");
  c.latent_scale = j.at("latent_scale");
}

/// ε̂(z_t, t, token). Inputs are in diffusion space (already scaled).
template <class T>
using EpsPredictor = std::function<Var<T>(const Var<T>& z_t, const std::vector<std::size_t>& t, const std::vector<std::size_t>& tokens)>;

/// Sinusoidal timestep features, N×dim×1×1.
template <class T>
Tensor<T> timestep_features(const std::vector<std::size_t>& ts, std::size_t dim) {
  Tensor<T> out(Shape{ts.size(), dim, 1, 1});
  const std::size_t half = dim / 2;
  for (std::size_t n = 0; n < ts.size(); ++n)
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
      out[n * dim + i] = T(std::sin(double(ts[n]) * f));
      out[n * dim + half + i] = T(std::cos(double(ts[n]) * f));
    }
  return out;
}

template <class T>
struct Denoiser {
  DenoiserConfig cfg;
  ModelGraph<T> graph;

  static Denoiser create(const DenoiserConfig& cfg, Rng& rng) {
    cfg.validate();
    Denoiser d{cfg, {}};
    auto& g = d.graph;
    const std::size_t W = cfg.width;
    add_conv_layer(g, "denoiser.time1", cfg.time_dim, W, 1, rng);
    add_conv_layer(g, "denoiser.time2", W, W, 1, rng);
    g.add_param("denoiser.token_embed", Tensor<T>::randn(Shape{cfg.concept_vocab, W}, rng, 0.1));
    add_conv_layer(g, "denoiser.conv_in", cfg.latent_channels, W, 3, rng);
    g.add_param("denoiser.pos_embed", Tensor<T>::randn(Shape{W, cfg.latent_size, cfg.latent_size}, rng, 0.1));
    add_residual_block(g, "denoiser.res1", W, rng);
    if (cfg.attention) add_attention_layer(g, "denoiser.attn", W, rng);
    add_residual_block(g, "denoiser.res2", W, rng);
    add_conv_layer(g, "denoiser.conv_out", W, cfg.latent_channels, 3, rng, 0.1);
    return d;
  }

  Var<T> predict(const Var<T>& z_t, const std::vector<std::size_t>& ts, const std::vector<std::size_t>& tokens) const {
    const auto& s = z_t->value.shape();
    if (s != cfg.latent_shape(s.empty() ? 0 : s[0]))
      throw ContractError("denoiser expects latents " + shape_str(cfg.latent_shape(s.empty() ? 1 : s[0])) + ", got " + shape_str(s));
    if (ts.size() != s[0] || tokens.size() != s[0]) throw ContractError("denoiser needs one timestep and token per sample");
    for (auto tok : tokens)
      if (tok >= cfg.concept_vocab)
        throw ContractError("token " + std::to_string(tok) + " outside concept vocabulary " + std::to_string(cfg.concept_vocab));
    const auto& g = graph;
    auto e = g.conv(constant(timestep_features<T>(ts, cfg.time_dim)), "denoiser.time1");
    e = g.conv(silu(e), "denoiser.time2");
    e = add(e, embedding(g.var("denoiser.token_embed"), tokens));
    auto h = add_batch_broadcast(g.conv(z_t, "denoiser.conv_in"), g.var("denoiser.pos_embed"));
    h = residual_block(g, h, "denoiser.res1", e);
    if (cfg.attention) h = attention_block(g, h, "denoiser.attn");
    h = residual_block(g, h, "denoiser.res2", e);
    return g.conv(silu(h), "denoiser.conv_out");
  }

  EpsPredictor<T> predictor() const {
    return [this](const Var<T>& z, const std::vector<std::size_t>& t, const std::vector<std::size_t>& tok) {
      return predict(z, t, tok);
    };
  }

  void save(const std::filesystem::path& path, CheckpointSections sections = CheckpointSections::all) const {
    save_checkpoint(graph, path, nlohmann::json{{"kind", "denoiser"}, {"config", cfg}}, sections);
  }
  static Denoiser load(const std::filesystem::path& path) {
    auto ck = load_checkpoint<T>(path);
    if (ck.meta.value("kind", "") != "denoiser") throw LoadError(path.string() + " is not a denoiser checkpoint");
    Denoiser d;
    d.cfg = ck.meta.at("config").template get<DenoiserConfig>();
    d.graph = std::move(ck.graph);
    return d;
  }
};

/// One Monte-Carlo draw of (t, ε) per sample.
template <class T>
struct NoiseDraw {
  std::vector<std::size_t> t;
  Tensor<T> eps;
};

template <class T>
NoiseDraw<T> draw_noise(const Shape& shape, const NoiseSchedule& s, Rng& rng) {
  std::uniform_int_distribution<std::size_t> ut(1, s.steps());
  NoiseDraw<T> d;
  for (std::size_t n = 0; n < shape[0]; ++n) d.t.push_back(ut(rng));
  d.eps = Tensor<T>::randn(shape, rng);
  return d;
}

/// Mean squared error between ε and ε̂(z_t, t, token) for z0 given in raw
/// latent units (scaled by latent_scale inside). Differentiable w.r.t. z0.
template <class T>
Var<T> denoise_loss(const EpsPredictor<T>& eps_fn, const Var<T>& z0, std::size_t token, const NoiseSchedule& s,
                    const NoiseDraw<T>& draw, double latent_scale = 1.0) {
  auto zs = scale(z0, T(latent_scale));
  auto zt = q_sample(zs, draw.t, draw.eps, s);
  std::vector<std::size_t> tokens(z0->value.dim(0), token);
  return mse(eps_fn(zt, draw.t, tokens), constant(draw.eps));
}

template <class T>
Var<T> denoise_loss(const Denoiser<T>& d, const Var<T>& z0, std::size_t token, const NoiseSchedule& s, Rng& rng) {
  auto draw = draw_noise<T>(z0->value.shape(), s, rng);
  return denoise_loss<T>(d.predictor(), z0, token, s, draw, d.cfg.latent_scale);
}

/// Average of `draws` independent loss evaluations (no gradient).
template <class T>
double expected_denoise_loss(const Denoiser<T>& d, const Tensor<T>& z0, std::size_t token, const NoiseSchedule& s,
                             std::uint64_t seed, std::size_t draws = 64) {
  Rng rng(seed);
  double acc = 0.0;
  for (std::size_t i = 0; i < draws; ++i) acc += denoise_loss(d, constant(z0), token, s, rng)->value.item();
  return acc / double(draws);
}

struct FinetuneHParams {
  double lr = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  // adapter mode trains only low-rank adapters on every denoiser conv and
  // attention layer; full mode trains every parameter.
  bool adapter_mode = false;
  std::size_t adapter_rank = 8;
  // Std of the adapter down-projection; 0 selects 1/sqrt(fan-in).
  double adapter_init_std = 0.01;
  // Cosine decay of the learning rate to zero over the run.
  bool cosine_decay = false;
};

/// Trains on (latent, token) pairs in place. Returns the per-step losses.
template <class T>
std::vector<double> train_denoiser(Denoiser<T>& d, const Tensor<T>& latents, const std::vector<std::size_t>& tokens,
                                   const NoiseSchedule& s, const FinetuneHParams& hp) {
  if (latents.empty() || latents.dim(0) == 0) throw ContractError("denoiser training needs at least one latent");
  if (tokens.size() != latents.dim(0)) throw ContractError("denoiser training needs one token per latent");
  std::vector<double> curve;
  if (hp.steps == 0) return curve;
  Rng rng(hp.seed);
  if (hp.adapter_mode) {
    d.graph.freeze_all();
    for (const auto& layer : d.graph.layers())
      for (const auto& host : layer.hosts) {
        auto [rows, cols] = d.graph.param(host).matrix_dims();
        const double sd = hp.adapter_init_std > 0.0 ? hp.adapter_init_std : 1.0 / std::sqrt(double(cols));
        d.graph.attach_adapter(host, std::min({hp.adapter_rank, rows, cols}), rng, sd);
      }
  }
  Adam<T> opt(d.graph.trainable_params(), AdamConfig{hp.lr});
  BatchSampler sampler(latents.dim(0), hp.seed + 1);
  for (std::size_t step = 0; step < hp.steps; ++step) {
    if (hp.cosine_decay) opt.set_lr(hp.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(hp.steps))));
    const auto idx = sampler.next(hp.batch);
    std::vector<std::size_t> tok;
    for (auto i : idx) tok.push_back(tokens[i]);
    auto z0 = constant(gather_batch(latents, idx));
    auto draw = draw_noise<T>(z0->value.shape(), s, rng);
    auto zt = q_sample(scale(z0, T(d.cfg.latent_scale)), draw.t, draw.eps, s);
    auto loss = mse(d.predict(zt, draw.t, tok), constant(draw.eps));
    const double l = loss->value.item();
    if (!std::isfinite(l)) throw DivergenceError("denoiser training", step);
    d.graph.zero_grad();
    backward(loss);
    opt.step();
    curve.push_back(l);
  }
  d.graph.zero_grad();
  return curve;
}

/// Fine-tunes a copy of `base` on latents that all share one concept token.
template <class T>
Denoiser<T> finetune(const Denoiser<T>& base, const Tensor<T>& latents, std::size_t token, const NoiseSchedule& s,
                     const FinetuneHParams& hp, std::vector<double>* curve = nullptr) {
  Denoiser<T> d = base;
  auto c = train_denoiser(d, latents, std::vector<std::size_t>(latents.dim(0), token), s, hp);
  if (curve) *curve = std::move(c);
  return d;
}

/// DDPM ancestral sampling with posterior variance β̃_t. Draw order: z_T
/// first, then one ξ per step for t = T..2. Returns raw (unscaled) latents.
template <class T>
Tensor<T> sample(const EpsPredictor<T>& eps_fn, const Shape& shape, std::size_t token, const NoiseSchedule& s, Rng& rng,
                 double latent_scale = 1.0) {
  Tensor<T> z = Tensor<T>::randn(shape, rng);
  const std::vector<std::size_t> tokens(shape[0], token);
  for (std::size_t t = s.steps(); t >= 1; --t) {
    const Tensor<T> eps = eps_fn(constant(z), std::vector<std::size_t>(shape[0], t), tokens)->value;
    const double a = s.alpha(t), ab = s.alpha_bar(t), b = s.beta(t);
    const double coef = b / std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] = T((z[i] - coef * eps[i]) / std::sqrt(a));
    if (t > 1) {
      const double var = (1.0 - s.alpha_bar(t - 1)) / (1.0 - ab) * b;
      const Tensor<T> xi = Tensor<T>::randn(shape, rng);
      for (std::size_t i = 0; i < z.numel(); ++i) z[i] = T(z[i] + std::sqrt(var) * xi[i]);
    }
  }
  return z * T(1.0 / latent_scale);
}

template <class T>
Tensor<T> sample(const Denoiser<T>& d, std::size_t n, std::size_t token, const NoiseSchedule& s, Rng& rng) {
  return sample<T>(d.predictor(), d.cfg.latent_shape(n), token, s, rng, d.cfg.latent_scale);
}

/// 1 / std of a latent set; maps latents to roughly unit variance.
template <class T>
double latent_scale_for(const Tensor<T>& latents) {
  const double m = mean_value(latents);
  double v = 0.0;
  for (auto x : latents.vec()) v += (x - m) * (x - m);
  v /= double(latents.numel());
  return v > 0.0 ? 1.0 / std::sqrt(v) : 1.0;
}

}  // namespace catw
