#pragma once

// Miniature deterministic latent autoencoder: stride-2 convolutional encoder
// with bottleneck attention, mirrored nearest-upsampling decoder, logistic
// output squashing.

#include <cmath>
#include <json.hpp>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "catw/nn/adam.hpp"
#include "catw/nn/checkpoint.hpp"
#include "catw/nn/layers.hpp"

namespace catw {

struct AutoencoderConfig {
  std::size_t image_size = 32;
  std::size_t in_channels = 3;
  std::size_t base_channels = 32;
  std::size_t latent_channels = 4;
  std::size_t downsample_factor = 4;
  bool attention_at_bottleneck = true;

  std::size_t stages() const { return std::size_t(std::lround(std::log2(double(downsample_factor)))); }
  std::size_t latent_size() const { return image_size / downsample_factor; }
  std::size_t bottleneck_channels() const { return 2 * base_channels; }
  Shape image_shape(std::size_t n) const { return {n, in_channels, image_size, image_size}; }
  Shape latent_shape(std::size_t n) const { return {n, latent_channels, latent_size(), latent_size()}; }

  void validate() const {
    if (image_size == 0 || in_channels == 0 || base_channels == 0 || latent_channels == 0)
      throw ConfigError("autoencoder sizes must be positive");
    if (downsample_factor < 2 || (downsample_factor & (downsample_factor - 1)) != 0)
      throw ConfigError("downsample_factor must be a power of two ≥ 2");
    if (image_size % downsample_factor != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by downsample_factor " +
                        std::to_string(downsample_factor));
  }

  friend bool operator==(const AutoencoderConfig&, const AutoencoderConfig&) = default;
};

inline void to_json(nlohmann::json& j, const AutoencoderConfig& c) {
  j = {{"image_size", c.image_size},         {"in_channels", c.in_channels},
       {"base_channels", c.base_channels},   {"latent_channels", c.latent_channels},
       {"downsample_factor", c.downsample_factor}, {"attention_at_bottleneck", c.attention_at_bottleneck}};
}
inline void from_json(const nlohmann::json& j, AutoencoderConfig& c) {
  c.image_size = j.at("image_size");
  c.in_channels = j.at("in_channels");
  c.base_channels = j.at("base_channels");
  c.latent_channels = j.at("latent_channels");
  c.downsample_factor = j.at("downsample_factor");
  c.attention_at_bottleneck = j.at("attention_at_bottleneck");
}

template <class T>
struct Autoencoder {
  AutoencoderConfig cfg;
  ModelGraph<T> graph;

  static Autoencoder create(const AutoencoderConfig& cfg, Rng& rng) {
    cfg.validate();
    Autoencoder ae{cfg, {}};
    auto& g = ae.graph;
    const std::size_t C = cfg.base_channels, C2 = cfg.bottleneck_channels(), n = cfg.stages();

    add_conv_layer(g, "encoder.conv_in", cfg.in_channels, C, 3, rng);
    std::size_t ch = C;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t out = (i + 1 == n) ? C2 : C;
      add_conv_layer(g, "encoder.down" + std::to_string(i + 1), ch, out, 3, rng);
      if (i + 1 < n) add_residual_block(g, "encoder.res" + std::to_string(i + 1), out, rng);
      ch = out;
    }
    if (cfg.attention_at_bottleneck) add_attention_layer(g, "encoder.attn", C2, rng);
    add_conv_layer(g, "encoder.conv_out", C2, cfg.latent_channels, 3, rng);

    add_conv_layer(g, "decoder.conv_in", cfg.latent_channels, C2, 3, rng);
    if (cfg.attention_at_bottleneck) add_attention_layer(g, "decoder.attn", C2, rng);
    ch = C2;
    for (std::size_t i = 0; i < n; ++i) {
      add_conv_layer(g, "decoder.up" + std::to_string(i + 1), ch, C, 3, rng);
      if (i == 0) add_residual_block(g, "decoder.res1", C, rng);
      ch = C;
    }
    add_conv_layer(g, "decoder.conv_out", C, cfg.in_channels, 3, rng);
    return ae;
  }

  void check_image(const Tensor<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size)
      throw ContractError("autoencoder expects images N×" + std::to_string(cfg.in_channels) + "×" +
                          std::to_string(cfg.image_size) + "×" + std::to_string(cfg.image_size) + ", got " + shape_str(s));
  }
  void check_latent(const Tensor<T>& z) const {
    const auto& s = z.shape();
    if (s.size() != 4 || s[1] != cfg.latent_channels || s[2] != cfg.latent_size() || s[3] != cfg.latent_size())
      throw ContractError("decoder expects latents " + shape_str(cfg.latent_shape(s.empty() ? 1 : s[0])) + ", got " +
                          shape_str(s));
  }

  Var<T> encode(const Var<T>& x) const {
    check_image(x->value);
    const auto& g = graph;
    auto h = g.conv(x, "encoder.conv_in");
    for (std::size_t i = 0; i < cfg.stages(); ++i) {
      h = g.conv(silu(h), "encoder.down" + std::to_string(i + 1), 2);
      if (i + 1 < cfg.stages()) h = residual_block(g, h, "encoder.res" + std::to_string(i + 1));
    }
    if (cfg.attention_at_bottleneck) h = attention_block(g, h, "encoder.attn");
    return g.conv(silu(h), "encoder.conv_out");
  }

  Var<T> decode(const Var<T>& z) const {
    check_latent(z->value);
    const auto& g = graph;
    auto h = g.conv(z, "decoder.conv_in");
    if (cfg.attention_at_bottleneck) h = attention_block(g, h, "decoder.attn");
    for (std::size_t i = 0; i < cfg.stages(); ++i) {
      h = g.conv(upsample2x(silu(h)), "decoder.up" + std::to_string(i + 1));
      if (i == 0) h = residual_block(g, h, "decoder.res1");
    }
    return sigmoid(g.conv(silu(h), "decoder.conv_out"));
  }

  Tensor<T> encode(const Tensor<T>& x) const { return encode(constant(x))->value; }
  Tensor<T> decode(const Tensor<T>& z) const { return decode(constant(z))->value; }
  Tensor<T> reconstruct(const Tensor<T>& x) const { return decode(encode(constant(x)))->value; }

  void save(const std::filesystem::path& path, CheckpointSections sections = CheckpointSections::all) const {
    save_checkpoint(graph, path, nlohmann::json{{"kind", "autoencoder"}, {"config", cfg}}, sections);
  }
  static Autoencoder load(const std::filesystem::path& path) {
    auto ck = load_checkpoint<T>(path);
    if (ck.meta.value("kind", "") != "autoencoder") throw LoadError(path.string() + " is not an autoencoder checkpoint");
    Autoencoder ae;
    ae.cfg = ck.meta.at("config").template get<AutoencoderConfig>();
    ae.graph = std::move(ck.graph);
    return ae;
  }
};

/// Base-graph layer names that belong to the encoder or the decoder half.
inline bool is_encoder_layer(const std::string& name) { return name.rfind("encoder.", 0) == 0; }
inline bool is_decoder_layer(const std::string& name) { return name.rfind("decoder.", 0) == 0; }

struct TrainHParams {
  double lr = 1e-3;
  std::size_t batch = 8;
  std::size_t steps = 3000;
  std::uint64_t seed = 0;
  // half-cosine anneal from lr down to lr/10
  bool cosine_decay = true;
};

template <class T>
struct AutoencoderTrainResult {
  Autoencoder<T> model;
  std::vector<double> loss_curve;
};

/// Draws minibatch indices by reshuffling the corpus each epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    if (n == 0) throw ContractError("cannot sample batches from an empty set");
    reshuffle();
  }
  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

template <class T>
Tensor<T> gather_batch(const Tensor<T>& set, const std::vector<std::size_t>& idx) {
  Shape s = set.shape();
  const std::size_t per = set.numel() / s[0];
  s[0] = idx.size();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(set.data() + idx[i] * per, per, out.data() + i * per);
  return out;
}

/// Plain pixel-MSE reconstruction training from a seeded initialization.
template <class T>
AutoencoderTrainResult<T> train_autoencoder(const Tensor<T>& corpus, const AutoencoderConfig& cfg, const TrainHParams& hp) {
  if (corpus.empty() || corpus.dim(0) == 0) throw ContractError("train_autoencoder: empty corpus");
  Rng init(hp.seed);
  AutoencoderTrainResult<T> res{Autoencoder<T>::create(cfg, init), {}};
  res.model.check_image(corpus.slice0(0, 1));
  if (hp.steps == 0) return res;
  Adam<T> opt(res.model.graph.trainable_params(), AdamConfig{hp.lr});
  BatchSampler sampler(corpus.dim(0), hp.seed + 1);
  for (std::size_t step = 0; step < hp.steps; ++step) {
    if (hp.cosine_decay) opt.set_lr(hp.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * double(step) / double(hp.steps)))));
    auto x = constant(gather_batch(corpus, sampler.next(hp.batch)));
    auto loss = mse(res.model.decode(res.model.encode(x)), x);
    const double l = loss->value.item();
    if (!std::isfinite(l)) throw DivergenceError("autoencoder training", step);
    res.model.graph.zero_grad();
    backward(loss);
    opt.step();
    res.loss_curve.push_back(l);
  }
  res.model.graph.zero_grad();
  return res;
}

/// Mean per-image reconstruction MSE, evaluated in chunks.
template <class T>
double reconstruction_mse(const Autoencoder<T>& ae, const Tensor<T>& images, std::size_t chunk = 16) {
  double acc = 0.0;
  for (std::size_t b = 0; b < images.dim(0); b += chunk) {
    auto x = images.slice0(b, std::min(images.dim(0), b + chunk));
    auto r = ae.reconstruct(x);
    for (std::size_t i = 0; i < x.numel(); ++i) acc += (double(r[i]) - x[i]) * (double(r[i]) - x[i]);
  }
  return acc / double(images.numel());
}

}  // namespace catw
