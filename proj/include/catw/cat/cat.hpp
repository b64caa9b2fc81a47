#pragma once

// Low-rank adapters on the autoencoder trained to reconstruct protected
// images, plus the Gaussian-filter purification baseline.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "catw/attacks/pgd.hpp"

namespace catw {

enum class CatSetting { both, encoder_only, decoder_only };

inline std::string setting_name(CatSetting s) {
  switch (s) {
    case CatSetting::both: return "both";
    case CatSetting::encoder_only: return "encoder_only";
    case CatSetting::decoder_only: return "decoder_only";
  }
  return "?";
}

inline CatSetting parse_setting(const std::string& s) {
  for (auto v : {CatSetting::both, CatSetting::encoder_only, CatSetting::decoder_only})
    if (setting_name(v) == s) return v;
  throw ConfigError("unknown CAT setting " + s);
}

inline std::size_t default_rank(CatSetting s) { return s == CatSetting::both ? 128 : 256; }

struct AdapterPlacement {
  CatSetting setting = CatSetting::both;
  std::size_t rank = 128;
  std::vector<std::string> targets;
};

/// Every convolution and attention host weight in the selected halves.
template <class T>
AdapterPlacement resolve_placement(const ModelGraph<T>& g, CatSetting setting, std::size_t rank = 0) {
  AdapterPlacement p{setting, rank ? rank : default_rank(setting), {}};
  for (const auto& layer : g.layers()) {
    const bool enc = is_encoder_layer(layer.name), dec = is_decoder_layer(layer.name);
    const bool take = (setting != CatSetting::decoder_only && enc) || (setting != CatSetting::encoder_only && dec);
    if (take) p.targets.insert(p.targets.end(), layer.hosts.begin(), layer.hosts.end());
  }
  return p;
}

struct AttachReport {
  std::size_t adapters = 0;
  std::size_t parameters = 0;
  // Requested ranks are clamped to min(d, k) per host.
  std::map<std::string, std::size_t> effective_rank;
};

/// Freezes the base and attaches one zero-initialized adapter per target.
template <class T>
AttachReport attach_adapters(ModelGraph<T>& g, const AdapterPlacement& p, Rng& rng, double init_std = 0.01) {
  if (p.rank == 0) throw ConfigError("CAT adapter rank must be positive");
  for (const auto& host : p.targets) {
    if (!g.has_param(host)) throw ConfigError("placement target " + host + " does not resolve");
    if (g.adapters().count(host)) throw ConfigError("adapter already attached to " + host);
  }
  g.freeze_all();
  AttachReport rep;
  for (const auto& host : p.targets) {
    auto [d, k] = g.param(host).matrix_dims();
    const std::size_t r = std::min({p.rank, d, k});
    auto& a = g.attach_adapter(host, r, rng, init_std);
    rep.effective_rank[host] = r;
    rep.parameters += a.down.value().numel() + a.up.value().numel();
    ++rep.adapters;
  }
  return rep;
}

/// mean ‖D(E(x_a)) − x_a‖².
template <class T>
Var<T> cat_loss(const AutoencoderFns<T>& ae, const Tensor<T>& x_a) {
  auto x = constant(x_a);
  return mse(ae.decode(ae.encode(x)), x);
}

template <class T>
Var<T> cat_loss(const Autoencoder<T>& ae, const Tensor<T>& x_a) {
  return cat_loss(AutoencoderFns<T>::of(ae), x_a);
}

struct CatHParams {
  std::size_t batch = 4;
  double lr = 1e-4;
  std::size_t steps = 1000;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void validate() const {
    if (batch == 0 || !(lr > 0) || !(beta1 > 0) || !(beta2 > 0) || !(eps > 0))
      throw ConfigError("CAT hyperparameters must be positive");
  }
};

struct CatTrainResult {
  std::vector<double> loss_curve;
  double initial_loss = 0.0;  // over the whole protected set
  double final_loss = 0.0;
};

/// Full-set CAT loss evaluated in chunks.
template <class T>
double cat_loss_value(const Autoencoder<T>& ae, const Tensor<T>& x_a) {
  return reconstruction_mse(ae, x_a);
}

/// Adapter-only training on the protected set. Adam moments start fresh.
template <class T>
CatTrainResult train_cat(Autoencoder<T>& ae, const Tensor<T>& protected_set, const CatHParams& hp, std::uint64_t seed) {
  hp.validate();
  if (ae.graph.adapters().empty()) throw ContractError("train_cat: no adapters attached");
  if (protected_set.empty() || protected_set.dim(0) == 0) throw ContractError("train_cat: empty protected set");
  CatTrainResult res;
  res.initial_loss = cat_loss_value(ae, protected_set);
  if (hp.steps > 0) {
    Adam<T> opt(ae.graph.trainable_params(), AdamConfig{hp.lr, hp.beta1, hp.beta2, hp.eps});
    BatchSampler sampler(protected_set.dim(0), seed);
    for (std::size_t step = 0; step < hp.steps; ++step) {
      auto loss = cat_loss(ae, gather_batch(protected_set, sampler.next(hp.batch)));
      const double l = loss->value.item();
      if (!std::isfinite(l)) throw DivergenceError("CAT training", step);
      ae.graph.zero_grad();
      backward(loss);
      opt.step();
      res.loss_curve.push_back(l);
    }
    ae.graph.zero_grad();
  }
  res.final_loss = hp.steps > 0 ? cat_loss_value(ae, protected_set) : res.initial_loss;
  return res;
}

template <class T>
void detach(Autoencoder<T>& ae) {
  ae.graph.detach_adapters();
}

template <class T>
Autoencoder<T> merge(const Autoencoder<T>& ae) {
  Autoencoder<T> out;
  out.cfg = ae.cfg;
  out.graph = ae.graph.merged_copy();
  return out;
}

/// Normalized ksize×ksize Gaussian, row-major.
inline std::vector<double> gaussian_kernel(std::size_t ksize, double sigma) {
  if (ksize == 0 || ksize % 2 == 0) throw ConfigError("Gaussian kernel size must be odd, got " + std::to_string(ksize));
  if (!(sigma > 0.0)) throw ConfigError("Gaussian sigma must be positive");
  const long r = long(ksize / 2);
  std::vector<double> k(ksize * ksize);
  double z = 0.0;
  for (long dy = -r; dy <= r; ++dy)
    for (long dx = -r; dx <= r; ++dx) z += k[(dy + r) * ksize + (dx + r)] = std::exp(-double(dx * dx + dy * dy) / (2 * sigma * sigma));
  for (auto& v : k) v /= z;
  return k;
}

/// Mirror index without repeating the edge sample (…c b | a b c … | b a…).
inline long reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

/// Per-channel Gaussian blur with reflect padding; NCHW in [0, 1].
template <class T>
Tensor<T> gaussian_purify(const Tensor<T>& x, std::size_t ksize = 5, double sigma = 1.0) {
  const auto k = gaussian_kernel(ksize, sigma);
  if (x.rank() != 4) throw ContractError("gaussian_purify expects NCHW, got " + shape_str(x.shape()));
  const long N = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3)), r = long(ksize / 2);
  Tensor<T> out(x.shape());
  for (long n = 0; n < N; ++n)
    for (long c = 0; c < C; ++c) {
      const T* src = x.data() + (n * C + c) * H * W;
      T* dst = out.data() + (n * C + c) * H * W;
      for (long h = 0; h < H; ++h)
        for (long w = 0; w < W; ++w) {
          double acc = 0.0;
          for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx)
              acc += k[(dy + r) * long(ksize) + (dx + r)] * src[reflect_index(h + dy, H) * W + reflect_index(w + dx, W)];
          dst[h * W + w] = T(std::clamp(acc, 0.0, 1.0));
        }
    }
  return out;
}

}  // namespace catw
