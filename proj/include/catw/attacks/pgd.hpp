#pragma once

// L∞ projected sign-gradient attacks against the latent autoencoder and the
// latent denoiser, and the equal-budget Gaussian-noise baseline.

#include <cmath>
#include <functional>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "catw/diffusion/ddpm.hpp"

namespace catw {

enum class Objective { encoder_away, encoder_target, recon, denoise_ascent, denoise_descent, joint, sds_ascent, sds_descent };

inline const std::vector<Objective>& all_objectives() {
  static const std::vector<Objective> v{Objective::encoder_away,   Objective::encoder_target, Objective::recon,
                                        Objective::denoise_ascent, Objective::denoise_descent, Objective::joint,
                                        Objective::sds_ascent,     Objective::sds_descent};
  return v;
}

inline std::string objective_name(Objective o) {
  switch (o) {
    case Objective::encoder_away: return "encoder_away";
    case Objective::encoder_target: return "encoder_target";
    case Objective::recon: return "recon";
    case Objective::denoise_ascent: return "denoise_ascent";
    case Objective::denoise_descent: return "denoise_descent";
    case Objective::joint: return "joint";
    case Objective::sds_ascent: return "sds_ascent";
    case Objective::sds_descent: return "sds_descent";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  for (auto o : all_objectives())
    if (objective_name(o) == s) return o;
  throw ConfigError("unknown attack objective " + s);
}

/// Published protection methods each objective family stands in for.
inline nlohmann::json method_mapping() {
  return {{"AdvDM(+)", "denoise_ascent"},
          {"AdvDM(-)", "denoise_descent"},
          {"Mist", "joint"},
          {"Glaze", "encoder_target"},
          {"Photoguard", "recon"},
          {"SDS(+)", "sds_ascent"},
          {"SDS(-)", "sds_descent"},
          {"SDST", "sds_descent"},
          {"encoder-away (Glaze untargeted)", "encoder_away"},
          {"Anti-DreamBooth", "not replicated"},
          {"MetaCloak", "not replicated"}};
}

inline bool is_ascent(Objective o) {
  return o == Objective::encoder_away || o == Objective::recon || o == Objective::denoise_ascent || o == Objective::joint ||
         o == Objective::sds_ascent;
}
inline bool needs_diffusion(Objective o) {
  return o == Objective::denoise_ascent || o == Objective::denoise_descent || o == Objective::joint ||
         o == Objective::sds_ascent || o == Objective::sds_descent;
}

struct AttackConfig {
  Objective objective = Objective::encoder_away;
  double budget = 16.0 / 255.0;
  std::size_t steps = 40;
  double step_size = 0.0;  // 0 selects budget / 8
  bool random_start = false;
  double weight_encoder = 1.0;  // joint objective
  double weight_denoise = 1.0;
  std::size_t token = 0;            // concept token for denoise terms
  std::size_t draws_per_step = 1;   // Monte-Carlo (t, ε) draws per PGD step
  std::optional<Tensor<float>> target_latent;

  double alpha() const { return step_size > 0.0 ? step_size : budget / 8.0; }
  void validate() const {
    if (!(budget >= 0.0 && budget <= 1.0)) throw ConfigError("attack budget must lie in [0, 1]");
    if (steps > 0 && !(alpha() > 0.0)) throw ConfigError("attack step size must be positive");
    if (objective == Objective::encoder_target && !target_latent)
      throw ConfigError("encoder_target objective requires a target latent");
    if (draws_per_step == 0) throw ConfigError("draws_per_step must be positive");
  }
};

template <class T>
struct ProtectedSample {
  Tensor<T> clean;
  Tensor<T> protected_image;
  std::string objective;
  double achieved_budget = 0.0;
};

/// Encoder/decoder as plain differentiable functions, so objectives also
/// work against stubs.
template <class T>
struct AutoencoderFns {
  std::function<Var<T>(const Var<T>&)> encode;
  std::function<Var<T>(const Var<T>&)> decode;

  static AutoencoderFns of(const Autoencoder<T>& ae) {
    return {[&ae](const Var<T>& x) { return ae.encode(x); }, [&ae](const Var<T>& z) { return ae.decode(z); }};
  }
};

/// Denoiser side of an attack: predictor, schedule, latent scale.
template <class T>
struct DiffusionFns {
  EpsPredictor<T> eps;
  NoiseSchedule schedule;
  double latent_scale = 1.0;

  static DiffusionFns of(const Denoiser<T>& d, const NoiseSchedule& s) { return {d.predictor(), s, d.cfg.latent_scale}; }
};

// ---------------------------------------------------------------------------
// Objectives (mean-reduced).

/// mean (E(x) − E(x_c))², maximized.
template <class T>
Var<T> objective_encoder_away(const Var<T>& x, const Tensor<T>& clean_latent, const AutoencoderFns<T>& ae) {
  return mse(ae.encode(x), constant(clean_latent));
}

/// mean (E(x) − z_tgt)², minimized.
template <class T>
Var<T> objective_encoder_target(const Var<T>& x, const Tensor<T>& target_latent, const AutoencoderFns<T>& ae) {
  return mse(ae.encode(x), constant(target_latent));
}

/// mean (D(E(x)) − x_c)², maximized.
template <class T>
Var<T> objective_recon(const Var<T>& x, const Tensor<T>& clean, const AutoencoderFns<T>& ae) {
  return mse(ae.decode(ae.encode(x)), constant(clean));
}

/// Denoising loss at E(x) for one fixed (t, ε) draw.
template <class T>
Var<T> objective_denoise(const Var<T>& x, const AutoencoderFns<T>& ae, const DiffusionFns<T>& dm, std::size_t token,
                         const NoiseDraw<T>& draw) {
  return denoise_loss<T>(dm.eps, ae.encode(x), token, dm.schedule, draw, dm.latent_scale);
}

/// w_enc · encoder_away + w_den · denoise.
template <class T>
Var<T> objective_joint(const Var<T>& x, const Tensor<T>& clean_latent, double w_enc, double w_den,
                       const AutoencoderFns<T>& ae, const DiffusionFns<T>& dm, std::size_t token, const NoiseDraw<T>& draw) {
  auto a = objective_encoder_away(x, clean_latent, ae);
  auto b = objective_denoise(x, ae, dm, token, draw);
  return add(scale(a, T(w_enc)), scale(b, T(w_den)));
}

/// Score-distillation gradient: (ε̂(z_t, t) − ε) treated as the gradient at
/// z = E(x) and pulled back through the encoder only. The denoiser is
/// evaluated on a constant input, so no gradient flows into it.
template <class T>
Tensor<T> sds_gradient(const Var<T>& x, const AutoencoderFns<T>& ae, const DiffusionFns<T>& dm, std::size_t token,
                       const NoiseDraw<T>& draw) {
  x->grad = Tensor<T>();
  auto z = ae.encode(x);
  auto zs = scale(constant(z->value), T(dm.latent_scale));
  auto zt = q_sample(zs, draw.t, draw.eps, dm.schedule);
  std::vector<std::size_t> tokens(z->value.dim(0), token);
  Tensor<T> grad_z = dm.eps(constant(zt->value), draw.t, tokens)->value - draw.eps;
  backward(dot_constant(z, grad_z));
  Tensor<T> g = x->grad.empty() ? Tensor<T>(x->value.shape()) : x->grad;
  x->grad = Tensor<T>();
  return g;
}

// ---------------------------------------------------------------------------
// Engine.

/// Gradient (not necessarily of a real function) at the current iterate.
template <class T>
using GradientOracle = std::function<Tensor<T>(const Tensor<T>& x, std::size_t step)>;

/// x ← clip_{x_c,δ}(clamp01(x ± α·sign(g))). Returns the final iterate.
template <class T>
Tensor<T> pgd(const Tensor<T>& clean, const GradientOracle<T>& grad, bool ascent, double budget, std::size_t steps,
              double alpha, bool random_start, Rng& rng) {
  Tensor<T> x = clean;
  auto project = [&](Tensor<T>& v) {
    for (std::size_t i = 0; i < v.numel(); ++i) {
      const double lo = std::max(0.0, double(clean[i]) - budget), hi = std::min(1.0, double(clean[i]) + budget);
      v[i] = T(std::clamp(double(v[i]), lo, hi));
    }
  };
  if (budget == 0.0) return x;
  if (random_start) {
    std::uniform_real_distribution<double> u(-budget, budget);
    for (auto& v : x.vec()) v = T(v + u(rng));
    project(x);
  }
  const double dir = ascent ? 1.0 : -1.0;
  for (std::size_t step = 0; step < steps; ++step) {
    const Tensor<T> g = grad(x, step);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double sg = g[i] > 0 ? 1.0 : g[i] < 0 ? -1.0 : 0.0;
      x[i] = T(double(x[i]) + dir * alpha * sg);
    }
    project(x);
  }
  return x;
}

template <class T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
  return max_abs_diff(a, b);
}

/// The configured target latent, repeated over the batch when a single
/// target is given.
template <class T>
Tensor<T> batch_target(const AttackConfig& cfg, const Shape& latent_shape) {
  Tensor<T> target = cfg.target_latent->template cast<T>();
  if (target.shape() == latent_shape) return target;
  const std::size_t per = shape_numel(latent_shape) / latent_shape[0];
  if (target.numel() != per)
    throw ConfigError("target latent shape " + shape_str(target.shape()) + " does not fit latents " + shape_str(latent_shape));
  Shape one = latent_shape;
  one[0] = 1;
  return stack0(std::vector<Tensor<T>>(latent_shape[0], target.reshaped(one)));
}

/// Value of the configured objective at x (for logging and the monotone
/// ascent check). Denoise terms use the given draw.
template <class T>
double objective_value(const Tensor<T>& x, const Tensor<T>& clean, const AttackConfig& cfg, const AutoencoderFns<T>& ae,
                       const DiffusionFns<T>* dm, const NoiseDraw<T>* draw) {
  auto xv = constant(x);
  const Tensor<T> zc = ae.encode(constant(clean))->value;
  switch (cfg.objective) {
    case Objective::encoder_away: return objective_encoder_away(xv, zc, ae)->value.item();
    case Objective::encoder_target: return objective_encoder_target(xv, batch_target<T>(cfg, zc.shape()), ae)->value.item();
    case Objective::recon: return objective_recon(xv, clean, ae)->value.item();
    case Objective::joint:
      return objective_joint(xv, zc, cfg.weight_encoder, cfg.weight_denoise, ae, *dm, cfg.token, *draw)->value.item();
    default: return objective_denoise(xv, ae, *dm, cfg.token, *draw)->value.item();
  }
}

/// Runs the configured attack on a batch of clean images.
template <class T>
ProtectedSample<T> pgd_attack(const Tensor<T>& clean, const AutoencoderFns<T>& ae, const DiffusionFns<T>* dm,
                              const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  if (needs_diffusion(cfg.objective) && !dm)
    throw ConfigError("objective " + objective_name(cfg.objective) + " needs a diffusion model");
  if (!ae.encode || (cfg.objective == Objective::recon && !ae.decode))
    throw ConfigError("objective " + objective_name(cfg.objective) + " needs an autoencoder");
  for (auto v : clean.vec())
    if (!(v >= 0 && v <= 1)) throw ContractError("pgd_attack: clean image outside [0, 1]");

  const Tensor<T> clean_latent = ae.encode(constant(clean))->value;
  Tensor<T> target;
  if (cfg.objective == Objective::encoder_target) target = batch_target<T>(cfg, clean_latent.shape());

  GradientOracle<T> oracle = [&](const Tensor<T>& x, std::size_t) -> Tensor<T> {
    auto xv = leaf(x, true);
    Tensor<T> g(x.shape());
    auto accumulate = [&](const Var<T>& loss) {
      xv->grad = Tensor<T>();
      backward(loss);
      if (!xv->grad.empty()) g += xv->grad;
    };
    switch (cfg.objective) {
      case Objective::encoder_away:
        accumulate(objective_encoder_away(xv, clean_latent, ae));
        // x_c is a stationary point of this objective, so the first step
        // would stall; any latent direction ascends, so probe a random one.
        if (std::all_of(g.vec().begin(), g.vec().end(), [](T v) { return v == T(0); }))
          accumulate(dot_constant(ae.encode(xv), Tensor<T>::randn(clean_latent.shape(), rng)));
        break;
      case Objective::encoder_target: accumulate(objective_encoder_target(xv, target, ae)); break;
      case Objective::recon: accumulate(objective_recon(xv, clean, ae)); break;
      case Objective::denoise_ascent:
      case Objective::denoise_descent:
        for (std::size_t k = 0; k < cfg.draws_per_step; ++k)
          accumulate(objective_denoise(xv, ae, *dm, cfg.token, draw_noise<T>(clean_latent.shape(), dm->schedule, rng)));
        break;
      case Objective::joint:
        for (std::size_t k = 0; k < cfg.draws_per_step; ++k)
          accumulate(objective_joint(xv, clean_latent, cfg.weight_encoder, cfg.weight_denoise, ae, *dm, cfg.token,
                                     draw_noise<T>(clean_latent.shape(), dm->schedule, rng)));
        break;
      case Objective::sds_ascent:
      case Objective::sds_descent:
        for (std::size_t k = 0; k < cfg.draws_per_step; ++k)
          g += sds_gradient(xv, ae, *dm, cfg.token, draw_noise<T>(clean_latent.shape(), dm->schedule, rng));
        break;
    }
    return g;
  };

  ProtectedSample<T> out;
  out.clean = clean;
  out.objective = objective_name(cfg.objective);
  out.protected_image = pgd(clean, oracle, is_ascent(cfg.objective), cfg.budget, cfg.steps, cfg.alpha(), cfg.random_start, rng);
  out.achieved_budget = linf_distance(out.protected_image, clean);
  return out;
}

/// x_r = clamp01(x_c + clip(r, −δ, δ)), r ~ N(0, δ²).
template <class T>
Tensor<T> make_noisy_baseline(const Tensor<T>& clean, double budget, Rng& rng) {
  if (budget < 0.0) throw ConfigError("noise budget must be non-negative");
  Tensor<T> out = clean;
  if (budget == 0.0) return out;
  std::normal_distribution<double> nd(0.0, budget);
  for (auto& v : out.vec()) v = T(std::clamp(double(v) + std::clamp(nd(rng), -budget, budget), 0.0, 1.0));
  return out;
}

}  // namespace catw
