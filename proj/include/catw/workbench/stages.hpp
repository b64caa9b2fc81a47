#pragma once

// Pipeline stage bodies. Each stage reads through StageIO and writes only
// into its own output directory.

#include <functional>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "catw/cat/cat.hpp"
#include "catw/diffusion/ddpm.hpp"
#include "catw/metrics/report.hpp"
#include "catw/workbench/config.hpp"
#include "catw/workbench/corpus_io.hpp"
#include "catw/workbench/stage_io.hpp"

namespace catw {

struct StageContext {
  const WorkbenchConfig& cfg;
  fs::path run_dir;
  fs::path out;              // this stage's output directory
  std::uint64_t seed = 0;    // stage seed
  StageIO& io;
  std::ostream& log;
  std::function<bool(const std::string&)> available;         // optional upstream stage is current
  std::function<std::string(const std::string&)> digest_of;  // expected digest of a stage
  std::string config_digest;

  fs::path dir(const std::string& rel) const { return run_dir / rel; }
};

/// Pilot-derived acceptance thresholds, recorded with every run.
inline ojson pilot_thresholds() {
  return ojson{{"ae_train_psnr_min", 25.0},      {"ae_final_mse_max", 0.005},      {"encoder_distortion_ratio_min", 1.5},
               {"cat_reduction_target", 0.25},   {"cat_loss_ratio_max", 0.5},      {"memorization_s_c_max", 0.05},
               {"memorization_loss_max", 0.05},  {"learnability_margin", 0.5}};
}

inline std::string environment_note() {
  return std::string("catw header-only build; compiler ") + __VERSION__ + "; single-threaded f32";
}

// ---------------------------------------------------------------------------
// Shared helpers.

inline std::vector<std::string> objective_names(const WorkbenchConfig& c) {
  std::vector<std::string> out;
  auto add = [&](const std::string& n) {
    if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
  };
  for (const auto& o : c.attack.objectives) {
    if (o == "all")
      for (auto x : all_objectives()) add(objective_name(x));
    else
      add(objective_name(parse_objective(o)));
  }
  return out;
}

inline std::vector<CatSetting> cat_settings(const WorkbenchConfig& c) {
  std::vector<CatSetting> out;
  for (const auto& s : c.cat.settings) out.push_back(parse_setting(s));
  return out;
}

inline std::size_t cat_rank(const WorkbenchConfig& c, CatSetting s) {
  return s == CatSetting::both ? c.cat.rank_both : c.cat.rank_single;
}

inline NoiseSchedule make_schedule(const WorkbenchConfig& c) {
  return make_linear_schedule(c.diffusion.T, c.diffusion.beta_start, c.diffusion.beta_end);
}

inline std::size_t protected_identities(const WorkbenchConfig& c, const Corpus& corpus) {
  const std::size_t P = c.protect_identities, n = corpus.identity_count();
  if (P == 0 || P >= n)
    throw ConfigError("corpus.protect_identities = " + std::to_string(P) + " must lie in [1, " + std::to_string(n - 1) +
                      "] for a corpus with " + std::to_string(n) + " identities");
  return P;
}

/// Indices of the images the owner protects: the protect_target split of the
/// first P identities.
inline std::vector<std::size_t> protected_targets(const Corpus& c, std::size_t P) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.items.size(); ++i)
    if (c.items[i].identity < P && c.items[i].split == Split::protect_target) out.push_back(i);
  if (out.empty()) throw ConfigError("corpus has no protect_target images for the protected identities");
  return out;
}

/// Clean reference images (reference and extra_reference) of identities in [lo, hi).
inline std::vector<std::size_t> reference_images(const Corpus& c, std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.items.size(); ++i)
    if (c.items[i].identity >= lo && c.items[i].identity < hi && c.items[i].split != Split::protect_target) out.push_back(i);
  return out;
}

/// Unconditioned concept token (one past the last identity token).
inline std::size_t concept_token(const Corpus& c) { return c.identity_count(); }

inline Corpus load_corpus(StageContext& ctx, const std::string& rel = "corpus") {
  return read_corpus(ctx.dir(rel), ctx.io.reader());
}

inline Autoencoder<float> load_ae(StageContext& ctx) {
  return Autoencoder<float>::load(ctx.io.open(ctx.dir("ae") / "ae.ckpt"));
}

inline Denoiser<float> load_denoiser(StageContext& ctx) {
  return Denoiser<float>::load(ctx.io.open(ctx.dir("ldm") / "denoiser.ckpt"));
}

inline Autoencoder<float> with_adapters(StageContext& ctx, const Autoencoder<float>& base, const fs::path& ckpt) {
  Autoencoder<float> ae = base;
  load_adapters_into(ae.graph, ctx.io.open(ckpt));
  return ae;
}

inline nlohmann::json read_json(StageContext& ctx, const fs::path& p) { return nlohmann::json::parse(ctx.io.read(p)); }

inline void write_json(const fs::path& p, const nlohmann::json& j) { detail::write_file_atomic(p, j.dump(1) + "\n"); }

/// Means over consecutive windows of a loss curve.
inline std::vector<double> window_means(const std::vector<double>& curve, std::size_t w) {
  std::vector<double> out;
  for (std::size_t i = 0; i + w <= curve.size(); i += w)
    out.push_back(std::accumulate(curve.begin() + long(i), curve.begin() + long(i + w), 0.0) / double(w));
  return out;
}

inline double tail_mean(const std::vector<double>& curve, std::size_t w) {
  if (curve.empty()) return NAN;
  const std::size_t n = std::min(w, curve.size());
  return std::accumulate(curve.end() - long(n), curve.end(), 0.0) / double(n);
}

template <class T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat0 of nothing");
  Shape s = parts.front().shape();
  std::size_t n = 0;
  for (const auto& p : parts) n += p.dim(0);
  s[0] = n;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.data(), p.numel(), out.data() + off);
    off += p.numel();
  }
  return out;
}

inline void save_tensor(const fs::path& p, const Tensor<float>& t, const nlohmann::json& meta) {
  ModelGraph<float> g;
  g.add_param("tensor", t, false);
  save_checkpoint(g, p, meta);
}

inline Tensor<float> load_tensor(StageContext& ctx, const fs::path& p) {
  auto ck = load_checkpoint<float>(ctx.io.open(p));
  return ck.graph.param("tensor").value();
}

/// Attaches adapters for `setting` at `rank`, trains them and saves the
/// adapter-only checkpoint plus a train.json summary into `dir`.
inline nlohmann::json train_cat_run(const Autoencoder<float>& base, const Tensor<float>& x_a, CatSetting setting, std::size_t rank,
                                    const WorkbenchConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  Autoencoder<float> ae = base;
  Rng rng(seed);
  const auto placement = resolve_placement(ae.graph, setting, rank);
  const auto rep = attach_adapters(ae.graph, placement, rng);
  CatHParams hp;
  hp.batch = cfg.cat.batch;
  hp.lr = cfg.cat.lr;
  hp.steps = cfg.cat.steps;
  const auto res = train_cat(ae, x_a, hp, seed_for(seed, "batches"));
  ae.save(dir / "adapters.ckpt", CheckpointSections::adapters_only);
  double rsum = 0.0;
  std::size_t rmax = 0;
  for (const auto& [h, r] : rep.effective_rank) {
    rsum += double(r);
    rmax = std::max(rmax, r);
  }
  nlohmann::json j{{"setting", setting_name(setting)},
                   {"requested_rank", rank},
                   {"adapters", rep.adapters},
                   {"parameters", rep.parameters},
                   {"effective_rank_mean", rep.adapters ? rsum / double(rep.adapters) : 0.0},
                   {"effective_rank_max", rmax},
                   {"initial_loss", res.initial_loss},
                   {"final_loss", res.final_loss},
                   {"loss_windows", window_means(res.loss_curve, 50)}};
  write_json(dir / "train.json", j);
  return j;
}

// ---------------------------------------------------------------------------
// Stages.

inline void stage_corpus(StageContext& ctx) {
  const auto& spec = ctx.cfg.corpus;
  Corpus corpus;
  if (spec.kind == "synthetic") {
    corpus = synth_corpus(spec, ctx.seed);
  } else {
    auto res = ingest_folder(spec.path, spec.size, spec.split);
    for (const auto& f : res.files) ctx.io.open(f);
    if (!res.skipped.empty()) ctx.log << "corpus: skipped " << res.skipped.size() << " unreadable file(s)\n";
    corpus = std::move(res.corpus);
  }
  write_corpus(ctx.out, corpus);
  ctx.log << "corpus: " << corpus.items.size() << " images, " << corpus.identity_count() << " identities\n";
}

inline void stage_train_ae(StageContext& ctx) {
  const Corpus corpus = load_corpus(ctx);
  const auto idx = reference_images(corpus, 0, corpus.identity_count());
  const Tensor<float> x = corpus.gather(idx);
  TrainHParams hp = ctx.cfg.ae_train;
  hp.seed = ctx.seed;
  auto cfg = ctx.cfg.ae;
  cfg.image_size = corpus.size;
  auto res = train_autoencoder(x, cfg, hp);
  res.model.save(ctx.out / "ae.ckpt");
  const double mse_v = reconstruction_mse(res.model, x);
  const double psnr_v = mean_psnr(res.model.reconstruct(x), x);
  write_json(ctx.out / "train.json", {{"images", idx.size()},
                                      {"steps", hp.steps},
                                      {"final_mse", mse_v},
                                      {"train_psnr", psnr_v},
                                      {"loss_windows", window_means(res.loss_curve, 100)}});
  ctx.log << "train-ae: final mse " << mse_v << ", psnr " << psnr_v << " dB\n";
}

inline void stage_train_ldm(StageContext& ctx) {
  const Corpus corpus = load_corpus(ctx);
  const auto ae = load_ae(ctx);
  const std::size_t P = protected_identities(ctx.cfg, corpus);
  const auto idx = reference_images(corpus, P, corpus.identity_count());
  const Tensor<float> z = ae.encode(corpus.gather(idx));
  std::vector<std::size_t> tokens;
  for (auto i : idx) tokens.push_back(corpus.items[i].identity);
  const auto& ds = ctx.cfg.diffusion;
  DenoiserConfig dc;
  dc.latent_channels = ae.cfg.latent_channels;
  dc.latent_size = ae.cfg.latent_size();
  dc.width = ds.width;
  dc.time_dim = ds.time_dim;
  dc.attention = ds.attention;
  dc.concept_vocab = corpus.identity_count() + 1;
  dc.latent_scale = latent_scale_for(z);
  Rng init(ctx.seed);
  auto d = Denoiser<float>::create(dc, init);
  FinetuneHParams hp;
  hp.lr = ds.pretrain_lr;
  hp.steps = ds.pretrain_steps;
  hp.batch = ds.pretrain_batch;
  hp.seed = seed_for(ctx.seed, "batches");
  const auto curve = train_denoiser(d, z, tokens, make_schedule(ctx.cfg), hp);
  d.save(ctx.out / "denoiser.ckpt");
  write_json(ctx.out / "train.json", {{"latents", idx.size()},
                                      {"latent_scale", dc.latent_scale},
                                      {"final_loss", tail_mean(curve, 100)},
                                      {"loss_windows", window_means(curve, 100)}});
  ctx.log << "train-ldm: final loss " << tail_mean(curve, 100) << "\n";
}

inline nlohmann::json method_names_for(const std::string& objective) {
  nlohmann::json out = nlohmann::json::array();
  const nlohmann::json mapping = method_mapping();
  for (const auto& [method, target] : mapping.items())
    if (target == objective) out.push_back(method);
  return out;
}

inline void stage_attack(StageContext& ctx) {
  const Corpus corpus = load_corpus(ctx);
  const auto ae = load_ae(ctx);
  const std::size_t P = protected_identities(ctx.cfg, corpus);
  const Corpus clean = subset(corpus, protected_targets(corpus, P));
  const auto names = objective_names(ctx.cfg);
  std::optional<Denoiser<float>> dm;
  std::optional<DiffusionFns<float>> dfn;
  const NoiseSchedule sch = make_schedule(ctx.cfg);
  for (const auto& n : names)
    if (needs_diffusion(parse_objective(n)) && !dm) {
      dm = load_denoiser(ctx);
      dfn = DiffusionFns<float>::of(*dm, sch);
    }
  // Targeted objective: latent of a public identity's first reference image.
  const auto tgt_idx = corpus.select(corpus.identity_count() - 1, Split::reference);
  const auto fns = AutoencoderFns<float>::of(ae);
  const auto& as = ctx.cfg.attack;
  auto per_image = [&](const Tensor<float>& x) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t n = 0; n < x.dim(0); ++n)
      arr.push_back({{"id", clean.items[n].id}, {"achieved_budget", linf_distance(x.slice0(n, n + 1), clean.images.slice0(n, n + 1))}});
    return arr;
  };
  for (const auto& name : names) {
    AttackConfig ac;
    ac.objective = parse_objective(name);
    ac.budget = as.budget;
    ac.steps = as.steps;
    ac.step_size = as.step_size;
    ac.random_start = as.random_start;
    ac.weight_encoder = as.weight_encoder;
    ac.weight_denoise = as.weight_denoise;
    ac.draws_per_step = as.draws_per_step;
    ac.token = concept_token(corpus);
    if (ac.objective == Objective::encoder_target) {
      if (tgt_idx.empty()) throw ConfigError("encoder_target needs a reference image of the last identity");
      ac.target_latent = ae.encode(corpus.gather({tgt_idx.front()}));
    }
    const std::uint64_t seed = seed_for(ctx.seed, name);
    Rng rng(seed);
    const auto ps = pgd_attack(clean.images, fns, dfn ? &*dfn : nullptr, ac, rng);
    Corpus prot{clean.size, clean.items, quantize_images(ps.protected_image)};
    nlohmann::json side{{"objective", name},
                        {"methods", method_names_for(name)},
                        {"budget", ac.budget},
                        {"steps", ac.steps},
                        {"step_size", ac.alpha()},
                        {"random_start", ac.random_start},
                        {"seed", seed},
                        {"achieved_budget", linf_distance(prot.images, clean.images)},
                        {"images", per_image(prot.images)}};
    write_corpus(ctx.out / name, prot, side);
    ctx.log << "attack: " << name << " done\n";
  }
  const std::uint64_t nseed = seed_for(ctx.seed, "noisy");
  Rng nrng(nseed);
  Corpus noisy{clean.size, clean.items, quantize_images(make_noisy_baseline(clean.images, as.budget, nrng))};
  write_corpus(ctx.out / "noisy", noisy,
               {{"objective", "gaussian_noise"},
                {"budget", as.budget},
                {"seed", nseed},
                {"achieved_budget", linf_distance(noisy.images, clean.images)},
                {"images", per_image(noisy.images)}});
}

inline void stage_diagnose(StageContext& ctx) {
  const Corpus corpus = load_corpus(ctx);
  const auto ae = load_ae(ctx);
  const std::size_t P = protected_identities(ctx.cfg, corpus);
  const Tensor<float> zc = ae.encode(corpus.gather(protected_targets(corpus, P)));
  const Tensor<float> zr = ae.encode(load_corpus(ctx, "attack/noisy").images);
  const auto names = objective_names(ctx.cfg);
  std::vector<Tensor<float>> za;
  for (const auto& n : names) za.push_back(ae.encode(load_corpus(ctx, "attack/" + n).images));

  if (ctx.cfg.report.pca) {
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> group;
    std::vector<std::string> groups{"clean", "noisy"};
    auto add = [&](const Tensor<float>& z, std::size_t g) {
      for (auto& r : flatten_samples(z)) {
        rows.push_back(std::move(r));
        group.push_back(g);
      }
    };
    add(zc, 0);
    add(zr, 1);
    for (std::size_t i = 0; i < names.size(); ++i) {
      groups.push_back(names[i]);
      add(za[i], i + 2);
    }
    const auto pca = pca_project(rows, 2);
    nlohmann::json pts = nlohmann::json::array();
    for (std::size_t i = 0; i < rows.size(); ++i) pts.push_back({pca.coords[i][0], pca.coords[i][1], group[i]});
    write_json(ctx.out / "pca.json", {{"groups", groups}, {"explained", pca.explained}, {"points", pts}});
  }

  if (!ctx.cfg.diffusion.learnability) return;
  const auto dm = load_denoiser(ctx);
  const auto sch = make_schedule(ctx.cfg);
  const auto& ds = ctx.cfg.diffusion;
  const std::size_t token = concept_token(corpus);
  const Tensor<float> z1 = zc.slice0(0, 1), zr1 = zr.slice0(0, 1);
  nlohmann::json out = nlohmann::json::object();
  for (const std::string mode : {"full", "adapter"}) {
    FinetuneHParams hp;
    hp.batch = 4;
    hp.steps = ds.memorize_steps;
    hp.cosine_decay = true;
    hp.seed = seed_for(ctx.seed, "memorize");
    hp.adapter_mode = mode == "adapter";
    hp.lr = hp.adapter_mode ? ds.adapter_lr : ds.memorize_lr;
    hp.adapter_rank = ds.adapter_rank;
    auto memorize = [&](const Tensor<float>& z, double* final_loss) {
      std::vector<double> curve;
      const auto d = finetune(dm, z, token, sch, hp, &curve);
      Rng sr(seed_for(ctx.seed, "memorize/sample"));
      if (final_loss) *final_loss = tail_mean(curve, 100);
      return sample(d, 1, token, sch, sr);
    };
    double loss = 0.0;
    const Tensor<float> zt_c = memorize(z1, &loss);
    nlohmann::json m{{"s_c", difference_ratio(z1, zt_c, z1)}, {"s_r", difference_ratio(zr1, zt_c, z1)}, {"memorize_loss", loss}};
    nlohmann::json sa = nlohmann::json::object();
    for (std::size_t i = 0; i < names.size(); ++i) {
      const Tensor<float> za1 = za[i].slice0(0, 1);
      sa[names[i]] = difference_ratio(za1, memorize(za1, nullptr), z1);
    }
    m["s_a"] = sa;
    out[mode] = m;
    ctx.log << "diagnose: " << mode << " memorization s_c " << m["s_c"].get<double>() << "\n";
  }
  write_json(ctx.out / "learnability.json", out);
}

inline std::optional<std::vector<std::string>> attack_reads(const std::vector<std::string>& objectives,
                                                            std::vector<std::string> extra) {
  for (const auto& o : objectives) extra.push_back("attack/" + o + "/");
  return extra;
}

inline void stage_cat(StageContext& ctx) {
  const auto base = load_ae(ctx);
  const auto names = objective_names(ctx.cfg);
  std::vector<Tensor<float>> sets;
  for (const auto& n : names) sets.push_back(load_corpus(ctx, "attack/" + n).images);
  for (auto st : cat_settings(ctx.cfg))
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto j = train_cat_run(base, sets[i], st, cat_rank(ctx.cfg, st), ctx.cfg,
                                   seed_for(ctx.seed, setting_name(st) + "/" + names[i]),
                                   ctx.out / setting_name(st) / names[i]);
      ctx.log << "cat: " << setting_name(st) << "/" << names[i] << " loss " << j["initial_loss"].get<double>() << " -> "
              << j["final_loss"].get<double>() << "\n";
    }
}

inline void stage_purify(StageContext& ctx) {
  const auto& cs = ctx.cfg.cat;
  for (const auto& n : objective_names(ctx.cfg)) {
    const Corpus set = load_corpus(ctx, "attack/" + n);
    auto side = read_json(ctx, ctx.dir("attack") / n / "sidecar.json");
    side["purified_by"] = {{"method", "gaussian_filter"}, {"ksize", cs.purify_ksize}, {"sigma", cs.purify_sigma}};
    Corpus out{set.size, set.items, quantize_images(gaussian_purify(set.images, cs.purify_ksize, cs.purify_sigma))};
    write_corpus(ctx.out / n, out, side);
  }
}

inline CatSetting customize_setting(const WorkbenchConfig& c) {
  const CatSetting s = parse_setting(c.cat.customize_setting);
  const auto all = cat_settings(c);
  if (std::find(all.begin(), all.end(), s) == all.end())
    throw ConfigError("cat.customize_setting " + c.cat.customize_setting + " is not listed in cat.settings");
  return s;
}

inline void stage_customize(StageContext& ctx) {
  const auto& ds = ctx.cfg.diffusion;
  const auto base = load_ae(ctx);
  const auto dm = load_denoiser(ctx);
  const auto sch = make_schedule(ctx.cfg);
  const CatSetting st = customize_setting(ctx.cfg);
  std::vector<std::string> variants{"raw", "cat_" + setting_name(st)};
  if (ctx.available("purify")) variants.push_back("gaussian_purify");
  write_json(ctx.out / "variants.json", {{"variants", variants}, {"seeds", ds.customize_seeds}});
  for (const auto& n : objective_names(ctx.cfg)) {
    const Corpus prot = load_corpus(ctx, "attack/" + n);
    std::vector<std::size_t> tokens;
    std::set<std::size_t> ids;
    for (const auto& it : prot.items) {
      tokens.push_back(it.identity);
      ids.insert(it.identity);
    }
    for (const auto& v : variants) {
      Autoencoder<float> ae = v == variants[1] ? with_adapters(ctx, base, ctx.dir("cat") / setting_name(st) / n / "adapters.ckpt") : base;
      const Tensor<float> x = v == "gaussian_purify" ? load_corpus(ctx, "purify/" + n).images : prot.images;
      const Tensor<float> z = ae.encode(x);
      for (std::size_t k = 0; k < ds.customize_seeds; ++k) {
        FinetuneHParams hp;
        hp.lr = ds.customize_lr;
        hp.steps = ds.customize_steps;
        hp.batch = ds.customize_batch;
        hp.seed = seed_for(ctx.seed, "finetune/" + std::to_string(k));
        Denoiser<float> d = dm;
        train_denoiser(d, z, tokens, sch, hp);
        Rng sr(seed_for(ctx.seed, "sample/" + std::to_string(k)));
        std::vector<Tensor<float>> parts;
        Corpus dec;
        dec.size = prot.size;
        for (auto p : ids) {
          parts.push_back(sample(d, ds.samples_per_identity, p, sch, sr));
          for (std::size_t j = 0; j < ds.samples_per_identity; ++j)
            dec.items.push_back({"p" + std::to_string(p) + "_" + std::to_string(j), p, Split::reference});
        }
        const Tensor<float> samples = concat0(parts);
        dec.images = quantize_images(ae.decode(samples));
        const fs::path dir = ctx.out / n / v / ("seed" + std::to_string(k));
        save_tensor(dir / "latents.ckpt", samples, {{"kind", "sample_latents"}});
        write_corpus(dir, dec);
      }
      ctx.log << "customize: " << n << "/" << v << " done\n";
    }
  }
}

inline std::vector<std::string> sweep_objectives(const WorkbenchConfig& c) {
  const auto all = objective_names(c);
  std::vector<std::string> out;
  for (const auto& o : c.cat.sweep_objectives) {
    const std::string n = objective_name(parse_objective(o));
    if (std::find(all.begin(), all.end(), n) == all.end())
      throw ConfigError("cat.sweep_objectives lists " + n + ", which attack.objectives does not produce");
    out.push_back(n);
  }
  return out;
}

inline void stage_rank_sweep(StageContext& ctx) {
  const auto base = load_ae(ctx);
  const CatSetting st = parse_setting(ctx.cfg.cat.sweep_setting);
  for (const auto& n : sweep_objectives(ctx.cfg)) {
    const Tensor<float> xa = load_corpus(ctx, "attack/" + n).images;
    for (auto r : ctx.cfg.cat.sweep_ranks) {
      const std::string tag = "r" + std::to_string(r);
      train_cat_run(base, xa, st, r, ctx.cfg, seed_for(ctx.seed, tag + "/" + n), ctx.out / tag / n);
      ctx.log << "rank-sweep: " << n << " rank " << r << " done\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Report: all evaluation against clean data happens here.

inline double mean_l2(const Tensor<float>& a, const Tensor<float>& b) {
  double acc = 0.0;
  const std::size_t per = a.numel() / a.dim(0);
  for (std::size_t n = 0; n < a.dim(0); ++n) {
    double s = 0.0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    acc += std::sqrt(s);
  }
  return acc / double(a.dim(0));
}

inline void stage_report(StageContext& ctx) {
  const auto& cfg = ctx.cfg;
  const Corpus corpus = load_corpus(ctx);
  Sha256 cd;
  for (const auto& in : ctx.io.inputs())
    if (in.path.rfind("corpus/", 0) == 0) cd.field(in.path).field(in.sha256);
  const std::string corpus_digest = cd.hex();
  const auto base = load_ae(ctx);
  const std::size_t P = protected_identities(cfg, corpus);
  const Tensor<float> xc = corpus.gather(protected_targets(corpus, P));
  const Tensor<float> zc = base.encode(xc);
  const Tensor<float> zr = base.encode(load_corpus(ctx, "attack/noisy").images);
  const double d_r = latent_mae(zr, zc);
  const auto names = objective_names(cfg);
  const std::string dataset = cfg.corpus.kind == "synthetic" ? "synthetic" : fs::path(cfg.corpus.path).filename().string();

  Report rep;
  ojson stage_digests = ojson::object();
  for (const std::string s : {"corpus", "train-ae", "attack"}) stage_digests[s] = ctx.digest_of(s);
  for (const std::string s : {"train-ldm", "diagnose", "cat", "purify", "customize", "rank-sweep"})
    if (ctx.available(s)) stage_digests[s] = ctx.digest_of(s);
  rep.manifest = ojson{{"seed", cfg.report.seed},
                       {"config_digest", ctx.config_digest},
                       {"corpus_digest", corpus_digest},
                       {"dataset", dataset},
                       {"stages", stage_digests},
                       {"thresholds", pilot_thresholds()},
                       {"environment", environment_note()}};
  ojson audits = ojson::object();
  {
    const auto t = read_json(ctx, ctx.dir("ae") / "train.json");
    audits["ae"] = ojson{{"final_mse", t["final_mse"].get<double>()}, {"train_psnr", t["train_psnr"].get<double>()}};
  }

  std::map<std::string, Tensor<float>> xa, za;
  for (const auto& n : names) {
    xa[n] = load_corpus(ctx, "attack/" + n).images;
    za[n] = base.encode(xa[n]);
  }

  MetricTable dist{dataset, {}};
  const bool have_cat = ctx.available("cat"), have_purify = ctx.available("purify");
  ojson cat_audit = ojson::object(), purify_audit = ojson::object();
  for (const auto& n : names) {
    const double d_a = latent_mae(za[n], zc);
    auto& r0 = dist.row(n, "none");
    r0.values = {{"d_a", d_a}, {"d_r", d_r}, {"abs_da_dr", std::abs(d_a - d_r)}, {"ratio_da_dr", d_a / d_r}};
    if (have_cat)
      for (auto st : cat_settings(cfg)) {
        const fs::path dir = ctx.dir("cat") / setting_name(st) / n;
        const auto ae = with_adapters(ctx, base, dir / "adapters.ckpt");
        const double d_cat = latent_mae(ae.encode(xa[n]), zc);
        auto& r = dist.row(n, setting_name(st));
        r.values = {{"d_a", d_a}, {"d_r", d_r}, {"d_a_cat", d_cat}, {"abs_da_dr", std::abs(d_a - d_r)},
                    {"abs_dacat_dr", std::abs(d_cat - d_r)}};
        const auto t = read_json(ctx, dir / "train.json");
        cat_audit[setting_name(st)][n] = ojson{{"parameters", t["parameters"]},
                                               {"effective_rank_mean", t["effective_rank_mean"]},
                                               {"initial_loss", t["initial_loss"]},
                                               {"final_loss", t["final_loss"]}};
      }
    if (have_purify) {
      const Tensor<float> xp = load_corpus(ctx, "purify/" + n).images;
      const double d_p = latent_mae(base.encode(xp), zc);
      auto& r = dist.row(n, "gaussian_purify");
      r.values = {{"d_a", d_a}, {"d_r", d_r}, {"d_a_cat", d_p}, {"abs_da_dr", std::abs(d_a - d_r)},
                  {"abs_dacat_dr", std::abs(d_p - d_r)}};
      purify_audit[n] = ojson{{"pixel_l2_protected", mean_l2(xa[n], xc)}, {"pixel_l2_purified", mean_l2(xp, xc)}};
    }
  }
  rep.tables.push_back(dist);
  if (have_cat) audits["cat"] = cat_audit;
  if (have_purify) audits["purify"] = purify_audit;

  if (ctx.available("diagnose")) {
    const fs::path dd = ctx.dir("diagnose");
    if (fs::exists(dd / "pca.json")) {
      const auto p = read_json(ctx, dd / "pca.json");
      rep.extras["pca"]["latents"] = ojson::parse(p.dump());
    }
    if (fs::exists(dd / "learnability.json")) {
      const auto l = read_json(ctx, dd / "learnability.json");
      MetricTable lt{"learnability", {}};
      ojson mem = ojson::object();
      for (const std::string mode : {"full", "adapter"}) {
        const auto& m = l.at(mode);
        mem[mode] = ojson{{"s_c", m["s_c"].get<double>()}, {"memorize_loss", m["memorize_loss"].get<double>()}};
        for (const auto& n : names)
          lt.row(n, mode).values = {{"s_c", m["s_c"].get<double>()}, {"s_r", m["s_r"].get<double>()},
                                    {"s_a", m["s_a"][n].get<double>()}};
      }
      audits["memorization"] = mem;
      rep.tables.push_back(lt);
    }
  }

  if (ctx.available("customize")) {
    const fs::path cd_dir = ctx.dir("customize");
    const auto meta = read_json(ctx, cd_dir / "variants.json");
    const auto refs = reference_images(corpus, 0, P);
    const Tensor<float> xref = corpus.gather(refs);
    const Tensor<float> zref = base.encode(xref);
    MetricTable ct{"customize", {}};
    ojson per_seed = ojson::object();
    for (const auto& n : names)
      for (const auto& v : meta["variants"]) {
        const std::string var = v.get<std::string>();
        double f = 0, p = 0, s = 0;
        const std::size_t seeds = meta["seeds"];
        for (std::size_t k = 0; k < seeds; ++k) {
          const fs::path dir = cd_dir / n / var / ("seed" + std::to_string(k));
          const Tensor<float> lat = load_tensor(ctx, dir / "latents.ckpt");
          const Corpus dec = read_corpus(dir, ctx.io.reader());
          const double fk = frechet_latent_distance(lat, zref);
          double pk = 0, sk = 0;
          for (std::size_t j = 0; j < dec.items.size(); ++j) {
            const Tensor<float> img = dec.images.slice0(j, j + 1);
            double best = -1;
            Tensor<float> best_ref;
            for (std::size_t r = 0; r < refs.size(); ++r) {
              if (corpus.items[refs[r]].identity != dec.items[j].identity) continue;
              const Tensor<float> ref = xref.slice0(r, r + 1);
              const double v2 = psnr(img, ref);
              if (v2 > best) {
                best = v2;
                best_ref = ref;
              }
            }
            pk += best;
            sk += ssim(img, best_ref);
          }
          pk /= double(dec.items.size());
          sk /= double(dec.items.size());
          per_seed[n][var].push_back(ojson{{"seed", k}, {"frechet", fk}, {"psnr", pk}, {"ssim", sk}});
          f += fk;
          p += pk;
          s += sk;
        }
        ct.row(n, var).values = {{"frechet", f / double(seeds)}, {"psnr", p / double(seeds)}, {"ssim", s / double(seeds)}};
      }
    rep.tables.push_back(ct);
    rep.extras["customize_per_seed"] = per_seed;
  }

  if (ctx.available("rank-sweep")) {
    MetricTable rt{"rank_sweep", {}};
    ojson sweep = ojson::array(), trends = ojson::array();
    for (const auto& n : sweep_objectives(cfg)) {
      const double d_a = latent_mae(za[n], zc);
      std::vector<double> vals;
      for (auto r : cfg.cat.sweep_ranks) {
        const fs::path dir = ctx.dir("ranksweep") / ("r" + std::to_string(r)) / n;
        const auto ae = with_adapters(ctx, base, dir / "adapters.ckpt");
        const double d_cat = latent_mae(ae.encode(xa[n]), zc);
        rt.row(n, "r" + std::to_string(r)).values = {{"d_a", d_a},
                                                     {"d_r", d_r},
                                                     {"d_a_cat", d_cat},
                                                     {"abs_da_dr", std::abs(d_a - d_r)},
                                                     {"abs_dacat_dr", std::abs(d_cat - d_r)}};
        vals.push_back(std::abs(d_cat - d_r));
        const auto t = read_json(ctx, dir / "train.json");
        sweep.push_back(ojson{{"attack", n},
                              {"rank", r},
                              {"parameters", t["parameters"]},
                              {"effective_rank_mean", t["effective_rank_mean"]},
                              {"final_loss", t["final_loss"]},
                              {"abs_dacat_dr", vals.back()}});
      }
      bool mono = true, finite = true;
      for (std::size_t i = 0; i < vals.size(); ++i) {
        finite = finite && std::isfinite(vals[i]);
        if (i && vals[i] > vals[i - 1]) mono = false;
      }
      const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
      trends.push_back(ojson{{"attack", n},
                             {"abs_dacat_dr_by_rank", vals},
                             {"monotone_nonincreasing", mono},
                             {"non_degenerate", finite && vals.size() > 1 && *hi - *lo > 1e-9}});
    }
    rep.tables.push_back(rt);
    rep.extras["rank_sweep"] = ojson{{"runs", sweep}, {"trend", trends}};
  }

  for (auto& t : rep.tables)
    for (auto& r : t.rows) {
      r.seed = cfg.report.seed;
      r.corpus_digest = corpus_digest;
    }
  rep.extras["audits"] = audits;
  make_report(rep, ctx.out);
  ctx.log << "report: " << rep.tables.size() << " table(s) written\n";
}

}  // namespace catw
