#include <gtest/gtest.h>

#include <cmath>

#include "catw/attacks/pgd.hpp"

using namespace catw;

namespace {

AutoencoderFns<double> identity_ae() {
  auto id = [](const Var<double>& v) { return v; };
  return {id, id};
}

Autoencoder<float> tiny_ae(std::uint64_t seed) {
  Rng rng(seed);
  return Autoencoder<float>::create(AutoencoderConfig{8, 3, 4, 4, 4, true}, rng);
}

Denoiser<float> tiny_denoiser(std::uint64_t seed) {
  DenoiserConfig c;
  c.latent_channels = 4;
  c.latent_size = 2;
  c.width = 8;
  c.time_dim = 8;
  c.concept_vocab = 2;
  Rng rng(seed);
  return Denoiser<float>::create(c, rng);
}

Tensor<float> tiny_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor<float>::uniform({n, 3, 8, 8}, rng, 0, 1);
}

bool within_budget(const Tensor<float>& x, const Tensor<float>& clean, double delta) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x[i] >= 0.0f && x[i] <= 1.0f)) return false;
    if (std::abs(double(x[i]) - clean[i]) > delta + 1e-6) return false;
  }
  return true;
}

}  // namespace

TEST(AttackConfig, Validation) {
  AttackConfig c;
  c.budget = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AttackConfig{};
  c.objective = Objective::encoder_target;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AttackConfig{};
  EXPECT_DOUBLE_EQ(c.alpha(), 16.0 / 255.0 / 8.0);
  EXPECT_EQ(c.steps, 40u);
  EXPECT_FALSE(c.random_start);
}

TEST(AttackConfig, DiffusionObjectivesNeedDenoiser) {
  auto ae = tiny_ae(0);
  auto fns = AutoencoderFns<float>::of(ae);
  Rng rng(0);
  for (auto o : all_objectives()) {
    if (!needs_diffusion(o)) continue;
    AttackConfig c;
    c.objective = o;
    EXPECT_THROW(pgd_attack<float>(tiny_images(1, 1), fns, nullptr, c, rng), ConfigError) << objective_name(o);
  }
}

TEST(Pgd, ZeroBudgetReturnsCleanBitExactly) {
  auto ae = tiny_ae(1);
  auto dm = tiny_denoiser(2);
  auto sched = make_linear_schedule(20);
  auto dfn = DiffusionFns<float>::of(dm, sched);
  auto x = tiny_images(2, 3);
  for (auto o : all_objectives()) {
    AttackConfig c;
    c.objective = o;
    c.budget = 0.0;
    c.step_size = 0.01;
    c.random_start = true;
    if (o == Objective::encoder_target) c.target_latent = Tensor<float>(ae.cfg.latent_shape(1), 0.5f);
    Rng rng(4);
    auto s = pgd_attack<float>(x, AutoencoderFns<float>::of(ae), &dfn, c, rng);
    EXPECT_TRUE(s.protected_image.bit_equal(x)) << objective_name(o);
    EXPECT_EQ(s.achieved_budget, 0.0);
  }
}

TEST(Pgd, OnesGradientSingleStep) {
  Tensor<double> clean(Shape{1, 1, 2, 3}, std::vector<double>{0.0, 0.5, 0.995, 1.0, 0.2, 0.999});
  GradientOracle<double> ones = [](const Tensor<double>& x, std::size_t) { return Tensor<double>::ones(x.shape()); };
  Rng rng(0);
  auto x = pgd(clean, ones, true, 0.5, 1, 0.01, false, rng);
  for (std::size_t i = 0; i < clean.numel(); ++i) EXPECT_NEAR(x[i], std::min(1.0, clean[i] + 0.01), 1e-15);
  auto y = pgd(clean, ones, false, 0.5, 1, 0.01, false, rng);
  for (std::size_t i = 0; i < clean.numel(); ++i) EXPECT_NEAR(y[i], std::max(0.0, clean[i] - 0.01), 1e-15);
}

TEST(Pgd, BudgetSoundnessRandomizedEngine) {
  Rng rng(99);
  std::uniform_int_distribution<int> steps(0, 30), pick(0, 3);
  std::uniform_real_distribution<double> frac(0.05, 1.0);
  const double budgets[] = {2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255};
  for (int trial = 0; trial < 200; ++trial) {
    const double delta = budgets[pick(rng)];
    auto clean = Tensor<float>::uniform({2, 3, 4, 4}, rng, 0, 1);
    // Push some pixels onto the box edges.
    for (std::size_t i = 0; i < clean.numel(); i += 7) clean[i] = (i % 2) ? 1.0f : 0.0f;
    GradientOracle<float> noise = [&](const Tensor<float>& x, std::size_t) { return Tensor<float>::randn(x.shape(), rng); };
    auto x = pgd(clean, noise, trial % 2 == 0, delta, std::size_t(steps(rng)), delta * frac(rng) * 2, trial % 3 == 0, rng);
    EXPECT_TRUE(within_budget(x, clean, delta)) << "trial " << trial;
  }
}

TEST(Pgd, BudgetSoundnessEveryObjective) {
  auto ae = tiny_ae(5);
  auto dm = tiny_denoiser(6);
  auto sched = make_linear_schedule(20);
  auto dfn = DiffusionFns<float>::of(dm, sched);
  Rng pick(7);
  for (double delta : {2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255})
    for (auto o : all_objectives()) {
      AttackConfig c;
      c.objective = o;
      c.budget = delta;
      c.steps = 6;
      c.random_start = pick() % 2;
      c.token = 1;
      if (o == Objective::encoder_target) c.target_latent = Tensor<float>::randn(ae.cfg.latent_shape(1), pick);
      auto x = tiny_images(2, pick());
      Rng rng(pick());
      auto s = pgd_attack<float>(x, AutoencoderFns<float>::of(ae), &dfn, c, rng);
      EXPECT_TRUE(within_budget(s.protected_image, x, delta)) << objective_name(o) << " delta " << delta;
      EXPECT_LE(s.achieved_budget, delta + 1e-6);
      EXPECT_EQ(s.objective, objective_name(o));
    }
}

TEST(Pgd, DeterministicGivenSeed) {
  auto ae = tiny_ae(8);
  auto dm = tiny_denoiser(9);
  auto sched = make_linear_schedule(20);
  auto dfn = DiffusionFns<float>::of(dm, sched);
  auto x = tiny_images(2, 10);
  for (auto o : all_objectives()) {
    AttackConfig c;
    c.objective = o;
    c.steps = 5;
    c.random_start = true;
    if (o == Objective::encoder_target) c.target_latent = Tensor<float>(ae.cfg.latent_shape(1), 0.3f);
    Rng a(11), b(11);
    auto sa = pgd_attack<float>(x, AutoencoderFns<float>::of(ae), &dfn, c, a);
    auto sb = pgd_attack<float>(x, AutoencoderFns<float>::of(ae), &dfn, c, b);
    EXPECT_TRUE(sa.protected_image.bit_equal(sb.protected_image)) << objective_name(o);
  }
}

TEST(Pgd, AscentObjectivesDoNotDecrease) {
  auto ae = tiny_ae(12);
  auto fns = AutoencoderFns<float>::of(ae);
  for (auto o : {Objective::encoder_away, Objective::recon}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      AttackConfig c;
      c.objective = o;
      c.steps = 10;
      auto x = tiny_images(2, 100 + seed);
      Rng rng(seed);
      auto s = pgd_attack<float>(x, fns, nullptr, c, rng);
      const double v0 = objective_value<float>(x, x, c, fns, nullptr, nullptr);
      const double v1 = objective_value<float>(s.protected_image, x, c, fns, nullptr, nullptr);
      EXPECT_GE(v1, v0) << objective_name(o);
    }
  }
}

TEST(Pgd, EncoderTargetDescends) {
  auto ae = tiny_ae(13);
  auto fns = AutoencoderFns<float>::of(ae);
  AttackConfig c;
  c.objective = Objective::encoder_target;
  c.steps = 10;
  Rng tr(1);
  c.target_latent = ae.encode(tiny_images(1, 77));
  auto x = tiny_images(2, 14);
  Rng rng(0);
  auto s = pgd_attack<float>(x, fns, nullptr, c, rng);
  EXPECT_LT(objective_value<float>(s.protected_image, x, c, fns, nullptr, nullptr),
            objective_value<float>(x, x, c, fns, nullptr, nullptr));
}

TEST(Objectives, EncoderAwayStub) {
  auto ae = identity_ae();
  auto x = Tensor<double>::scalar(0.5);
  EXPECT_EQ(objective_encoder_away(constant(x), x, ae)->value.item(), 0.0);
  EXPECT_DOUBLE_EQ(objective_encoder_away(constant(x), Tensor<double>::scalar(0.0), ae)->value.item(), 0.25);
}

TEST(Objectives, EncoderTargetStub) {
  auto ae = identity_ae();
  auto x = Tensor<double>::scalar(1.0);
  EXPECT_EQ(objective_encoder_target(constant(x), x, ae)->value.item(), 0.0);
  EXPECT_DOUBLE_EQ(objective_encoder_target(constant(x), Tensor<double>::scalar(0.0), ae)->value.item(), 1.0);
}

TEST(Objectives, ReconStubMeanReduced) {
  auto ae = identity_ae();
  Rng rng(3);
  auto xc = Tensor<double>::uniform({1, 1, 10, 10}, rng, 0, 0.8);
  EXPECT_EQ(objective_recon(constant(xc), xc, ae)->value.item(), 0.0);
  Tensor<double> x = xc;
  for (auto& v : x.vec()) v += 0.1;
  EXPECT_NEAR(objective_recon(constant(x), xc, ae)->value.item(), 0.01, 1e-12);
}

TEST(Objectives, DenoiseWithExactPredictorHasZeroGradient) {
  auto ae = identity_ae();
  auto sched = make_linear_schedule(20);
  Rng rng(4);
  auto x = leaf(Tensor<double>::uniform({2, 1, 2, 2}, rng, 0, 1), true);
  auto draw = draw_noise<double>(x->value.shape(), sched, rng);
  DiffusionFns<double> dm{[&](const Var<double>&, const std::vector<std::size_t>&, const std::vector<std::size_t>&) {
                            return constant(draw.eps);
                          },
                          sched, 1.0};
  auto loss = objective_denoise(x, ae, dm, 0, draw);
  EXPECT_EQ(loss->value.item(), 0.0);
  backward(loss);
  EXPECT_TRUE(x->grad.empty());
}

TEST(Objectives, ConstantPredictorLeavesPgdIterateUnchanged) {
  auto ae = tiny_ae(15);
  auto sched = make_linear_schedule(20);
  DiffusionFns<float> dm{[](const Var<float>& z, const std::vector<std::size_t>&, const std::vector<std::size_t>&) {
                           return constant(Tensor<float>(z->value.shape(), 0.3f));
                         },
                         sched, 1.0};
  auto x = tiny_images(2, 16);
  for (auto o : {Objective::denoise_ascent, Objective::denoise_descent}) {
    AttackConfig c;
    c.objective = o;
    c.steps = 5;
    Rng rng(1);
    auto s = pgd_attack<float>(x, AutoencoderFns<float>::of(ae), &dm, c, rng);
    EXPECT_TRUE(s.protected_image.bit_equal(x)) << objective_name(o);
  }
}

TEST(Objectives, DenoiseMatchesDenoiseLoss) {
  auto ae = tiny_ae(17);
  auto dn = tiny_denoiser(18);
  dn.cfg.latent_scale = 1.7;
  auto sched = make_linear_schedule(20);
  auto dm = DiffusionFns<float>::of(dn, sched);
  auto fns = AutoencoderFns<float>::of(ae);
  auto x = constant(tiny_images(2, 19));
  Rng a(5), b(5);
  const double via_objective = objective_denoise(x, fns, dm, 1, draw_noise<float>(ae.cfg.latent_shape(2), sched, a))->value.item();
  const double direct = denoise_loss(dn, ae.encode(x), 1, sched, b)->value.item();
  EXPECT_EQ(via_objective, direct);
}

TEST(Objectives, JointIsWeightedSum) {
  auto ae = tiny_ae(20);
  auto dn = tiny_denoiser(21);
  auto sched = make_linear_schedule(20);
  auto dm = DiffusionFns<float>::of(dn, sched);
  auto fns = AutoencoderFns<float>::of(ae);
  auto xc = tiny_images(2, 22);
  Rng rng(23);
  auto x = constant(Tensor<float>::uniform(xc.shape(), rng, 0, 1));
  const auto zc = ae.encode(xc);
  auto draw = draw_noise<float>(zc.shape(), sched, rng);
  const double enc = objective_encoder_away(x, zc, fns)->value.item();
  const double den = objective_denoise(x, fns, dm, 0, draw)->value.item();
  EXPECT_EQ(objective_joint(x, zc, 1.0, 0.0, fns, dm, 0, draw)->value.item(), float(enc));
  EXPECT_EQ(objective_joint(x, zc, 0.0, 1.0, fns, dm, 0, draw)->value.item(), float(den));
  EXPECT_NEAR(objective_joint(x, zc, 1.0, 1.0, fns, dm, 0, draw)->value.item(), enc + den, 1e-6);
}

TEST(Sds, ExactScoreGivesZeroGradient) {
  auto ae = identity_ae();
  auto sched = make_linear_schedule(20);
  Rng rng(24);
  auto x = leaf(Tensor<double>::uniform({2, 1, 2, 2}, rng, 0, 1), true);
  auto draw = draw_noise<double>(x->value.shape(), sched, rng);
  DiffusionFns<double> dm{[&](const Var<double>&, const std::vector<std::size_t>&, const std::vector<std::size_t>&) {
                            return constant(draw.eps);
                          },
                          sched, 1.0};
  auto g = sds_gradient(x, ae, dm, 0, draw);
  for (auto v : g.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Sds, ShiftedScoreGivesConstantGradient) {
  auto ae = identity_ae();
  auto sched = make_linear_schedule(20);
  Rng rng(25);
  auto x = leaf(Tensor<double>::uniform({2, 1, 2, 2}, rng, 0, 1), true);
  auto draw = draw_noise<double>(x->value.shape(), sched, rng);
  const double c = 0.37;
  DiffusionFns<double> dm{[&](const Var<double>&, const std::vector<std::size_t>&, const std::vector<std::size_t>&) {
                            Tensor<double> e = draw.eps;
                            for (auto& v : e.vec()) v += c;
                            return constant(e);
                          },
                          sched, 1.0};
  auto g = sds_gradient(x, ae, dm, 0, draw);
  for (auto v : g.vec()) EXPECT_NEAR(v, c, 1e-12);
}

TEST(Sds, NeverTouchesDenoiserParams) {
  auto ae = tiny_ae(26);
  auto dn = tiny_denoiser(27);
  auto sched = make_linear_schedule(20);
  auto dm = DiffusionFns<float>::of(dn, sched);
  Rng rng(28);
  auto x = leaf(tiny_images(2, 29), true);
  auto g = sds_gradient(x, AutoencoderFns<float>::of(ae), dm, 1, draw_noise<float>(ae.cfg.latent_shape(2), sched, rng));
  EXPECT_EQ(g.shape(), x->value.shape());
  for (const auto& p : dn.graph.params()) EXPECT_TRUE(p.grad().empty()) << p.name;
}

TEST(NoisyBaseline, ZeroBudgetIsIdentity) {
  auto x = tiny_images(2, 30);
  Rng rng(1);
  EXPECT_TRUE(make_noisy_baseline(x, 0.0, rng).bit_equal(x));
  EXPECT_THROW(make_noisy_baseline(x, -0.1, rng), ConfigError);
}

TEST(NoisyBaseline, WithinBudget) {
  Rng rng(31);
  for (double delta : {2.0 / 255, 16.0 / 255, 0.3}) {
    auto x = tiny_images(4, rng());
    auto r = make_noisy_baseline(x, delta, rng);
    EXPECT_TRUE(within_budget(r, x, delta));
  }
}

// r ~ N(0, δ²) clipped at ±δ: E[r²] = δ²(1 − 2φ(1)) and P(|r| = δ) = P(|Z| ≥ 1).
// Both moments pin the pre-clip scale at δ.
TEST(NoisyBaseline, ClippedGaussianMoments) {
  const double delta = 16.0 / 255;
  const std::size_t n = 1000000;
  Tensor<double> x(Shape{n}, 0.5);
  Rng rng(32);
  auto r = make_noisy_baseline(x, delta, rng);
  const double phi1 = std::exp(-0.5) / std::sqrt(2 * std::numbers::pi);
  const double tail = std::erfc(1.0 / std::sqrt(2.0));
  double m2 = 0;
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = r[i] - 0.5;
    m2 += d * d;
    clipped += std::abs(std::abs(d) - delta) < 1e-12;
  }
  const double rms = std::sqrt(m2 / double(n));
  EXPECT_NEAR(rms, delta * std::sqrt(1 - 2 * phi1), 0.01 * delta * std::sqrt(1 - 2 * phi1));
  EXPECT_NEAR(double(clipped) / double(n), tail, 0.002);
}

TEST(MethodMapping, NamesEveryObjectiveAndUnreplicatedMethods) {
  auto m = method_mapping();
  EXPECT_EQ(m.at("AdvDM(+)"), "denoise_ascent");
  EXPECT_EQ(m.at("AdvDM(-)"), "denoise_descent");
  EXPECT_EQ(m.at("Mist"), "joint");
  EXPECT_EQ(m.at("Glaze"), "encoder_target");
  EXPECT_EQ(m.at("Photoguard"), "recon");
  EXPECT_EQ(m.at("SDST"), "sds_descent");
  EXPECT_EQ(m.at("Anti-DreamBooth"), "not replicated");
  EXPECT_EQ(m.at("MetaCloak"), "not replicated");
  for (auto o : all_objectives()) {
    bool found = false;
    for (const auto& [k, v] : m.items()) found |= v == objective_name(o);
    EXPECT_TRUE(found) << objective_name(o);
    EXPECT_EQ(parse_objective(objective_name(o)), o);
  }
  EXPECT_THROW(parse_objective("nope"), ConfigError);
}
