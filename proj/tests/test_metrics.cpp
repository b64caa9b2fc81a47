#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <complex>

#include "catw/metrics/metrics.hpp"

using namespace catw;

namespace {

Tensor<double> vec1(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>({n}, v);
}

std::vector<std::vector<double>> gaussian_rows(std::size_t n, const Eigen::Matrix3d& L, const Eigen::Vector3d& mu, Rng& rng) {
  std::vector<std::vector<double>> rows;
  auto g = Tensor<double>::randn({n, 3}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector3d e(g[i * 3 + 0], g[i * 3 + 1], g[i * 3 + 2]);
    Eigen::Vector3d x = mu + L * e;
    rows.push_back({x(0), x(1), x(2)});
  }
  return rows;
}

// Independent route: Tr sqrt(Σ1 Σ2) from the (real, non-negative) eigenvalues
// of the nonsymmetric product.
double frechet_oracle(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b, double eps) {
  auto stats = [&](const std::vector<std::vector<double>>& r) {
    Eigen::Vector3d m = Eigen::Vector3d::Zero();
    for (const auto& x : r) m += Eigen::Vector3d(x[0], x[1], x[2]);
    m /= double(r.size());
    Eigen::Matrix3d S = Eigen::Matrix3d::Zero();
    for (const auto& x : r) {
      Eigen::Vector3d d = Eigen::Vector3d(x[0], x[1], x[2]) - m;
      S += d * d.transpose();
    }
    S /= double(r.size() - 1);
    S += eps * Eigen::Matrix3d::Identity();
    return std::make_pair(m, S);
  };
  auto [m1, s1] = stats(a);
  auto [m2, s2] = stats(b);
  Eigen::EigenSolver<Eigen::Matrix3d> es(s1 * s2);
  double tr = 0.0;
  for (int i = 0; i < 3; ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()(i).real()));
  return (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr;
}

}  // namespace

TEST(LatentMae, HandExamples) {
  auto z = vec1({1, 3}), r = vec1({0, 1});
  EXPECT_DOUBLE_EQ(latent_mae(z, r), 1.5);
  EXPECT_DOUBLE_EQ(latent_mae(z, z), 0.0);
  EXPECT_DOUBLE_EQ(latent_l1(z, r), 3.0);
}

TEST(LatentMae, ShapeMismatchThrows) {
  EXPECT_THROW(latent_mae(vec1({1, 2}), vec1({1, 2, 3})), ContractError);
}

TEST(LatentMae, SymmetricNonNegativeZeroIffEqual) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    auto a = Tensor<double>::randn({2, 4, 3, 3}, rng), b = Tensor<double>::randn({2, 4, 3, 3}, rng);
    EXPECT_EQ(latent_mae(a, b), latent_mae(b, a));
    EXPECT_GT(latent_mae(a, b), 0.0);
    EXPECT_EQ(latent_mae(a, a), 0.0);
  }
}

TEST(LatentMae, PerSampleAveragesToWhole) {
  Rng rng(12);
  auto a = Tensor<double>::randn({5, 2, 3, 3}, rng), b = Tensor<double>::randn({5, 2, 3, 3}, rng);
  auto per = latent_mae_per_sample(a, b);
  ASSERT_EQ(per.size(), 5u);
  double m = 0;
  for (double v : per) m += v / 5.0;
  EXPECT_NEAR(m, latent_mae(a, b), 1e-12);
}

TEST(DifferenceRatio, HandExamples) {
  EXPECT_DOUBLE_EQ(difference_ratio(vec1({2, 2}), vec1({1, 1}), vec1({0, 2})), 0.5);
  EXPECT_DOUBLE_EQ(difference_ratio(vec1({2, 5}), vec1({2, 5}), vec1({0, 2})), 0.0);
}

TEST(DifferenceRatio, ConstantReferenceThrows) {
  EXPECT_THROW(difference_ratio(vec1({1, 2}), vec1({0, 0}), vec1({3, 3})), ContractError);
}

TEST(SrRange, HandExamples) {
  auto in = sr_range(0.2, 0.3);
  EXPECT_NEAR(in.lo, 0.1, 1e-15);
  EXPECT_NEAR(in.hi, 0.3, 1e-15);
  auto d = sr_range(0.4, 0.4);
  EXPECT_EQ(d.lo, 0.4);
  EXPECT_EQ(d.hi, 0.4);
  EXPECT_TRUE(d.contains(0.4));
}

TEST(SrRange, SymmetricAndContainsSr) {
  Rng rng(13);
  auto u = Tensor<double>::uniform({200}, rng, 0, 1);
  for (std::size_t i = 0; i + 1 < 200; i += 2) {
    const double sc = u[i], sr = u[i + 1];
    auto in = sr_range(sc, sr);
    EXPECT_NEAR(sc - in.lo, in.hi - sc, 1e-15);
    EXPECT_LT(std::min(std::abs(sr - in.lo), std::abs(sr - in.hi)), 1e-15);
    auto w = in.widened(0.5);
    EXPECT_NEAR(w.hi - w.lo, 1.5 * (in.hi - in.lo), 1e-14);
    EXPECT_NEAR(0.5 * (w.lo + w.hi), sc, 1e-14);
  }
}

TEST(Frechet, IdenticalSetsGiveZero) {
  Rng rng(14);
  auto z = Tensor<double>::randn({40, 3}, rng);
  auto rows = flatten_samples(z);
  EXPECT_NEAR(frechet_distance(rows, rows), 0.0, 1e-9);
  auto zf = Tensor<float>::randn({12, 2, 2, 2}, rng);
  EXPECT_NEAR(frechet_latent_distance(zf, zf), 0.0, 1e-9);
}

TEST(Frechet, OneDimensionalMeanGap) {
  // Exact sample moments N(0,1) and N(1,1).
  std::vector<std::vector<double>> a{{-1}, {0}, {1}}, b{{0}, {1}, {2}};
  EXPECT_NEAR(frechet_distance(a, b), 1.0, 1e-6);
}

TEST(Frechet, MatchesEigenOracle3D) {
  Rng rng(15);
  Eigen::Matrix3d L1, L2;
  L1 << 1.0, 0, 0, 0.5, 0.8, 0, -0.3, 0.2, 0.6;
  L2 << 0.7, 0, 0, -0.2, 1.3, 0, 0.4, 0.1, 0.3;
  auto a = gaussian_rows(400, L1, {0.1, -0.2, 0.3}, rng);
  auto b = gaussian_rows(300, L2, {0.5, 0.4, -0.1}, rng);
  const double got = frechet_distance(a, b, 1e-6);
  EXPECT_NEAR(got, frechet_oracle(a, b, 1e-6), 1e-6);
  EXPECT_NEAR(frechet_distance(b, a, 1e-6), got, 1e-9);
}

TEST(Frechet, SymmetricNonNegative) {
  Rng rng(16);
  for (int t = 0; t < 10; ++t) {
    auto a = flatten_samples(Tensor<double>::randn({20, 5}, rng));
    auto b = flatten_samples(Tensor<double>::randn({25, 5}, rng, 1.5));
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-9 * std::max(1.0, ab));
  }
}

TEST(Frechet, SmallSetHighDimensionIsFinite) {
  Rng rng(17);
  auto a = Tensor<float>::randn({4, 4, 4, 4}, rng), b = Tensor<float>::randn({4, 4, 4, 4}, rng);
  const double d = frechet_latent_distance(a, b);
  EXPECT_TRUE(std::isfinite(d));
  EXPECT_GE(d, 0.0);
}

TEST(Frechet, EmptyOrMismatchedThrows) {
  std::vector<std::vector<double>> e, a{{1, 2}}, b{{1, 2, 3}};
  EXPECT_THROW(frechet_distance(e, a), ContractError);
  EXPECT_THROW(frechet_distance(a, b), ContractError);
}

TEST(Psnr, CapAndArithmetic) {
  Rng rng(18);
  auto x = Tensor<double>::uniform({1, 3, 8, 8}, rng, 0, 1);
  EXPECT_EQ(psnr(x, x), 99.0);
  auto y = x;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += (i % 2 ? 0.1 : -0.1);  // MSE exactly 0.01
  EXPECT_NEAR(psnr(x, y), 20.0, 1e-9);
  EXPECT_NEAR(psnr(x, y, 2.0), 20.0 + 20.0 * std::log10(2.0), 1e-9);
}

TEST(Ssim, IdentityIsOne) {
  Rng rng(19);
  auto x = Tensor<double>::uniform({2, 3, 16, 16}, rng, 0, 1);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
}

TEST(Ssim, NegativeOfShapesIsNonPositive) {
  Tensor<double> x({1, 1, 24, 24}, 0.5);
  for (std::size_t h = 0; h < 24; ++h)
    for (std::size_t w = 0; w < 24; ++w) {
      const double dx = double(w) - 11.5, dy = double(h) - 11.5;
      if (dx * dx + dy * dy < 40) x.at(0, 0, h, w) = 0.8;
      if (h > 3 && h < 8 && w > 14 && w < 21) x.at(0, 0, h, w) = 0.2;
      if ((h + w) % 7 == 0) x.at(0, 0, h, w) = 0.65;
    }
  auto y = x;
  for (auto& v : y.vec()) v = 1.0 - v;
  EXPECT_LE(ssim(x, y), 0.0);
  EXPECT_NEAR(ssim(x, y), ssim(y, x), 1e-12);
}

TEST(Ssim, TooSmallThrows) {
  Tensor<double> x({1, 1, 8, 8});
  EXPECT_THROW(ssim(x, x), ContractError);
}

TEST(Pca, PlanarDataReconstructsExactly) {
  Rng rng(20);
  const std::vector<double> u{1, 2, 0, -1}, v{0, 1, 1, 3}, c{0.5, -0.5, 2, 1};
  auto coef = Tensor<double>::randn({30, 2}, rng);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < 30; ++i) {
    std::vector<double> r(4);
    for (int j = 0; j < 4; ++j) r[j] = c[j] + coef[i * 2 + 0] * u[j] + coef[i * 2 + 1] * v[j];
    rows.push_back(r);
  }
  auto p = pca_project(rows, 2);
  double err = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < 4; ++j) {
      double rec = p.mean[j];
      for (int k = 0; k < 2; ++k) rec += p.coords[i][k] * p.components[k][j];
      err = std::max(err, std::abs(rec - rows[i][j]));
    }
  EXPECT_LT(err, 1e-9);
  EXPECT_NEAR(p.explained[0] + p.explained[1], 1.0, 1e-9);
}

TEST(Pca, ExplainedVarianceNonIncreasing) {
  Rng rng(21);
  auto rows = flatten_samples(Tensor<double>::randn({50, 6}, rng));
  auto p = pca_project(rows, 6);
  for (std::size_t k = 1; k < 6; ++k) EXPECT_LE(p.explained[k], p.explained[k - 1]);
}

TEST(Pca, AnisotropicGaussianFirstFraction) {
  Rng rng(22);
  auto g = Tensor<double>::randn({4000, 3}, rng);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < 4000; ++i) rows.push_back({3.0 * g[i * 3 + 0], g[i * 3 + 1], 0.1 * g[i * 3 + 2]});
  auto p = pca_project(rows, 2);
  EXPECT_NEAR(p.explained[0], 9.0 / 10.01, 0.02);
}

TEST(Pca, BadKThrows) {
  std::vector<std::vector<double>> rows{{1, 2}, {3, 4}};
  EXPECT_THROW(pca_project(rows, 0), ContractError);
  EXPECT_THROW(pca_project(rows, 3), ContractError);
}
