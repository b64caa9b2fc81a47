#pragma once

// Latent distances, difference ratios, Fréchet latent distance, PSNR/SSIM and
// PCA projection.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "catw/tensor.hpp"

namespace catw {

/// mean |z − z_ref|.
template <class T>
double latent_mae(const Tensor<T>& z, const Tensor<T>& z_ref) {
  z.require_same_shape(z_ref, "latent_mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) acc += std::abs(double(z[i]) - double(z_ref[i]));
  return acc / double(z.numel());
}

/// Sum-reduced variant for sensitivity checks.
template <class T>
double latent_l1(const Tensor<T>& z, const Tensor<T>& z_ref) {
  return latent_mae(z, z_ref) * double(z.numel());
}

/// Per-sample latent_mae along the leading dimension.
template <class T>
std::vector<double> latent_mae_per_sample(const Tensor<T>& z, const Tensor<T>& z_ref) {
  z.require_same_shape(z_ref, "latent_mae_per_sample");
  std::vector<double> out;
  for (std::size_t n = 0; n < z.dim(0); ++n) out.push_back(latent_mae(z.slice0(n, n + 1), z_ref.slice0(n, n + 1)));
  return out;
}

/// max(z) − min(z).
template <class T>
double value_range(const Tensor<T>& z) {
  auto [lo, hi] = std::minmax_element(z.vec().begin(), z.vec().end());
  return double(*hi) - double(*lo);
}

/// MAE(z, z̃) / (max z_c − min z_c).
template <class T>
double difference_ratio(const Tensor<T>& z, const Tensor<T>& z_tilde, const Tensor<T>& z_c) {
  const double zb = value_range(z_c);
  if (!(zb > 0.0)) throw ContractError("difference_ratio: constant reference latent has zero range");
  return latent_mae(z, z_tilde) / zb;
}

struct Interval {
  double lo = 0.0, hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
  /// Same centre, half-width scaled by (1 + margin).
  Interval widened(double margin) const {
    const double c = 0.5 * (lo + hi), h = 0.5 * (hi - lo) * (1.0 + margin);
    return {c - h, c + h};
  }
};

/// [s_c − |s_c − s_r|, s_c + |s_c − s_r|].
inline Interval sr_range(double s_c, double s_r) {
  const double h = std::abs(s_c - s_r);
  return {s_c - h, s_c + h};
}

namespace detail {

using DMat = Eigen::MatrixXd;
using DVec = Eigen::VectorXd;

inline std::pair<DVec, DMat> moments(const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.size(), d = rows.front().size();
  DMat X(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != d) throw ContractError("frechet: inconsistent sample dimensions");
    for (std::size_t j = 0; j < d; ++j) X(i, j) = rows[i][j];
  }
  DVec mu = X.colwise().mean();
  DMat C = X.rowwise() - mu.transpose();
  DMat cov = n > 1 ? DMat((C.transpose() * C) / double(n - 1)) : DMat::Zero(d, d);
  return {mu, cov};
}

/// Tr((A B)^{1/2}) for symmetric PSD A, B via the symmetric form A^{1/2} B A^{1/2}.
inline bool trace_sqrt_product(const DMat& A, const DMat& B, double& out) {
  Eigen::SelfAdjointEigenSolver<DMat> ea(A);
  if (ea.info() != Eigen::Success) return false;
  DVec sa = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  DMat Ah = ea.eigenvectors() * sa.asDiagonal() * ea.eigenvectors().transpose();
  DMat M = Ah * B * Ah;
  M = 0.5 * (M + M.transpose());
  Eigen::SelfAdjointEigenSolver<DMat> em(M, Eigen::EigenvaluesOnly);
  if (em.info() != Eigen::Success) return false;
  out = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return std::isfinite(out);
}

}  // namespace detail

/// Flattens each leading-dimension sample to a row.
template <class T>
std::vector<std::vector<double>> flatten_samples(const Tensor<T>& z) {
  std::vector<std::vector<double>> rows(z.dim(0));
  const std::size_t per = z.numel() / z.dim(0);
  for (std::size_t n = 0; n < rows.size(); ++n) rows[n].assign(z.data() + n * per, z.data() + (n + 1) * per);
  return rows;
}

/// ‖μ₁−μ₂‖² + Tr(Σ₁+Σ₂−2(Σ₁Σ₂)^{1/2}) with Σ + shrinkage·I.
inline double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                               double shrinkage = 1e-6) {
  if (a.empty() || b.empty()) throw ContractError("frechet: empty sample set");
  if (a.front().size() != b.front().size()) throw ContractError("frechet: sets differ in dimension");
  auto [m1, s1] = detail::moments(a);
  auto [m2, s2] = detail::moments(b);
  const auto I = detail::DMat::Identity(s1.rows(), s1.cols());
  for (double eps : {shrinkage, std::max(shrinkage, 1e-3)}) {
    const detail::DMat A = s1 + eps * I, B = s2 + eps * I;
    double tr = 0.0;
    if (!detail::trace_sqrt_product(A, B, tr)) continue;
    const double v = (m1 - m2).squaredNorm() + A.trace() + B.trace() - 2.0 * tr;
    return std::max(0.0, v);
  }
  throw ContractError("frechet: matrix square root failed after regularized retry");
}

template <class T>
double frechet_latent_distance(const Tensor<T>& a, const Tensor<T>& b, double shrinkage = 1e-6) {
  return frechet_distance(flatten_samples(a), flatten_samples(b), shrinkage);
}

/// 10·log10(peak²/MSE), capped at 99 dB.
template <class T>
double psnr(const Tensor<T>& x, const Tensor<T>& y, double peak = 1.0) {
  x.require_same_shape(y, "psnr");
  double mse = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) mse += (double(x[i]) - y[i]) * (double(x[i]) - y[i]);
  mse /= double(x.numel());
  if (mse < 1e-10) return 99.0;
  return std::min(99.0, 10.0 * std::log10(peak * peak / mse));
}

/// Mean PSNR over leading-dimension samples.
template <class T>
double mean_psnr(const Tensor<T>& x, const Tensor<T>& y, double peak = 1.0) {
  x.require_same_shape(y, "mean_psnr");
  double acc = 0.0;
  for (std::size_t n = 0; n < x.dim(0); ++n) acc += psnr(x.slice0(n, n + 1), y.slice0(n, n + 1), peak);
  return acc / double(x.dim(0));
}

/// SSIM with an 11×11 Gaussian window (σ 1.5) over valid positions, averaged
/// over samples, channels and positions. NCHW.
template <class T>
double ssim(const Tensor<T>& x, const Tensor<T>& y, double peak = 1.0) {
  x.require_same_shape(y, "ssim");
  if (x.rank() != 4) throw ContractError("ssim expects NCHW, got " + shape_str(x.shape()));
  constexpr int win = 11;
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < win || W < win) throw ContractError("ssim needs images at least 11x11");
  double w[win * win], z = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) z += w[i * win + j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
  for (auto& v : w) v /= z;
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* a = x.data() + (n * C + c) * H * W;
      const T* b = y.data() + (n * C + c) * H * W;
      for (std::size_t h = 0; h + win <= H; ++h)
        for (std::size_t q = 0; q + win <= W; ++q) {
          double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
          for (int i = 0; i < win; ++i)
            for (int j = 0; j < win; ++j) {
              const double wt = w[i * win + j], u = a[(h + i) * W + q + j], v = b[(h + i) * W + q + j];
              mx += wt * u;
              my += wt * v;
              sxx += wt * u * u;
              syy += wt * v * v;
              sxy += wt * u * v;
            }
          const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
          acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
    }
  return acc / double(count);
}

struct PcaResult {
  std::vector<std::vector<double>> coords;   // n × k
  std::vector<double> explained;             // fraction of total variance per component
  std::vector<std::vector<double>> components;  // k × d
  std::vector<double> mean;
};

/// Mean-centred projection onto the top-k principal directions.
inline PcaResult pca_project(const std::vector<std::vector<double>>& rows, std::size_t k = 2) {
  if (rows.empty()) throw ContractError("pca_project: empty set");
  auto [mu, cov] = detail::moments(rows);
  const std::size_t d = std::size_t(mu.size());
  if (k == 0 || k > d) throw ContractError("pca_project: k must lie in [1, " + std::to_string(d) + "]");
  Eigen::SelfAdjointEigenSolver<detail::DMat> es(cov);
  const detail::DVec ev = es.eigenvalues().cwiseMax(0.0);  // ascending
  const double total = ev.sum();
  PcaResult r;
  r.mean.assign(mu.data(), mu.data() + d);
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::Index idx = Eigen::Index(d - 1 - c);
    detail::DVec v = es.eigenvectors().col(idx);
    // Sign convention: largest-magnitude entry positive.
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    r.components.emplace_back(v.data(), v.data() + d);
    r.explained.push_back(total > 0 ? ev(idx) / total : 0.0);
  }
  for (const auto& row : rows) {
    std::vector<double> p(k);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < d; ++j) p[c] += (row[j] - r.mean[j]) * r.components[c][j];
    r.coords.push_back(std::move(p));
  }
  return r;
}

}  // namespace catw
