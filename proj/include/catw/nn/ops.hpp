#pragma once

// Convolution (optionally with a low-rank additive path) and the scaled
// dot-product core of single-head spatial attention.

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <string>

#include "catw/autodiff.hpp"

namespace catw {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t n, c, h, w;    // input
  std::size_t out_c, k;      // kernel
  std::size_t stride, pad;
  std::size_t oh, ow;

  std::size_t cols_rows() const { return c * k * k; }
  std::size_t positions() const { return oh * ow; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  if (x.size() != 4) throw ContractError("conv2d: input must be NCHW, got " + shape_str(x));
  if (w.size() != 4) throw ContractError("conv2d: weight must be O×I×k×k, got " + shape_str(w));
  if (w[2] != w[3]) throw ContractError("conv2d: kernel must be square, got " + shape_str(w));
  if (w[1] != x[1])
    throw ContractError("conv2d: input channels " + std::to_string(x[1]) + " do not match weight in-channels " +
                        std::to_string(w[1]));
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t k = w[2];
  if (x[2] + 2 * pad < k) throw ContractError("conv2d: height " + std::to_string(x[2]) + " too small for kernel");
  if (x[3] + 2 * pad < k) throw ContractError("conv2d: width " + std::to_string(x[3]) + " too small for kernel");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], k, stride, pad, 0, 0};
  g.oh = (g.h + 2 * pad - k) / stride + 1;
  g.ow = (g.w + 2 * pad - k) / stride + 1;
  return g;
}

namespace detail {

// Valid output-column range [lo, hi) for kernel offset j along one axis.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t j, std::size_t stride,
                                                       std::size_t pad) {
  // need 0 <= o*stride + j - pad < in
  std::size_t lo = 0;
  if (j < pad) lo = (pad - j + stride - 1) / stride;
  std::size_t hi = 0;
  if (in + pad > j) hi = std::min(out, (in + pad - j - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

// cols: (C·k·k) × (N·OH·OW), zero padded.
template <class T>
RowMat<T> im2col(const Tensor<T>& x, const ConvGeometry& g) {
  const std::size_t P = g.positions();
  RowMat<T> cols = RowMat<T>::Zero(g.cols_rows(), g.n * P);
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.k; ++i) {
      const auto [ylo, yhi] = valid_range(g.oh, g.h, i, g.stride, g.pad);
      for (std::size_t j = 0; j < g.k; ++j) {
        const auto [xlo, xhi] = valid_range(g.ow, g.w, j, g.stride, g.pad);
        T* row = cols.data() + ((c * g.k + i) * g.k + j) * cols.cols();
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* img = x.data() + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const T* src = img + (oy * g.stride + i - g.pad) * g.w + (xlo * g.stride + j - g.pad);
            T* dst = row + n * P + oy * g.ow;
            if (g.stride == 1) {
              std::copy(src, src + (xhi - xlo), dst + xlo);
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] = src[(ox - xlo) * g.stride];
            }
          }
        }
      }
    }
  return cols;
}

template <class T>
Tensor<T> col2im(const RowMat<T>& cols, const ConvGeometry& g) {
  const std::size_t P = g.positions();
  Tensor<T> x(Shape{g.n, g.c, g.h, g.w});
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.k; ++i) {
      const auto [ylo, yhi] = valid_range(g.oh, g.h, i, g.stride, g.pad);
      for (std::size_t j = 0; j < g.k; ++j) {
        const auto [xlo, xhi] = valid_range(g.ow, g.w, j, g.stride, g.pad);
        const T* row = cols.data() + ((c * g.k + i) * g.k + j) * cols.cols();
        for (std::size_t n = 0; n < g.n; ++n) {
          T* img = x.data() + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            T* dst = img + (oy * g.stride + i - g.pad) * g.w + (xlo * g.stride + j - g.pad);
            const T* src = row + n * P + oy * g.ow;
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[(ox - xlo) * g.stride] += src[ox];
          }
        }
      }
    }
  return x;
}

// (O × N·P) matrix <-> N×O×OH×OW tensor.
template <class T>
Tensor<T> columns_to_nchw(const RowMat<T>& y, const ConvGeometry& g) {
  const std::size_t P = g.positions();
  Tensor<T> out(Shape{g.n, g.out_c, g.oh, g.ow});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.out_c; ++o)
      std::copy_n(y.data() + o * y.cols() + n * P, P, out.data() + (n * g.out_c + o) * P);
  return out;
}

template <class T>
RowMat<T> nchw_to_columns(const Tensor<T>& t, const ConvGeometry& g) {
  const std::size_t P = g.positions();
  RowMat<T> y(g.out_c, g.n * P);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.out_c; ++o)
      std::copy_n(t.data() + (n * g.out_c + o) * P, P, y.data() + o * y.cols() + n * P);
  return y;
}

}  // namespace detail

/// Low-rank additive path for a host weight viewed as a d×k matrix:
/// down is r×k, up is d×r.
template <class T>
struct LowRankPath {
  Var<T> down;
  Var<T> up;
  explicit operator bool() const { return down && up; }
};

/// 2-D convolution, zero padding. weight O×I×k×k, bias O (may be null).
/// With a low-rank path the effective weight is weight + up·down (the kernel
/// flattened to O×(I·k·k)); the adapter contribution is computed as
/// up·(down·cols) so the base weight is never modified.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad,
              const LowRankPath<T>& lora = {}) {
  const ConvGeometry g = conv_geometry(x->value.shape(), weight->value.shape(), stride, pad);
  if (bias && bias->value.numel() != g.out_c)
    throw ContractError("conv2d: bias length " + std::to_string(bias->value.numel()) + " does not match out-channels " +
                        std::to_string(g.out_c));
  const std::size_t K = g.cols_rows();
  if (lora) {
    const auto& ds = lora.down->value.shape();
    const auto& us = lora.up->value.shape();
    if (ds.size() != 2 || us.size() != 2 || ds[1] != K || us[0] != g.out_c || us[1] != ds[0])
      throw ContractError("conv2d: adapter factors " + shape_str(us) + "·" + shape_str(ds) + " do not fit weight " +
                          shape_str(weight->value.shape()));
  }

  auto cols = std::make_shared<RowMat<T>>(detail::im2col(x->value, g));
  ConstMatMap<T> W(weight->value.data(), g.out_c, K);
  RowMat<T> y = W * (*cols);
  if (bias)
    for (std::size_t o = 0; o < g.out_c; ++o) y.row(o).array() += bias->value[o];

  std::shared_ptr<RowMat<T>> proj;  // down·cols
  if (lora) {
    const std::size_t r = lora.down->value.dim(0);
    ConstMatMap<T> A(lora.down->value.data(), r, K);
    ConstMatMap<T> B(lora.up->value.data(), g.out_c, r);
    proj = std::make_shared<RowMat<T>>(A * (*cols));
    y.noalias() += B * (*proj);
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  if (lora) {
    parents.push_back(lora.down);
    parents.push_back(lora.up);
  }
  return detail::make_node<T>(detail::columns_to_nchw(y, g), std::move(parents),
                              [x, weight, bias, lora, g, cols, proj, K](const Tensor<T>& grad) {
                                const RowMat<T> G = detail::nchw_to_columns(grad, g);
                                ConstMatMap<T> W(weight->value.data(), g.out_c, K);
                                RowMat<T> up_t_g;
                                if (lora) {
                                  const std::size_t r = lora.down->value.dim(0);
                                  ConstMatMap<T> A(lora.down->value.data(), r, K);
                                  ConstMatMap<T> B(lora.up->value.data(), g.out_c, r);
                                  up_t_g = B.transpose() * G;
                                  if (lora.up->requires_grad) {
                                    Tensor<T> dB(lora.up->value.shape());
                                    MatMap<T>(dB.data(), g.out_c, r).noalias() = G * proj->transpose();
                                    accumulate_grad(*lora.up, dB);
                                  }
                                  if (lora.down->requires_grad) {
                                    Tensor<T> dA(lora.down->value.shape());
                                    MatMap<T>(dA.data(), r, K).noalias() = up_t_g * cols->transpose();
                                    accumulate_grad(*lora.down, dA);
                                  }
                                }
                                if (weight->requires_grad) {
                                  Tensor<T> dW(weight->value.shape());
                                  MatMap<T>(dW.data(), g.out_c, K).noalias() = G * cols->transpose();
                                  accumulate_grad(*weight, dW);
                                }
                                if (bias && bias->requires_grad) {
                                  Tensor<T> db(bias->value.shape());
                                  for (std::size_t o = 0; o < g.out_c; ++o) db[o] = G.row(o).sum();
                                  accumulate_grad(*bias, db);
                                }
                                if (x->requires_grad) {
                                  RowMat<T> dcols = W.transpose() * G;
                                  if (lora) {
                                    const std::size_t r = lora.down->value.dim(0);
                                    ConstMatMap<T> A(lora.down->value.data(), r, K);
                                    dcols.noalias() += A.transpose() * up_t_g;
                                  }
                                  accumulate_grad(*x, detail::col2im(dcols, g));
                                }
                              });
}

/// Softmax attention core over the H·W positions of each sample:
/// out[:, i] = Σ_j softmax_j(q[:, i]·k[:, j] / √C) v[:, j].
template <class T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  const auto& s = q->value.shape();
  if (s.size() != 4) throw ContractError("attention expects NCHW, got " + shape_str(s));
  q->value.require_same_shape(k->value, "attention q/k");
  q->value.require_same_shape(v->value, "attention q/v");
  const std::size_t N = s[0], C = s[1], P = s[2] * s[3];
  const T inv_sqrt_c = T(1) / std::sqrt(T(C));

  auto weights = std::make_shared<std::vector<RowMat<T>>>(N);
  Tensor<T> out(s);
  for (std::size_t n = 0; n < N; ++n) {
    ConstMatMap<T> Q(q->value.data() + n * C * P, C, P);
    ConstMatMap<T> K(k->value.data() + n * C * P, C, P);
    ConstMatMap<T> V(v->value.data() + n * C * P, C, P);
    RowMat<T> S = (Q.transpose() * K) * inv_sqrt_c;  // P×P, row i = query i
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
      const T m = S.row(i).maxCoeff();
      S.row(i) = (S.row(i).array() - m).exp();
      S.row(i) /= S.row(i).sum();
    }
    MatMap<T>(out.data() + n * C * P, C, P).noalias() = V * S.transpose();
    (*weights)[n] = std::move(S);
  }
  return detail::make_node<T>(std::move(out), {q, k, v}, [q, k, v, weights, N, C, P, inv_sqrt_c](const Tensor<T>& grad) {
    Tensor<T> dq(q->value.shape()), dk(k->value.shape()), dv(v->value.shape());
    for (std::size_t n = 0; n < N; ++n) {
      const RowMat<T>& A = (*weights)[n];
      ConstMatMap<T> Q(q->value.data() + n * C * P, C, P);
      ConstMatMap<T> K(k->value.data() + n * C * P, C, P);
      ConstMatMap<T> V(v->value.data() + n * C * P, C, P);
      ConstMatMap<T> G(grad.data() + n * C * P, C, P);
      MatMap<T>(dv.data() + n * C * P, C, P).noalias() = G * A;
      RowMat<T> dA = G.transpose() * V;  // P×P
      RowMat<T> dS(P, P);
      for (std::size_t i = 0; i < P; ++i) {
        const T dot = (dA.row(i).array() * A.row(i).array()).sum();
        dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
      }
      dS *= inv_sqrt_c;
      MatMap<T>(dq.data() + n * C * P, C, P).noalias() = K * dS.transpose();
      MatMap<T>(dk.data() + n * C * P, C, P).noalias() = Q * dS;
    }
    accumulate_grad(*q, dq);
    accumulate_grad(*k, dk);
    accumulate_grad(*v, dv);
  });
}

}  // namespace catw
