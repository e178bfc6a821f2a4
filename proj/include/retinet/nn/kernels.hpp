#pragma once

#include "retinet/nn/layer.hpp"
#include "retinet/nn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

// Forward/backward kernels for single layers. Activations are NCHW. All
// loops run in a fixed order, so results do not depend on scheduling.
namespace retinet::nn::kernels {

/// Unfolds one CHW sample into a (C*kh*kw) x (OH*OW) patch matrix.
template <typename Scalar>
void im2col(const Scalar* in, Index C, Index H, Index W, const LayerSpec& l, Index OH, Index OW,
            RowMatrix<Scalar>& col) {
  const Index kh = l.kernel_h, kw = l.kernel_w, s = l.stride, p = l.padding;
  col.resize(C * kh * kw, OH * OW);
  for (Index c = 0; c < C; ++c)
    for (Index i = 0; i < kh; ++i)
      for (Index j = 0; j < kw; ++j) {
        Scalar* dst = col.row((c * kh + i) * kw + j).data();
        for (Index y = 0; y < OH; ++y, dst += OW) {
          const Index yy = y * s + i - p;
          if (yy < 0 || yy >= H) {
            std::fill(dst, dst + OW, Scalar(0));
            continue;
          }
          const Scalar* src = in + (c * H + yy) * W;
          if (s == 1) {
            // valid x satisfy 0 <= x + j - p < W
            const Index x0 = std::clamp<Index>(p - j, 0, OW), x1 = std::clamp<Index>(W + p - j, x0, OW);
            std::fill(dst, dst + x0, Scalar(0));
            std::copy(src + x0 + j - p, src + x1 + j - p, dst + x0);
            std::fill(dst + x1, dst + OW, Scalar(0));
          } else {
            for (Index x = 0; x < OW; ++x) {
              const Index xx = x * s + j - p;
              dst[x] = xx >= 0 && xx < W ? src[xx] : Scalar(0);
            }
          }
        }
      }
}

/// Adjoint of im2col: scatters patch gradients back onto a CHW sample.
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, Index C, Index H, Index W, const LayerSpec& l, Index OH, Index OW,
            Scalar* out) {
  const Index kh = l.kernel_h, kw = l.kernel_w, s = l.stride, p = l.padding;
  for (Index c = 0; c < C; ++c)
    for (Index i = 0; i < kh; ++i)
      for (Index j = 0; j < kw; ++j) {
        const Scalar* src = col.row((c * kh + i) * kw + j).data();
        for (Index y = 0; y < OH; ++y, src += OW) {
          const Index yy = y * s + i - p;
          if (yy < 0 || yy >= H) continue;
          Scalar* dst = out + (c * H + yy) * W;
          if (s == 1) {
            const Index x0 = std::clamp<Index>(p - j, 0, OW), x1 = std::clamp<Index>(W + p - j, x0, OW);
            for (Index x = x0; x < x1; ++x) dst[x + j - p] += src[x];
            continue;
          }
          for (Index x = 0; x < OW; ++x) {
            const Index xx = x * s + j - p;
            if (xx >= 0 && xx < W) dst[xx] += src[x];
          }
        }
      }
}

template <typename Scalar>
void conv_forward(const LayerSpec& l, const Tensor<Scalar>& in, const Tensor<Scalar>& weight,
                  const Tensor<Scalar>& bias, Tensor<Scalar>& out) {
  const Index N = in.batch(), C = in.channels(), H = in.height(), W = in.width();
  const Index OH = out.height(), OW = out.width();
  const Eigen::Map<const RowMatrix<Scalar>> w(weight.data(), l.out_ch, C * l.kernel_h * l.kernel_w);
  const Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(bias.data(), l.out_ch);
  RowMatrix<Scalar> col;
  for (Index n = 0; n < N; ++n) {
    im2col(in.data() + n * in.sample_size(), C, H, W, l, OH, OW, col);
    auto y = out.sample(n);
    y.noalias() = w * col;
    y.colwise() += b;
  }
}

template <typename Scalar>
void conv_backward(const LayerSpec& l, const Tensor<Scalar>& in, const Tensor<Scalar>& weight,
                   const Tensor<Scalar>& grad_out, Tensor<Scalar>* grad_weight, Tensor<Scalar>* grad_bias,
                   Tensor<Scalar>* grad_in) {
  const Index N = in.batch(), C = in.channels(), H = in.height(), W = in.width();
  const Index OH = grad_out.height(), OW = grad_out.width();
  const Index K = C * l.kernel_h * l.kernel_w;
  const Eigen::Map<const RowMatrix<Scalar>> w(weight.data(), l.out_ch, K);
  RowMatrix<Scalar> col, dcol;
  for (Index n = 0; n < N; ++n) {
    const auto dy = grad_out.sample(n);
    if (grad_weight) {
      im2col(in.data() + n * in.sample_size(), C, H, W, l, OH, OW, col);
      Eigen::Map<RowMatrix<Scalar>> dw(grad_weight->data(), l.out_ch, K);
      dw.noalias() += dy * col.transpose();
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(grad_bias->data(), l.out_ch) += dy.rowwise().sum();
    }
    if (grad_in) {
      dcol.noalias() = w.transpose() * dy;
      col2im(dcol, C, H, W, l, OH, OW, grad_in->data() + n * grad_in->sample_size());
    }
  }
}

template <typename Scalar>
void max_pool_forward(const LayerSpec& l, const Tensor<Scalar>& in, Tensor<Scalar>& out,
                      std::vector<Index>& argmax) {
  const Index H = in.height(), W = in.width(), OH = out.height(), OW = out.width();
  argmax.resize(static_cast<std::size_t>(out.size()));
  Index o = 0;
  for (Index nc = 0; nc < in.batch() * in.channels(); ++nc) {
    const Index base = nc * H * W;
    for (Index y = 0; y < OH; ++y)
      for (Index x = 0; x < OW; ++x, ++o) {
        Index best = base + y * l.kernel_h * W + x * l.kernel_w;
        for (Index i = 0; i < l.kernel_h; ++i)
          for (Index j = 0; j < l.kernel_w; ++j) {
            const Index k = base + (y * l.kernel_h + i) * W + x * l.kernel_w + j;
            if (in[k] > in[best]) best = k;
          }
        argmax[static_cast<std::size_t>(o)] = best;
        out[o] = in[best];
      }
  }
}

template <typename Scalar>
void max_pool_backward(const std::vector<Index>& argmax, const Tensor<Scalar>& grad_out, Tensor<Scalar>& grad_in) {
  for (Index o = 0; o < grad_out.size(); ++o) grad_in[argmax[static_cast<std::size_t>(o)]] += grad_out[o];
}

template <typename Scalar>
void avg_pool_forward(const LayerSpec& l, const Tensor<Scalar>& in, Tensor<Scalar>& out) {
  const Index H = in.height(), W = in.width(), OH = out.height(), OW = out.width();
  const double scale = 1.0 / static_cast<double>(l.kernel_h * l.kernel_w);
  Index o = 0;
  for (Index nc = 0; nc < in.batch() * in.channels(); ++nc) {
    const Index base = nc * H * W;
    for (Index y = 0; y < OH; ++y)
      for (Index x = 0; x < OW; ++x, ++o) {
        double sum = 0;
        for (Index i = 0; i < l.kernel_h; ++i)
          for (Index j = 0; j < l.kernel_w; ++j) sum += in[base + (y * l.kernel_h + i) * W + x * l.kernel_w + j];
        out[o] = static_cast<Scalar>(sum * scale);
      }
  }
}

template <typename Scalar>
void avg_pool_backward(const LayerSpec& l, const Tensor<Scalar>& grad_out, Tensor<Scalar>& grad_in) {
  const Index H = grad_in.height(), W = grad_in.width(), OH = grad_out.height(), OW = grad_out.width();
  const Scalar scale = Scalar(1) / static_cast<Scalar>(l.kernel_h * l.kernel_w);
  Index o = 0;
  for (Index nc = 0; nc < grad_in.batch() * grad_in.channels(); ++nc) {
    const Index base = nc * H * W;
    for (Index y = 0; y < OH; ++y)
      for (Index x = 0; x < OW; ++x, ++o)
        for (Index i = 0; i < l.kernel_h; ++i)
          for (Index j = 0; j < l.kernel_w; ++j)
            grad_in[base + (y * l.kernel_h + i) * W + x * l.kernel_w + j] += grad_out[o] * scale;
  }
}

template <typename Scalar>
void dense_forward(const Tensor<Scalar>& in, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                   Tensor<Scalar>& out) {
  const Eigen::Map<const RowMatrix<Scalar>> w(weight.data(), weight.dim(0), weight.dim(1));
  const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias.data(), bias.size());
  auto y = out.rows();
  y.noalias() = in.rows() * w;
  y.rowwise() += b;
}

template <typename Scalar>
void dense_backward(const Tensor<Scalar>& in, const Tensor<Scalar>& weight, const Tensor<Scalar>& grad_out,
                    Tensor<Scalar>* grad_weight, Tensor<Scalar>* grad_bias, Tensor<Scalar>* grad_in) {
  const Eigen::Map<const RowMatrix<Scalar>> w(weight.data(), weight.dim(0), weight.dim(1));
  const auto dy = grad_out.rows();
  if (grad_weight) {
    Eigen::Map<RowMatrix<Scalar>>(grad_weight->data(), weight.dim(0), weight.dim(1)).noalias() +=
        in.rows().transpose() * dy;
    Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(grad_bias->data(), grad_bias->size()) +=
        dy.colwise().sum();
  }
  if (grad_in) grad_in->rows().noalias() += dy * w.transpose();
}

struct BatchStatistics {
  Eigen::ArrayXd mean, var, inv_std;
};

/// Normalises per channel over batch and spatial axes. With `batch` set the
/// statistics come from the input; otherwise from the running estimates.
template <typename Scalar>
BatchStatistics batch_norm_forward(const LayerSpec& l, const Tensor<Scalar>& in, const Tensor<Scalar>& gamma,
                                   const Tensor<Scalar>& beta, const Tensor<Scalar>& running_mean,
                                   const Tensor<Scalar>& running_var, bool batch, Tensor<Scalar>& normalized,
                                   Tensor<Scalar>& out) {
  const Index N = in.batch(), C = in.channels(), S = in.height() * in.width();
  BatchStatistics st;
  if (batch) {
    const auto M = static_cast<double>(N * S);
    st.mean = Eigen::ArrayXd::Zero(C);
    st.var = Eigen::ArrayXd::Zero(C);
    for (Index n = 0; n < N; ++n) st.mean += in.sample(n).template cast<double>().rowwise().sum().array();
    st.mean /= M;
    for (Index n = 0; n < N; ++n)
      st.var += (in.sample(n).template cast<double>().array().colwise() - st.mean).square().rowwise().sum();
    st.var /= M;
  } else {
    st.mean = running_mean.values().template cast<double>();
    st.var = running_var.values().template cast<double>();
  }
  st.inv_std = (st.var + l.epsilon).rsqrt();
  for (Index n = 0; n < N; ++n) {
    auto xh = normalized.sample(n);
    xh = ((in.sample(n).template cast<double>().array().colwise() - st.mean).colwise() * st.inv_std)
             .template cast<Scalar>()
             .matrix();
    out.sample(n) = ((xh.array().colwise() * gamma.values()).colwise() + beta.values()).matrix();
  }
  return st;
}

template <typename Scalar>
void batch_norm_backward(const Tensor<Scalar>& normalized, const BatchStatistics& st, bool batch,
                         const Tensor<Scalar>& gamma, const Tensor<Scalar>& grad_out, Tensor<Scalar>* grad_gamma,
                         Tensor<Scalar>* grad_beta, Tensor<Scalar>* grad_in) {
  const Index N = normalized.batch(), C = normalized.channels(), S = normalized.height() * normalized.width();
  Eigen::ArrayXd sum_dy = Eigen::ArrayXd::Zero(C), sum_dy_xh = Eigen::ArrayXd::Zero(C);
  for (Index n = 0; n < N; ++n) {
    const auto dy = grad_out.sample(n).template cast<double>().array();
    sum_dy += dy.rowwise().sum();
    sum_dy_xh += (dy * normalized.sample(n).template cast<double>().array()).rowwise().sum();
  }
  if (grad_gamma) {
    grad_gamma->values() += sum_dy_xh.cast<Scalar>();
    grad_beta->values() += sum_dy.cast<Scalar>();
  }
  if (!grad_in) return;
  const Eigen::ArrayXd g = gamma.values().template cast<double>();
  const auto M = static_cast<double>(N * S);
  for (Index n = 0; n < N; ++n) {
    const auto dy = grad_out.sample(n).template cast<double>().array();
    Eigen::ArrayXXd dx;
    if (batch) {
      // d/dx of gamma * (x - mean) * inv_std with batch statistics
      const Eigen::ArrayXXd xh = normalized.sample(n).template cast<double>().array();
      dx = ((dy.colwise() - sum_dy / M) - xh.colwise() * (sum_dy_xh / M)).colwise() * (g * st.inv_std);
    } else {
      dx = dy.colwise() * (g * st.inv_std);
    }
    grad_in->sample(n) += dx.cast<Scalar>().matrix();
  }
}

/// Row-wise softmax over all non-batch axes, evaluated in double.
template <typename Scalar>
void softmax_forward(const Tensor<Scalar>& in, Tensor<Scalar>& out) {
  const auto x = in.rows();
  auto y = out.rows();
  for (Index n = 0; n < x.rows(); ++n) {
    const Eigen::ArrayXd z = x.row(n).transpose().template cast<double>().array();
    const Eigen::ArrayXd e = (z - z.maxCoeff()).exp();
    y.row(n) = (e / e.sum()).template cast<Scalar>().matrix().transpose();
  }
}

template <typename Scalar>
void softmax_backward(const Tensor<Scalar>& out, const Tensor<Scalar>& grad_out, Tensor<Scalar>& grad_in) {
  const auto y = out.rows();
  const auto dy = grad_out.rows();
  auto dx = grad_in.rows();
  for (Index n = 0; n < y.rows(); ++n) {
    const Scalar dot = y.row(n).dot(dy.row(n));
    dx.row(n).array() += y.row(n).array() * (dy.row(n).array() - dot);
  }
}

}  // namespace retinet::nn::kernels
