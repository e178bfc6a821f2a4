#pragma once

#include "retinet/error.hpp"
#include "retinet/nn/network.hpp"

#include <cmath>
#include <random>
#include <span>
#include <vector>

namespace retinet::nn {

/// I.i.d. uniform samples on [-L, L], L = sqrt(6 / (fan_in + fan_out)).
template <typename Scalar = float>
Tensor<Scalar> glorot_init(Shape shape, Index fan_in, Index fan_out, std::mt19937_64& rng) {
  if (fan_in < 1 || fan_out < 1) throw ConfigError("glorot fans must be positive");
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(u(rng));
  return t;
}

/// Glorot weights for every Conv2D and Dense layer in layer order, zero
/// biases. Convolution fans count the receptive field: in*kh*kw, out*kh*kw.
template <typename Scalar>
void glorot_initialize(Network<Scalar>& net, std::mt19937_64& rng) {
  for (Index i = 0; i < net.layer_count(); ++i) {
    const LayerSpec& l = net.layer(i);
    auto& p = net.parameters(i);
    if (l.kind == LayerKind::Conv2D) {
      const Index rf = l.kernel_h * l.kernel_w;
      p[0].value = glorot_init<Scalar>(p[0].value.shape(), l.in_ch * rf, l.out_ch * rf, rng);
      p[1].value.set_zero();
    } else if (l.kind == LayerKind::Dense) {
      p[0].value = glorot_init<Scalar>(p[0].value.shape(), l.in_ch, l.out_ch, rng);
      p[1].value.set_zero();
    }
  }
}

template <typename Scalar>
struct LossResult {
  double loss = 0;                // mean over the batch
  Tensor<Scalar> logit_gradient;  // (p - onehot) / N, w.r.t. the softmax input
};

/// Categorical cross-entropy of softmax outputs (N, K, 1, 1) against class
/// indices; probabilities are clamped to >= 1e-12 before the log.
template <typename Scalar>
LossResult<Scalar> cross_entropy(const Tensor<Scalar>& probabilities, std::span<const int> labels) {
  const auto p = probabilities.rows();
  if (static_cast<Index>(labels.size()) != p.rows()) throw ConfigError("label count does not match batch");
  LossResult<Scalar> r{0.0, probabilities};
  auto g = r.logit_gradient.rows();
  const auto N = static_cast<double>(p.rows());
  for (Index n = 0; n < p.rows(); ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= p.cols()) throw ConfigError("label out of range");
    r.loss -= std::log(std::max(static_cast<double>(p(n, y)), 1e-12));
    g(n, y) -= Scalar(1);
  }
  r.loss /= N;
  g /= static_cast<Scalar>(N);
  return r;
}

/// Zeiler's Adadelta: decayed averages of squared gradients and updates.
template <typename Scalar>
struct AdadeltaState {
  double rho = 0.95;
  double epsilon = 1e-6;
  std::vector<std::vector<Tensor<Scalar>>> mean_sq_grad, mean_sq_update;

  AdadeltaState(const Network<Scalar>& net, double rho_ = 0.95, double epsilon_ = 1e-6)
      : rho(rho_), epsilon(epsilon_) {
    if (!(rho > 0 && rho < 1) || !(epsilon > 0)) throw ConfigError("adadelta needs 0 < rho < 1 and epsilon > 0");
    const Gradients<Scalar> shapes(net);
    mean_sq_grad = shapes.layers;
    mean_sq_update = shapes.layers;
  }
};

/// One update of every trainable parameter outside frozen blocks.
template <typename Scalar>
void adadelta_step(Network<Scalar>& net, const Gradients<Scalar>& grads, AdadeltaState<Scalar>& state) {
  const auto rho = static_cast<Scalar>(state.rho), eps = static_cast<Scalar>(state.epsilon);
  for (Index i = 0; i < net.layer_count(); ++i) {
    if (!net.trains(i)) continue;
    const auto li = static_cast<std::size_t>(i);
    std::size_t k = 0;
    for (auto& p : net.parameters(i)) {
      if (!p.trainable) continue;
      const auto& g = grads.layers[li][k].values();
      auto& eg = state.mean_sq_grad[li][k].values();
      auto& ex = state.mean_sq_update[li][k].values();
      if (g.size() != p.value.size()) throw ConfigError("shape mismatch: gradient for " + p.name);
      eg = rho * eg + (Scalar(1) - rho) * g.square();
      const typename Tensor<Scalar>::Array dx = -((ex + eps).sqrt() / (eg + eps).sqrt()) * g;
      ex = rho * ex + (Scalar(1) - rho) * dx.square();
      p.value.values() += dx;
      ++k;
    }
  }
}

/// Copies every parameter (running statistics included) of `block` from
/// `source` into `destination`, matching layers by position within the block.
template <typename Scalar>
void transfer_block(const Network<Scalar>& source, Network<Scalar>& destination, Block block) {
  if (!source.has_block(block) || !destination.has_block(block))
    throw ConfigError("missing block " + to_string(block));
  const auto [s0, s1] = source.block_range(block);
  const auto [d0, d1] = destination.block_range(block);
  if (s1 - s0 != d1 - d0) throw ConfigError("shape mismatch: block " + to_string(block) + " layer count differs");
  for (Index k = 0; k < s1 - s0; ++k) {
    const auto& sp = source.parameters(s0 + k);
    auto& dp = destination.parameters(d0 + k);
    if (source.layer(s0 + k).kind != destination.layer(d0 + k).kind || sp.size() != dp.size())
      throw ConfigError("shape mismatch: layer " + destination.layer(d0 + k).name);
    for (std::size_t j = 0; j < sp.size(); ++j)
      if (sp[j].value.shape() != dp[j].value.shape())
        throw ConfigError("shape mismatch: " + dp[j].name + " is " + to_string(dp[j].value.shape()) + ", source " +
                          to_string(sp[j].value.shape()));
  }
  for (Index k = 0; k < s1 - s0; ++k)
    for (std::size_t j = 0; j < source.parameters(s0 + k).size(); ++j)
      destination.parameters(d0 + k)[j].value = source.parameters(s0 + k)[j].value;
}

}  // namespace retinet::nn
