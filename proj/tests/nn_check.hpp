#pragma once

// Oracles for the network kernels: a nested-loop reference evaluator that
// shares no code with the library kernels, and a central-difference
// gradient checker.

#include "retinet/nn/network.hpp"
#include "retinet/nn/optim.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace retinet::test {

using nn::Index;
using nn::LayerKind;
using nn::Tensor;

inline Tensor<double> random_tensor(nn::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = g(rng);
  return t;
}

/// Fills every parameter (weights, biases, BatchNorm affine and running
/// statistics) with random values; running variances stay positive.
inline void randomize(nn::Network<double>& net, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 0.5);
  for (Index i = 0; i < net.layer_count(); ++i)
    for (auto& p : net.parameters(i))
      for (Index k = 0; k < p.value.size(); ++k)
        p.value[k] = p.name.ends_with("running_var") ? 0.5 + std::abs(g(rng)) : g(rng);
}

/// Straightforward evaluation of a single layer with explicit index loops.
inline Tensor<double> naive_layer(const nn::LayerSpec& l, const std::vector<nn::Parameter<double>>& p,
                                  const Tensor<double>& x, nn::Mode mode) {
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  switch (l.kind) {
    case LayerKind::Conv2D: {
      const Index OH = (H + 2 * l.padding - l.kernel_h) / l.stride + 1;
      const Index OW = (W + 2 * l.padding - l.kernel_w) / l.stride + 1;
      Tensor<double> y({N, l.out_ch, OH, OW});
      const auto& w = p[0].value;
      for (Index n = 0; n < N; ++n)
        for (Index o = 0; o < l.out_ch; ++o)
          for (Index oy = 0; oy < OH; ++oy)
            for (Index ox = 0; ox < OW; ++ox) {
              double s = p[1].value[o];
              for (Index c = 0; c < C; ++c)
                for (Index i = 0; i < l.kernel_h; ++i)
                  for (Index j = 0; j < l.kernel_w; ++j) {
                    const Index iy = oy * l.stride + i - l.padding, ix = ox * l.stride + j - l.padding;
                    if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                    s += w[((o * C + c) * l.kernel_h + i) * l.kernel_w + j] * x(n, c, iy, ix);
                  }
              y(n, o, oy, ox) = s;
            }
      return y;
    }
    case LayerKind::MaxPool:
    case LayerKind::AvgPool: {
      const Index OH = H / l.kernel_h, OW = W / l.kernel_w;
      Tensor<double> y({N, C, OH, OW});
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c)
          for (Index oy = 0; oy < OH; ++oy)
            for (Index ox = 0; ox < OW; ++ox) {
              double best = -INFINITY, sum = 0;
              for (Index i = 0; i < l.kernel_h; ++i)
                for (Index j = 0; j < l.kernel_w; ++j) {
                  const double v = x(n, c, oy * l.kernel_h + i, ox * l.kernel_w + j);
                  best = std::max(best, v);
                  sum += v;
                }
              y(n, c, oy, ox) = l.kind == LayerKind::MaxPool ? best : sum / double(l.kernel_h * l.kernel_w);
            }
      return y;
    }
    case LayerKind::Dense: {
      Tensor<double> y({N, l.out_ch, 1, 1});
      const Index F = C * H * W;
      for (Index n = 0; n < N; ++n)
        for (Index o = 0; o < l.out_ch; ++o) {
          double s = p[1].value[o];
          for (Index f = 0; f < F; ++f) s += x[n * F + f] * p[0].value[f * l.out_ch + o];
          y(n, o, 0, 0) = s;
        }
      return y;
    }
    case LayerKind::BatchNorm: {
      Tensor<double> y(x.shape());
      for (Index c = 0; c < C; ++c) {
        double mean = p[2].value[c], var = p[3].value[c];
        if (mode == nn::Mode::Train) {
          double s = 0, ss = 0;
          for (Index n = 0; n < N; ++n)
            for (Index i = 0; i < H; ++i)
              for (Index j = 0; j < W; ++j) s += x(n, c, i, j);
          mean = s / double(N * H * W);
          for (Index n = 0; n < N; ++n)
            for (Index i = 0; i < H; ++i)
              for (Index j = 0; j < W; ++j) ss += (x(n, c, i, j) - mean) * (x(n, c, i, j) - mean);
          var = ss / double(N * H * W);
        }
        for (Index n = 0; n < N; ++n)
          for (Index i = 0; i < H; ++i)
            for (Index j = 0; j < W; ++j)
              y(n, c, i, j) = p[0].value[c] * (x(n, c, i, j) - mean) / std::sqrt(var + l.epsilon) + p[1].value[c];
      }
      return y;
    }
    case LayerKind::LeakyReLU: {
      Tensor<double> y(x.shape());
      for (Index k = 0; k < x.size(); ++k) y[k] = x[k] >= 0 ? x[k] : l.slope * x[k];
      return y;
    }
    case LayerKind::Softmax: {
      Tensor<double> y(x.shape());
      const Index F = C * H * W;
      for (Index n = 0; n < N; ++n) {
        double z = 0;
        for (Index f = 0; f < F; ++f) z += std::exp(x[n * F + f]);
        for (Index f = 0; f < F; ++f) y[n * F + f] = std::exp(x[n * F + f]) / z;
      }
      return y;
    }
    case LayerKind::Flatten: return x.reshaped({N, C * H * W, 1, 1});
    case LayerKind::GlobalAvgPool: {
      Tensor<double> y({N, C, 1, 1});
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c) {
          double s = 0;
          for (Index i = 0; i < H; ++i)
            for (Index j = 0; j < W; ++j) s += x(n, c, i, j);
          y(n, c, 0, 0) = s / double(H * W);
        }
      return y;
    }
  }
  return x;
}

inline Tensor<double> naive_forward(const nn::Network<double>& net, Tensor<double> x, nn::Mode mode) {
  for (Index i = 0; i < net.layer_count(); ++i) x = naive_layer(net.layer(i), net.parameters(i), x, mode);
  return x;
}

inline double relative_error(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  const double scale = std::max({a.matrix().norm(), b.matrix().norm(), 1e-8});
  return (a - b).matrix().norm() / scale;
}

struct GradientReport {
  double worst = 0;  // largest per-tensor relative error
  std::string where;
  int tensors = 0;
};

/// Compares backward() against central differences of L = sum(r * output)
/// for every trainable, non-frozen parameter and for the input.
inline GradientReport check_gradients(nn::Network<double>& net, const Tensor<double>& input, std::mt19937_64& rng,
                                      double step = 1e-5) {
  const auto out_shape = nn::forward(net, input, nn::Mode::Train).output().shape();
  const Tensor<double> r = random_tensor(out_shape, rng);
  const auto loss = [&](const Tensor<double>& x) {
    return (nn::forward(net, x, nn::Mode::Train).output().values() * r.values()).sum();
  };
  const auto acts = nn::forward(net, input, nn::Mode::Train);
  const auto grads = nn::backward(net, acts, r, nn::GradientAt::Output, true);

  GradientReport rep;
  const auto record = [&](const Eigen::ArrayXd& analytic, const Eigen::ArrayXd& numeric, const std::string& what) {
    const double e = relative_error(analytic, numeric);
    ++rep.tensors;
    if (e >= rep.worst) {
      rep.worst = e;
      rep.where = what;
    }
  };

  Tensor<double> x = input;
  Eigen::ArrayXd numeric(x.size());
  for (Index k = 0; k < x.size(); ++k) {
    const double v = x[k];
    x[k] = v + step;
    const double up = loss(x);
    x[k] = v - step;
    const double down = loss(x);
    x[k] = v;
    numeric[k] = (up - down) / (2 * step);
  }
  record(grads.input.values(), numeric, "input");

  for (Index i = 0; i < net.layer_count(); ++i) {
    if (!net.trains(i)) continue;
    std::size_t slot = 0;
    for (auto& p : net.parameters(i)) {
      if (!p.trainable) continue;
      Eigen::ArrayXd num(p.value.size());
      for (Index k = 0; k < p.value.size(); ++k) {
        const double v = p.value[k];
        p.value[k] = v + step;
        const double up = loss(input);
        p.value[k] = v - step;
        const double down = loss(input);
        p.value[k] = v;
        num[k] = (up - down) / (2 * step);
      }
      record(grads.at(i, slot++).values(), num, p.name);
    }
  }
  return rep;
}

struct GradientCase {
  std::string label;
  nn::Network<double> net;
  Tensor<double> input;
};

/// Random single-layer networks (plus a small composite), cycling through
/// every layer kind; `count` cases in total.
inline std::vector<GradientCase> gradient_cases(int count, std::mt19937_64& rng) {
  using namespace nn;
  const auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  std::vector<GradientCase> cases;
  for (int t = 0; t < count; ++t) {
    const int kind = t % 10;
    const Index N = pick(1, 3), C = pick(1, 3), H = pick(4, 8), W = pick(4, 8);
    Network<double> net({C, H, W});
    std::string label;
    switch (kind) {
      case 0: {
        const Index k = std::vector<Index>{1, 3, 5}[static_cast<std::size_t>(pick(0, 2))];
        LayerSpec l = conv2d("conv", Block::Feature, std::min<Index>(k, 3), C, pick(1, 4));
        l.stride = pick(1, 2);
        l.padding = pick(0, l.kernel_h / 2 + 1);
        net.add(l);
        label = "Conv2D";
        break;
      }
      case 1: net.add(conv2d("conv", Block::Feature, 5, C, pick(1, 3))); label = "Conv2D same 5x5"; break;
      case 2: net.add(max_pool("pool", Block::Feature, pick(1, 3), pick(1, 3))); label = "MaxPool"; break;
      case 3: net.add(avg_pool("pool", Block::Adapt, pick(1, 3), pick(1, 3))); label = "AvgPool"; break;
      case 4: net.add(dense("fc", Block::Classification, C * H * W, pick(1, 5))); label = "Dense"; break;
      case 5: net.add(batch_norm("bn", Block::Adapt, C)); label = "BatchNorm"; break;
      case 6: net.add(leaky_relu("act", Block::Feature)); label = "LeakyReLU"; break;
      case 7: net.add(softmax("prob", Block::Classification)); label = "Softmax"; break;
      case 8:
        net.add(flatten("flat", Block::Classification));
        net.add(dense("fc", Block::Classification, C * H * W, 3));
        label = "Flatten+Dense";
        break;
      default:
        net.add(conv2d("conv", Block::Feature, 3, C, 4))
            .add(batch_norm("bn", Block::Adapt, 4))
            .add(leaky_relu("act", Block::Adapt))
            .add(global_avg_pool("gap", Block::Classification))
            .add(dense("fc", Block::Classification, 4, 2))
            .add(softmax("prob", Block::Classification));
        label = "Conv+BN+LReLU+GlobalAvgPool+Dense+Softmax";
        break;
    }
    randomize(net, rng);
    Tensor<double> input = random_tensor({N, C, H, W}, rng);
    cases.push_back({label + " " + to_string(input.shape()), std::move(net), std::move(input)});
  }
  return cases;
}

}  // namespace retinet::test
