#pragma once

#include "retinet/error.hpp"
#include "retinet/nn/kernels.hpp"
#include "retinet/nn/layer.hpp"
#include "retinet/nn/tensor.hpp"

#include <algorithm>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace retinet::nn {

template <typename Scalar>
struct Parameter {
  std::string name;  // "<layer>.weight", "<layer>.running_mean", ...
  Tensor<Scalar> value;
  bool trainable = true;  // false for BatchNorm running statistics
};

/// A sequence of layers with named parameters grouped into blocks.
template <typename Scalar_>
class Network {
 public:
  using Scalar = Scalar_;

  Network() = default;
  /// `input_shape` is the per-sample (channels, height, width).
  explicit Network(Shape input_shape) : shapes_{std::move(input_shape)} {
    if (shapes_[0].size() != 3 || element_count(shapes_[0]) < 1)
      throw ConfigError("network input shape must be (channels, height, width)");
  }

  /// Appends a layer; weights start at zero, BatchNorm scale at one.
  Network& add(LayerSpec layer) {
    if (!layers_.empty() && layers_.back().kind == LayerKind::Softmax)
      throw ConfigError("softmax must be the final layer");
    for (const auto& l : layers_)
      if (l.name == layer.name) throw ConfigError("duplicate layer name " + layer.name);
    Shape out = nn::output_shape(layer, shapes_.back());

    std::vector<Parameter<Scalar>> p;
    const auto param = [&](const char* suffix, Shape shape, Scalar fill, bool trainable = true) {
      p.push_back({layer.name + "." + suffix, Tensor<Scalar>(std::move(shape), fill), trainable});
    };
    switch (layer.kind) {
      case LayerKind::Conv2D:
        param("weight", {layer.out_ch, layer.in_ch, layer.kernel_h, layer.kernel_w}, 0);
        param("bias", {layer.out_ch}, 0);
        break;
      case LayerKind::Dense:
        param("weight", {layer.in_ch, layer.out_ch}, 0);
        param("bias", {layer.out_ch}, 0);
        break;
      case LayerKind::BatchNorm:
        param("weight", {layer.in_ch}, 1);
        param("bias", {layer.in_ch}, 0);
        param("running_mean", {layer.in_ch}, 0, false);
        param("running_var", {layer.in_ch}, 1, false);
        break;
      default:
        break;
    }
    layers_.push_back(std::move(layer));
    shapes_.push_back(std::move(out));
    params_.push_back(std::move(p));
    return *this;
  }

  Index layer_count() const { return static_cast<Index>(layers_.size()); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(Index i) const { return layers_.at(static_cast<std::size_t>(i)); }

  /// Per-sample shape entering layer i; i == layer_count() gives the output.
  const Shape& input_shape(Index i = 0) const { return shapes_.at(static_cast<std::size_t>(i)); }
  const Shape& output_shape() const { return shapes_.back(); }

  std::vector<Parameter<Scalar>>& parameters(Index layer) { return params_.at(static_cast<std::size_t>(layer)); }
  const std::vector<Parameter<Scalar>>& parameters(Index layer) const {
    return params_.at(static_cast<std::size_t>(layer));
  }

  Tensor<Scalar>& parameter(const std::string& name) {
    return const_cast<Tensor<Scalar>&>(std::as_const(*this).parameter(name));
  }
  const Tensor<Scalar>& parameter(const std::string& name) const {
    for (const auto& layer : params_)
      for (const auto& p : layer)
        if (p.name == name) return p.value;
    throw ConfigError("unknown parameter " + name);
  }

  /// All parameter names (including running statistics) in layer order.
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& layer : params_)
      for (const auto& p : layer) names.push_back(p.name);
    return names;
  }

  /// Number of trainable scalars, optionally restricted to one block.
  Index parameter_count() const {
    Index n = 0;
    for (const auto& layer : params_)
      for (const auto& p : layer) n += p.trainable ? p.value.size() : 0;
    return n;
  }
  Index parameter_count(Block b) const {
    Index n = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].block == b)
        for (const auto& p : params_[i]) n += p.trainable ? p.value.size() : 0;
    return n;
  }

  bool has_block(Block b) const {
    return std::any_of(layers_.begin(), layers_.end(), [b](const LayerSpec& l) { return l.block == b; });
  }
  /// Half-open layer range [first, last) of a block; blocks are contiguous.
  std::pair<Index, Index> block_range(Block b) const {
    Index first = -1, last = -1;
    for (Index i = 0; i < layer_count(); ++i)
      if (layer(i).block == b) {
        if (first < 0) first = i;
        last = i + 1;
      }
    if (first < 0) throw ConfigError("unknown block " + to_string(b));
    return {first, last};
  }

  void freeze(Block b) {
    if (!has_block(b)) throw ConfigError("unknown block " + to_string(b));
    frozen_.insert(b);
  }
  void unfreeze(Block b) {
    if (!has_block(b)) throw ConfigError("unknown block " + to_string(b));
    frozen_.erase(b);
  }
  bool is_frozen(Block b) const { return frozen_.count(b) > 0; }
  const std::set<Block>& frozen_blocks() const { return frozen_; }
  /// True if layer i has parameters that training may change.
  bool trains(Index i) const {
    return layer(i).has_parameters() && !is_frozen(layer(i).block);
  }

  template <typename T>
  Network<T> cast() const {
    Network<T> out(shapes_[0]);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.add(layers_[i]);
      for (std::size_t k = 0; k < params_[i].size(); ++k)
        out.parameters(static_cast<Index>(i))[k].value = params_[i][k].value.template cast<T>();
    }
    for (Block b : frozen_) out.freeze(b);
    return out;
  }

 private:
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;  // shapes_[i] enters layer i
  std::vector<std::vector<Parameter<Scalar>>> params_;
  std::set<Block> frozen_;
};

enum class Mode { Train, Infer };

template <typename Scalar>
struct LayerCache {
  std::vector<Index> argmax;        // MaxPool
  Tensor<Scalar> normalized;        // BatchNorm x-hat
  kernels::BatchStatistics stats;   // BatchNorm statistics actually used
};

/// Result of a forward pass over layers [begin, end).
template <typename Scalar>
struct Activations {
  Mode mode = Mode::Infer;
  Index begin = 0;
  Tensor<Scalar> input;
  std::vector<Tensor<Scalar>> outputs;  // outputs[i - begin] is the output of layer i
  std::vector<LayerCache<Scalar>> caches;

  Index end() const { return begin + static_cast<Index>(outputs.size()); }
  const Tensor<Scalar>& output() const { return outputs.back(); }
  const Tensor<Scalar>& output_of(Index layer) const {
    return outputs.at(static_cast<std::size_t>(layer - begin));
  }
  const Tensor<Scalar>& input_of(Index layer) const { return layer == begin ? input : output_of(layer - 1); }
};

inline Shape batch_shape(Index n, const Shape& sample) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

/// Runs layers [begin, end) on `input`, whose per-sample shape must match
/// what layer `begin` expects. end < 0 means the last layer.
template <typename Scalar>
Activations<Scalar> forward(const Network<Scalar>& net, Tensor<Scalar> input, Mode mode, Index begin = 0,
                            Index end = -1) {
  if (end < 0) end = net.layer_count();
  if (begin < 0 || begin >= end || end > net.layer_count()) throw ConfigError("invalid layer range");
  if (input.rank() != 4 || input.batch() < 1 || batch_shape(input.batch(), net.input_shape(begin)) != input.shape())
    throw ConfigError("shape mismatch: input " + to_string(input.shape()) + ", expected [N," +
                      to_string(net.input_shape(begin)).substr(1));

  Activations<Scalar> a;
  a.mode = mode;
  a.begin = begin;
  a.input = std::move(input);
  a.outputs.reserve(static_cast<std::size_t>(end - begin));
  a.caches.resize(static_cast<std::size_t>(end - begin));
  const Index N = a.input.batch();

  for (Index i = begin; i < end; ++i) {
    const LayerSpec& l = net.layer(i);
    const auto& p = net.parameters(i);
    const Tensor<Scalar>& x = a.input_of(i);
    Tensor<Scalar> y(batch_shape(N, net.input_shape(i + 1)));
    auto& cache = a.caches[static_cast<std::size_t>(i - begin)];
    switch (l.kind) {
      case LayerKind::Conv2D: kernels::conv_forward(l, x, p[0].value, p[1].value, y); break;
      case LayerKind::MaxPool: kernels::max_pool_forward(l, x, y, cache.argmax); break;
      case LayerKind::AvgPool: kernels::avg_pool_forward(l, x, y); break;
      case LayerKind::Dense: kernels::dense_forward(x, p[0].value, p[1].value, y); break;
      case LayerKind::BatchNorm:
        cache.normalized = Tensor<Scalar>(x.shape());
        cache.stats = kernels::batch_norm_forward(l, x, p[0].value, p[1].value, p[2].value, p[3].value,
                                                  mode == Mode::Train, cache.normalized, y);
        break;
      case LayerKind::LeakyReLU: {
        const auto slope = static_cast<Scalar>(l.slope);
        // branch-free; signs are close to random during training
        y.values() = x.values().max(Scalar(0)) + slope * x.values().min(Scalar(0));
        break;
      }
      case LayerKind::Softmax: kernels::softmax_forward(x, y); break;
      case LayerKind::Flatten: y.values() = x.values(); break;
      case LayerKind::GlobalAvgPool:
        for (Index n = 0; n < N; ++n)
          y.sample(n).col(0) = (x.sample(n).template cast<double>().rowwise().mean()).template cast<Scalar>();
        break;
    }
    a.outputs.push_back(std::move(y));
  }
  if (!a.output().all_finite()) throw DataError("non-finite activation");
  return a;
}

/// Parameter gradients, one tensor per trainable parameter of each layer.
/// Layers outside the backward range or in frozen blocks hold zeros.
template <typename Scalar>
struct Gradients {
  std::vector<std::vector<Tensor<Scalar>>> layers;
  Tensor<Scalar> input;  // gradient w.r.t. the forward input, when requested

  explicit Gradients(const Network<Scalar>& net) : layers(static_cast<std::size_t>(net.layer_count())) {
    for (Index i = 0; i < net.layer_count(); ++i)
      for (const auto& p : net.parameters(i))
        if (p.trainable) layers[static_cast<std::size_t>(i)].emplace_back(p.value.shape());
  }
  const Tensor<Scalar>& at(Index layer, std::size_t k) const { return layers.at(static_cast<std::size_t>(layer)).at(k); }
  void set_zero() {
    for (auto& l : layers)
      for (auto& g : l) g.set_zero();
  }
};

/// Which tensor the loss gradient refers to. With Logits and a trailing
/// Softmax layer, the gradient is taken w.r.t. the softmax input (the fused
/// softmax + cross-entropy form).
enum class GradientAt { Output, Logits };

template <typename Scalar>
Gradients<Scalar> backward(const Network<Scalar>& net, const Activations<Scalar>& a,
                           const Tensor<Scalar>& loss_gradient, GradientAt at = GradientAt::Logits,
                           bool input_gradient = false) {
  if (a.outputs.empty()) throw ConfigError("backward called without a forward pass");
  if (a.mode != Mode::Train) throw ConfigError("backward needs a Train-mode forward pass");
  if (loss_gradient.shape() != a.output().shape()) throw ConfigError("shape mismatch: loss gradient");

  Gradients<Scalar> g(net);
  Index top = a.end() - 1;
  if (at == GradientAt::Logits && net.layer(top).kind == LayerKind::Softmax) --top;

  // The lowest layer whose gradients matter; nothing below it is visited.
  Index stop = top + 1;
  for (Index i = a.begin; i <= top; ++i)
    if (net.trains(i)) {
      stop = i;
      break;
    }
  if (input_gradient) stop = a.begin;
  if (stop > top) return g;

  Tensor<Scalar> dy = loss_gradient;
  for (Index i = top; i >= stop; --i) {
    const LayerSpec& l = net.layer(i);
    const auto& p = net.parameters(i);
    const Tensor<Scalar>& x = a.input_of(i);
    const Tensor<Scalar>& y = a.output_of(i);
    const auto& cache = a.caches[static_cast<std::size_t>(i - a.begin)];
    const bool need_dx = i > stop || input_gradient;
    const bool need_dp = net.trains(i);
    auto& gp = g.layers[static_cast<std::size_t>(i)];
    Tensor<Scalar> dx(need_dx ? x.shape() : Shape{0});
    Tensor<Scalar>* dxp = need_dx ? &dx : nullptr;

    switch (l.kind) {
      case LayerKind::Conv2D:
        kernels::conv_backward(l, x, p[0].value, dy, need_dp ? &gp[0] : nullptr, need_dp ? &gp[1] : nullptr, dxp);
        break;
      case LayerKind::Dense:
        kernels::dense_backward(x, p[0].value, dy, need_dp ? &gp[0] : nullptr, need_dp ? &gp[1] : nullptr, dxp);
        break;
      case LayerKind::BatchNorm:
        kernels::batch_norm_backward(cache.normalized, cache.stats, a.mode == Mode::Train, p[0].value, dy,
                                     need_dp ? &gp[0] : nullptr, need_dp ? &gp[1] : nullptr, dxp);
        break;
      case LayerKind::MaxPool:
        if (dxp) kernels::max_pool_backward(cache.argmax, dy, dx);
        break;
      case LayerKind::AvgPool:
        if (dxp) kernels::avg_pool_backward(l, dy, dx);
        break;
      case LayerKind::LeakyReLU:
        if (dxp) {
          const auto slope = static_cast<Scalar>(l.slope);
          dx.values() = dy.values() * (slope + (Scalar(1) - slope) * (x.values() >= Scalar(0)).template cast<Scalar>());
        }
        break;
      case LayerKind::Softmax:
        if (dxp) kernels::softmax_backward(y, dy, dx);
        break;
      case LayerKind::Flatten:
        if (dxp) dx.values() = dy.values();
        break;
      case LayerKind::GlobalAvgPool:
        if (dxp) {
          const Scalar scale = Scalar(1) / static_cast<Scalar>(x.height() * x.width());
          for (Index n = 0; n < x.batch(); ++n)
            dx.sample(n).colwise() = dy.sample(n).col(0) * scale;
        }
        break;
    }
    if (need_dx) dy = std::move(dx);
  }
  if (input_gradient) g.input = std::move(dy);
  return g;
}

/// Folds the batch statistics of a Train-mode pass into the running
/// averages of every BatchNorm layer outside frozen blocks.
template <typename Scalar>
void update_batch_norm_statistics(Network<Scalar>& net, const Activations<Scalar>& a) {
  if (a.mode != Mode::Train) return;
  for (Index i = a.begin; i < a.end(); ++i) {
    const LayerSpec& l = net.layer(i);
    if (l.kind != LayerKind::BatchNorm || net.is_frozen(l.block)) continue;
    const auto& st = a.caches[static_cast<std::size_t>(i - a.begin)].stats;
    auto& p = net.parameters(i);
    p[2].value.values() = (l.momentum * p[2].value.values().template cast<double>() + (1 - l.momentum) * st.mean)
                              .template cast<Scalar>();
    p[3].value.values() = (l.momentum * p[3].value.values().template cast<double>() + (1 - l.momentum) * st.var)
                              .template cast<Scalar>();
  }
}

}  // namespace retinet::nn
