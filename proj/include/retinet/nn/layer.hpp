#pragma once

#include "retinet/error.hpp"
#include "retinet/nn/tensor.hpp"

#include <string>

namespace retinet::nn {

enum class Block { Feature, Adapt, Classification };

enum class LayerKind { Conv2D, MaxPool, AvgPool, Dense, BatchNorm, LeakyReLU, Softmax, Flatten, GlobalAvgPool };

std::string to_string(Block b);
std::string to_string(LayerKind k);
Block parse_block(const std::string& s);
LayerKind parse_layer_kind(const std::string& s);

struct LayerSpec {
  LayerKind kind = LayerKind::Flatten;
  std::string name;
  Block block = Block::Feature;

  // Conv2D: kernel, channels, stride, zero padding. Pooling: window in
  // kernel_h/kernel_w. Dense: in_ch -> out_ch. BatchNorm: in_ch channels.
  Index kernel_h = 0, kernel_w = 0;
  Index in_ch = 0, out_ch = 0;
  Index stride = 1, padding = 0;
  double momentum = 0.99;
  double epsilon = 1e-5;
  double slope = 0.01;

  bool has_parameters() const {
    return kind == LayerKind::Conv2D || kind == LayerKind::Dense || kind == LayerKind::BatchNorm;
  }
  void validate() const;
};

inline LayerSpec conv2d(std::string name, Block block, Index kernel, Index in_ch, Index out_ch) {
  return {.kind = LayerKind::Conv2D, .name = std::move(name), .block = block, .kernel_h = kernel,
          .kernel_w = kernel, .in_ch = in_ch, .out_ch = out_ch, .stride = 1, .padding = (kernel - 1) / 2};
}
inline LayerSpec max_pool(std::string name, Block block, Index h, Index w) {
  return {.kind = LayerKind::MaxPool, .name = std::move(name), .block = block, .kernel_h = h, .kernel_w = w};
}
inline LayerSpec avg_pool(std::string name, Block block, Index h, Index w) {
  return {.kind = LayerKind::AvgPool, .name = std::move(name), .block = block, .kernel_h = h, .kernel_w = w};
}
inline LayerSpec dense(std::string name, Block block, Index in, Index out) {
  return {.kind = LayerKind::Dense, .name = std::move(name), .block = block, .in_ch = in, .out_ch = out};
}
inline LayerSpec batch_norm(std::string name, Block block, Index channels, double momentum = 0.99,
                            double epsilon = 1e-5) {
  return {.kind = LayerKind::BatchNorm, .name = std::move(name), .block = block, .in_ch = channels,
          .out_ch = channels, .momentum = momentum, .epsilon = epsilon};
}
inline LayerSpec leaky_relu(std::string name, Block block, double slope = 0.01) {
  return {.kind = LayerKind::LeakyReLU, .name = std::move(name), .block = block, .slope = slope};
}
inline LayerSpec softmax(std::string name, Block block) {
  return {.kind = LayerKind::Softmax, .name = std::move(name), .block = block};
}
inline LayerSpec flatten(std::string name, Block block) {
  return {.kind = LayerKind::Flatten, .name = std::move(name), .block = block};
}
inline LayerSpec global_avg_pool(std::string name, Block block) {
  return {.kind = LayerKind::GlobalAvgPool, .name = std::move(name), .block = block};
}

/// Per-sample activation shape (channels, height, width) after `layer`.
/// Throws ConfigError if `in` is incompatible.
Shape output_shape(const LayerSpec& layer, const Shape& in);

}  // namespace retinet::nn
