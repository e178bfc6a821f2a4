#include "retinet/nn/layer.hpp"

namespace retinet::nn {

std::string to_string(Block b) {
  switch (b) {
    case Block::Feature: return "FEATURE";
    case Block::Adapt: return "ADAPT";
    case Block::Classification: return "CLASSIFICATION";
  }
  return "?";
}

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::MaxPool: return "MaxPool";
    case LayerKind::AvgPool: return "AvgPool";
    case LayerKind::Dense: return "Dense";
    case LayerKind::BatchNorm: return "BatchNorm";
    case LayerKind::LeakyReLU: return "LeakyReLU";
    case LayerKind::Softmax: return "Softmax";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::GlobalAvgPool: return "GlobalAvgPool";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& s) {
  for (auto k : {LayerKind::Conv2D, LayerKind::MaxPool, LayerKind::AvgPool, LayerKind::Dense, LayerKind::BatchNorm,
                 LayerKind::LeakyReLU, LayerKind::Softmax, LayerKind::Flatten, LayerKind::GlobalAvgPool})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown layer kind '" + s + "'");
}

Block parse_block(const std::string& s) {
  if (s == "FEATURE") return Block::Feature;
  if (s == "ADAPT") return Block::Adapt;
  if (s == "CLASSIFICATION") return Block::Classification;
  throw ConfigError("unknown block '" + s + "'");
}

void LayerSpec::validate() const {
  const auto fail = [&](const std::string& why) { throw ConfigError("layer " + name + ": " + why); };
  switch (kind) {
    case LayerKind::Conv2D:
      if (kernel_h < 1 || kernel_w < 1 || in_ch < 1 || out_ch < 1 || stride < 1 || padding < 0)
        fail("conv dimensions must be positive");
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      if (kernel_h < 1 || kernel_w < 1) fail("pool window must be positive");
      break;
    case LayerKind::Dense:
      if (in_ch < 1 || out_ch < 1) fail("dense dimensions must be positive");
      break;
    case LayerKind::BatchNorm:
      if (in_ch < 1) fail("channel count must be positive");
      if (!(momentum >= 0 && momentum < 1) || !(epsilon > 0)) fail("invalid momentum or epsilon");
      break;
    case LayerKind::LeakyReLU:
      if (!(slope > 0 && slope < 1)) fail("slope must lie in (0, 1)");
      break;
    default:
      break;
  }
}

Shape output_shape(const LayerSpec& layer, const Shape& in) {
  layer.validate();
  const Index c = in[0], h = in[1], w = in[2];
  const auto mismatch = [&](const std::string& why) -> Shape {
    throw ConfigError("shape mismatch at layer " + layer.name + ": " + why + " (input " + to_string(in) + ")");
  };
  switch (layer.kind) {
    case LayerKind::Conv2D: {
      if (c != layer.in_ch) return mismatch("expected " + std::to_string(layer.in_ch) + " channels");
      const Index oh = (h + 2 * layer.padding - layer.kernel_h) / layer.stride + 1;
      const Index ow = (w + 2 * layer.padding - layer.kernel_w) / layer.stride + 1;
      if (h + 2 * layer.padding < layer.kernel_h || w + 2 * layer.padding < layer.kernel_w)
        return mismatch("input smaller than kernel");
      return {layer.out_ch, oh, ow};
    }
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      if (h < layer.kernel_h || w < layer.kernel_w) return mismatch("input smaller than pool window");
      return {c, h / layer.kernel_h, w / layer.kernel_w};
    case LayerKind::Dense:
      if (c * h * w != layer.in_ch) return mismatch("expected " + std::to_string(layer.in_ch) + " features");
      return {layer.out_ch, 1, 1};
    case LayerKind::BatchNorm:
      if (c != layer.in_ch) return mismatch("expected " + std::to_string(layer.in_ch) + " channels");
      return in;
    case LayerKind::Flatten: return {c * h * w, 1, 1};
    case LayerKind::GlobalAvgPool: return {c, 1, 1};
    case LayerKind::LeakyReLU:
    case LayerKind::Softmax: return in;
  }
  return in;
}

}  // namespace retinet::nn
