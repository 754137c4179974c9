#include "khn/encoder.hpp"

#include <cmath>
#include <random>
#include <string>

#include "khn/errors.hpp"
#include "khn/ops.hpp"

namespace khn {

std::size_t conv4_embedding_dim(const Shape& input_shape) {
  if (input_shape.size() != 3) throw ConfigError("conv4 needs an input shape of [channels, height, width]");
  return kConv4Channels * (input_shape[1] >> kConv4Blocks) * (input_shape[2] >> kConv4Blocks);
}

void validate(const EncoderConfig& config) {
  if (config.embedding_dim == 0) throw ConfigError("encoder.embedding_dim must be at least 1");
  if (config.kind == EncoderKind::mlp) {
    if (config.input_shape.size() != 1 || config.input_shape[0] == 0) {
      throw ConfigError("mlp encoder needs a one-dimensional input shape, got " + shape_str(config.input_shape));
    }
    for (auto h : config.mlp_hidden_sizes) {
      if (h == 0) throw ConfigError("encoder.mlp_hidden_sizes entries must be positive");
    }
    return;
  }
  if (config.input_shape.size() != 3 || config.input_shape[0] == 0) {
    throw ConfigError("conv4 encoder needs an input shape of [channels, height, width]");
  }
  constexpr std::size_t factor = std::size_t{1} << kConv4Blocks;
  if (config.input_shape[1] == 0 || config.input_shape[2] == 0 || config.input_shape[1] % factor != 0 ||
      config.input_shape[2] % factor != 0) {
    throw ConfigError("conv4 encoder needs height and width divisible by 16, got " + shape_str(config.input_shape));
  }
  if (config.embedding_dim != conv4_embedding_dim(config.input_shape)) {
    throw ConfigError("conv4 on " + shape_str(config.input_shape) + " produces embeddings of size " +
                      std::to_string(conv4_embedding_dim(config.input_shape)) + ", config says " +
                      std::to_string(config.embedding_dim));
  }
}

ParamList init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  validate(config);
  std::mt19937_64 rng(seed);
  ParamList params;
  if (config.kind == EncoderKind::mlp) {
    std::size_t in = config.input_shape[0];
    std::size_t layer = 0;
    for (auto h : config.mlp_hidden_sizes) {
      append_linear(params, "encoder.layer" + std::to_string(layer++), in, h, rng);
      in = h;
    }
    append_linear(params, "encoder.layer" + std::to_string(layer), in, config.embedding_dim, rng);
    return params;
  }
  std::size_t in_channels = config.input_shape[0];
  for (std::size_t b = 0; b < kConv4Blocks; ++b) {
    const std::string prefix = "encoder.block" + std::to_string(b);
    const std::size_t fan_in = in_channels * 9;
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> uniform(-bound, bound);
    std::vector<double> w(kConv4Channels * fan_in);
    for (auto& v : w) v = uniform(rng);
    params.push_back({prefix + ".conv.weight", Tensor({kConv4Channels, in_channels, 3, 3}, std::move(w), true)});
    params.push_back({prefix + ".conv.bias", Tensor::zeros({kConv4Channels}, true)});
    params.push_back({prefix + ".bn.gamma", Tensor::full({kConv4Channels}, 1.0, true)});
    params.push_back({prefix + ".bn.beta", Tensor::zeros({kConv4Channels}, true)});
    in_channels = kConv4Channels;
  }
  return params;
}

Tensor encode(const EncoderConfig& config, const ParamList& params, const Tensor& batch) {
  Shape expected{batch.rank() > 0 ? batch.dim(0) : 0};
  expected.insert(expected.end(), config.input_shape.begin(), config.input_shape.end());
  if (batch.shape() != expected || expected[0] == 0) {
    throw ShapeError("encoder expects a non-empty batch of shape [B, " + shape_str(config.input_shape) + "], got " +
                     shape_str(batch.shape()));
  }
  if (config.kind == EncoderKind::mlp) {
    return mlp_forward(params, "encoder.layer", config.mlp_hidden_sizes.size() + 1, batch);
  }
  Tensor h = batch;
  for (std::size_t b = 0; b < kConv4Blocks; ++b) {
    const std::string prefix = "encoder.block" + std::to_string(b);
    h = conv2d(h, find_param(params, prefix + ".conv.weight"), find_param(params, prefix + ".conv.bias"));
    h = batch_norm2d(h, find_param(params, prefix + ".bn.gamma"), find_param(params, prefix + ".bn.beta"));
    h = max_pool2d(relu(h), 2);
  }
  return flatten(h);
}

}  // namespace khn
