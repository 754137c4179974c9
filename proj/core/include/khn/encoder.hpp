#pragma once

#include <cstdint>
#include <vector>

#include "khn/params.hpp"
#include "khn/tensor.hpp"

namespace khn {

enum class EncoderKind { mlp, conv4 };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::mlp;
  // [dim] for mlp, [channels, height, width] for conv4
  Shape input_shape{16};
  std::vector<std::size_t> mlp_hidden_sizes{64, 64};
  std::size_t embedding_dim = 64;

  bool operator==(const EncoderConfig&) const = default;
};

inline constexpr std::size_t kConv4Blocks = 4;
inline constexpr std::size_t kConv4Channels = 64;

// Flattened output width of the conv4 backbone: 64 * (H / 16) * (W / 16).
std::size_t conv4_embedding_dim(const Shape& input_shape);

// Throws ConfigError on an inconsistent config.
void validate(const EncoderConfig& config);

// mlp: "encoder.layer<i>.{weight,bias}".
// conv4: "encoder.block<i>.{conv.weight,conv.bias,bn.gamma,bn.beta}".
// Weights uniform in ±sqrt(1/fan_in); biases and bn.beta zero, bn.gamma one.
ParamList init_encoder(const EncoderConfig& config, std::uint64_t seed);

// [B, input_shape...] -> [B, embedding_dim]. Batch normalization inside
// conv4 always uses the statistics of `batch`.
Tensor encode(const EncoderConfig& config, const ParamList& params, const Tensor& batch);

}  // namespace khn
