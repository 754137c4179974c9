#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "khn/params.hpp"
#include "khn/tensor.hpp"

namespace khn {

// Layout of the generated classifier over kernel vectors of length
// input_dim. ReLU between layers; the last layer emits `way` scores.
struct TargetShape {
  std::size_t input_dim = 0;
  std::vector<std::size_t> layer_sizes;
  bool use_bias = true;

  bool operator==(const TargetShape&) const = default;
};

struct TargetTensorSpec {
  std::string name;  // "target.layer<i>.weight" / ".bias"
  Shape shape;
};

// Parameter enumeration of the target: per layer, weight [out, in] then
// bias [out].
std::vector<TargetTensorSpec> target_param_specs(const TargetShape& shape);

struct HypernetConfig {
  std::size_t neck_depth = 1;
  std::size_t head_depth = 2;
  std::size_t hidden_dim = 64;
  // Target layer widths; the last one must equal the episode way.
  std::vector<std::size_t> target_layer_sizes{5};
  bool target_use_bias = true;

  bool operator==(const HypernetConfig&) const = default;
};

void validate(const HypernetConfig& config, const TargetShape& target);

// Neck "hypernet.neck<i>.*", then one head per target tensor
// "hypernet.head<t>.layer<j>.*", heads ordered as target_param_specs().
ParamList init_hypernet(const HypernetConfig& config, const TargetShape& target, std::uint64_t seed);

// Zeroes the final linear layer of every head, so every generated tensor
// is zero regardless of the kernel matrix.
void zero_final_head_layers(const HypernetConfig& config, const TargetShape& target, ParamList& params);

using TargetParams = std::vector<Tensor>;

// Row-major flattening of a square [R, R] matrix into [R*R].
Tensor flatten_kernel(const Tensor& kernel_matrix);

// Neck (linear + ReLU per layer) followed by the heads (linear layers with
// ReLU between hidden layers, linear output reshaped to each target tensor).
TargetParams generate_target_params(const HypernetConfig& config, const TargetShape& target, const ParamList& params,
                                    const Tensor& kernel_flat);

// Pre-softmax class scores for a batch of kernel vectors [M, R] -> [M, way].
Tensor target_logits(const TargetShape& shape, const TargetParams& theta, const Tensor& kernel_vectors);

// Class distribution for one kernel vector [R]; sums to one.
std::vector<double> target_forward(const TargetShape& shape, const TargetParams& theta, const Tensor& kernel_vector);

}  // namespace khn
