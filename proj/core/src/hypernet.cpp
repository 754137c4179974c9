#include "khn/hypernet.hpp"

#include <random>

#include "khn/errors.hpp"
#include "khn/ops.hpp"

namespace khn {
namespace {

std::string head_prefix(std::size_t tensor_index) { return "hypernet.head" + std::to_string(tensor_index) + ".layer"; }

}  // namespace

std::vector<TargetTensorSpec> target_param_specs(const TargetShape& shape) {
  std::vector<TargetTensorSpec> specs;
  std::size_t in = shape.input_dim;
  for (std::size_t i = 0; i < shape.layer_sizes.size(); ++i) {
    const std::string prefix = "target.layer" + std::to_string(i);
    specs.push_back({prefix + ".weight", {shape.layer_sizes[i], in}});
    if (shape.use_bias) specs.push_back({prefix + ".bias", {shape.layer_sizes[i]}});
    in = shape.layer_sizes[i];
  }
  return specs;
}

void validate(const HypernetConfig& config, const TargetShape& target) {
  if (config.head_depth == 0) throw ConfigError("hypernet.head_depth must be at least 1");
  if (config.hidden_dim == 0) throw ConfigError("hypernet.hidden_dim must be positive");
  if (target.input_dim == 0) throw ConfigError("target network input dimension must be positive");
  if (target.layer_sizes.empty()) throw ConfigError("target network needs at least one layer");
  for (auto s : target.layer_sizes) {
    if (s == 0) throw ConfigError("hypernet.target_layer_sizes entries must be positive");
  }
}

ParamList init_hypernet(const HypernetConfig& config, const TargetShape& target, std::uint64_t seed) {
  validate(config, target);
  std::mt19937_64 rng(seed);
  ParamList params;
  std::size_t in = target.input_dim * target.input_dim;
  for (std::size_t i = 0; i < config.neck_depth; ++i) {
    append_linear(params, "hypernet.neck" + std::to_string(i), in, config.hidden_dim, rng);
    in = config.hidden_dim;
  }
  auto specs = target_param_specs(target);
  for (std::size_t t = 0; t < specs.size(); ++t) {
    std::size_t head_in = in;
    for (std::size_t j = 0; j < config.head_depth; ++j) {
      const bool last = j + 1 == config.head_depth;
      std::size_t out = last ? shape_numel(specs[t].shape) : config.hidden_dim;
      append_linear(params, head_prefix(t) + std::to_string(j), head_in, out, rng);
      head_in = out;
    }
  }
  return params;
}

void zero_final_head_layers(const HypernetConfig& config, const TargetShape& target, ParamList& params) {
  auto specs = target_param_specs(target);
  for (std::size_t t = 0; t < specs.size(); ++t) {
    const std::string base = head_prefix(t) + std::to_string(config.head_depth - 1);
    for (const char* suffix : {".weight", ".bias"}) {
      Tensor p = find_param(params, base + suffix);
      for (auto& v : p.mutable_data()) v = 0.0;
    }
  }
}

Tensor flatten_kernel(const Tensor& kernel_matrix) {
  if (kernel_matrix.rank() != 2 || kernel_matrix.dim(0) != kernel_matrix.dim(1)) {
    throw ShapeError("flatten_kernel needs a square matrix, got " + shape_str(kernel_matrix.shape()));
  }
  return reshape(kernel_matrix, {kernel_matrix.numel()});
}

TargetParams generate_target_params(const HypernetConfig& config, const TargetShape& target, const ParamList& params,
                                    const Tensor& kernel_flat) {
  const std::size_t expected = target.input_dim * target.input_dim;
  if (kernel_flat.numel() != expected || kernel_flat.rank() > 2) {
    throw ShapeError("hypernetwork expects a flattened kernel of length " + std::to_string(expected) + ", got " +
                     shape_str(kernel_flat.shape()));
  }
  Tensor h = reshape(kernel_flat, {1, expected});
  for (std::size_t i = 0; i < config.neck_depth; ++i) {
    const std::string base = "hypernet.neck" + std::to_string(i);
    h = relu(linear(h, find_param(params, base + ".weight"), find_param(params, base + ".bias")));
  }
  TargetParams theta;
  auto specs = target_param_specs(target);
  theta.reserve(specs.size());
  for (std::size_t t = 0; t < specs.size(); ++t) {
    auto out = mlp_forward(params, head_prefix(t), config.head_depth, h);
    theta.push_back(reshape(out, specs[t].shape));
  }
  return theta;
}

Tensor target_logits(const TargetShape& shape, const TargetParams& theta, const Tensor& kernel_vectors) {
  auto specs = target_param_specs(shape);
  if (theta.size() != specs.size()) {
    throw ShapeError("target network expects " + std::to_string(specs.size()) + " tensors, got " +
                     std::to_string(theta.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (theta[i].shape() != specs[i].shape) {
      throw ShapeError(specs[i].name + " has shape " + shape_str(theta[i].shape()) + ", expected " +
                       shape_str(specs[i].shape));
    }
  }
  if (kernel_vectors.rank() != 2 || kernel_vectors.dim(1) != shape.input_dim) {
    throw ShapeError("target network expects kernel vectors [M, " + std::to_string(shape.input_dim) + "], got " +
                     shape_str(kernel_vectors.shape()));
  }
  Tensor h = kernel_vectors;
  std::size_t k = 0;
  for (std::size_t layer = 0; layer < shape.layer_sizes.size(); ++layer) {
    const Tensor& w = theta[k++];
    Tensor b = shape.use_bias ? theta[k++] : Tensor();
    h = linear(h, w, b);
    if (layer + 1 < shape.layer_sizes.size()) h = relu(h);
  }
  return h;
}

std::vector<double> target_forward(const TargetShape& shape, const TargetParams& theta, const Tensor& kernel_vector) {
  if (kernel_vector.rank() != 1) throw ShapeError("target_forward expects a kernel vector");
  return softmax_rows(target_logits(shape, theta, reshape(kernel_vector, {1, kernel_vector.dim(0)})));
}

}  // namespace khn
