#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "khn/encoder.hpp"
#include "khn/episodes.hpp"
#include "khn/hypernet.hpp"
#include "khn/kernel.hpp"
#include "khn/params.hpp"

namespace khn {

// Everything needed to rebuild a model's shapes.
struct ModelConfig {
  EncoderConfig encoder;
  KernelConfig kernel;
  AggregationMode aggregation = AggregationMode::averaged;
  HypernetConfig hypernet;
  int way = 5;
  int shot = 1;

  bool operator==(const ModelConfig&) const = default;
};

// Kernel-vector length: way rows when averaged, way * shot when fine-grained.
std::size_t support_rows(const ModelConfig& config);
TargetShape target_shape(const ModelConfig& config);
void validate(const ModelConfig& config);

// Encoder, kernel transform and hypernetwork parameters.
struct Model {
  ModelConfig config;
  ParamList encoder;
  ParamList kernel;
  ParamList hypernet;

  // Enumeration order used by optimizers and checkpoints.
  std::vector<NamedTensor> all_params() const;
  std::size_t parameter_count() const;
  Model clone() const;
};

Model init_model(const ModelConfig& config, std::uint64_t seed);

// Intermediate values of one forward pass, kept for inspection and tests.
struct ForwardTrace {
  OrderedSupport support;  // aggregated, in π order
  Tensor kernel_matrix;    // [R, R]
  TargetParams theta;
  Tensor query_kernels;    // [M, R]
  Tensor logits;           // [M, way]
};

// Encodes support and queries in one batch with the same encoder, orders
// and aggregates the support, builds K_SS, generates the target weights and
// scores every query's kernel vector.
ForwardTrace forward_trace(const Model& model, std::span<const Example> support,
                           std::span<const std::vector<double>> queries, const Shape& input_shape);

// Query logits [M, way] for an episode.
Tensor episode_forward(const Model& model, const Episode& episode);

}  // namespace khn
