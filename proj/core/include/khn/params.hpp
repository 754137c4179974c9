#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "khn/tensor.hpp"

namespace khn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Parameters of one model part, in their fixed enumeration order.
using ParamList = std::vector<NamedTensor>;

std::vector<Tensor> tensors_of(const ParamList& params);
std::size_t parameter_count(const ParamList& params);
// Deep copy; the clone shares no storage with the original.
ParamList clone_params(const ParamList& params);
void set_requires_grad(ParamList& params, bool value);
const Tensor& find_param(const ParamList& params, const std::string& name);

// Weight [out, in] drawn uniform in ±sqrt(1/in), bias [out] zero.
void append_linear(ParamList& params, const std::string& prefix, std::size_t in, std::size_t out,
                   std::mt19937_64& rng, bool with_bias = true);

// ReLU MLP over rows of x: every layer but the last is followed by ReLU.
// Expects parameters named "<prefix><i>.weight" / "<prefix><i>.bias".
Tensor mlp_forward(const ParamList& params, const std::string& prefix, std::size_t layers, const Tensor& x);

}  // namespace khn
