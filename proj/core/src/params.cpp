#include "khn/params.hpp"

#include <cmath>

#include "khn/errors.hpp"
#include "khn/ops.hpp"

namespace khn {

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

ParamList clone_params(const ParamList& params) {
  ParamList out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.tensor.clone()});
  return out;
}

void set_requires_grad(ParamList& params, bool value) {
  for (auto& p : params) p.tensor.set_requires_grad(value);
}

const Tensor& find_param(const ParamList& params, const std::string& name) {
  for (const auto& p : params) {
    if (p.name == name) return p.tensor;
  }
  throw StateError("no parameter named '" + name + "'");
}

void append_linear(ParamList& params, const std::string& prefix, std::size_t in, std::size_t out,
                   std::mt19937_64& rng, bool with_bias) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  std::vector<double> w(in * out);
  for (auto& v : w) v = uniform(rng);
  params.push_back({prefix + ".weight", Tensor({out, in}, std::move(w), true)});
  if (with_bias) params.push_back({prefix + ".bias", Tensor::zeros({out}, true)});
}

Tensor mlp_forward(const ParamList& params, const std::string& prefix, std::size_t layers, const Tensor& x) {
  Tensor h = x;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string base = prefix + std::to_string(i);
    h = linear(h, find_param(params, base + ".weight"), find_param(params, base + ".bias"));
    if (i + 1 < layers) h = relu(h);
  }
  return h;
}

}  // namespace khn
