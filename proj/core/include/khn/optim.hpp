#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "khn/tensor.hpp"

namespace khn {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Moment buffers for one fixed list of parameters.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(std::span<const Tensor> params, AdamOptions options = {});

  std::uint64_t step_count() const noexcept { return step_count_; }
  const AdamOptions& options() const noexcept { return options_; }
  std::span<const std::vector<double>> first_moment() const noexcept { return first_; }
  std::span<const std::vector<double>> second_moment() const noexcept { return second_; }

  // Bias-corrected Adam update of every parameter, then zeroes the grads.
  // Throws StateError when a parameter has no grad or does not match the
  // buffers.
  void step(std::span<Tensor> params, double learning_rate);

 private:
  AdamOptions options_;
  std::uint64_t step_count_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

void adam_step(std::span<Tensor> params, AdamState& state, double learning_rate);

// Plain gradient descent, param -= lr * grad, then zeroes the grads.
void sgd_step(std::span<Tensor> params, double learning_rate);

// Central differences (fn(x + h e_i) - fn(x - h e_i)) / 2h for every
// coordinate of `point`. `point` is restored before returning.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& fn, Tensor point, double h);

}  // namespace khn
