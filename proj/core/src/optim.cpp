#include "khn/optim.hpp"

#include <cmath>
#include <string>

#include "khn/errors.hpp"

namespace khn {

AdamState::AdamState(std::span<const Tensor> params, AdamOptions options) : options_(options) {
  first_.reserve(params.size());
  second_.reserve(params.size());
  for (const auto& p : params) {
    first_.emplace_back(p.numel(), 0.0);
    second_.emplace_back(p.numel(), 0.0);
  }
}

void AdamState::step(std::span<Tensor> params, double learning_rate) {
  if (params.size() != first_.size()) {
    throw StateError("adam: state tracks " + std::to_string(first_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) throw StateError("adam: parameter " + std::to_string(k) + " has no gradient");
    if (params[k].numel() != first_[k].size()) {
      throw StateError("adam: parameter " + std::to_string(k) + " does not match its moment buffers");
    }
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].mutable_data();
    auto grad = params[k].mutable_grad();
    auto& m = first_[k];
    auto& v = second_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * grad[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * grad[i] * grad[i];
      double m_hat = m[i] / c1;
      double v_hat = v[i] / c2;
      value[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + options_.epsilon);
    }
    params[k].zero_grad();
  }
}

void adam_step(std::span<Tensor> params, AdamState& state, double learning_rate) {
  state.step(params, learning_rate);
}

void sgd_step(std::span<Tensor> params, double learning_rate) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) throw StateError("sgd: parameter " + std::to_string(k) + " has no gradient");
  }
  for (auto& p : params) {
    auto value = p.mutable_data();
    auto grad = p.grad();
    for (std::size_t i = 0; i < value.size(); ++i) value[i] -= learning_rate * grad[i];
    p.zero_grad();
  }
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& fn, Tensor point, double h) {
  if (!(h > 0.0)) throw NumericError("finite differences need h > 0");
  Tensor result(point.shape());
  auto values = point.mutable_data();
  auto out = result.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    double plus = 0.0, minus = 0.0;
    try {
      values[i] = saved + h;
      plus = fn(point);
      values[i] = saved - h;
      minus = fn(point);
    } catch (...) {
      values[i] = saved;
      throw;
    }
    values[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("finite differences: non-finite function value at coordinate " + std::to_string(i));
    }
    out[i] = (plus - minus) / (2.0 * h);
  }
  return result;
}

}  // namespace khn
