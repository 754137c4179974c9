#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "khn/tensor.hpp"

namespace khn {

// Standard product of rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// x [B, in] · weightᵀ + bias, with weight [out, in] and bias [out].
// `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

enum class ElementwiseKind { add, sub, mul, div, relu, exp, log, sqrt };

// Binary kinds broadcast by the trailing-dimension rule: shapes are aligned
// on the right, and each aligned pair must be equal or contain a 1.
Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor& b);
Tensor elementwise(ElementwiseKind kind, const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor scale(const Tensor& a, double factor);
// max(a, floor); the gradient passes only where a > floor.
Tensor clamp_min(const Tensor& a, double floor);

Tensor sum(const Tensor& a);
// [R, C] -> [R, 1]
Tensor row_sum(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
// [B, ...] -> [B, prod(...)]
Tensor flatten(const Tensor& a);
// Selects slices along the leading axis.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);

// Mean over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
// Row-wise softmax of a [B, C] tensor; not differentiable.
std::vector<double> softmax_rows(const Tensor& logits);

// Same-padded, stride-1 convolution. x [B, C, H, W], weight [O, C, k, k]
// with odd k, bias [O].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Non-overlapping window max; H and W must be divisible by `window`.
Tensor max_pool2d(const Tensor& x, std::size_t window);
// Per-channel normalization with statistics of the current batch (biased
// variance), followed by the affine map gamma * x̂ + beta.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

}  // namespace khn
