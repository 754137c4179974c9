#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "khn/params.hpp"
#include "khn/tensor.hpp"

namespace khn {

enum class KernelKind { dot, cosine };
enum class TransformKind { identity, mlp };
enum class AggregationMode { averaged, fine_grained };

// Kernel k(z1, z2) = f(z1)·f(z2), optionally normalized (cosine). The
// transform f is the identity or a ReLU MLP whose parameters live in the
// model's kernel ParamList.
struct KernelConfig {
  KernelKind kind = KernelKind::cosine;
  TransformKind transform = TransformKind::identity;
  std::vector<std::size_t> transform_hidden_sizes;
  std::size_t transform_out_dim = 0;  // 0: same as the embedding
  double cosine_epsilon = 1e-8;

  bool operator==(const KernelConfig&) const = default;
};

void validate(const KernelConfig& config);

// Empty for the identity transform, otherwise "kernel.layer<i>.{weight,bias}".
ParamList init_kernel_transform(const KernelConfig& config, std::size_t embedding_dim, std::uint64_t seed);

// Support embeddings sorted by class, with the permutation that sorted them.
struct OrderedSupport {
  Tensor embeddings;            // [rows, d]
  std::vector<int> row_labels;  // non-decreasing
  std::vector<std::size_t> pi;  // row i came from input row pi[i]
};

// Stable sort by label: rows of one class keep their input order.
OrderedSupport order_support(const Tensor& embeddings, std::span<const int> labels);

// averaged: one mean row per class (way rows). fine_grained: unchanged.
OrderedSupport aggregate(const OrderedSupport& ordered, AggregationMode mode, int way, int shot);

// f applied row-wise to [rows, d].
Tensor apply_transform(const KernelConfig& config, const ParamList& params, const Tensor& rows);

// Scalar kernel between two embedding vectors (rank 1 or [1, d]).
Tensor kernel_value(const KernelConfig& config, const ParamList& params, const Tensor& z1, const Tensor& z2);

// K[i][j] = k(row i, row j); exactly symmetric.
Tensor support_kernel_matrix(const KernelConfig& config, const ParamList& params, const Tensor& rows);

// k_x[i] = k(query, row i) for one query embedding; shape [rows].
Tensor query_kernel_vector(const KernelConfig& config, const ParamList& params, const Tensor& query,
                           const Tensor& rows);

// Row m is the kernel vector of query m; shape [queries, rows].
Tensor query_kernel_matrix(const KernelConfig& config, const ParamList& params, const Tensor& queries,
                           const Tensor& rows);

}  // namespace khn
