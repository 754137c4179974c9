#include "khn/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "khn/errors.hpp"
#include "khn/ops.hpp"

namespace khn {
namespace {

std::size_t transform_layers(const KernelConfig& config) { return config.transform_hidden_sizes.size() + 1; }

// Rows scaled to unit norm, with the norm floored at epsilon so zero rows
// stay finite: f / max(|f|, eps) == f / sqrt(max(|f|^2, eps^2)).
Tensor normalize_rows(const Tensor& f, double epsilon) {
  auto norm = sqrt(clamp_min(row_sum(f * f), epsilon * epsilon));
  return f / norm;
}

Tensor as_row(const Tensor& z) {
  if (z.rank() == 1) return reshape(z, {1, z.dim(0)});
  if (z.rank() == 2 && z.dim(0) == 1) return z;
  throw ShapeError("expected an embedding vector, got shape " + shape_str(z.shape()));
}

// Feature rows entering the final inner product.
Tensor kernel_features(const KernelConfig& config, const ParamList& params, const Tensor& rows) {
  auto f = apply_transform(config, params, rows);
  return config.kind == KernelKind::cosine ? normalize_rows(f, config.cosine_epsilon) : f;
}

}  // namespace

void validate(const KernelConfig& config) {
  if (!(config.cosine_epsilon > 0.0)) throw ConfigError("kernel.cosine_epsilon must be positive");
  if (config.transform == TransformKind::identity) {
    if (!config.transform_hidden_sizes.empty() || config.transform_out_dim != 0) {
      throw ConfigError("identity kernel transform takes no hidden sizes or output dimension");
    }
    return;
  }
  for (auto h : config.transform_hidden_sizes) {
    if (h == 0) throw ConfigError("kernel.transform_hidden_sizes entries must be positive");
  }
}

ParamList init_kernel_transform(const KernelConfig& config, std::size_t embedding_dim, std::uint64_t seed) {
  validate(config);
  ParamList params;
  if (config.transform == TransformKind::identity) return params;
  std::mt19937_64 rng(seed);
  std::size_t in = embedding_dim;
  std::size_t layer = 0;
  for (auto h : config.transform_hidden_sizes) {
    append_linear(params, "kernel.layer" + std::to_string(layer++), in, h, rng);
    in = h;
  }
  std::size_t out = config.transform_out_dim == 0 ? embedding_dim : config.transform_out_dim;
  append_linear(params, "kernel.layer" + std::to_string(layer), in, out, rng);
  return params;
}

OrderedSupport order_support(const Tensor& embeddings, std::span<const int> labels) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw ShapeError("order_support: " + std::to_string(labels.size()) + " labels for embeddings " +
                     shape_str(embeddings.shape()));
  }
  if (labels.empty()) throw ShapeError("order_support: empty support set");
  OrderedSupport out;
  out.pi.resize(labels.size());
  std::iota(out.pi.begin(), out.pi.end(), 0);
  std::stable_sort(out.pi.begin(), out.pi.end(), [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });
  out.row_labels.reserve(labels.size());
  for (auto i : out.pi) out.row_labels.push_back(labels[i]);
  out.embeddings = gather_rows(embeddings, out.pi);
  return out;
}

OrderedSupport aggregate(const OrderedSupport& ordered, AggregationMode mode, int way, int shot) {
  const auto rows = static_cast<std::size_t>(way) * static_cast<std::size_t>(shot);
  if (way < 1 || shot < 1 || ordered.embeddings.rank() != 2 || ordered.embeddings.dim(0) != rows ||
      ordered.row_labels.size() != rows) {
    throw ShapeError("aggregate: expected " + std::to_string(way) + " x " + std::to_string(shot) +
                     " support rows, got " + shape_str(ordered.embeddings.shape()));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    if (ordered.row_labels[i] != static_cast<int>(i / static_cast<std::size_t>(shot))) {
      throw ShapeError("aggregate: support is not ordered with exactly " + std::to_string(shot) + " rows per class");
    }
  }
  if (mode == AggregationMode::fine_grained) return ordered;

  // Class means as a product with a [way, way*shot] averaging matrix.
  std::vector<double> avg(static_cast<std::size_t>(way) * rows, 0.0);
  const double w = 1.0 / static_cast<double>(shot);
  for (std::size_t r = 0; r < rows; ++r) avg[(r / static_cast<std::size_t>(shot)) * rows + r] = w;
  OrderedSupport out;
  out.embeddings = matmul(Tensor({static_cast<std::size_t>(way), rows}, std::move(avg)), ordered.embeddings);
  out.row_labels.resize(static_cast<std::size_t>(way));
  std::iota(out.row_labels.begin(), out.row_labels.end(), 0);
  out.pi = ordered.pi;
  return out;
}

Tensor apply_transform(const KernelConfig& config, const ParamList& params, const Tensor& rows) {
  if (config.transform == TransformKind::identity) return rows;
  return mlp_forward(params, "kernel.layer", transform_layers(config), rows);
}

Tensor kernel_value(const KernelConfig& config, const ParamList& params, const Tensor& z1, const Tensor& z2) {
  auto a = as_row(z1);
  auto b = as_row(z2);
  if (a.dim(1) != b.dim(1)) throw ShapeError("kernel_value: embedding dimensions differ");
  return reshape(matmul(kernel_features(config, params, a), transpose(kernel_features(config, params, b))), {});
}

Tensor support_kernel_matrix(const KernelConfig& config, const ParamList& params, const Tensor& rows) {
  if (rows.rank() != 2 || rows.dim(0) == 0) throw ShapeError("support_kernel_matrix needs at least one row");
  auto f = kernel_features(config, params, rows);
  return matmul(f, transpose(f));
}

Tensor query_kernel_vector(const KernelConfig& config, const ParamList& params, const Tensor& query,
                           const Tensor& rows) {
  auto k = query_kernel_matrix(config, params, as_row(query), rows);
  return reshape(k, {k.dim(1)});
}

Tensor query_kernel_matrix(const KernelConfig& config, const ParamList& params, const Tensor& queries,
                           const Tensor& rows) {
  if (queries.rank() != 2 || rows.rank() != 2 || queries.dim(1) != rows.dim(1)) {
    throw ShapeError("query kernel: query shape " + shape_str(queries.shape()) + " does not match support rows " +
                     shape_str(rows.shape()));
  }
  return matmul(kernel_features(config, params, queries), transpose(kernel_features(config, params, rows)));
}

}  // namespace khn
