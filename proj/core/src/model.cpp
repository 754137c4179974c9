#include "khn/model.hpp"

#include "khn/errors.hpp"
#include "khn/ops.hpp"

namespace khn {

std::size_t support_rows(const ModelConfig& config) {
  const auto way = static_cast<std::size_t>(config.way);
  return config.aggregation == AggregationMode::averaged ? way : way * static_cast<std::size_t>(config.shot);
}

TargetShape target_shape(const ModelConfig& config) {
  return {support_rows(config), config.hypernet.target_layer_sizes, config.hypernet.target_use_bias};
}

void validate(const ModelConfig& config) {
  if (config.way < 1 || config.shot < 1) throw ConfigError("task.way and task.shot must be at least 1");
  validate(config.encoder);
  validate(config.kernel);
  validate(config.hypernet, target_shape(config));
  if (config.hypernet.target_layer_sizes.back() != static_cast<std::size_t>(config.way)) {
    throw ConfigError("the last target layer must have " + std::to_string(config.way) + " outputs (the way), got " +
                      std::to_string(config.hypernet.target_layer_sizes.back()));
  }
}

std::vector<NamedTensor> Model::all_params() const {
  std::vector<NamedTensor> out;
  out.reserve(encoder.size() + kernel.size() + hypernet.size());
  out.insert(out.end(), encoder.begin(), encoder.end());
  out.insert(out.end(), kernel.begin(), kernel.end());
  out.insert(out.end(), hypernet.begin(), hypernet.end());
  return out;
}

std::size_t Model::parameter_count() const {
  return khn::parameter_count(encoder) + khn::parameter_count(kernel) + khn::parameter_count(hypernet);
}

Model Model::clone() const { return {config, clone_params(encoder), clone_params(kernel), clone_params(hypernet)}; }

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  Model model;
  model.config = config;
  model.encoder = init_encoder(config.encoder, mix_seed(seed, 0));
  model.kernel = init_kernel_transform(config.kernel, config.encoder.embedding_dim, mix_seed(seed, 1));
  model.hypernet = init_hypernet(config.hypernet, target_shape(config), mix_seed(seed, 2));
  return model;
}

ForwardTrace forward_trace(const Model& model, std::span<const Example> support,
                           std::span<const std::vector<double>> queries, const Shape& input_shape) {
  const auto& cfg = model.config;
  const auto expected = static_cast<std::size_t>(cfg.way) * static_cast<std::size_t>(cfg.shot);
  if (support.size() != expected) {
    throw ShapeError("model expects " + std::to_string(cfg.way) + "-way " + std::to_string(cfg.shot) +
                     "-shot support (" + std::to_string(expected) + " examples), got " +
                     std::to_string(support.size()));
  }
  if (queries.empty()) throw ShapeError("no queries to classify");

  std::vector<std::vector<double>> inputs;
  inputs.reserve(support.size() + queries.size());
  for (const auto& e : support) inputs.push_back(e.input);
  inputs.insert(inputs.end(), queries.begin(), queries.end());
  auto z = encode(cfg.encoder, model.encoder, stack_inputs(inputs, input_shape));
  auto z_support = slice_rows(z, 0, support.size());
  auto z_query = slice_rows(z, support.size(), inputs.size());

  ForwardTrace trace;
  auto labels = labels_of(support);
  trace.support = aggregate(order_support(z_support, labels), cfg.aggregation, cfg.way, cfg.shot);
  trace.kernel_matrix = support_kernel_matrix(cfg.kernel, model.kernel, trace.support.embeddings);
  const auto shape = target_shape(cfg);
  trace.theta = generate_target_params(cfg.hypernet, shape, model.hypernet, flatten_kernel(trace.kernel_matrix));
  trace.query_kernels = query_kernel_matrix(cfg.kernel, model.kernel, z_query, trace.support.embeddings);
  trace.logits = target_logits(shape, trace.theta, trace.query_kernels);
  return trace;
}

Tensor episode_forward(const Model& model, const Episode& episode) {
  if (episode.way != model.config.way || episode.shot != model.config.shot) {
    throw ShapeError("episode is " + std::to_string(episode.way) + "-way " + std::to_string(episode.shot) +
                     "-shot, model was built for " + std::to_string(model.config.way) + "-way " +
                     std::to_string(model.config.shot) + "-shot");
  }
  std::vector<std::vector<double>> queries;
  queries.reserve(episode.query.size());
  for (const auto& q : episode.query) queries.push_back(q.input);
  return forward_trace(model, episode.support, queries, episode.input_shape).logits;
}

}  // namespace khn
