#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "khn/episodes.hpp"
#include "khn/model.hpp"
#include "khn/training.hpp"

namespace khn {

inline constexpr int kRunConfigVersion = 1;

enum class DataKind { synthetic, folder };

struct DataConfig {
  DataKind kind = DataKind::synthetic;
  SyntheticSpec synthetic;
  // Optional file written by gen-data from `synthetic`; when set, the
  // centers are read from it and its spec must equal `synthetic`.
  std::string description;
  FolderSpec folder;

  bool operator==(const DataConfig&) const = default;
};

struct EncoderSection {
  EncoderKind kind = EncoderKind::mlp;
  std::vector<std::size_t> mlp_hidden_sizes{64, 64};
  std::size_t embedding_dim = 64;

  bool operator==(const EncoderSection&) const = default;
};

struct KernelSection {
  KernelKind kind = KernelKind::cosine;
  TransformKind transform = TransformKind::identity;
  std::vector<std::size_t> transform_hidden_sizes;
  std::size_t transform_out_dim = 0;
  double cosine_epsilon = 1e-8;
  AggregationMode aggregation = AggregationMode::averaged;

  bool operator==(const KernelSection&) const = default;
};

struct HypernetSection {
  std::size_t neck_depth = 1;
  std::size_t head_depth = 2;
  std::size_t hidden_dim = 64;
  // Hidden target layers; the output layer (task.way units) is implied.
  std::vector<std::size_t> target_hidden_sizes;
  bool target_use_bias = true;

  bool operator==(const HypernetSection&) const = default;
};

struct TrainingSection {
  double learning_rate = 1e-3;
  int epochs = 500;
  int tasks_per_epoch = 1;
  int taskset_size = 1;
  int eval_every = 100;
  int eval_episodes = 20;
  UpdateRule optimizer = UpdateRule::adam;

  bool operator==(const TrainingSection&) const = default;
};

struct GradcheckSection {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_parameters = 50000;

  bool operator==(const GradcheckSection&) const = default;
};

// Everything a run needs, as read from one JSON document.
struct RunConfig {
  int format_version = kRunConfigVersion;
  std::uint64_t seed = 0;
  std::string output_dir;
  DataConfig data;
  TaskShape task;
  EncoderSection encoder;
  KernelSection kernel;
  HypernetSection hypernet;
  TrainingSection training;
  FinetuneConfig finetune;
  GradcheckSection gradcheck;

  bool operator==(const RunConfig&) const = default;
};

// Parses and validates. Missing keys keep their defaults; unknown keys and
// ill-typed values are collected and reported together in one ConfigError.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize(const RunConfig& config);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

void validate(const RunConfig& config);

// Input shape implied by the data section; never touches the disk.
Shape data_input_shape(const RunConfig& config);
ModelConfig model_config(const RunConfig& config, const Shape& input_shape);
TrainConfig train_config(const RunConfig& config);

std::unique_ptr<TaskSource> make_task_source(const RunConfig& config);

// gen-data output: the synthetic spec plus every class center.
std::string serialize_synthetic_description(const SyntheticTaskSource& source);
SyntheticTaskSource parse_synthetic_description(const std::string& text);
SyntheticTaskSource load_synthetic_description(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace khn
