#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "khn/episodes.hpp"
#include "khn/model.hpp"
#include "khn/tensor.hpp"

namespace khn {

enum class UpdateRule { adam, sgd };

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 500;
  int tasks_per_epoch = 1;
  int taskset_size = 1;  // tasks averaged per gradient step
  std::uint64_t seed = 0;
  int eval_every = 100;  // epochs between validation passes
  int eval_episodes = 20;
  // sgd (plain θ -= α∇) exists for testing the update path.
  UpdateRule optimizer = UpdateRule::adam;

  bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& config);

struct FinetuneConfig {
  int steps = 10;  // 0 disables finetuning
  double learning_rate = 1e-4;
  bool tune_encoder = true;
  bool tune_hypernet = true;
  bool tune_kernel = true;

  bool operator==(const FinetuneConfig&) const = default;
};

void validate(const FinetuneConfig& config);

struct IterationRecord {
  int iteration = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct EvalReport {
  int episode_count = 0;
  double mean_accuracy = 0.0;
  // 1.96 * sample standard deviation / sqrt(episode_count); 0 for one episode.
  double ci95_halfwidth = 0.0;
  std::vector<double> per_episode_accuracies;
};

EvalReport make_report(std::vector<double> per_episode_accuracies);

struct EvalRecord {
  int iteration = 0;
  EvalReport report;
};

struct TrainObserver {
  std::function<void(const IterationRecord&)> on_iteration;
  std::function<void(const EvalRecord&)> on_eval;
};

struct TrainResult {
  Model model;
  std::vector<IterationRecord> history;
  std::vector<EvalRecord> evaluations;
};

// Mean softmax cross-entropy of the episode's query logits.
Tensor episode_loss(const Model& model, const Episode& episode);

// Episodic training: every gradient step samples taskset_size tasks from
// the train split, averages their losses and updates encoder, kernel and
// hypernetwork parameters jointly. Throws NumericError (naming the
// iteration) on a non-finite loss. Deterministic given config.seed.
TrainResult train(const TaskSource& source, const TaskShape& task, const TrainConfig& config, Model model,
                  const TrainObserver& observer = {});

// Runs `steps` updates of the selected parameter groups of `model` on one
// fixed episode. Used both by train() (through its own loop) and by predict.
void tune_on_episode(Model& model, const Episode& episode, const FinetuneConfig& config);

struct Prediction {
  std::vector<int> labels;           // argmax per query, lowest index on ties
  std::vector<double> distributions;  // [M, way], row-major
  // Loss on the tuning task {S*, S*} before and after finetuning; equal when
  // steps == 0.
  double tuning_loss_before = 0.0;
  double tuning_loss_after = 0.0;
};

// Episode whose query set is the support set itself.
Episode make_tuning_task(std::span<const Example> support, int way, int shot, const Shape& input_shape);

// Classifies unlabeled queries given a labeled support set. With
// finetuning, a private copy of the model is tuned on {S*, S*} first; the
// given model is never modified.
Prediction predict(const Model& model, std::span<const Example> support, std::span<const std::vector<double>> queries,
                   const Shape& input_shape, const FinetuneConfig& finetune);

int argmax_lowest(std::span<const double> values);

using EpisodePredictor = std::function<std::vector<int>(const Episode&)>;

// Accuracy of `predictor` over `episode_count` episodes from `split`.
// Episodes are seeded from `seed`; up to `threads` run concurrently and
// the report does not depend on the thread count.
EvalReport evaluate_predictor(const TaskSource& source, Split split, const TaskShape& task, int episode_count,
                              std::uint64_t seed, const EpisodePredictor& predictor, int threads = 1);

EvalReport evaluate(const Model& model, const TaskSource& source, Split split, const TaskShape& task,
                    int episode_count, const FinetuneConfig& finetune, std::uint64_t seed, int threads = 1);

}  // namespace khn
