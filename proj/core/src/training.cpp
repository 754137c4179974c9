#include "khn/training.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <string>
#include <thread>

#include "khn/errors.hpp"
#include "khn/ops.hpp"
#include "khn/optim.hpp"

namespace khn {
namespace {

// Seeds for training tasks and validation passes come from disjoint streams.
constexpr std::uint64_t kTrainStream = 0x7472616e;
constexpr std::uint64_t kValStream = 0x76616c;

std::vector<std::vector<double>> query_inputs(const Episode& episode) {
  std::vector<std::vector<double>> out;
  out.reserve(episode.query.size());
  for (const auto& q : episode.query) out.push_back(q.input);
  return out;
}

void apply_update(UpdateRule rule, std::span<Tensor> params, AdamState& state, double lr) {
  if (rule == UpdateRule::adam) {
    adam_step(params, state, lr);
  } else {
    sgd_step(params, lr);
  }
}

}  // namespace

void validate(const TrainConfig& config) {
  if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
    throw ConfigError("training.learning_rate must be a finite non-negative number");
  }
  if (config.epochs < 1 || config.tasks_per_epoch < 1 || config.taskset_size < 1 || config.eval_every < 1 ||
      config.eval_episodes < 1) {
    throw ConfigError("training counts (epochs, tasks_per_epoch, taskset_size, eval_every, eval_episodes) must be >= 1");
  }
}

void validate(const FinetuneConfig& config) {
  if (config.steps < 0) throw ConfigError("finetune.steps must be non-negative");
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate)) {
    throw ConfigError("finetune.learning_rate must be a finite positive number");
  }
}

EvalReport make_report(std::vector<double> per_episode_accuracies) {
  EvalReport report;
  report.episode_count = static_cast<int>(per_episode_accuracies.size());
  if (per_episode_accuracies.empty()) return report;
  const double n = static_cast<double>(per_episode_accuracies.size());
  double mean = 0.0;
  for (double a : per_episode_accuracies) mean += a;
  mean /= n;
  double ss = 0.0;
  for (double a : per_episode_accuracies) ss += (a - mean) * (a - mean);
  report.mean_accuracy = mean;
  report.ci95_halfwidth = per_episode_accuracies.size() > 1 ? 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
  report.per_episode_accuracies = std::move(per_episode_accuracies);
  return report;
}

Tensor episode_loss(const Model& model, const Episode& episode) {
  auto labels = labels_of(episode.query);
  return softmax_cross_entropy(episode_forward(model, episode), labels);
}

TrainResult train(const TaskSource& source, const TaskShape& task, const TrainConfig& config, Model model,
                  const TrainObserver& observer) {
  validate(config);
  if (task.way != model.config.way || task.shot != model.config.shot) {
    throw ConfigError("task shape does not match the model's way/shot");
  }
  TrainResult result;
  auto named = model.all_params();
  std::vector<Tensor> params;
  for (auto& p : named) {
    p.tensor.set_requires_grad(true);
    params.push_back(p.tensor);
  }
  AdamState state(params);

  using Clock = std::chrono::steady_clock;
  int iteration = 0;
  std::uint64_t task_index = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    int remaining = config.tasks_per_epoch;
    while (remaining > 0) {
      const auto start = Clock::now();
      const int set_size = std::min(remaining, config.taskset_size);
      remaining -= set_size;
      double loss_value = 0.0;
      try {
        std::vector<Tensor> losses;
        for (int t = 0; t < set_size; ++t) {
          auto episode = sample_episode(source, Split::train, task, mix_seed(config.seed ^ kTrainStream, task_index++));
          losses.push_back(episode_loss(model, episode));
        }
        Tensor loss = losses.front();
        for (std::size_t t = 1; t < losses.size(); ++t) loss = loss + losses[t];
        if (losses.size() > 1) loss = scale(loss, 1.0 / static_cast<double>(losses.size()));
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericError("loss is " + std::to_string(loss_value));
        backward(loss);
        apply_update(config.optimizer, params, state, config.learning_rate);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at iteration " + std::to_string(iteration) + " (last loss " +
                           std::to_string(loss_value) + "): " + e.what());
      }
      IterationRecord record{iteration++, loss_value,
                             std::chrono::duration<double, std::milli>(Clock::now() - start).count()};
      result.history.push_back(record);
      if (observer.on_iteration) observer.on_iteration(record);
    }
    if ((epoch + 1) % config.eval_every == 0) {
      FinetuneConfig no_tuning;
      no_tuning.steps = 0;
      EvalRecord record{iteration, evaluate(model, source, Split::val, task, config.eval_episodes, no_tuning,
                                            mix_seed(config.seed ^ kValStream, static_cast<std::uint64_t>(epoch)))};
      result.evaluations.push_back(record);
      if (observer.on_eval) observer.on_eval(record);
    }
  }
  for (auto& p : params) p.clear_grad();
  result.model = std::move(model);
  return result;
}

void tune_on_episode(Model& model, const Episode& episode, const FinetuneConfig& config) {
  validate(config);
  set_requires_grad(model.encoder, config.tune_encoder);
  set_requires_grad(model.kernel, config.tune_kernel);
  set_requires_grad(model.hypernet, config.tune_hypernet);
  std::vector<Tensor> params;
  for (const auto& p : model.all_params()) {
    if (p.tensor.requires_grad()) params.push_back(p.tensor);
  }
  if (params.empty() || config.steps == 0) return;
  AdamState state(params);
  for (int step = 0; step < config.steps; ++step) {
    auto loss = episode_loss(model, episode);
    if (!std::isfinite(loss.item())) throw NumericError("finetuning loss became non-finite");
    backward(loss);
    adam_step(params, state, config.learning_rate);
  }
}

Episode make_tuning_task(std::span<const Example> support, int way, int shot, const Shape& input_shape) {
  Episode task;
  task.support.assign(support.begin(), support.end());
  task.query = task.support;
  task.way = way;
  task.shot = shot;
  task.queries_per_class = shot;
  task.input_shape = input_shape;
  return task;
}

int argmax_lowest(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

Prediction predict(const Model& model, std::span<const Example> support, std::span<const std::vector<double>> queries,
                   const Shape& input_shape, const FinetuneConfig& finetune) {
  validate(finetune);
  Model tuned = model.clone();
  auto tuning = make_tuning_task(support, model.config.way, model.config.shot, input_shape);
  Prediction out;
  for (auto& p : tuned.all_params()) p.tensor.set_requires_grad(false);
  out.tuning_loss_before = episode_loss(tuned, tuning).item();
  out.tuning_loss_after = out.tuning_loss_before;
  if (finetune.steps > 0) {
    tune_on_episode(tuned, tuning, finetune);
    for (auto& p : tuned.all_params()) p.tensor.set_requires_grad(false);
    out.tuning_loss_after = episode_loss(tuned, tuning).item();
  }
  auto logits = forward_trace(tuned, support, queries, input_shape).logits;
  out.distributions = softmax_rows(logits);
  const auto way = static_cast<std::size_t>(model.config.way);
  for (std::size_t m = 0; m < queries.size(); ++m) {
    out.labels.push_back(argmax_lowest(std::span<const double>(out.distributions).subspan(m * way, way)));
  }
  return out;
}

EvalReport evaluate_predictor(const TaskSource& source, Split split, const TaskShape& task, int episode_count,
                              std::uint64_t seed, const EpisodePredictor& predictor, int threads) {
  if (episode_count < 1) throw ConfigError("evaluation needs at least one episode");
  std::vector<double> accuracies(static_cast<std::size_t>(episode_count));
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (int i = next++; i < episode_count; i = next++) {
      try {
        auto episode = sample_episode(source, split, task, mix_seed(seed, static_cast<std::uint64_t>(i)));
        auto labels = predictor(episode);
        if (labels.size() != episode.query.size()) throw ShapeError("predictor returned the wrong number of labels");
        std::size_t correct = 0;
        for (std::size_t q = 0; q < labels.size(); ++q) correct += labels[q] == episode.query[q].label ? 1 : 0;
        accuracies[static_cast<std::size_t>(i)] =
            static_cast<double>(correct) / static_cast<double>(episode.query.size());
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = episode_count;
      }
    }
  };
  const int workers = std::max(1, std::min(threads, episode_count));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return make_report(std::move(accuracies));
}

EvalReport evaluate(const Model& model, const TaskSource& source, Split split, const TaskShape& task,
                    int episode_count, const FinetuneConfig& finetune, std::uint64_t seed, int threads) {
  validate(finetune);
  return evaluate_predictor(
      source, split, task, episode_count, seed,
      [&](const Episode& episode) {
        auto queries = query_inputs(episode);
        return predict(model, episode.support, queries, episode.input_shape, finetune).labels;
      },
      threads);
}

}  // namespace khn
