#include <benchmark/benchmark.h>

#include <random>

#include "khn/kernel.hpp"
#include "khn/model.hpp"
#include "khn/training.hpp"

using namespace khn;

namespace {

Episode toy_episode(int shot) {
  static const SyntheticTaskSource source(SyntheticSpec{});
  return sample_episode(source, Split::train, {5, shot, 16}, 1);
}

ModelConfig config_for(int shot, AggregationMode mode) {
  ModelConfig c;
  c.shot = shot;
  c.aggregation = mode;
  return c;
}

void BM_EpisodeForward(benchmark::State& state) {
  const int shot = static_cast<int>(state.range(0));
  const auto mode = state.range(1) ? AggregationMode::fine_grained : AggregationMode::averaged;
  auto model = init_model(config_for(shot, mode), 1);
  auto ep = toy_episode(shot);
  for (auto _ : state) benchmark::DoNotOptimize(episode_forward(model, ep));
}
BENCHMARK(BM_EpisodeForward)->Args({1, 0})->Args({5, 0})->Args({5, 1})->Unit(benchmark::kMicrosecond);

void BM_EpisodeBackward(benchmark::State& state) {
  auto model = init_model(ModelConfig{}, 1);
  for (auto& p : model.all_params()) p.tensor.set_requires_grad(true);
  auto ep = toy_episode(1);
  for (auto _ : state) {
    auto loss = episode_loss(model, ep);
    backward(loss);
    for (auto& p : model.all_params()) p.tensor.zero_grad();
  }
}
BENCHMARK(BM_EpisodeBackward)->Unit(benchmark::kMicrosecond);

void BM_SupportKernelMatrix(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  KernelConfig cfg;
  cfg.kind = state.range(1) ? KernelKind::dot : KernelKind::cosine;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  std::vector<double> v(rows * 64);
  for (auto& x : v) x = normal(rng);
  Tensor z({rows, 64}, v);
  const ParamList none;
  for (auto _ : state) benchmark::DoNotOptimize(support_kernel_matrix(cfg, none, z));
}
BENCHMARK(BM_SupportKernelMatrix)->Args({5, 0})->Args({25, 0})->Args({25, 1});

void BM_TrainIteration(benchmark::State& state) {
  const SyntheticTaskSource source(SyntheticSpec{});
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.eval_every = 1000;
  auto model = init_model(ModelConfig{}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(train(source, TaskShape{}, cfg, model.clone()));
  state.SetItemsProcessed(state.iterations() * cfg.epochs);
}
BENCHMARK(BM_TrainIteration)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
