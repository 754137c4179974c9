#include "cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <ostream>
#include <thread>

#include "khn/checkpoint.hpp"
#include "khn/config.hpp"
#include "khn/errors.hpp"
#include "khn/gradcheck.hpp"
#include "khn/metrics.hpp"
#include "khn/training.hpp"

namespace khn::cli {
namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kGradcheckStream = 0x6763;
constexpr std::uint64_t kTestStream = 0x74657374;

RunConfig load_with_seed(const std::string& path, const std::optional<std::uint64_t>& seed) {
  if (path.empty()) throw ConfigError("--config is required");
  auto config = load_run_config(path);
  if (seed) config.seed = *seed;
  return config;
}

std::string eval_file_name(Split split, bool finetune) {
  return std::string("eval-") + split_name(split) + "-finetune-" + (finetune ? "on" : "off") + ".json";
}

}  // namespace

int exit_code_for(const std::exception_ptr& error) {
  try {
    std::rethrow_exception(error);
  } catch (const IncompatibleCheckpointError&) {
    return kIncompatibleCheckpoint;
  } catch (const CheckpointError&) {
    return kDataError;
  } catch (const ConfigError&) {
    return kConfigError;
  } catch (const DataError&) {
    return kDataError;
  } catch (const NumericError&) {
    return kNumericError;
  } catch (const fs::filesystem_error&) {
    return kDataError;
  } catch (...) {
    return kFailure;
  }
}

int eval_threads() {
  const char* env = std::getenv("KHN_THREADS");
  if (env == nullptr || *env == '\0') return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 4096) throw ConfigError(std::string("KHN_THREADS must be a positive integer, got ") + env);
  return static_cast<int>(n);
}

int cmd_train(const TrainArgs& args, std::ostream& out) {
  auto config = load_with_seed(args.config, args.seed);
  const fs::path dir = args.out.empty() ? fs::path(config.output_dir) : fs::path(args.out);
  if (dir.empty()) throw ConfigError("no output directory: pass --out or set output_dir");
  auto source = make_task_source(config);
  const auto input_shape = source->input_shape();
  auto model = init_model(model_config(config, input_shape), config.seed);

  fs::create_directories(dir / "evals");
  fs::remove(dir / "metrics.tsv");
  MetricsLog log(dir / "metrics.tsv");
  TrainObserver observer;
  observer.on_iteration = [&](const IterationRecord& r) { log.append(r); };
  observer.on_eval = [&](const EvalRecord& r) {
    char name[32];
    std::snprintf(name, sizeof(name), "eval-%07d.json", r.iteration);
    write_text_file(dir / "evals" / name, serialize_eval_summary({"val", false, r.iteration, r.report}));
    out << "iteration " << r.iteration << ": val accuracy " << format_report(r.report) << "\n";
  };
  auto result = train(*source, config.task, train_config(config), std::move(model), observer);

  RunConfig resolved = config;
  resolved.output_dir.clear();
  save_run_config(dir / "config.json", resolved);
  save_checkpoint(dir / "checkpoint.khn", resolved, input_shape, result.model);
  out << "trained " << result.history.size() << " iterations, final loss " << result.history.back().loss << "\n"
      << "checkpoint: " << (dir / "checkpoint.khn").string() << "\n";
  return kOk;
}

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  if (args.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (args.episodes < 1) throw ConfigError("--episodes must be at least 1");
  const int threads = eval_threads();
  auto ck = load_checkpoint(args.checkpoint);
  RunConfig config = ck.config;
  if (!args.config.empty()) {
    auto other = load_run_config(args.config);
    if (other.task.way != config.task.way || other.task.shot != config.task.shot) {
      throw ConfigError("evaluation config must keep the checkpoint's way and shot (" +
                        std::to_string(config.task.way) + "-way " + std::to_string(config.task.shot) + "-shot)");
    }
    config.data = other.data;
    config.task.queries_per_class = other.task.queries_per_class;
    config.finetune = other.finetune;
  }
  if (args.seed) config.seed = *args.seed;
  auto source = make_task_source(config);
  if (source->input_shape() != ck.input_shape) {
    throw ConfigError("data input shape " + shape_str(source->input_shape()) + " does not match the checkpoint's " +
                      shape_str(ck.input_shape));
  }
  const fs::path dir = args.out.empty() ? fs::absolute(args.checkpoint).parent_path() : fs::path(args.out);
  fs::create_directories(dir);

  std::vector<bool> modes;
  if (args.finetune) {
    modes.push_back(*args.finetune);
  } else {
    modes = {false, true};
  }
  for (bool finetune : modes) {
    FinetuneConfig ft = config.finetune;
    if (!finetune) ft.steps = 0;
    auto report = evaluate(ck.model, *source, Split::test, config.task, args.episodes, ft,
                           mix_seed(config.seed, kTestStream), threads);
    write_text_file(dir / eval_file_name(Split::test, finetune),
                    serialize_eval_summary({split_name(Split::test), finetune, -1, report}));
    out << "finetune " << (finetune ? "on" : "off") << ": " << format_report(report) << " over "
        << report.episode_count << " test episodes\n";
  }
  return kOk;
}

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out) {
  auto config = load_with_seed(args.config, args.seed);
  auto source = make_task_source(config);
  auto model = init_model(model_config(config, source->input_shape()), config.seed);
  auto episode = sample_episode(*source, Split::train, config.task, mix_seed(config.seed, kGradcheckStream));
  GradcheckOptions options;
  options.step = config.gradcheck.step;
  options.tolerance = config.gradcheck.tolerance;
  options.max_parameters = config.gradcheck.max_parameters;
  auto report = gradcheck(model, episode, options);
  char line[256];
  for (const auto& g : report.groups) {
    if (g.empty()) {
      std::snprintf(line, sizeof(line), "%-8s empty, skipped\n", g.group.c_str());
    } else {
      std::snprintf(line, sizeof(line), "%-8s %6zu params  max rel err %.3e  (%zu kinks skipped)  %s  worst %s\n",
                    g.group.c_str(), g.parameters, g.max_rel_error, g.skipped_kinks, g.passed ? "pass" : "FAIL",
                    g.worst.c_str());
    }
    out << line;
  }
  out << (report.passed ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << options.tolerance << ", step "
      << options.step << ")\n";
  return report.passed ? kOk : kNumericError;
}

int cmd_gen_data(const GenDataArgs& args, std::ostream& out) {
  if (args.config.empty()) throw ConfigError("--config is required");
  if (args.out.empty()) throw ConfigError("--out is required");
  auto config = load_run_config(args.config);
  auto spec = config.data.synthetic;
  if (args.seed) spec.seed = *args.seed;
  SyntheticTaskSource source(spec);
  fs::create_directories(args.out);
  const auto path = fs::path(args.out) / "synthetic.json";
  write_text_file(path, serialize_synthetic_description(source));
  out << "wrote " << path.string() << " (" << spec.class_pool_size << " classes, dim " << spec.input_dim << ")\n";
  return kOk;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Kernel-conditioned hypernetworks for few-shot classification"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Episodic training; writes checkpoint, metrics and resolved config");
  train->add_option("--config", train_args.config, "Run config (JSON)")->required();
  train->add_option("--out", train_args.out, "Output directory");
  train->add_option("--seed", train_args.seed, "Override the config seed");

  EvalArgs eval_args;
  std::string finetune_flag;
  auto* eval = app.add_subcommand("eval", "Test-split accuracy of a checkpoint");
  eval->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval->add_option("--config", eval_args.config, "Override data, queries per class and finetune settings");
  eval->add_option("--out", eval_args.out, "Directory for the JSON reports");
  eval->add_option("--episodes", eval_args.episodes, "Number of test episodes");
  eval->add_option("--finetune", finetune_flag, "on | off; both when omitted")->check(CLI::IsMember({"on", "off"}));
  eval->add_option("--seed", eval_args.seed, "Override the evaluation seed");

  GradcheckArgs gradcheck_args;
  auto* grad = app.add_subcommand("gradcheck", "Compare gradients against central finite differences");
  grad->add_option("--config", gradcheck_args.config, "Run config (JSON)")->required();
  grad->add_option("--seed", gradcheck_args.seed, "Override the config seed");

  GenDataArgs gen_args;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset description");
  gen->add_option("--config", gen_args.config, "Run config (JSON); its data.synthetic section is used")->required();
  gen->add_option("--out", gen_args.out, "Output directory")->required();
  gen->add_option("--seed", gen_args.seed, "Override the synthetic seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (train->parsed()) return cmd_train(train_args, out);
    if (eval->parsed()) {
      if (!finetune_flag.empty()) eval_args.finetune = finetune_flag == "on";
      return cmd_eval(eval_args, out);
    }
    if (grad->parsed()) return cmd_gradcheck(gradcheck_args, out);
    return cmd_gen_data(gen_args, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(std::current_exception());
  }
}

}  // namespace khn::cli
