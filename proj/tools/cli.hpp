#pragma once

#include <cstdint>
#include <exception>
#include <iosfwd>
#include <optional>
#include <string>

namespace khn::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kNumericError = 4,
  kIncompatibleCheckpoint = 5,
};

// Maps a caught exception to the process exit status.
int exit_code_for(const std::exception_ptr& error);

// Full command line, argv[0] included.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct TrainArgs {
  std::string config;
  std::string out;  // empty: output_dir from the config
  std::optional<std::uint64_t> seed;
};

struct EvalArgs {
  std::string checkpoint;
  std::string config;  // optional override of data, task.queries_per_class and finetune
  std::string out;     // empty: the checkpoint's directory
  int episodes = 600;
  std::optional<bool> finetune;  // unset: report both
  std::optional<std::uint64_t> seed;
};

struct GradcheckArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
};

struct GenDataArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

// Each command throws on failure; run() turns exceptions into exit codes.
int cmd_train(const TrainArgs& args, std::ostream& out);
int cmd_eval(const EvalArgs& args, std::ostream& out);
int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out);
int cmd_gen_data(const GenDataArgs& args, std::ostream& out);

// Evaluation worker count: KHN_THREADS when set, else the hardware count.
int eval_threads();

}  // namespace khn::cli
