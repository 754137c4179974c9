#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "doctest.h"
#include "khn/checkpoint.hpp"
#include "khn/config.hpp"
#include "khn/errors.hpp"
#include "support.hpp"

using namespace khn;
using khn::testing::TempDir;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "khn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig quick_config() {
  RunConfig c;
  c.seed = 5;
  c.training.epochs = 40;
  c.training.eval_every = 20;
  c.training.eval_episodes = 3;
  c.finetune.steps = 2;
  return c;
}

std::string write_config(const TempDir& dir, const RunConfig& c, const std::string& name = "config.json") {
  save_run_config(dir / name, c);
  return (dir / name).string();
}

}  // namespace

TEST_CASE("exit codes per error kind") {
  auto code = [](auto e) { return cli::exit_code_for(std::make_exception_ptr(e)); };
  CHECK(code(ConfigError("x")) == 2);
  CHECK(code(DataError("x")) == 3);
  CHECK(code(CheckpointError("x")) == 3);
  CHECK(code(NumericError("x")) == 4);
  CHECK(code(IncompatibleCheckpointError("x")) == 5);
  CHECK(code(std::runtime_error("x")) == 1);
}

TEST_CASE("train writes checkpoint, metrics and resolved config") {
  TempDir dir("cli-train");
  auto config = write_config(dir, quick_config());
  auto r = run_cli({"train", "--config", config, "--out", (dir / "run").string()});
  REQUIRE(r.code == 0);
  CHECK(std::filesystem::exists(dir / "run/checkpoint.khn"));
  CHECK(std::filesystem::exists(dir / "run/evals/eval-0000020.json"));
  CHECK(std::filesystem::exists(dir / "run/evals/eval-0000040.json"));
  CHECK(load_run_config(dir / "run/config.json") == quick_config());

  std::istringstream metrics(slurp(dir / "run/metrics.tsv"));
  std::string line;
  std::getline(metrics, line);
  CHECK(line == "iteration\tloss\twall_ms");
  int rows = 0, last = -1;
  while (std::getline(metrics, line)) {
    int it = std::stoi(line.substr(0, line.find('\t')));
    CHECK(it > last);
    last = it;
    ++rows;
  }
  CHECK(rows == 40);

  SUBCASE("same seed gives an identical checkpoint") {
    REQUIRE(run_cli({"train", "--config", config, "--out", (dir / "again").string()}).code == 0);
    CHECK(slurp(dir / "run/checkpoint.khn") == slurp(dir / "again/checkpoint.khn"));
    REQUIRE(run_cli({"train", "--config", config, "--out", (dir / "other").string(), "--seed", "6"}).code == 0);
    CHECK(slurp(dir / "run/checkpoint.khn") != slurp(dir / "other/checkpoint.khn"));
  }

  SUBCASE("eval reports both finetune modes") {
    auto e = run_cli({"eval", "--checkpoint", (dir / "run/checkpoint.khn").string(), "--episodes", "7"});
    REQUIRE(e.code == 0);
    CHECK(e.out.find("finetune off:") != std::string::npos);
    CHECK(e.out.find("finetune on:") != std::string::npos);
    CHECK(e.out.find("over 7 test episodes") != std::string::npos);
    auto off = slurp(dir / "run/eval-test-finetune-off.json");
    CHECK(off.find("\"episode_count\": 7") != std::string::npos);
    CHECK(std::filesystem::exists(dir / "run/eval-test-finetune-on.json"));

    auto only = run_cli({"eval", "--checkpoint", (dir / "run/checkpoint.khn").string(), "--episodes", "3",
                         "--finetune", "off", "--out", (dir / "only").string()});
    CHECK(only.code == 0);
    CHECK(std::filesystem::exists(dir / "only/eval-test-finetune-off.json"));
    CHECK_FALSE(std::filesystem::exists(dir / "only/eval-test-finetune-on.json"));

    auto again = run_cli({"eval", "--checkpoint", (dir / "run/checkpoint.khn").string(), "--episodes", "7",
                          "--out", (dir / "again-eval").string()});
    CHECK(slurp(dir / "again-eval/eval-test-finetune-on.json") == slurp(dir / "run/eval-test-finetune-on.json"));

    auto wrong_way = quick_config();
    wrong_way.task.way = 3;
    auto bad = run_cli({"eval", "--checkpoint", (dir / "run/checkpoint.khn").string(), "--config",
                        write_config(dir, wrong_way, "way3.json")});
    CHECK(bad.code == 2);
  }

  SUBCASE("damaged checkpoints") {
    auto bytes = slurp(dir / "run/checkpoint.khn");
    {
      std::ofstream out(dir / "cut.khn", std::ios::binary);
      out << bytes.substr(0, bytes.size() - 3);
    }
    auto cut = run_cli({"eval", "--checkpoint", (dir / "cut.khn").string(), "--episodes", "1"});
    CHECK(cut.code == 3);
    CHECK(cut.err.find("truncated") != std::string::npos);

    bytes[8] = 7;
    {
      std::ofstream out(dir / "v7.khn", std::ios::binary);
      out << bytes;
    }
    auto v7 = run_cli({"eval", "--checkpoint", (dir / "v7.khn").string(), "--episodes", "1"});
    CHECK(v7.code == 5);
    CHECK(run_cli({"eval", "--checkpoint", (dir / "missing.khn").string()}).code == 3);
  }
}

TEST_CASE("config problems exit with 2") {
  TempDir dir("cli-config");
  {
    std::ofstream out(dir / "bad.json");
    out << R"({"task": {"wya": 5}})";
  }
  auto r = run_cli({"train", "--config", (dir / "bad.json").string(), "--out", (dir / "x").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("task.wya") != std::string::npos);
  CHECK(run_cli({"train", "--config", (dir / "none.json").string(), "--out", "x"}).code == 2);
  CHECK(run_cli({"frobnicate"}).code == 2);
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"train"}).code == 2);
}

TEST_CASE("gradcheck command") {
  TempDir dir("cli-grad");
  RunConfig c;
  c.encoder.mlp_hidden_sizes = {8};
  c.encoder.embedding_dim = 8;
  c.hypernet.hidden_dim = 8;
  c.task.queries_per_class = 2;
  auto r = run_cli({"gradcheck", "--config", write_config(dir, c)});
  CHECK(r.code == 0);
  CHECK(r.out.find("theta_k  empty, skipped") != std::string::npos);
  CHECK(r.out.find("gradcheck passed") != std::string::npos);

  c.gradcheck.max_parameters = 100;
  auto big = run_cli({"gradcheck", "--config", write_config(dir, c, "cap.json")});
  CHECK(big.code == 2);
  CHECK(big.err.find("100") != std::string::npos);
}

TEST_CASE("gen-data") {
  TempDir dir("cli-gen");
  RunConfig c;
  c.data.synthetic.class_pool_size = 20;
  auto config = write_config(dir, c);
  REQUIRE(run_cli({"gen-data", "--config", config, "--out", (dir / "a").string(), "--seed", "4"}).code == 0);
  REQUIRE(run_cli({"gen-data", "--config", config, "--out", (dir / "b").string(), "--seed", "4"}).code == 0);
  REQUIRE(run_cli({"gen-data", "--config", config, "--out", (dir / "c").string(), "--seed", "5"}).code == 0);
  const auto a = slurp(dir / "a/synthetic.json");
  CHECK(a == slurp(dir / "b/synthetic.json"));
  CHECK(a != slurp(dir / "c/synthetic.json"));
  auto source = load_synthetic_description(dir / "a/synthetic.json");
  CHECK(source.spec().seed == 4);
  CHECK(source.centers().size() == 20);
  CHECK(serialize_synthetic_description(source) == a);

  // Training from the description uses the same centers.
  c.data.synthetic.seed = 4;
  c.data.description = (dir / "a/synthetic.json").string();
  c.training.epochs = 2;
  CHECK(run_cli({"train", "--config", write_config(dir, c, "desc.json"), "--out", (dir / "t").string()}).code == 0);

  c.data.synthetic.class_pool_size = 0;
  c.data.description.clear();
  std::ofstream(dir / "zero.json") << serialize(c);
  CHECK(run_cli({"gen-data", "--config", (dir / "zero.json").string(), "--out", (dir / "z").string()}).code == 2);
}

TEST_CASE("thread count from the environment") {
  ::setenv("KHN_THREADS", "3", 1);
  CHECK(cli::eval_threads() == 3);
  ::setenv("KHN_THREADS", "zero", 1);
  CHECK_THROWS_AS(cli::eval_threads(), ConfigError);
  ::unsetenv("KHN_THREADS");
  CHECK(cli::eval_threads() >= 1);
}
