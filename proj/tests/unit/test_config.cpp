#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "khn/checkpoint.hpp"
#include "khn/config.hpp"
#include "khn/errors.hpp"
#include "khn/gradcheck.hpp"
#include "khn/instrument.hpp"
#include "khn/metrics.hpp"
#include "support.hpp"

using namespace khn;
using khn::testing::TempDir;
using khn::testing::values;

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

RunConfig small_config() {
  RunConfig c;
  c.seed = 3;
  c.encoder.mlp_hidden_sizes = {8};
  c.encoder.embedding_dim = 8;
  c.hypernet.hidden_dim = 8;
  c.task.queries_per_class = 2;
  return c;
}

Model model_for(const RunConfig& c) { return init_model(model_config(c, data_input_shape(c)), c.seed); }

}  // namespace

TEST_CASE("config round trip") {
  RunConfig c;
  c.seed = 42;
  c.output_dir = "runs/x";
  c.data.synthetic.cluster_spread = 0.25;
  c.task = {3, 2, 5};
  c.encoder.mlp_hidden_sizes = {32};
  c.kernel.kind = KernelKind::dot;
  c.kernel.transform = TransformKind::mlp;
  c.kernel.transform_hidden_sizes = {16};
  c.kernel.aggregation = AggregationMode::fine_grained;
  c.hypernet.target_hidden_sizes = {7};
  c.training.optimizer = UpdateRule::sgd;
  c.finetune.tune_kernel = false;
  c.gradcheck.max_parameters = 123;
  auto text = serialize(c);
  CHECK(parse_run_config(text) == c);
  CHECK(serialize(parse_run_config(text)) == text);

  TempDir dir("config");
  save_run_config(dir / "c.json", c);
  CHECK(load_run_config(dir / "c.json") == c);
  CHECK(parse_run_config("{}") == RunConfig{});
}

TEST_CASE("config errors name every offending key") {
  auto message = error_of([] {
    parse_run_config(R"({"task": {"wya": 5, "shot": "one"}, "encoder": {"kind": "rnn"}, "extra": 1})");
  });
  CHECK(message.find("task.wya") != std::string::npos);
  CHECK(message.find("task.shot") != std::string::npos);
  CHECK(message.find("encoder.kind") != std::string::npos);
  CHECK(message.find("extra") != std::string::npos);
  CHECK_THROWS_AS(parse_run_config("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[]"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"task": {"way": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"format_version": 2})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"data": {"kind": "folder"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"data": {"synthetic": {"class_pool_size": 0}}})"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/khn.json"), ConfigError);
}

TEST_CASE("config to model and data") {
  RunConfig c;
  CHECK(data_input_shape(c) == Shape{16});
  auto mc = model_config(c, {16});
  CHECK(mc.way == 5);
  CHECK(mc.hypernet.target_layer_sizes == std::vector<std::size_t>{5});
  c.data.kind = DataKind::folder;
  c.data.folder.root = "/some/where";
  c.data.folder.channels = 3;
  CHECK(data_input_shape(c) == Shape{3, 32, 32});
  c.encoder.kind = EncoderKind::conv4;
  CHECK(model_config(c, data_input_shape(c)).encoder.embedding_dim == 256);
  CHECK(train_config(RunConfig{}).seed == 0);
}

TEST_CASE("synthetic description round trip") {
  SyntheticSpec spec;
  spec.class_pool_size = 12;
  spec.seed = 9;
  SyntheticTaskSource source(spec);
  auto text = serialize_synthetic_description(source);
  auto back = parse_synthetic_description(text);
  CHECK(back.spec() == spec);
  CHECK(back.centers() == source.centers());
  CHECK(serialize_synthetic_description(back) == text);
  CHECK_THROWS_AS(parse_synthetic_description("{}"), DataError);
  CHECK_THROWS_AS(parse_synthetic_description("nope"), DataError);

  TempDir dir("desc");
  write_text_file(dir / "synthetic.json", text);
  RunConfig c;
  c.data.synthetic = spec;
  c.data.description = (dir / "synthetic.json").string();
  auto from_file = make_task_source(c);
  CHECK(from_file->classes(Split::train) == source.classes(Split::train));
  c.data.synthetic.seed = 10;
  CHECK_THROWS_AS(make_task_source(c), DataError);
}

TEST_CASE("checkpoint round trip is bitwise") {
  auto c = small_config();
  c.output_dir = "elsewhere";
  const auto shape = data_input_shape(c);
  auto model = model_for(c);
  auto bytes = encode_checkpoint(c, shape, model);
  auto ck = decode_checkpoint(bytes);
  RunConfig expected = c;
  expected.output_dir.clear();
  CHECK(ck.config == expected);
  CHECK(ck.input_shape == shape);
  auto a = model.all_params();
  auto b = ck.model.all_params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    auto va = values(a[i].tensor), vb = values(b[i].tensor);
    CHECK(std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) == 0);
  }
  CHECK(encode_checkpoint(ck.config, ck.input_shape, ck.model) == bytes);

  TempDir dir("ckpt");
  save_checkpoint(dir / "a.khn", c, shape, model);
  auto loaded = load_checkpoint(dir / "a.khn");
  save_checkpoint(dir / "b.khn", loaded.config, loaded.input_shape, loaded.model);
  CHECK(slurp(dir / "a.khn") == slurp(dir / "b.khn"));
}

TEST_CASE("damaged checkpoints are rejected") {
  auto c = small_config();
  auto bytes = encode_checkpoint(c, data_input_shape(c), model_for(c));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{10}, std::size_t{40}, bytes.size() / 2,
                          bytes.size() - 1}) {
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, cut)), CheckpointError);
  }
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CheckpointError);

  auto other_version = bytes;
  other_version[8] = 2;
  CHECK_THROWS_AS(decode_checkpoint(other_version), IncompatibleCheckpointError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), CheckpointError);

  // A checkpoint whose manifest disagrees with its config.
  auto wider = c;
  wider.encoder.embedding_dim = 9;
  auto mismatched = encode_checkpoint(c, data_input_shape(c), model_for(wider));
  CHECK_THROWS_AS(decode_checkpoint(mismatched), CheckpointError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.khn"), CheckpointError);
}

TEST_CASE("metrics log") {
  TempDir dir("metrics");
  const auto path = dir / "metrics.tsv";
  {
    MetricsLog log(path);
    log.append({0, 1.5, 2.0});
    log.append({3, 0.25, 1.0});
    CHECK_THROWS_AS(log.append({3, 0.1, 1.0}), StateError);
    CHECK_THROWS_AS(log.append({1, 0.1, 1.0}), StateError);
  }
  {
    MetricsLog log(path);
    log.append({4, 0.125, 1.0});
  }
  CHECK(slurp(path) == "iteration\tloss\twall_ms\n0\t1.5\t2.000\n3\t0.25\t1.000\n4\t0.125\t1.000\n");
}

TEST_CASE("report formatting") {
  EvalReport r;
  r.mean_accuracy = 0.9125;
  r.ci95_halfwidth = 0.0103;
  CHECK(format_report(r) == "91.25 ± 1.03 %");
  r.per_episode_accuracies = {0.9, 0.925};
  r.episode_count = 2;
  auto json = serialize_eval_summary({"test", true, -1, r});
  CHECK(json.find("\"split\": \"test\"") != std::string::npos);
  CHECK(json.find("\"finetune\": true") != std::string::npos);
  CHECK(json.find("\"episode_count\": 2") != std::string::npos);
}

TEST_CASE("gradcheck passes on a correct model") {
  auto c = small_config();
  c.kernel.transform = TransformKind::mlp;
  c.kernel.transform_hidden_sizes = {8};
  auto source = make_task_source(c);
  auto ep = sample_episode(*source, Split::train, c.task, 1);
  auto model = model_for(c);
  const auto before = values(model.encoder[0].tensor);
  auto report = gradcheck(model, ep, {});
  CHECK(report.passed);
  REQUIRE(report.groups.size() == 3);
  CHECK(report.groups[0].group == "theta_E");
  CHECK(report.groups[1].group == "theta_k");
  CHECK(report.groups[2].group == "theta_H");
  std::size_t total = 0;
  for (const auto& g : report.groups) {
    CHECK(g.checked + g.skipped_kinks == g.parameters);
    CHECK(g.max_rel_error <= 1e-4);
    total += g.parameters;
  }
  CHECK(total == model.parameter_count());
  CHECK(values(model.encoder[0].tensor) == before);
  CHECK_FALSE(model.encoder[0].tensor.has_grad());
}

TEST_CASE("gradcheck catches a corrupted backward pass") {
  auto c = small_config();
  c.kernel.transform = TransformKind::mlp;
  c.kernel.transform_hidden_sizes = {8};
  auto source = make_task_source(c);
  auto ep = sample_episode(*source, Split::train, c.task, 2);
  auto model = model_for(c);
  instrument::ScopedBackwardFault fault(instrument::OpKind::linear, 1.01);
  auto report = gradcheck(model, ep, {});
  CHECK_FALSE(report.passed);
  for (const auto& g : report.groups) {
    CHECK_FALSE(g.passed);
    CHECK(g.max_rel_error > 1e-3);
    CHECK(g.worst.find('[') != std::string::npos);
  }
}

TEST_CASE("gradcheck reports the identity kernel group as empty") {
  auto c = small_config();
  auto source = make_task_source(c);
  auto ep = sample_episode(*source, Split::train, c.task, 3);
  auto report = gradcheck(model_for(c), ep, {});
  CHECK(report.passed);
  CHECK(report.groups[1].empty());
  CHECK(report.groups[1].passed);
}

TEST_CASE("gradcheck refuses oversized models") {
  auto c = small_config();
  auto source = make_task_source(c);
  auto ep = sample_episode(*source, Split::train, c.task, 4);
  GradcheckOptions options;
  options.max_parameters = 100;
  auto message = error_of([&] { gradcheck(model_for(c), ep, options); });
  CHECK(message.find("100") != std::string::npos);
  CHECK_THROWS_AS(gradcheck(model_for(c), ep, options), ConfigError);
}
