#include "khn/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <utility>

#include <nlohmann/json.hpp>
#include "khn/errors.hpp"

namespace khn {
namespace {

using json = nlohmann::json;

template <typename E>
using Names = std::initializer_list<std::pair<E, const char*>>;

const Names<DataKind> kDataKinds{{DataKind::synthetic, "synthetic"}, {DataKind::folder, "folder"}};
const Names<EncoderKind> kEncoderKinds{{EncoderKind::mlp, "mlp"}, {EncoderKind::conv4, "conv4"}};
const Names<KernelKind> kKernelKinds{{KernelKind::dot, "dot"}, {KernelKind::cosine, "cosine"}};
const Names<TransformKind> kTransformKinds{{TransformKind::identity, "identity"}, {TransformKind::mlp, "mlp"}};
const Names<AggregationMode> kAggregationModes{{AggregationMode::averaged, "averaged"},
                                               {AggregationMode::fine_grained, "fine_grained"}};
const Names<UpdateRule> kUpdateRules{{UpdateRule::adam, "adam"}, {UpdateRule::sgd, "sgd"}};

template <typename E>
const char* name_of(const Names<E>& names, E value) {
  for (const auto& [v, n] : names) {
    if (v == value) return n;
  }
  return "?";
}

std::string join_path(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

// Reads fields out of a JSON object, collecting every problem instead of
// stopping at the first.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& problems) : problems_(problems) {}

  // Returns the sub-object at key, or nullptr when absent or ill-typed.
  const json* section(const json& obj, const std::string& path, const char* key,
                      std::initializer_list<const char*> allowed) {
    auto it = obj.find(key);
    if (it == obj.end()) return nullptr;
    const auto sub = join_path(path, key);
    if (!it->is_object()) {
      problems_.push_back(sub + ": expected an object");
      return nullptr;
    }
    check_keys(*it, sub, allowed);
    return &*it;
  }

  void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : obj.items()) {
      bool known = false;
      for (const char* a : allowed) known = known || key == a;
      if (!known) problems_.push_back(join_path(path, key) + ": unknown key");
    }
  }

  void get(const json& obj, const std::string& path, const char* key, double& out) {
    if (auto* v = find(obj, key)) {
      if (v->is_number()) {
        out = v->get<double>();
      } else {
        bad(path, key, "a number");
      }
    }
  }

  void get(const json& obj, const std::string& path, const char* key, int& out) {
    if (auto* v = find(obj, key)) {
      if (v->is_number_integer() && v->get<std::int64_t>() >= INT32_MIN && v->get<std::int64_t>() <= INT32_MAX) {
        out = static_cast<int>(v->get<std::int64_t>());
      } else {
        bad(path, key, "an integer");
      }
    }
  }

  void get(const json& obj, const std::string& path, const char* key, std::size_t& out) {
    if (auto* v = find(obj, key)) {
      if (v->is_number_unsigned()) {
        out = v->get<std::size_t>();
      } else {
        bad(path, key, "a non-negative integer");
      }
    }
  }

  void get_u64(const json& obj, const std::string& path, const char* key, std::uint64_t& out) {
    if (auto* v = find(obj, key)) {
      if (v->is_number_unsigned()) {
        out = v->get<std::uint64_t>();
      } else {
        bad(path, key, "a non-negative integer");
      }
    }
  }

  void get(const json& obj, const std::string& path, const char* key, bool& out) {
    if (auto* v = find(obj, key)) {
      if (v->is_boolean()) {
        out = v->get<bool>();
      } else {
        bad(path, key, "true or false");
      }
    }
  }

  void get(const json& obj, const std::string& path, const char* key, std::string& out) {
    if (auto* v = find(obj, key)) {
      if (v->is_string()) {
        out = v->get<std::string>();
      } else {
        bad(path, key, "a string");
      }
    }
  }

  void get(const json& obj, const std::string& path, const char* key, std::vector<std::size_t>& out) {
    if (auto* v = find(obj, key)) {
      bool ok = v->is_array();
      if (ok) {
        for (const auto& e : *v) ok = ok && e.is_number_unsigned();
      }
      if (ok) {
        out = v->get<std::vector<std::size_t>>();
      } else {
        bad(path, key, "a list of non-negative integers");
      }
    }
  }

  template <typename E>
  void get_enum(const json& obj, const std::string& path, const char* key, const Names<E>& names, E& out) {
    auto* v = find(obj, key);
    if (!v) return;
    if (v->is_string()) {
      for (const auto& [value, name] : names) {
        if (v->get<std::string>() == name) {
          out = value;
          return;
        }
      }
    }
    std::string choices;
    for (const auto& [value, name] : names) choices += (choices.empty() ? "" : " | ") + std::string(name);
    bad(path, key, "one of " + choices);
  }

 private:
  static const json* find(const json& obj, const char* key) {
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
  }

  void bad(const std::string& path, const char* key, const std::string& expected) {
    problems_.push_back(join_path(path, key) + ": expected " + expected);
  }

  std::vector<std::string>& problems_;
};

void read_synthetic(Reader& r, const json& obj, const std::string& path, SyntheticSpec& spec) {
  r.get(obj, path, "input_dim", spec.input_dim);
  r.get(obj, path, "class_pool_size", spec.class_pool_size);
  r.get(obj, path, "cluster_spread", spec.cluster_spread);
  r.get(obj, path, "center_scale", spec.center_scale);
  r.get_u64(obj, path, "seed", spec.seed);
}

constexpr std::initializer_list<const char*> kSyntheticKeys = {"input_dim", "class_pool_size", "cluster_spread",
                                                               "center_scale", "seed"};

json synthetic_json(const SyntheticSpec& spec) {
  json j;
  j["input_dim"] = spec.input_dim;
  j["class_pool_size"] = spec.class_pool_size;
  j["cluster_spread"] = spec.cluster_spread;
  j["center_scale"] = spec.center_scale;
  j["seed"] = spec.seed;
  return j;
}

json parse_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(what) + " is not valid JSON: " + e.what());
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  const json root = parse_json(text, "config");
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::string> problems;
  Reader r(problems);
  RunConfig c;
  r.check_keys(root, "",
               {"format_version", "seed", "output_dir", "data", "task", "encoder", "kernel", "hypernet", "training",
                "finetune", "gradcheck"});
  r.get(root, "", "format_version", c.format_version);
  r.get_u64(root, "", "seed", c.seed);
  r.get(root, "", "output_dir", c.output_dir);

  if (auto* d = r.section(root, "", "data", {"kind", "synthetic", "description", "folder"})) {
    r.get_enum(*d, "data", "kind", kDataKinds, c.data.kind);
    r.get(*d, "data", "description", c.data.description);
    if (auto* s = r.section(*d, "data", "synthetic", kSyntheticKeys)) read_synthetic(r, *s, "data.synthetic", c.data.synthetic);
    if (auto* f = r.section(*d, "data", "folder", {"root", "image_size", "channels"})) {
      std::string root_dir = c.data.folder.root.string();
      r.get(*f, "data.folder", "root", root_dir);
      c.data.folder.root = root_dir;
      r.get(*f, "data.folder", "image_size", c.data.folder.image_size);
      r.get(*f, "data.folder", "channels", c.data.folder.channels);
    }
  }
  if (auto* t = r.section(root, "", "task", {"way", "shot", "queries_per_class"})) {
    r.get(*t, "task", "way", c.task.way);
    r.get(*t, "task", "shot", c.task.shot);
    r.get(*t, "task", "queries_per_class", c.task.queries_per_class);
  }
  if (auto* e = r.section(root, "", "encoder", {"kind", "mlp_hidden_sizes", "embedding_dim"})) {
    r.get_enum(*e, "encoder", "kind", kEncoderKinds, c.encoder.kind);
    r.get(*e, "encoder", "mlp_hidden_sizes", c.encoder.mlp_hidden_sizes);
    r.get(*e, "encoder", "embedding_dim", c.encoder.embedding_dim);
  }
  if (auto* k = r.section(root, "", "kernel",
                          {"kind", "transform", "transform_hidden_sizes", "transform_out_dim", "cosine_epsilon",
                           "aggregation"})) {
    r.get_enum(*k, "kernel", "kind", kKernelKinds, c.kernel.kind);
    r.get_enum(*k, "kernel", "transform", kTransformKinds, c.kernel.transform);
    r.get(*k, "kernel", "transform_hidden_sizes", c.kernel.transform_hidden_sizes);
    r.get(*k, "kernel", "transform_out_dim", c.kernel.transform_out_dim);
    r.get(*k, "kernel", "cosine_epsilon", c.kernel.cosine_epsilon);
    r.get_enum(*k, "kernel", "aggregation", kAggregationModes, c.kernel.aggregation);
  }
  if (auto* h = r.section(root, "", "hypernet",
                          {"neck_depth", "head_depth", "hidden_dim", "target_hidden_sizes", "target_use_bias"})) {
    r.get(*h, "hypernet", "neck_depth", c.hypernet.neck_depth);
    r.get(*h, "hypernet", "head_depth", c.hypernet.head_depth);
    r.get(*h, "hypernet", "hidden_dim", c.hypernet.hidden_dim);
    r.get(*h, "hypernet", "target_hidden_sizes", c.hypernet.target_hidden_sizes);
    r.get(*h, "hypernet", "target_use_bias", c.hypernet.target_use_bias);
  }
  if (auto* t = r.section(root, "", "training",
                          {"learning_rate", "epochs", "tasks_per_epoch", "taskset_size", "eval_every", "eval_episodes",
                           "optimizer"})) {
    r.get(*t, "training", "learning_rate", c.training.learning_rate);
    r.get(*t, "training", "epochs", c.training.epochs);
    r.get(*t, "training", "tasks_per_epoch", c.training.tasks_per_epoch);
    r.get(*t, "training", "taskset_size", c.training.taskset_size);
    r.get(*t, "training", "eval_every", c.training.eval_every);
    r.get(*t, "training", "eval_episodes", c.training.eval_episodes);
    r.get_enum(*t, "training", "optimizer", kUpdateRules, c.training.optimizer);
  }
  if (auto* f = r.section(root, "", "finetune",
                          {"steps", "learning_rate", "tune_encoder", "tune_hypernet", "tune_kernel"})) {
    r.get(*f, "finetune", "steps", c.finetune.steps);
    r.get(*f, "finetune", "learning_rate", c.finetune.learning_rate);
    r.get(*f, "finetune", "tune_encoder", c.finetune.tune_encoder);
    r.get(*f, "finetune", "tune_hypernet", c.finetune.tune_hypernet);
    r.get(*f, "finetune", "tune_kernel", c.finetune.tune_kernel);
  }
  if (auto* g = r.section(root, "", "gradcheck", {"step", "tolerance", "max_parameters"})) {
    r.get(*g, "gradcheck", "step", c.gradcheck.step);
    r.get(*g, "gradcheck", "tolerance", c.gradcheck.tolerance);
    r.get(*g, "gradcheck", "max_parameters", c.gradcheck.max_parameters);
  }

  if (!problems.empty()) {
    std::string message = "invalid config:";
    for (const auto& p : problems) message += "\n  " + p;
    throw ConfigError(message);
  }
  validate(c);
  return c;
}

std::string serialize(const RunConfig& c) {
  json root = json::object();
  root["format_version"] = c.format_version;
  root["seed"] = c.seed;
  root["output_dir"] = c.output_dir;
  root["data"] = {{"kind", name_of(kDataKinds, c.data.kind)},
                  {"synthetic", synthetic_json(c.data.synthetic)},
                  {"description", c.data.description},
                  {"folder",
                   {{"root", c.data.folder.root.string()},
                    {"image_size", c.data.folder.image_size},
                    {"channels", c.data.folder.channels}}}};
  root["task"] = {{"way", c.task.way}, {"shot", c.task.shot}, {"queries_per_class", c.task.queries_per_class}};
  root["encoder"] = {{"kind", name_of(kEncoderKinds, c.encoder.kind)},
                     {"mlp_hidden_sizes", c.encoder.mlp_hidden_sizes},
                     {"embedding_dim", c.encoder.embedding_dim}};
  root["kernel"] = {{"kind", name_of(kKernelKinds, c.kernel.kind)},
                    {"transform", name_of(kTransformKinds, c.kernel.transform)},
                    {"transform_hidden_sizes", c.kernel.transform_hidden_sizes},
                    {"transform_out_dim", c.kernel.transform_out_dim},
                    {"cosine_epsilon", c.kernel.cosine_epsilon},
                    {"aggregation", name_of(kAggregationModes, c.kernel.aggregation)}};
  root["hypernet"] = {{"neck_depth", c.hypernet.neck_depth},
                      {"head_depth", c.hypernet.head_depth},
                      {"hidden_dim", c.hypernet.hidden_dim},
                      {"target_hidden_sizes", c.hypernet.target_hidden_sizes},
                      {"target_use_bias", c.hypernet.target_use_bias}};
  root["training"] = {{"learning_rate", c.training.learning_rate},
                      {"epochs", c.training.epochs},
                      {"tasks_per_epoch", c.training.tasks_per_epoch},
                      {"taskset_size", c.training.taskset_size},
                      {"eval_every", c.training.eval_every},
                      {"eval_episodes", c.training.eval_episodes},
                      {"optimizer", name_of(kUpdateRules, c.training.optimizer)}};
  root["finetune"] = {{"steps", c.finetune.steps},
                      {"learning_rate", c.finetune.learning_rate},
                      {"tune_encoder", c.finetune.tune_encoder},
                      {"tune_hypernet", c.finetune.tune_hypernet},
                      {"tune_kernel", c.finetune.tune_kernel}};
  root["gradcheck"] = {{"step", c.gradcheck.step},
                       {"tolerance", c.gradcheck.tolerance},
                       {"max_parameters", c.gradcheck.max_parameters}};
  return root.dump(2) + "\n";
}

void validate(const RunConfig& c) {
  if (c.format_version != kRunConfigVersion) {
    throw ConfigError("format_version " + std::to_string(c.format_version) + " is not supported (expected " +
                      std::to_string(kRunConfigVersion) + ")");
  }
  if (c.task.way < 2) throw ConfigError("task.way must be at least 2");
  if (c.task.shot < 1) throw ConfigError("task.shot must be at least 1");
  if (c.task.queries_per_class < 1) throw ConfigError("task.queries_per_class must be at least 1");
  if (c.data.kind == DataKind::synthetic) {
    validate(c.data.synthetic);
  } else {
    if (c.data.folder.root.empty()) throw ConfigError("data.folder.root must be set for folder data");
    if (c.data.folder.channels != 1 && c.data.folder.channels != 3) {
      throw ConfigError("data.folder.channels must be 1 or 3");
    }
    if (c.data.folder.image_size < 1) throw ConfigError("data.folder.image_size must be positive");
  }
  validate(model_config(c, data_input_shape(c)));
  validate(train_config(c));
  validate(c.finetune);
  if (!(c.gradcheck.step > 0.0) || !(c.gradcheck.tolerance > 0.0)) {
    throw ConfigError("gradcheck.step and gradcheck.tolerance must be positive");
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(text);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
  write_text_file(path, serialize(config));
}

Shape data_input_shape(const RunConfig& c) {
  if (c.data.kind == DataKind::folder) {
    return {c.data.folder.channels, c.data.folder.image_size, c.data.folder.image_size};
  }
  return {c.data.synthetic.input_dim};
}

ModelConfig model_config(const RunConfig& c, const Shape& input_shape) {
  ModelConfig m;
  m.encoder.kind = c.encoder.kind;
  // The MLP encoder reads images as flat vectors.
  m.encoder.input_shape = c.encoder.kind == EncoderKind::mlp ? Shape{shape_numel(input_shape)} : input_shape;
  m.encoder.mlp_hidden_sizes = c.encoder.mlp_hidden_sizes;
  m.encoder.embedding_dim =
      c.encoder.kind == EncoderKind::conv4 && input_shape.size() == 3 ? conv4_embedding_dim(input_shape)
                                                                       : c.encoder.embedding_dim;
  m.kernel.kind = c.kernel.kind;
  m.kernel.transform = c.kernel.transform;
  m.kernel.transform_hidden_sizes = c.kernel.transform_hidden_sizes;
  m.kernel.transform_out_dim = c.kernel.transform_out_dim;
  m.kernel.cosine_epsilon = c.kernel.cosine_epsilon;
  m.aggregation = c.kernel.aggregation;
  m.hypernet.neck_depth = c.hypernet.neck_depth;
  m.hypernet.head_depth = c.hypernet.head_depth;
  m.hypernet.hidden_dim = c.hypernet.hidden_dim;
  m.hypernet.target_layer_sizes = c.hypernet.target_hidden_sizes;
  m.hypernet.target_layer_sizes.push_back(static_cast<std::size_t>(std::max(c.task.way, 0)));
  m.hypernet.target_use_bias = c.hypernet.target_use_bias;
  m.way = c.task.way;
  m.shot = c.task.shot;
  return m;
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.learning_rate = c.training.learning_rate;
  t.epochs = c.training.epochs;
  t.tasks_per_epoch = c.training.tasks_per_epoch;
  t.taskset_size = c.training.taskset_size;
  t.seed = c.seed;
  t.eval_every = c.training.eval_every;
  t.eval_episodes = c.training.eval_episodes;
  t.optimizer = c.training.optimizer;
  return t;
}

std::unique_ptr<TaskSource> make_task_source(const RunConfig& c) {
  if (c.data.kind == DataKind::folder) return std::make_unique<FolderDataSource>(c.data.folder);
  if (!c.data.description.empty()) {
    auto source = std::make_unique<SyntheticTaskSource>(load_synthetic_description(c.data.description));
    if (!(source->spec() == c.data.synthetic)) {
      throw DataError(c.data.description + " was generated from a different data.synthetic spec");
    }
    return source;
  }
  return std::make_unique<SyntheticTaskSource>(c.data.synthetic);
}

std::string serialize_synthetic_description(const SyntheticTaskSource& source) {
  json root;
  root["format_version"] = 1;
  root["spec"] = synthetic_json(source.spec());
  root["centers"] = source.centers();
  return root.dump(2) + "\n";
}

SyntheticTaskSource parse_synthetic_description(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("synthetic description is not valid JSON: ") + e.what());
  }
  std::vector<std::string> problems;
  Reader r(problems);
  SyntheticSpec spec;
  std::vector<std::vector<double>> centers;
  if (!root.is_object()) {
    problems.push_back("expected an object");
  } else {
    r.check_keys(root, "", {"format_version", "spec", "centers"});
    int version = 0;
    r.get(root, "", "format_version", version);
    if (version != 1) problems.push_back("format_version: expected 1");
    if (auto* s = r.section(root, "", "spec", kSyntheticKeys)) {
      read_synthetic(r, *s, "spec", spec);
    } else {
      problems.push_back("spec: missing");
    }
    auto it = root.find("centers");
    bool ok = it != root.end() && it->is_array();
    if (ok) {
      for (const auto& row : *it) {
        ok = ok && row.is_array();
        if (ok) {
          for (const auto& v : row) ok = ok && v.is_number();
        }
      }
    }
    if (ok) {
      centers = it->get<std::vector<std::vector<double>>>();
    } else {
      problems.push_back("centers: expected a list of number lists");
    }
  }
  if (!problems.empty()) {
    std::string message = "invalid synthetic description:";
    for (const auto& p : problems) message += "\n  " + p;
    throw DataError(message);
  }
  try {
    return SyntheticTaskSource(spec, std::move(centers));
  } catch (const ConfigError& e) {
    throw DataError(std::string("invalid synthetic description: ") + e.what());
  }
}

SyntheticTaskSource load_synthetic_description(const std::filesystem::path& path) {
  return parse_synthetic_description(read_text_file(path));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.close();
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace khn
