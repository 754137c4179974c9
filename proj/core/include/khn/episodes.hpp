#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "khn/tensor.hpp"

namespace khn {

// One labeled input. `label` is the class index within its episode.
struct Example {
  std::vector<double> input;
  int label = 0;

  bool operator==(const Example&) const = default;
};

// N-way K-shot task: support holds `shot` examples of each of the `way`
// classes, query holds `queries_per_class` of each.
struct Episode {
  std::vector<Example> support;
  std::vector<Example> query;
  int way = 0;
  int shot = 0;
  int queries_per_class = 0;
  Shape input_shape;
  // Source class behind each episode index, for diagnostics.
  std::vector<std::size_t> source_classes;

  bool operator==(const Episode&) const = default;
};

struct TaskShape {
  int way = 5;
  int shot = 1;
  int queries_per_class = 16;

  bool operator==(const TaskShape&) const = default;
};

enum class Split { train, val, test };

const char* split_name(Split split);

// A labeled pool of classes partitioned into disjoint splits.
class TaskSource {
 public:
  virtual ~TaskSource() = default;

  virtual Shape input_shape() const = 0;
  virtual std::vector<std::size_t> classes(Split split) const = 0;
  // Number of distinct examples of a class; SIZE_MAX when unbounded.
  virtual std::size_t examples_available(std::size_t class_id) const = 0;
  // `count` distinct examples of the class.
  virtual std::vector<std::vector<double>> draw(std::size_t class_id, std::size_t count,
                                                std::mt19937_64& rng) const = 0;
};

struct SyntheticSpec {
  std::size_t input_dim = 16;
  std::size_t class_pool_size = 100;
  double cluster_spread = 1.0;
  double center_scale = 10.0;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSpec&) const = default;
};

void validate(const SyntheticSpec& spec);

// Gaussian clusters around seed-derived class centers of norm center_scale.
// Classes [0, 0.6 P) form the train split, the next 0.2 P validation and
// the remainder test.
class SyntheticTaskSource final : public TaskSource {
 public:
  explicit SyntheticTaskSource(SyntheticSpec spec);
  // Uses the given centers instead of deriving them from the seed.
  SyntheticTaskSource(SyntheticSpec spec, std::vector<std::vector<double>> centers);

  const SyntheticSpec& spec() const noexcept { return spec_; }
  const std::vector<double>& center(std::size_t class_id) const;
  const std::vector<std::vector<double>>& centers() const noexcept { return centers_; }

  // center(class_id) + cluster_spread * N(0, I)
  std::vector<double> sample(std::size_t class_id, std::mt19937_64& rng) const;

  Shape input_shape() const override { return {spec_.input_dim}; }
  std::vector<std::size_t> classes(Split split) const override;
  std::size_t examples_available(std::size_t class_id) const override;
  std::vector<std::vector<double>> draw(std::size_t class_id, std::size_t count,
                                        std::mt19937_64& rng) const override;

  static std::vector<double> derive_center(const SyntheticSpec& spec, std::size_t class_id);

 private:
  SyntheticSpec spec_;
  std::vector<std::vector<double>> centers_;
};

struct FolderSpec {
  std::filesystem::path root;
  std::size_t image_size = 32;
  std::size_t channels = 1;  // 1 (grayscale) or 3 (RGB)

  bool operator==(const FolderSpec&) const = default;
};

// class name -> decoded images, each channels x size x size in [0, 1]
using IndexedDataset = std::map<std::string, std::vector<std::vector<double>>>;

// Decodes one PNG, resizes it to size x size (bilinear) and scales to
// [0, 1]. Throws IngestionError naming the path on any failure.
std::vector<double> load_png(const std::filesystem::path& path, std::size_t size, std::size_t channels);

// Writes a channels x height x width image in [0, 1] as an 8-bit PNG.
void save_png(const std::filesystem::path& path, std::span<const double> pixels, std::size_t channels,
              std::size_t height, std::size_t width);

// Loads root/<split>/<class>/*.png. All files are decoded before anything
// is returned.
IndexedDataset load_folder_split(const FolderSpec& spec, Split split);

// Image folder with the layout root/{train,val,test}/<class>/*.png.
// Construction loads every split and checks that no class name appears in
// two of them.
class FolderDataSource final : public TaskSource {
 public:
  explicit FolderDataSource(FolderSpec spec);

  const FolderSpec& spec() const noexcept { return spec_; }
  const std::string& class_name(std::size_t class_id) const;

  Shape input_shape() const override { return {spec_.channels, spec_.image_size, spec_.image_size}; }
  std::vector<std::size_t> classes(Split split) const override;
  std::size_t examples_available(std::size_t class_id) const override;
  std::vector<std::vector<double>> draw(std::size_t class_id, std::size_t count,
                                        std::mt19937_64& rng) const override;

 private:
  FolderSpec spec_;
  std::vector<std::string> names_;
  std::vector<std::vector<std::vector<double>>> images_;
  std::vector<std::size_t> split_classes_[3];
};

// Draws `way` classes of `split`, assigns them episode indices through a
// fresh random bijection and fills support and query; both lists are
// shuffled. A pure function of its arguments.
Episode sample_episode(const TaskSource& source, Split split, const TaskShape& shape, std::uint64_t seed);

// Stacks example inputs into a [count, input_shape...] tensor.
Tensor stack_inputs(std::span<const Example> examples, const Shape& input_shape);
Tensor stack_inputs(std::span<const std::vector<double>> inputs, const Shape& input_shape);

std::vector<int> labels_of(std::span<const Example> examples);

// splitmix64 finalizer, used to derive independent seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace khn
