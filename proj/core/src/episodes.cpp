#include "khn/episodes.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "khn/errors.hpp"

namespace khn {

namespace fs = std::filesystem;

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void validate(const SyntheticSpec& spec) {
  if (spec.input_dim == 0) throw ConfigError("synthetic.input_dim must be positive");
  if (spec.class_pool_size == 0) throw ConfigError("synthetic.class_pool_size must be positive");
  if (!(spec.cluster_spread >= 0.0) || !std::isfinite(spec.cluster_spread)) {
    throw ConfigError("synthetic.cluster_spread must be a finite non-negative number");
  }
  if (!(spec.center_scale > 0.0) || !std::isfinite(spec.center_scale)) {
    throw ConfigError("synthetic.center_scale must be a finite positive number");
  }
}

// ---------------------------------------------------------------------------
// Synthetic source

std::vector<double> SyntheticTaskSource::derive_center(const SyntheticSpec& spec, std::size_t class_id) {
  std::mt19937_64 rng(mix_seed(spec.seed, class_id));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> c(spec.input_dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& v : c) {
      v = normal(rng);
      norm += v * v;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& v : c) v *= spec.center_scale / norm;
  return c;
}

SyntheticTaskSource::SyntheticTaskSource(SyntheticSpec spec) : spec_(spec) {
  validate(spec_);
  centers_.reserve(spec_.class_pool_size);
  for (std::size_t c = 0; c < spec_.class_pool_size; ++c) centers_.push_back(derive_center(spec_, c));
}

SyntheticTaskSource::SyntheticTaskSource(SyntheticSpec spec, std::vector<std::vector<double>> centers)
    : spec_(spec), centers_(std::move(centers)) {
  validate(spec_);
  if (centers_.size() != spec_.class_pool_size) {
    throw DataError("synthetic source: " + std::to_string(centers_.size()) + " centers for a pool of " +
                    std::to_string(spec_.class_pool_size));
  }
  for (const auto& c : centers_) {
    if (c.size() != spec_.input_dim) throw DataError("synthetic source: center dimension mismatch");
  }
}

const std::vector<double>& SyntheticTaskSource::center(std::size_t class_id) const {
  if (class_id >= centers_.size()) {
    throw IndexError("class " + std::to_string(class_id) + " outside pool of " + std::to_string(centers_.size()));
  }
  return centers_[class_id];
}

std::vector<double> SyntheticTaskSource::sample(std::size_t class_id, std::mt19937_64& rng) const {
  const auto& c = center(class_id);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) x[i] = c[i] + spec_.cluster_spread * normal(rng);
  return x;
}

std::vector<std::size_t> SyntheticTaskSource::classes(Split split) const {
  const std::size_t pool = spec_.class_pool_size;
  const std::size_t train_end = pool * 6 / 10;
  const std::size_t val_end = pool * 8 / 10;
  std::size_t begin = 0, end = 0;
  switch (split) {
    case Split::train: begin = 0, end = train_end; break;
    case Split::val: begin = train_end, end = val_end; break;
    case Split::test: begin = val_end, end = pool; break;
  }
  std::vector<std::size_t> ids(end - begin);
  std::iota(ids.begin(), ids.end(), begin);
  return ids;
}

std::size_t SyntheticTaskSource::examples_available(std::size_t) const {
  return std::numeric_limits<std::size_t>::max();
}

std::vector<std::vector<double>> SyntheticTaskSource::draw(std::size_t class_id, std::size_t count,
                                                           std::mt19937_64& rng) const {
  std::vector<std::vector<double>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample(class_id, rng));
  return out;
}

// ---------------------------------------------------------------------------
// PNG folders

std::vector<double> load_png(const fs::path& path, std::size_t size, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ConfigError("images must have 1 or 3 channels");
  if (size == 0) throw ConfigError("image size must be positive");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IngestionError(path.string() + ": " + msg);
  }
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IngestionError(path.string() + ": " + msg);
  }
  const std::size_t h = image.height, w = image.width;
  if (h == 0 || w == 0) throw IngestionError(path.string() + ": empty image");

  // Bilinear resampling with pixel-centre alignment, written CHW.
  std::vector<double> out(channels * size * size);
  const double sy = static_cast<double>(h) / static_cast<double>(size);
  const double sx = static_cast<double>(w) / static_cast<double>(size);
  auto pixel = [&](std::size_t y, std::size_t x, std::size_t c) {
    return static_cast<double>(buffer[(y * w + x) * channels + c]) / 255.0;
  };
  for (std::size_t oy = 0; oy < size; ++oy) {
    double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    std::size_t y0 = static_cast<std::size_t>(fy);
    std::size_t y1 = std::min(y0 + 1, h - 1);
    double ty = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < size; ++ox) {
      double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      std::size_t x0 = static_cast<std::size_t>(fx);
      std::size_t x1 = std::min(x0 + 1, w - 1);
      double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < channels; ++c) {
        double top = pixel(y0, x0, c) * (1 - tx) + pixel(y0, x1, c) * tx;
        double bottom = pixel(y1, x0, c) * (1 - tx) + pixel(y1, x1, c) * tx;
        out[(c * size + oy) * size + ox] = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

void save_png(const fs::path& path, std::span<const double> pixels, std::size_t channels, std::size_t height,
              std::size_t width) {
  if (channels != 1 && channels != 3) throw ConfigError("images must have 1 or 3 channels");
  if (pixels.size() != channels * height * width) throw ShapeError("save_png: pixel count mismatch");
  std::vector<png_byte> buffer(pixels.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        double v = std::clamp(pixels[(c * height + y) * width + x], 0.0, 1.0);
        buffer[(y * width + x) * channels + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IngestionError(path.string() + ": " + msg);
  }
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : entry.is_regular_file()) {
      if (!directories && entry.path().extension() != ".png") continue;
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

IndexedDataset load_folder_split(const FolderSpec& spec, Split split) {
  const fs::path dir = spec.root / split_name(split);
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw DataError("missing split directory " + dir.string());
  IndexedDataset dataset;
  for (const auto& class_dir : sorted_entries(dir, true)) {
    auto files = sorted_entries(class_dir, false);
    if (files.empty()) throw DataError("class directory " + class_dir.string() + " contains no PNG files");
    auto& images = dataset[class_dir.filename().string()];
    images.reserve(files.size());
    for (const auto& f : files) images.push_back(load_png(f, spec.image_size, spec.channels));
  }
  return dataset;
}

FolderDataSource::FolderDataSource(FolderSpec spec) : spec_(std::move(spec)) {
  std::map<std::string, Split> owner;
  bool any = false;
  for (Split split : {Split::train, Split::val, Split::test}) {
    std::error_code ec;
    if (!fs::is_directory(spec_.root / split_name(split), ec)) continue;
    any = true;
    auto dataset = load_folder_split(spec_, split);
    for (auto& [name, images] : dataset) {
      auto [it, inserted] = owner.emplace(name, split);
      if (!inserted) {
        throw DataError("class '" + name + "' appears in both the " + split_name(it->second) + " and " +
                        split_name(split) + " splits");
      }
      split_classes_[static_cast<int>(split)].push_back(names_.size());
      names_.push_back(name);
      images_.push_back(std::move(images));
    }
  }
  if (!any) throw DataError("no split directories under " + spec_.root.string());
}

const std::string& FolderDataSource::class_name(std::size_t class_id) const {
  if (class_id >= names_.size()) throw IndexError("class " + std::to_string(class_id) + " out of range");
  return names_[class_id];
}

std::vector<std::size_t> FolderDataSource::classes(Split split) const {
  return split_classes_[static_cast<int>(split)];
}

std::size_t FolderDataSource::examples_available(std::size_t class_id) const {
  if (class_id >= images_.size()) throw IndexError("class " + std::to_string(class_id) + " out of range");
  return images_[class_id].size();
}

std::vector<std::vector<double>> FolderDataSource::draw(std::size_t class_id, std::size_t count,
                                                        std::mt19937_64& rng) const {
  const auto& pool = images_.at(class_id);
  if (count > pool.size()) {
    throw DataError("class '" + names_[class_id] + "' has " + std::to_string(pool.size()) + " images, " +
                    std::to_string(count) + " requested");
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<double>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(pool[order[i]]);
  return out;
}

// ---------------------------------------------------------------------------

Episode sample_episode(const TaskSource& source, Split split, const TaskShape& shape, std::uint64_t seed) {
  if (shape.way < 1 || shape.shot < 1 || shape.queries_per_class < 0) {
    throw ConfigError("episodes need way >= 1, shot >= 1 and queries_per_class >= 0");
  }
  auto pool = source.classes(split);
  const auto way = static_cast<std::size_t>(shape.way);
  if (pool.size() < way) {
    throw DataError(std::string("split '") + split_name(split) + "' has " + std::to_string(pool.size()) +
                    " classes, " + std::to_string(way) + "-way episodes need more");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(way);

  Episode ep;
  ep.way = shape.way;
  ep.shot = shape.shot;
  ep.queries_per_class = shape.queries_per_class;
  ep.input_shape = source.input_shape();
  ep.source_classes = pool;
  const auto per_class = static_cast<std::size_t>(shape.shot + shape.queries_per_class);
  for (std::size_t i = 0; i < way; ++i) {
    if (source.examples_available(pool[i]) < per_class) {
      throw DataError("class " + std::to_string(pool[i]) + " has fewer than " + std::to_string(per_class) +
                      " examples");
    }
    auto drawn = source.draw(pool[i], per_class, rng);
    for (std::size_t j = 0; j < drawn.size(); ++j) {
      auto& target = j < static_cast<std::size_t>(shape.shot) ? ep.support : ep.query;
      target.push_back({std::move(drawn[j]), static_cast<int>(i)});
    }
  }
  std::shuffle(ep.support.begin(), ep.support.end(), rng);
  std::shuffle(ep.query.begin(), ep.query.end(), rng);
  return ep;
}

Tensor stack_inputs(std::span<const Example> examples, const Shape& input_shape) {
  std::vector<std::vector<double>> inputs;
  inputs.reserve(examples.size());
  for (const auto& e : examples) inputs.push_back(e.input);
  return stack_inputs(inputs, input_shape);
}

Tensor stack_inputs(std::span<const std::vector<double>> inputs, const Shape& input_shape) {
  const std::size_t width = shape_numel(input_shape);
  std::vector<double> data;
  data.reserve(inputs.size() * width);
  for (const auto& x : inputs) {
    if (x.size() != width) {
      throw ShapeError("input of " + std::to_string(x.size()) + " values does not match shape " +
                       shape_str(input_shape));
    }
    data.insert(data.end(), x.begin(), x.end());
  }
  Shape shape{inputs.size()};
  shape.insert(shape.end(), input_shape.begin(), input_shape.end());
  return Tensor(std::move(shape), std::move(data));
}

std::vector<int> labels_of(std::span<const Example> examples) {
  std::vector<int> labels;
  labels.reserve(examples.size());
  for (const auto& e : examples) labels.push_back(e.label);
  return labels;
}

}  // namespace khn
