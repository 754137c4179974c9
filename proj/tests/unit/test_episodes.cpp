#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "doctest.h"
#include "khn/episodes.hpp"
#include "khn/errors.hpp"
#include "support.hpp"

using namespace khn;
using khn::testing::TempDir;

namespace {

void check_balance(const Episode& ep) {
  std::map<int, int> support_counts, query_counts;
  for (const auto& e : ep.support) ++support_counts[e.label];
  for (const auto& e : ep.query) ++query_counts[e.label];
  REQUIRE(support_counts.size() == static_cast<std::size_t>(ep.way));
  for (int c = 0; c < ep.way; ++c) {
    CHECK(support_counts[c] == ep.shot);
    CHECK(query_counts[c] == ep.queries_per_class);
  }
  CHECK(support_counts.begin()->first == 0);
  CHECK(support_counts.rbegin()->first == ep.way - 1);
}

void write_gray(const std::filesystem::path& path, std::size_t size, double level) {
  std::vector<double> pixels(size * size, level);
  save_png(path, pixels, 1, size, size);
}

}  // namespace

TEST_CASE("synthetic episode sizes") {
  SyntheticTaskSource source(SyntheticSpec{});
  auto ep = sample_episode(source, Split::train, {5, 1, 16}, 1);
  CHECK(ep.support.size() == 5);
  CHECK(ep.query.size() == 80);
  CHECK(ep.input_shape == Shape{16});
  auto five_shot = sample_episode(source, Split::train, {5, 5, 16}, 1);
  CHECK(five_shot.support.size() == 25);
  CHECK(five_shot.query.size() == 80);
}

TEST_CASE("class balance and label range") {
  SyntheticTaskSource source(SyntheticSpec{});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (TaskShape shape : {TaskShape{5, 1, 16}, TaskShape{5, 5, 3}, TaskShape{3, 2, 1}, TaskShape{20, 1, 2}}) {
      check_balance(sample_episode(source, Split::train, shape, seed));
    }
  }
}

TEST_CASE("sampling is deterministic per seed") {
  SyntheticTaskSource source(SyntheticSpec{});
  auto a = sample_episode(source, Split::val, {5, 1, 4}, 42);
  auto b = sample_episode(source, Split::val, {5, 1, 4}, 42);
  CHECK(a == b);
  auto c = sample_episode(source, Split::val, {5, 1, 4}, 43);
  CHECK_FALSE(a == c);
}

TEST_CASE("class-to-index bijection is redrawn per episode") {
  SyntheticTaskSource source(SyntheticSpec{});
  std::set<std::size_t> first_class;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto ep = sample_episode(source, Split::train, {5, 1, 1}, seed);
    std::set<std::size_t> distinct(ep.source_classes.begin(), ep.source_classes.end());
    CHECK(distinct.size() == 5);
    first_class.insert(ep.source_classes[0]);
  }
  CHECK(first_class.size() > 10);
}

TEST_CASE("labels follow source classes") {
  SyntheticSpec spec;
  spec.cluster_spread = 0.0;
  SyntheticTaskSource source(spec);
  auto ep = sample_episode(source, Split::test, {5, 2, 3}, 9);
  for (const auto& e : ep.support) CHECK(e.input == source.center(ep.source_classes[e.label]));
  for (const auto& e : ep.query) CHECK(e.input == source.center(ep.source_classes[e.label]));
}

TEST_CASE("synthetic samples and centers") {
  SyntheticSpec spec;
  spec.cluster_spread = 0.0;
  spec.center_scale = 7.5;
  SyntheticTaskSource source(spec);
  std::mt19937_64 rng(3);
  for (std::size_t c : {0u, 17u, 99u}) {
    CHECK(source.sample(c, rng) == source.center(c));
    double norm = 0.0;
    for (double v : source.center(c)) norm += v * v;
    CHECK(std::sqrt(norm) == doctest::Approx(7.5).epsilon(1e-12));
  }
  SyntheticTaskSource again(spec);
  CHECK(again.center(42) == source.center(42));
  spec.seed = 1;
  CHECK_FALSE(SyntheticTaskSource(spec).center(42) == source.center(42));
  CHECK_THROWS_AS(source.sample(100, rng), IndexError);
}

TEST_CASE("sample spread matches cluster_spread") {
  SyntheticSpec spec;
  spec.cluster_spread = 2.0;
  SyntheticTaskSource source(spec);
  std::mt19937_64 rng(5);
  double sum = 0.0, sum_sq = 0.0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    auto x = source.sample(3, rng);
    double d = x[0] - source.center(3)[0];
    sum += d;
    sum_sq += d * d;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(mean) < 4.0 * 2.0 / std::sqrt(n));
  CHECK(std::sqrt(var) == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("nearest-center oracle separates toy tasks") {
  // Classifies each query by the nearest true class center among the episode's
  // classes; computed here without any library code beyond sampling.
  SyntheticTaskSource source(SyntheticSpec{});
  std::size_t correct = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto ep = sample_episode(source, Split::test, {5, 1, 16}, seed);
    for (const auto& q : ep.query) {
      int best = -1;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < ep.way; ++c) {
        const auto& center = source.center(ep.source_classes[c]);
        double d = 0.0;
        for (std::size_t i = 0; i < center.size(); ++i) d += (q.input[i] - center[i]) * (q.input[i] - center[i]);
        if (d < best_d) best_d = d, best = c;
      }
      correct += best == q.label ? 1 : 0;
      ++total;
    }
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("synthetic splits are disjoint and cover the pool") {
  SyntheticSpec spec;
  spec.class_pool_size = 37;
  SyntheticTaskSource source(spec);
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (Split s : {Split::train, Split::val, Split::test}) {
    auto ids = source.classes(s);
    CHECK_FALSE(ids.empty());
    total += ids.size();
    seen.insert(ids.begin(), ids.end());
  }
  CHECK(total == 37);
  CHECK(seen.size() == 37);
}

TEST_CASE("sampling errors") {
  SyntheticSpec spec;
  spec.class_pool_size = 10;
  SyntheticTaskSource source(spec);
  CHECK_THROWS_AS(sample_episode(source, Split::test, {5, 1, 1}, 0), DataError);
  SyntheticSpec empty;
  empty.class_pool_size = 0;
  CHECK_THROWS_AS(validate(empty), ConfigError);
  CHECK_THROWS_AS(SyntheticTaskSource{empty}, ConfigError);
}

TEST_CASE("folder with 3 classes x 4 images") {
  TempDir dir("folder");
  for (std::string cls : {"alpha", "beta", "gamma"}) {
    std::filesystem::create_directories(dir.path() / "train" / cls);
    for (int i = 0; i < 4; ++i) write_gray(dir.path() / "train" / cls / ("img" + std::to_string(i) + ".png"), 8, i / 4.0);
  }
  FolderSpec spec{dir.path(), 16, 1};
  auto data = load_folder_split(spec, Split::train);
  REQUIRE(data.size() == 3);
  for (const auto& [name, images] : data) {
    CHECK(images.size() == 4);
    for (const auto& img : images) {
      CHECK(img.size() == 16 * 16);
      CHECK(*std::min_element(img.begin(), img.end()) >= 0.0);
      CHECK(*std::max_element(img.begin(), img.end()) <= 1.0);
    }
  }
  // Sorted file order: img1 holds level 0.25 quantized to 8 bits.
  CHECK(data["beta"][1][0] == doctest::Approx(std::lround(0.25 * 255) / 255.0).epsilon(1e-12));
}

TEST_CASE("1x1 black PNG decodes to zeros") {
  TempDir dir("black");
  save_png(dir / "black.png", std::vector<double>{0.0}, 1, 1, 1);
  auto gray = load_png(dir / "black.png", 4, 1);
  CHECK(gray == std::vector<double>(16, 0.0));
  auto rgb = load_png(dir / "black.png", 2, 3);
  CHECK(rgb == std::vector<double>(12, 0.0));
}

TEST_CASE("PNG round trip and bilinear resize") {
  TempDir dir("png");
  std::vector<double> pixels{0.0, 1.0, 1.0, 0.0};
  save_png(dir / "checker.png", pixels, 1, 2, 2);
  CHECK(load_png(dir / "checker.png", 2, 1) == pixels);
  // Upsampling 2x2 -> 4x4 with pixel-centre alignment: the inner 2x2 block
  // interpolates at offsets 0.25 / 0.75 between the source pixels.
  auto up = load_png(dir / "checker.png", 4, 1);
  CHECK(up[0] == 0.0);
  CHECK(up[1 * 4 + 1] == doctest::Approx(0.375).epsilon(1e-12));
  CHECK(up[1 * 4 + 2] == doctest::Approx(0.625).epsilon(1e-12));

  std::vector<double> rgb{1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0};
  save_png(dir / "rgb.png", rgb, 3, 2, 2);
  CHECK(load_png(dir / "rgb.png", 2, 3) == rgb);
}

TEST_CASE("corrupt file fails the whole split, naming the path") {
  TempDir dir("corrupt");
  std::filesystem::create_directories(dir.path() / "train" / "a");
  write_gray(dir.path() / "train" / "a" / "good.png", 4, 0.5);
  const auto bad = dir.path() / "train" / "a" / "zbad.png";
  std::ofstream(bad) << "definitely not a png";
  try {
    load_folder_split({dir.path(), 4, 1}, Split::train);
    FAIL("expected an ingestion error");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find(bad.string()) != std::string::npos);
  }
}

TEST_CASE("empty class and missing split") {
  TempDir dir("empty");
  std::filesystem::create_directories(dir.path() / "train" / "a");
  CHECK_THROWS_AS(load_folder_split({dir.path(), 4, 1}, Split::train), DataError);
  CHECK_THROWS_AS(load_folder_split({dir.path(), 4, 1}, Split::val), DataError);
}

TEST_CASE("folder source split discipline and sampling") {
  TempDir dir("source");
  auto make_class = [&](const std::string& split, const std::string& cls, int n) {
    std::filesystem::create_directories(dir.path() / split / cls);
    for (int i = 0; i < n; ++i) write_gray(dir.path() / split / cls / (std::to_string(i) + ".png"), 4, i / 10.0);
  };
  for (int c = 0; c < 5; ++c) make_class("train", "t" + std::to_string(c), 3);
  for (int c = 0; c < 2; ++c) make_class("test", "x" + std::to_string(c), 3);
  FolderDataSource source({dir.path(), 16, 1});
  CHECK(source.classes(Split::train).size() == 5);
  CHECK(source.classes(Split::val).empty());
  CHECK(source.input_shape() == Shape{1, 16, 16});
  for (auto id : source.classes(Split::train)) CHECK(source.class_name(id)[0] == 't');

  auto ep = sample_episode(source, Split::train, {5, 1, 2}, 4);
  check_balance(ep);
  CHECK_THROWS_AS(sample_episode(source, Split::train, {5, 2, 2}, 4), DataError);
  CHECK_THROWS_AS(sample_episode(source, Split::test, {5, 1, 1}, 4), DataError);

  make_class("val", "t3", 3);
  CHECK_THROWS_AS(FolderDataSource({dir.path(), 16, 1}), DataError);
}

TEST_CASE("stack_inputs and labels_of") {
  std::vector<Example> ex{{{1, 2}, 1}, {{3, 4}, 0}};
  auto t = stack_inputs(ex, {2});
  CHECK(t.shape() == Shape{2, 2});
  CHECK(khn::testing::values(t) == std::vector<double>{1, 2, 3, 4});
  CHECK(labels_of(ex) == std::vector<int>{1, 0});
  CHECK_THROWS_AS(stack_inputs(ex, {3}), ShapeError);
}
