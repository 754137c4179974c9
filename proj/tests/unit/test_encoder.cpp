#include <cmath>

#include "doctest.h"
#include "khn/encoder.hpp"
#include "khn/errors.hpp"
#include "khn/training.hpp"
#include "support.hpp"

using namespace khn;
using khn::testing::normal_tensor;
using khn::testing::values;

namespace {

double grad_norm(const Tensor& t) {
  double s = 0.0;
  for (double g : t.grad()) s += g * g;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("single linear MLP: zero input and zero bias give zero embedding") {
  EncoderConfig cfg;
  cfg.input_shape = {6};
  cfg.mlp_hidden_sizes = {};
  cfg.embedding_dim = 4;
  auto params = init_encoder(cfg, 1);
  REQUIRE(params.size() == 2);
  auto z = encode(cfg, params, Tensor({3, 6}));
  CHECK(z.shape() == Shape{3, 4});
  CHECK(values(z) == std::vector<double>(12, 0.0));
}

TEST_CASE("MLP encoder matches a hand-written forward pass") {
  EncoderConfig cfg;
  cfg.input_shape = {3};
  cfg.mlp_hidden_sizes = {4};
  cfg.embedding_dim = 2;
  auto params = init_encoder(cfg, 7);
  REQUIRE(params.size() == 4);
  // Nonzero biases so they are exercised too.
  params[1].tensor.mutable_data()[2] = 0.3;
  params[3].tensor.mutable_data()[0] = -0.2;
  std::mt19937_64 rng(2);
  auto x = normal_tensor({5, 3}, rng);
  auto z = encode(cfg, params, x);

  auto W1 = params[0].tensor.data(), b1 = params[1].tensor.data();
  auto W2 = params[2].tensor.data(), b2 = params[3].tensor.data();
  for (std::size_t r = 0; r < 5; ++r) {
    double h[4];
    for (int o = 0; o < 4; ++o) {
      double acc = b1[o];
      for (int i = 0; i < 3; ++i) acc += W1[o * 3 + i] * x.data()[r * 3 + i];
      h[o] = acc > 0 ? acc : 0.0;
    }
    for (int o = 0; o < 2; ++o) {
      double acc = b2[o];
      for (int i = 0; i < 4; ++i) acc += W2[o * 4 + i] * h[i];
      CHECK(z.at(r, o) == doctest::Approx(acc).epsilon(1e-14));
    }
  }
}

TEST_CASE("conv4 output sizes") {
  CHECK(conv4_embedding_dim({1, 32, 32}) == 256);
  CHECK(conv4_embedding_dim({3, 16, 16}) == 64);
  EncoderConfig cfg;
  cfg.kind = EncoderKind::conv4;
  cfg.input_shape = {1, 32, 32};
  cfg.embedding_dim = 256;
  auto params = init_encoder(cfg, 3);
  CHECK(params.size() == 16);
  std::mt19937_64 rng(4);
  auto z = encode(cfg, params, normal_tensor({7, 1, 32, 32}, rng));
  CHECK(z.shape() == Shape{7, 256});
}

TEST_CASE("MLP batch of 7") {
  EncoderConfig cfg;
  auto params = init_encoder(cfg, 3);
  std::mt19937_64 rng(4);
  CHECK(encode(cfg, params, normal_tensor({7, 16}, rng)).shape() == Shape{7, 64});
}

TEST_CASE("conv4 batch normalization uses the current batch") {
  EncoderConfig cfg;
  cfg.kind = EncoderKind::conv4;
  cfg.input_shape = {1, 16, 16};
  cfg.embedding_dim = 64;
  auto params = init_encoder(cfg, 5);
  std::mt19937_64 rng(6);
  auto a = normal_tensor({3, 1, 16, 16}, rng);
  auto b = a.clone();
  for (std::size_t i = 256; i < 768; ++i) b.mutable_data()[i] *= 3.0;  // change examples 1 and 2
  auto za = encode(cfg, params, a);
  auto zb = encode(cfg, params, b);
  bool differs = false;
  for (std::size_t i = 0; i < 64; ++i) differs = differs || za.data()[i] != zb.data()[i];
  CHECK(differs);
  CHECK(values(encode(cfg, params, a)) == values(za));
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg;
  cfg.embedding_dim = 0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = EncoderConfig{};
  cfg.kind = EncoderKind::conv4;
  cfg.input_shape = {1, 28, 28};
  cfg.embedding_dim = 64;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg.input_shape = {1, 32, 32};
  CHECK_THROWS_AS(validate(cfg), ConfigError);  // embedding_dim must be 256
  cfg.embedding_dim = 256;
  CHECK_NOTHROW(validate(cfg));
  cfg = EncoderConfig{};
  cfg.input_shape = {1, 4, 4};
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("encode rejects mismatched batches") {
  EncoderConfig cfg;
  auto params = init_encoder(cfg, 1);
  CHECK_THROWS_AS(encode(cfg, params, Tensor({2, 15})), ShapeError);
  CHECK_THROWS_AS(encode(cfg, params, Tensor({0, 16})), ShapeError);
}

TEST_CASE("initialization properties") {
  for (auto kind : {EncoderKind::mlp, EncoderKind::conv4}) {
    EncoderConfig cfg;
    if (kind == EncoderKind::conv4) {
      cfg.kind = kind;
      cfg.input_shape = {3, 16, 16};
      cfg.embedding_dim = 64;
    }
    auto a = init_encoder(cfg, 11);
    auto b = init_encoder(cfg, 11);
    auto c = init_encoder(cfg, 12);
    REQUIRE(a.size() == b.size());
    bool any_difference = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].name == b[i].name);
      CHECK(values(a[i].tensor) == values(b[i].tensor));
      any_difference = any_difference || values(a[i].tensor) != values(c[i].tensor);
      const auto& t = a[i].tensor;
      const auto& name = a[i].name;
      if (name.ends_with("weight")) {
        const std::size_t fan_in = t.numel() / t.dim(0);
        const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
        for (double v : t.data()) CHECK(std::abs(v) <= bound);
      } else if (name.ends_with("gamma")) {
        for (double v : t.data()) CHECK(v == 1.0);
      } else {
        for (double v : t.data()) CHECK(v == 0.0);
      }
    }
    CHECK(any_difference);
  }
}

TEST_CASE("gradients reach every encoder tensor (20 seeds)") {
  SyntheticTaskSource source(SyntheticSpec{});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto model = init_model(ModelConfig{}, seed);
    auto ep = sample_episode(source, Split::train, {5, 1, 4}, seed);
    backward(episode_loss(model, ep));
    for (const auto& p : model.encoder) {
      REQUIRE(p.tensor.has_grad());
      CHECK_MESSAGE(grad_norm(p.tensor) > 0.0, p.name, " seed ", seed);
    }
  }
}

TEST_CASE("gradients reach every conv4 tensor") {
  ModelConfig cfg;
  cfg.encoder.kind = EncoderKind::conv4;
  cfg.encoder.input_shape = {1, 16, 16};
  cfg.encoder.embedding_dim = 64;
  cfg.way = 2;
  cfg.hypernet.target_layer_sizes = {2};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto model = init_model(cfg, seed);
    std::mt19937_64 rng(seed);
    Episode ep;
    ep.way = 2;
    ep.shot = 1;
    ep.queries_per_class = 2;
    ep.input_shape = {1, 16, 16};
    for (int c = 0; c < 2; ++c) {
      ep.support.push_back({khn::testing::normal_vector(256, rng), c});
      for (int q = 0; q < 2; ++q) ep.query.push_back({khn::testing::normal_vector(256, rng), c});
    }
    backward(episode_loss(model, ep));
    for (const auto& p : model.encoder) CHECK_MESSAGE(grad_norm(p.tensor) > 0.0, p.name, " seed ", seed);
  }
}
