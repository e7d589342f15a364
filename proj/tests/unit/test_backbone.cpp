// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "efsl/backbone/pretrain.hpp"
#include "efsl/backbone/vit.hpp"
#include "efsl/core/binary.hpp"
#include "efsl/core/error.hpp"
#include "efsl/core/log.hpp"
#include "efsl/numerics/gradcheck.hpp"
#include "efsl/verify/oracle.hpp"

using namespace efsl;
using namespace efsl::vit;
using num::Tensor;
using namespace efsl::oracle;

namespace {

BackboneConfig tiny_config(int layers = 1) {
  BackboneConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_layers = layers;
  c.num_heads = 2;
  c.mlp_ratio = 2.0;
  c.channels = 3;
  c.num_base_classes = 3;
  return c;
}

// Replaces every tensor with N(0, sd^2) values so the oracle comparison is
// not dominated by tiny initial weights.
Backbone<double> randomised(const BackboneConfig& c, std::uint64_t seed, double sd = 0.5) {
  auto bb = init_backbone<double>(c, seed).cast<double>();
  num::Rng rng(seed, 99);
  for (auto [name, t] : bb.named_tensors()) {
    for (auto& v : t.mutable_data()) v = sd * rng.normal();
  }
  return bb;
}

// Token matrix entering layer 1 for one image, built from raw pixels.
Mat oracle_embed(const Backbone<double>& bb, const std::vector<float>& img) {
  const auto& c = bb.config;
  const int g = c.image_size / c.patch_size;
  Mat tokens;
  tokens.push_back(to_mat(bb.cls_token, 1, static_cast<std::size_t>(c.embed_dim))[0]);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      std::vector<double> patch;
      for (int ch = 0; ch < c.channels; ++ch)
        for (int y = 0; y < c.patch_size; ++y)
          for (int x = 0; x < c.patch_size; ++x)
            patch.push_back(img[static_cast<std::size_t>((ch * c.image_size + gy * c.patch_size + y) * c.image_size +
                                                         gx * c.patch_size + x)]);
      tokens.push_back(affine(Mat{patch}, bb.patch_embed.w, bb.patch_embed.b)[0]);
    }
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t j = 0; j < tokens[t].size(); ++j) tokens[t][j] += bb.pos_embed[t * tokens[t].size() + j];
  return tokens;
}

std::vector<float> random_images(std::size_t count, const BackboneConfig& c, std::uint64_t seed) {
  num::Rng rng(seed);
  std::vector<float> px(count * static_cast<std::size_t>(c.channels * c.image_size * c.image_size));
  for (auto& v : px) v = static_cast<float>(rng.uniform());
  return px;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("efsl_test_" + name);
}

struct QuietLogs {
  QuietLogs() { set_log_level(LogLevel::quiet); }
  ~QuietLogs() { set_log_level(LogLevel::info); }
};

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny_config();
  c.patch_size = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(BackboneConfig{}.tokens() == 65);
  CHECK(BackboneConfig::from_kv(tiny_config().to_kv()) == tiny_config());
}

TEST_CASE("single layer matches the explicit-formula oracle") {
  const auto c = tiny_config(1);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto bb = randomised(c, seed);
    const auto px = random_images(2, c, seed + 10);
    const auto xs = backbone_forward(bb, px, 2);
    REQUIRE(xs.size() == 1);
    const std::size_t T = static_cast<std::size_t>(c.tokens()), d = static_cast<std::size_t>(c.embed_dim);
    REQUIRE(xs[0].shape() == num::Shape{2, T, d});
    for (std::size_t b = 0; b < 2; ++b) {
      const std::vector<float> img(px.begin() + static_cast<std::ptrdiff_t>(b * px.size() / 2),
                                   px.begin() + static_cast<std::ptrdiff_t>((b + 1) * px.size() / 2));
      const Mat expect = oracle::layer(bb.layers[0], oracle_embed(bb, img), c.num_heads);
      CHECK(max_diff(xs[0], b * T * d, expect) < 1e-10);
    }
  }
}

TEST_CASE("zero image with zero class token and positions reduces to a bias transform") {
  const auto c = tiny_config(1);
  auto bb = randomised(c, 5);
  for (auto& v : bb.cls_token.mutable_data()) v = 0;
  for (auto& v : bb.pos_embed.mutable_data()) v = 0;
  const std::vector<float> px(static_cast<std::size_t>(c.channels * c.image_size * c.image_size), 0.0f);
  const auto xs = backbone_forward(bb, px, 1);
  // Tokens are [0, b, b, b, b] with b the patch bias.
  const std::size_t d = static_cast<std::size_t>(c.embed_dim);
  Mat tokens(1, std::vector<double>(d, 0.0));
  for (int i = 0; i < c.num_patches(); ++i) tokens.push_back(to_mat(bb.patch_embed.b, 1, d)[0]);
  const Mat expect = oracle::layer(bb.layers[0], tokens, c.num_heads);
  CHECK(max_diff(xs[0], 0, expect) < 1e-10);
  // Every patch token sees the same inputs, so all patch outputs coincide.
  for (std::size_t t = 2; t < expect.size(); ++t)
    for (std::size_t j = 0; j < d; ++j) CHECK(xs[0][t * d + j] == doctest::Approx(xs[0][d + j]).epsilon(1e-12));
}

TEST_CASE("multi-layer forward composes layers") {
  const auto c = tiny_config(3);
  const auto bb = randomised(c, 8);
  const auto px = random_images(1, c, 4);
  const auto xs = backbone_forward(bb, px, 1);
  REQUIRE(xs.size() == 3);
  Mat x = oracle_embed(bb, px);
  for (int i = 0; i < 3; ++i) {
    x = oracle::layer(bb.layers[static_cast<std::size_t>(i)], x, c.num_heads);
    CHECK(max_diff(xs[static_cast<std::size_t>(i)], 0, x) < 1e-10);
  }
}

TEST_CASE("forward is deterministic and batch-independent") {
  const auto c = tiny_config(2);
  const auto bb = init_backbone<float>(c, 3);
  const auto px = random_images(3, c, 1);
  const auto a = backbone_forward(bb, px, 3);
  const auto b = backbone_forward(bb, px, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::ranges::equal(a[i].data(), b[i].data()));
  }
  CHECK_THROWS_AS(backbone_forward(bb, std::span<const float>(px).first(px.size() - 1), 3), ShapeError);
}

TEST_CASE("initialisation is seeded per tensor") {
  const auto c = tiny_config(2);
  const auto a = init_backbone<float>(c, 1), b = init_backbone<float>(c, 1), d = init_backbone<float>(c, 2);
  CHECK(checkpoint_hash(a) == checkpoint_hash(b));
  CHECK(checkpoint_hash(a) != checkpoint_hash(d));
  // Biases zero, LN identity.
  for (float v : a.layers[0].attn.q.b.data()) CHECK(v == 0.0f);
  for (float v : a.layers[0].ln1.gamma.data()) CHECK(v == 1.0f);
}

TEST_CASE("checkpoint round trip and failure modes") {
  const auto c = tiny_config(2);
  const auto bb = init_backbone<float>(c, 11);
  const auto path = temp_path("ckpt.bin");
  const Digest saved = save_checkpoint(bb, path);
  CHECK(saved == checkpoint_hash(bb));
  const auto loaded = load_checkpoint(path);
  CHECK(checkpoint_hash(loaded) == saved);
  CHECK(loaded.config == c);
  CHECK(loaded.seed == 11);
  CHECK(loaded.named_tensors().size() == bb.named_tensors().size());

  auto bytes = read_file(path);
  SUBCASE("truncated file") {
    bytes.resize(bytes.size() - 7);
    write_file(path, bytes);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("flipped payload byte") {
    bytes[bytes.size() - 40] ^= std::byte{0x10};
    write_file(path, bytes);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  SUBCASE("version mismatch") {
    bytes[8] = std::byte{2};
    write_file(path, bytes);
    CHECK_THROWS_AS(load_checkpoint(path), VersionError);
  }
  SUBCASE("config mismatch is a shape error on use") {
    auto other = c;
    other.embed_dim = 16;
    CHECK_THROWS_AS(load_checkpoint(path, &other), ShapeError);
    CHECK_NOTHROW(load_checkpoint(path, &c));
  }
  SUBCASE("wrong magic") {
    CHECK_THROWS_AS(TensorArchive::load(path, kSideChainMagic), FormatError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("archive rejects tensors with mismatched shapes") {
  auto ar = to_archive(init_backbone<float>(tiny_config(1), 1));
  TensorArchive bad(kBackboneMagic);
  bad.metadata = ar.metadata;
  for (const auto& name : ar.names()) {
    auto t = ar.get<float>(name);
    if (name == "pos_embed") t = Tensor<float>::zeros({t.dim(0) + 1, t.dim(1)});
    bad.put(name, t);
  }
  CHECK_THROWS_AS(from_archive(TensorArchive::deserialize(bad.serialize(), kBackboneMagic)), ShapeError);
  CHECK_THROWS_AS(ar.put("pos_embed", Tensor<float>::zeros({1})), InternalError);
}

TEST_CASE("pretraining loss gradients match finite differences") {
  const auto c = tiny_config(2);
  auto bb = randomised(c, 21, 1.0);
  bb.set_requires_grad(true);
  const auto px = random_images(3, c, 2);
  const std::vector<int> labels{0, 2, 1};
  std::vector<num::NamedTensor> params;
  for (const auto& [name, t] : bb.named_tensors()) params.emplace_back(name, t);
  const auto report = num::finite_difference_check(
      [&] { return num::cross_entropy(classify_logits(bb, backbone_forward(bb, px, 3).back()), labels); }, params,
      1e-5, 1e-4);
  INFO(report.summary());
  CHECK(report.passed());
}

TEST_CASE("untrained backbone classifies at chance") {
  QuietLogs quiet;
  data::SyntheticDatasetSpec spec;
  spec.images_per_class = 20;
  const auto ds = data::generate_dataset(spec);
  const auto split = data::split_classes(40, 20, 0.75, num::Rng(1), 5);
  PretrainConfig opts;
  opts.epochs = 0;
  const auto res = pretrain_backbone(ds, split.base, BackboneConfig{}, opts);
  CHECK(res.report.epoch_loss.empty());
  CHECK(checkpoint_hash(res.backbone) == checkpoint_hash(init_backbone<float>(BackboneConfig{}, opts.seed)));
  CHECK(std::abs(res.report.train_accuracy - 1.0 / 30) <= 0.05);

  auto wrong = BackboneConfig{};
  wrong.num_base_classes = 40;
  CHECK_THROWS_AS(pretrain_backbone(ds, split.base, wrong, opts), ValidationError);
}

TEST_CASE("one epoch on a two-class set beats chance and is reproducible") {
  QuietLogs quiet;
  data::SyntheticDatasetSpec spec;
  spec.images_per_class = 96;
  const auto ds = data::generate_dataset(spec);
  // A pair with opposite hue bands and different shapes.
  data::ClassSplit base{{}, spec.images_per_class};
  for (int i = 0; i < ds.num_classes() && base.classes.empty(); ++i) {
    for (int j = i + 1; j < ds.num_classes(); ++j) {
      const auto& fi = ds.factors(i);
      const auto& fj = ds.factors(j);
      if (std::abs(fi.hue_band - fj.hue_band) == data::kNumHueBands / 2 && fi.shape != fj.shape) {
        base.classes = {i, j};
        break;
      }
    }
  }
  REQUIRE(base.classes.size() == 2);
  auto c = BackboneConfig{};
  c.num_layers = 2;
  c.num_base_classes = 2;
  PretrainConfig opts;
  opts.epochs = 1;
  opts.batch = 8;
  opts.warmup_fraction = 0.0;
  opts.lr = 2e-3;
  const auto a = pretrain_backbone(ds, base, c, opts);
  MESSAGE("two-class accuracy after one epoch: ", a.report.train_accuracy);
  CHECK(a.report.train_accuracy > 0.5);
  const auto b = pretrain_backbone(ds, base, c, opts);
  CHECK(checkpoint_hash(a.backbone) == checkpoint_hash(b.backbone));
  opts.seed = 2;
  const auto d = pretrain_backbone(ds, base, c, opts);
  CHECK(checkpoint_hash(a.backbone) != checkpoint_hash(d.backbone));
}
