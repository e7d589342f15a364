// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <set>

#include "efsl/blocks/blocks.hpp"
#include "efsl/core/error.hpp"
#include "efsl/numerics/gradcheck.hpp"
#include "efsl/verify/oracle.hpp"

using namespace efsl;
using namespace efsl::fsl;
using namespace efsl::oracle;

namespace {

SideChainConfig toy_side(int d = 8, int n = 2, int m = 3) {
  SideChainConfig c;
  c.embed_dim = d;
  c.num_layers = n;
  c.num_heads = 2;
  c.side_tokens = m;
  c.bottleneck = 6;
  c.attn_bottleneck = 3;
  return c;
}

void randomise(const num::NamedTensors<double>& named, num::Rng rng, double sd) {
  for (auto [name, t] : named) {
    for (auto& v : t.mutable_data()) v = sd * rng.normal();
  }
}

// All side-chain tensors N(0, sd^2); zero-initialised pieces would hide bugs.
SideChain<double> random_chain(const SideChainConfig& c, std::uint64_t seed, double sd = 0.4) {
  auto sc = init_side_chain<double>(c, seed);
  randomise(sc.named_tensors(), num::Rng(seed, 7), sd);
  return sc;
}

vit::BackboneConfig toy_backbone(int d, int n, int heads) {
  vit::BackboneConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = d;
  c.num_layers = n;
  c.num_heads = heads;
  c.mlp_ratio = 2.0;
  c.num_base_classes = 3;
  return c;
}

std::vector<vit::LayerWeights<double>> random_frozen(int d, int n, int heads, std::uint64_t seed) {
  auto bb = vit::init_backbone<double>(toy_backbone(d, n, heads), seed);
  randomise(bb.named_tensors(), num::Rng(seed, 8), 0.5);
  return bb.layers;
}

Tensor<double> random_tensor(num::Shape shape, std::uint64_t seed, double sd = 1.0) {
  num::Rng rng(seed, 9);
  return Tensor<double>::randn(std::move(shape), rng, sd);
}

std::vector<Tensor<double>> random_xs(int n, std::size_t batch, std::size_t tokens, std::size_t d,
                                      std::uint64_t seed) {
  std::vector<Tensor<double>> xs;
  for (int i = 0; i < n; ++i) xs.push_back(random_tensor({batch, tokens, d}, seed * 31 + static_cast<std::uint64_t>(i)));
  return xs;
}

bool bit_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

Mat oracle_active(const ActiveLayer<double>& l, const SideChainConfig& c, const Mat& h) {
  const Mat in = l.prompt ? add(h, rows_of(*l.prompt)) : h;
  const Mat z = l.proj ? bottleneck(*l.proj, in) : in;
  Mat zp = z;
  if (l.q) {
    const Mat q = bottleneck(*l.q, z), k = bottleneck(*l.k, z), v = bottleneck(*l.v, z);
    Mat att(z.size(), std::vector<double>(z[0].size(), 0.0));
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> s(k.size());
      for (std::size_t j = 0; j < k.size(); ++j) {
        double dot = 0;
        for (std::size_t e = 0; e < q[i].size(); ++e) dot += q[i][e] * k[j][e];
        s[j] = dot / std::sqrt(static_cast<double>(c.embed_dim));
      }
      s = softmax(s);
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t e = 0; e < v[j].size(); ++e) att[i][e] += s[j] * v[j][e];
    }
    zp = add(scaled(att, c.xi), z);
  }
  if (!l.mlp) return zp;
  return add(scaled(bottleneck(*l.mlp, layer_norm(zp, l.ln->gamma, l.ln->beta)), c.zeta), zp);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("config validation and key/value round trip") {
  auto c = toy_side();
  CHECK_NOTHROW(c.validate());
  CHECK(SideChainConfig::from_kv(c.to_kv()).to_kv() == c.to_kv());
  c.ablation.combine_mode = CombineMode::fixed;
  c.sq_mode = SqMode::raw;
  c.ablation.prompts = false;
  CHECK(SideChainConfig::from_kv(c.to_kv()).to_kv() == c.to_kv());
  for (auto bad : {&SideChainConfig::xi, &SideChainConfig::zeta, &SideChainConfig::alpha}) {
    auto b = toy_side();
    b.*bad = 1.5;
    CHECK_THROWS_AS(b.validate(), ValidationError);
  }
  auto b = toy_side();
  b.bottleneck = 0;
  CHECK_THROWS_AS(b.validate(), ValidationError);
  b = toy_side();
  b.ablation.f_att_branch = b.ablation.f_mlp_branch = b.ablation.h_branch = false;
  CHECK_THROWS_AS(b.validate(), ValidationError);
  CHECK_THROWS_AS(parse_sq_mode("dot"), ValidationError);
}

TEST_CASE("active block with zero scales is prompt plus projection") {
  auto c = toy_side();
  c.xi = c.zeta = 0.0;
  const auto sc = random_chain(c, 3);
  const auto h = random_tensor({2, 3, 8}, 4);
  const auto f = active_block(h, sc.layers[0], c);
  CHECK(bit_equal(f, (*sc.layers[0].proj)(num::add(h, *sc.layers[0].prompt))));
}

TEST_CASE("identity projection with a zero prompt passes the state through") {
  auto c = toy_side();
  c.bottleneck = c.embed_dim;
  c.activation = Activation::identity;
  c.ablation.active_attn = c.ablation.active_mlp = false;
  auto sc = init_side_chain<double>(c, 1);
  auto& l = sc.layers[0];
  for (auto* a : {&l.proj->down, &l.proj->up}) {
    auto w = a->w.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (int i = 0; i < c.embed_dim; ++i) w[static_cast<std::size_t>(i * c.embed_dim + i)] = 1.0;
  }
  std::fill(l.prompt->mutable_data().begin(), l.prompt->mutable_data().end(), 0.0);
  const auto h = random_tensor({2, 3, 8}, 5);
  CHECK(bit_equal(active_block(h, l, c), h));
}

TEST_CASE("active block matches the explicit formula") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto c = toy_side(8, 1, 3);
    c.xi = 0.7;
    c.zeta = 0.4;
    const auto sc = random_chain(c, seed);
    const auto h = random_tensor({2, 3, 8}, seed + 100);
    const auto f = active_block(h, sc.layers[0], c);
    for (std::size_t b = 0; b < 2; ++b) {
      CHECK(max_diff(f, b * 24, oracle_active(sc.layers[0], c, rows_of(h, b))) < 1e-10);
    }
  }
  auto c = toy_side();
  CHECK_THROWS_AS(active_block(random_tensor({2, 4, 8}, 1), random_chain(c, 1).layers[0], c), ShapeError);
}

TEST_CASE("frozen block matches an enumerated cross-attention oracle") {
  for (int heads : {1, 2}) {
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      const auto w = random_frozen(4, 1, heads, seed);
      const auto f = random_tensor({2, 2, 4}, seed + 10);
      const auto x = random_tensor({2, 3, 4}, seed + 20);
      const auto out = frozen_block(f, x, w[0], heads);
      for (std::size_t b = 0; b < 2; ++b) {
        const auto o = oracle::frozen(w[0], rows_of(f, b), rows_of(x, b), heads);
        CHECK(max_diff(out.f_att, b * 8, o.f_att) < 1e-10);
        CHECK(max_diff(out.f_mlp, b * 8, o.f_mlp) < 1e-10);
        CHECK(max_diff(out.h, b * 8, o.h) < 1e-10);
      }
      for (std::size_t i = 0; i < out.h.numel(); ++i) CHECK(out.h[i] == out.f_mlp[i] + out.f_att[i]);
    }
  }
}

TEST_CASE("frozen block hooks and guards") {
  const auto w = random_frozen(8, 1, 2, 3);
  const auto f = random_tensor({2, 3, 8}, 1);
  const auto x = random_tensor({2, 5, 8}, 2);
  const auto no_att = frozen_block(f, x, w[0], 2, {.zero_attention = true});
  CHECK(bit_equal(no_att.f_att, f));
  const auto no_mlp = frozen_block(f, x, w[0], 2, {.zero_mlp = true});
  CHECK(bit_equal(no_mlp.h, no_mlp.f_att));

  auto leaky = w[0];
  leaky.attn.q.w = leaky.attn.q.w.template cast<double>();
  leaky.attn.q.w.set_requires_grad(true);
  CHECK_THROWS_AS(frozen_block(f, x, leaky, 2), InternalError);
  CHECK_THROWS_AS(frozen_block(f, random_tensor({3, 5, 8}, 2), w[0], 2), ShapeError);
}

TEST_CASE("combine: one-hot limit, convexity and double-loop oracle") {
  auto c = toy_side(8, 2, 3);
  SUBCASE("fixed logits with one dominant entry select that projected feature") {
    c.ablation.combine_mode = CombineMode::fixed;
    auto sc = random_chain(c, 2);
    auto logits = sc.combine_logits->mutable_data();
    std::fill(logits.begin(), logits.end(), 0.0);
    logits[4] = 30.0;
    std::vector<Tensor<double>> feats;
    for (int k = 0; k < 6; ++k) feats.push_back(random_tensor({2, 3, 8}, 40 + static_cast<std::uint64_t>(k)));
    const auto w = combine_weights(sc, feats.back());
    const auto agg = combine(sc, feats, w);
    const auto single = (*sc.combine_shared)(feats[4]);
    double dev = 0;
    for (std::size_t i = 0; i < agg.numel(); ++i) dev = std::max(dev, std::abs(agg[i] - single[i]));
    CHECK(dev < 1e-4);
  }
  SUBCASE("identical inputs give the shared projection of that input") {
    const auto sc = random_chain(c, 3);
    const auto f = random_tensor({2, 3, 8}, 9);
    const std::vector<Tensor<double>> feats(6, f);
    const auto agg = combine(sc, feats, combine_weights(sc, f));
    const auto single = (*sc.combine_shared)(f);
    for (std::size_t i = 0; i < agg.numel(); ++i) CHECK(agg[i] == doctest::Approx(single[i]).epsilon(1e-12));
  }
  SUBCASE("random case against the explicit weighted sum") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto sc = random_chain(c, seed);
      std::vector<Tensor<double>> feats;
      for (int k = 0; k < 6; ++k) feats.push_back(random_tensor({2, 3, 8}, seed * 10 + static_cast<std::uint64_t>(k)));
      const auto h_last = feats.back();
      const auto w = combine_weights(sc, h_last);
      const auto agg = combine(sc, feats, w);
      for (std::size_t b = 0; b < 2; ++b) {
        const auto logits = bottleneck(*sc.combine_weight, Mat{mean_rows(rows_of(h_last, b))})[0];
        const auto ow = softmax(logits);
        std::vector<Mat> fm;
        for (const auto& f : feats) fm.push_back(rows_of(f, b));
        for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(w[b * 6 + k] - ow[k]) < 1e-12);
        CHECK(max_diff(agg, b * 24, oracle::combine(*sc.combine_shared, fm, ow)) < 1e-10);
      }
    }
  }
  SUBCASE("average mode uses uniform weights") {
    c.ablation.combine_mode = CombineMode::average;
    const auto sc = random_chain(c, 4);
    CHECK_FALSE(sc.combine_weight.has_value());
    CHECK_FALSE(sc.combine_logits.has_value());
    const auto w = combine_weights(sc, random_tensor({2, 3, 8}, 1));
    for (std::size_t i = 0; i < w.numel(); ++i) CHECK(w[i] == doctest::Approx(1.0 / 6));
  }
  CHECK_THROWS_AS(combine(random_chain(c, 1), {}, Tensor<double>::zeros({2, 0})), ShapeError);
}

TEST_CASE("combine weights form a distribution over 3n features") {
  const auto c = toy_side(8, 3, 3);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto sc = random_chain(c, seed, 2.0);
    const auto w = combine_weights(sc, random_tensor({4, 3, 8}, seed, 3.0));
    REQUIRE(w.shape() == num::Shape{4, 9});
    for (std::size_t b = 0; b < 4; ++b) {
      double s = 0;
      for (std::size_t k = 0; k < 9; ++k) {
        CHECK(w[b * 9 + k] >= 0.0);
        s += w[b * 9 + k];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("prototypes are per-class means") {
  const auto one = Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6});
  const std::vector<int> l1{1, 0};
  const auto p1 = compute_prototypes(one, l1, 2);
  CHECK(std::vector<double>(p1.data().begin(), p1.data().end()) == std::vector<double>{4, 5, 6, 1, 2, 3});

  const auto two = Tensor<double>({2, 2}, {1, 0, 0, 1});
  const std::vector<int> l2{0, 0};
  const auto p2 = compute_prototypes(two, l2, 1);
  CHECK(p2[0] == 0.5);
  CHECK(p2[1] == 0.5);

  const auto feats = random_tensor({15, 6}, 3);
  std::vector<int> labels;
  for (int i = 0; i < 15; ++i) labels.push_back((i * 7) % 3);
  const auto p = compute_prototypes(feats, labels, 3);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0;
      int n = 0;
      for (std::size_t i = 0; i < 15; ++i)
        if (labels[i] == c) s += feats[i * 6 + j], ++n;
      CHECK(std::abs(p[static_cast<std::size_t>(c) * 6 + j] - s / n) < 1e-12);
    }
  }
  const std::vector<int> missing{0, 0};
  CHECK_THROWS_AS(compute_prototypes(two, missing, 2), ValidationError);
  const std::vector<int> out_of_range{0, 2};
  CHECK_THROWS_AS(compute_prototypes(two, out_of_range, 2), ValidationError);
}

TEST_CASE("sq attention") {
  const auto c = toy_side(4, 1, 2);
  const auto sc = random_chain(c, 5);
  const auto s = random_tensor({2, 4}, 1);
  const auto q = random_tensor({6, 4}, 2);
  SUBCASE("alpha zero returns the prototypes") {
    CHECK(bit_equal(sq_attention(s, q, &*sc.sq_proj, 0.0, SqMode::softmax), s));
    CHECK(bit_equal(sq_attention(s, q, &*sc.sq_proj, 0.0, SqMode::raw), s));
  }
  SUBCASE("single query in softmax mode moves every prototype toward it") {
    const auto q1 = random_tensor({1, 4}, 3);
    const auto out = sq_attention(s, q1, &*sc.sq_proj, 0.3, SqMode::softmax);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t j = 0; j < 4; ++j) CHECK(out[r * 4 + j] == doctest::Approx(0.3 * q1[j] + 0.7 * s[r * 4 + j]));
  }
  SUBCASE("both modes against the explicit matrix product") {
    for (auto mode : {SqMode::raw, SqMode::softmax}) {
      const auto out = sq_attention(s, q, &*sc.sq_proj, 0.35, mode);
      const Mat S = rows_of(s), Q = rows_of(q), P = bottleneck(*sc.sq_proj, Q);
      Mat expect(2, std::vector<double>(4));
      for (std::size_t r = 0; r < 2; ++r) {
        std::vector<double> a(6);
        for (std::size_t j = 0; j < 6; ++j) {
          for (std::size_t e = 0; e < 4; ++e) a[j] += S[r][e] * P[j][e];
          if (mode == SqMode::softmax) a[j] /= 2.0;  // sqrt(d)
        }
        if (mode == SqMode::softmax) a = softmax(a);
        for (std::size_t e = 0; e < 4; ++e) {
          double aq = 0;
          for (std::size_t j = 0; j < 6; ++j) aq += a[j] * Q[j][e];
          expect[r][e] = 0.35 * aq + 0.65 * S[r][e];
        }
      }
      CHECK(max_diff(out, 0, expect) < 1e-10);
    }
  }
  SUBCASE("softmax mode pulls prototypes into the query hull") {
    const auto moved = sq_attention(s, q, &*sc.sq_proj, 1.0, SqMode::softmax);
    // alpha = 1 leaves only A q; recover barycentric weights from A directly.
    const Mat P = bottleneck(*sc.sq_proj, rows_of(q));
    for (std::size_t r = 0; r < 2; ++r) {
      std::vector<double> a(6);
      for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t e = 0; e < 4; ++e) a[j] += s[r * 4 + e] * P[j][e] / 2.0;
      a = softmax(a);
      double total = 0;
      for (double v : a) {
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(total == doctest::Approx(1.0));
      for (std::size_t e = 0; e < 4; ++e) {
        double lo = 1e300, hi = -1e300, mix = 0;
        for (std::size_t j = 0; j < 6; ++j) {
          lo = std::min(lo, q[j * 4 + e]);
          hi = std::max(hi, q[j * 4 + e]);
          mix += a[j] * q[j * 4 + e];
        }
        CHECK(moved[r * 4 + e] == doctest::Approx(mix));
        CHECK(moved[r * 4 + e] >= lo - 1e-12);
        CHECK(moved[r * 4 + e] <= hi + 1e-12);
      }
    }
  }
  CHECK_THROWS_AS(sq_attention(s, random_tensor({6, 5}, 2), &*sc.sq_proj, 0.1, SqMode::raw), ShapeError);
}

TEST_CASE("cosine classifier") {
  const auto protos = Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto q = Tensor<double>({1, 3}, {0, 2, 0});
  CHECK(classify(q, protos, 10.0).predictions == std::vector<int>{1});
  const auto tied = Tensor<double>({3, 2}, {0, 1, 1, 0, 1, 0});
  CHECK(classify(Tensor<double>({1, 2}, {1, 0}), tied, 10.0).predictions == std::vector<int>{1});
  CHECK_THROWS_AS(classify(q, protos, 0.0), ValidationError);

  const auto s = random_tensor({5, 7}, 11);
  const auto qs = random_tensor({75, 7}, 12);
  const auto out = classify(qs, s, 10.0);
  for (std::size_t j = 0; j < 75; ++j) {
    const std::vector<double> qv(qs.data().begin() + static_cast<long>(j * 7), qs.data().begin() + static_cast<long>(j * 7 + 7));
    int best = 0;
    double best_cos = -2;
    for (int c = 0; c < 5; ++c) {
      const std::vector<double> sv(s.data().begin() + c * 7, s.data().begin() + c * 7 + 7);
      const double cs = cosine(qv, sv);
      CHECK(out.logits[j * 5 + static_cast<std::size_t>(c)] == doctest::Approx(10.0 * cs).epsilon(1e-12));
      if (cs > best_cos) best_cos = cs, best = c;
    }
    CHECK(out.predictions[j] == best);
  }
}

TEST_CASE("parameter accounting") {
  SUBCASE("a single bottleneck pair at d=64, r=48") {
    auto c = toy_side(64, 0, 1);
    c.bottleneck = 48;
    c.ablation.combine_block = false;
    const auto pc = count_params(c, toy_backbone(64, 1, 4));
    CHECK(pc.breakdown.at("sq-proj") == 64 * 48 + 48 + 48 * 64 + 64);
    CHECK(pc.breakdown.at("sq-proj") == 6256);
  }
  SUBCASE("no layers leaves combine, sq and h0 only") {
    auto c = toy_side(16, 0, 4);
    const auto pc = count_params(c, toy_backbone(16, 1, 2));
    std::set<std::string> keys;
    for (const auto& [k, v] : pc.breakdown)
      if (v > 0) keys.insert(k);
    // With no layers there is nothing for the weight head to weigh.
    CHECK(keys == std::set<std::string>{"combine-shared", "h0", "sq-proj"});
    CHECK(pc.trainable == pc.breakdown.at("combine-shared") + pc.breakdown.at("h0") + pc.breakdown.at("sq-proj"));
  }
  SUBCASE("default toy configuration by hand") {
    const vit::BackboneConfig bb;
    const auto c = SideChainConfig::for_backbone(bb);
    const auto pc = count_params(c, bb);
    // d=64, n=6, m=4, r=48, r_a=8, 18 combine inputs.
    const std::size_t pair = 64 * 48 + 48 + 48 * 64 + 64;  // 6256
    const std::size_t attn_pair = 64 * 8 + 8 + 8 * 64 + 64;  // 1096
    const std::size_t per_layer = 4 * 64 + pair + 3 * attn_pair + 2 * 64 + pair;
    const std::size_t expect = 6 * per_layer + pair + (64 * 48 + 48 + 48 * 18 + 18) + pair + 4 * 64;
    CHECK(pc.trainable == expect);
    CHECK(pc.trainable == init_side_chain<float>(c, 1).numel());
    CHECK(pc.frozen == vit::init_backbone<float>(bb, 1).encoder_numel());
    CHECK(pc.trainable_without_sq_h0() == expect - pair - 4 * 64);
  }
  SUBCASE("ViT-S dimensions land near 1.25M") {
    vit::BackboneConfig bb;
    bb.embed_dim = 384;
    bb.num_layers = 12;
    bb.num_heads = 6;
    bb.image_size = 224;
    bb.patch_size = 16;
    bb.num_base_classes = 1000;
    const auto pc = count_params(SideChainConfig::for_backbone(bb), bb);
    CHECK(pc.trainable == 1254420);
    CHECK(pc.trainable >= 1000000);
    CHECK(pc.trainable <= 1500000);
    CHECK(pc.frozen == 21665664);  // ViT-S/16 without its classifier head
  }
  SUBCASE("disabling a component removes exactly its category") {
    const auto base = toy_side(16, 2, 4);
    const auto full = count_params(base, toy_backbone(16, 2, 2));
    auto no_prompts = base;
    no_prompts.ablation.prompts = false;
    const auto np = count_params(no_prompts, toy_backbone(16, 2, 2));
    CHECK(np.trainable == full.trainable - full.breakdown.at("prompts"));
    CHECK(full.breakdown.at("prompts") == 2 * 4 * 16);
    auto avg = base;
    avg.ablation.combine_mode = CombineMode::average;
    CHECK(count_params(avg, toy_backbone(16, 2, 2)).trainable == full.trainable - full.breakdown.at("combine-weight"));
  }
}

TEST_CASE("initialisation is keyed by tensor name") {
  const auto c = toy_side();
  const auto a = init_side_chain<double>(c, 4);
  const auto b = init_side_chain<double>(c, 4);
  CHECK(side_chain_hash(a.cast<float>()) == side_chain_hash(b.cast<float>()));
  auto trimmed_cfg = c;
  trimmed_cfg.ablation.prompts = false;
  trimmed_cfg.ablation.active_attn = false;
  const auto trimmed = init_side_chain<double>(trimmed_cfg, 4);
  std::map<std::string, Tensor<double>> full;
  for (const auto& [n, t] : a.named_tensors()) full.emplace(n, t);
  for (const auto& [n, t] : trimmed.named_tensors()) CHECK(bit_equal(t, full.at(n)));
  for (const auto& [n, t] : a.named_tensors()) {
    const bool zero = std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
    if (n.ends_with("proj.up.weight") && n.starts_with("layers.")) CHECK(zero);
    if (n.ends_with(".bias")) CHECK(zero);
    if (n.ends_with("down.weight")) CHECK_FALSE(zero);
  }
  CHECK_FALSE(side_chain_hash(init_side_chain<float>(c, 5)) == side_chain_hash(a.cast<float>()));
}

TEST_CASE("side chain archive round trip") {
  auto c = toy_side();
  c.ablation.combine_mode = CombineMode::fixed;
  const auto sc = random_chain(c, 6).cast<float>();
  const auto ar = to_archive(sc, 6);
  const auto back = side_chain_from_archive(TensorArchive::deserialize(ar.serialize(), kSideChainMagic));
  CHECK(back.config.to_kv() == c.to_kv());
  CHECK(side_chain_hash(back) == side_chain_hash(sc));
  CHECK_THROWS_AS(TensorArchive::deserialize(ar.serialize(), kBackboneMagic), FormatError);
  auto bytes = ar.serialize();
  bytes[bytes.size() / 2] ^= std::byte{0x10};
  CHECK_THROWS_AS(TensorArchive::deserialize(bytes, kSideChainMagic), FormatError);
}

TEST_CASE("feature extraction composes the blocks") {
  SUBCASE("one layer equals the manual composition") {
    auto c = toy_side(8, 1, 3);
    c.ablation.combine_block = false;
    const auto sc = random_chain(c, 2);
    const auto frozen = random_frozen(8, 1, 2, 2);
    const auto xs = random_xs(1, 2, 5, 8, 3);
    const auto out = extract_features(sc, std::span<const Tensor<double>>(xs), frozen);
    const auto h0 = num::add(num::reshape(sc.h0, {1, 3, 8}), Tensor<double>::zeros({2, 3, 8}));
    const auto manual = frozen_block(active_block(h0, sc.layers[0], c), xs[0], frozen[0], 2);
    CHECK(bit_equal(out.tokens, manual.h));
    CHECK(bit_equal(out.pooled, num::mean(manual.h, 1)));
  }
  SUBCASE("full pipeline against a per-image oracle") {
    const auto c = toy_side(8, 2, 3);
    const auto sc = random_chain(c, 7);
    const auto frozen = random_frozen(8, 2, 2, 7);
    const auto xs = random_xs(2, 2, 5, 8, 7);
    const auto out = extract_features(sc, std::span<const Tensor<double>>(xs), frozen);
    REQUIRE(out.pooled.shape() == num::Shape{2, 8});
    for (std::size_t b = 0; b < 2; ++b) {
      Mat h = rows_of(sc.h0);
      std::vector<Mat> feats;
      for (std::size_t i = 0; i < 2; ++i) {
        const auto o = oracle::frozen(frozen[i], oracle_active(sc.layers[i], c, h), rows_of(xs[i], b), 2);
        feats.insert(feats.end(), {o.f_att, o.f_mlp, o.h});
        h = o.h;
      }
      const auto w = softmax(bottleneck(*sc.combine_weight, Mat{mean_rows(h)})[0]);
      const auto agg = combine(*sc.combine_shared, feats, w);
      CHECK(max_diff(out.tokens, b * 24, agg) < 1e-10);
      CHECK(max_diff(out.pooled, b * 8, Mat{mean_rows(agg)}) < 1e-10);
    }
  }
  SUBCASE("perturbing one prompt changes the features but not the activations") {
    const auto c = toy_side(8, 4, 3);
    auto sc = random_chain(c, 8);
    const auto frozen = random_frozen(8, 4, 2, 8);
    const auto xs = random_xs(4, 2, 5, 8, 8);
    std::vector<std::vector<double>> before;
    for (const auto& x : xs) before.emplace_back(x.data().begin(), x.data().end());
    const auto a = extract_features(sc, std::span<const Tensor<double>>(xs), frozen).pooled;
    sc.layers[2].prompt->mutable_data()[5] += 0.5;
    const auto b = extract_features(sc, std::span<const Tensor<double>>(xs), frozen).pooled;
    CHECK_FALSE(bit_equal(a, b));
    for (std::size_t i = 0; i < xs.size(); ++i)
      CHECK(std::equal(before[i].begin(), before[i].end(), xs[i].data().begin()));
  }
  SUBCASE("layer count mismatch") {
    const auto c = toy_side(8, 2, 3);
    const auto xs = random_xs(1, 2, 5, 8, 1);
    CHECK_THROWS_AS(extract_features(random_chain(c, 1), std::span<const Tensor<double>>(xs), random_frozen(8, 2, 2, 1)),
                    ShapeError);
  }
}

TEST_CASE("episode loss gradients match finite differences") {
  auto c = toy_side(16, 2, 10);
  c.bottleneck = 8;
  c.attn_bottleneck = 4;
  c.xi = c.zeta = 0.5;
  c.alpha = 0.3;
  for (auto mode : {SqMode::softmax, SqMode::raw}) {
    c.sq_mode = mode;
    auto sc = random_chain(c, 9, 0.3);
    const auto frozen = random_frozen(16, 2, 2, 9);
    const auto xs = random_xs(2, 9, 5, 16, 9);  // 3-way 1-shot, 2 queries per class
    const std::vector<int> s_labels{0, 1, 2}, q_labels{0, 0, 1, 1, 2, 2};
    for (auto [n, t] : sc.named_tensors()) t.set_requires_grad(true);
    const auto named = sc.named_tensors();
    const std::vector<num::NamedTensor> params(named.begin(), named.end());
    const auto loss = [&] {
      const auto f = extract_features(sc, std::span<const Tensor<double>>(xs), frozen).pooled;
      return episode_head(num::narrow(f, 0, 0, 3), s_labels, num::narrow(f, 0, 3, 6), q_labels, 3, &sc, c.tau).loss;
    };
    const auto report = num::finite_difference_check(loss, params, 1e-4, 1e-4);
    INFO(report.summary());
    CHECK(report.passed());
  }
}

TEST_CASE("episode head reduces to plain prototypes at alpha zero") {
  auto c = toy_side(8, 1, 3);
  c.alpha = 0.0;
  const auto sc = random_chain(c, 10);
  auto no_sq = c;
  no_sq.ablation.sq_attention = false;
  const auto plain_sc = random_chain(no_sq, 10);
  const auto s = random_tensor({5, 8}, 1);
  const auto q = random_tensor({75, 8}, 2);
  const std::vector<int> sl{0, 1, 2, 3, 4};
  std::vector<int> ql;
  for (int i = 0; i < 75; ++i) ql.push_back(i / 15);
  const auto a = episode_head(s, sl, q, ql, 5, &sc, 10.0);
  const auto b = episode_head(s, sl, q, ql, 5, static_cast<const SideChain<double>*>(nullptr), 10.0);
  const auto d = episode_head(s, sl, q, ql, 5, &plain_sc, 10.0);
  CHECK(a.predictions == b.predictions);
  CHECK(a.predictions == d.predictions);
  CHECK(bit_equal(a.sq_prototypes, a.prototypes));
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.loss.item() == b.loss.item());
}
