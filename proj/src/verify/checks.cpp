// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/verify/checks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "efsl/core/format.hpp"
#include "efsl/numerics/gradcheck.hpp"
#include "efsl/numerics/ops.hpp"
#include "efsl/verify/oracle.hpp"

namespace efsl::verify {

using num::Tensor;
using oracle::Mat;

namespace {

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

void randomise(const num::NamedTensors<double>& named, num::Rng rng, double sd) {
  for (auto [name, t] : named) {
    for (auto& v : t.mutable_data()) v = sd * rng.normal();
  }
}

Tensor<double> random_tensor(num::Shape shape, num::Rng& rng, double sd = 1.0) {
  return Tensor<double>::randn(std::move(shape), rng, sd);
}

int pick(num::Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

fsl::SideChainConfig small_side(int d, int n, int m, int heads) {
  fsl::SideChainConfig c;
  c.embed_dim = d;
  c.num_layers = n;
  c.num_heads = heads;
  c.side_tokens = m;
  c.bottleneck = std::max(2, d - 2);
  c.attn_bottleneck = std::max(1, d / 2);
  return c;
}

// Every tensor drawn from N(0, sd^2) so no zero-initialised piece hides a term.
fsl::SideChain<double> random_chain(const fsl::SideChainConfig& c, std::uint64_t seed, double sd) {
  auto sc = fsl::init_side_chain<double>(c, seed);
  randomise(sc.named_tensors(), num::Rng(seed).split("verify-chain"), sd);
  return sc;
}

std::vector<vit::LayerWeights<double>> random_layers(int d, int n, int heads, std::uint64_t seed) {
  vit::BackboneConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = d;
  c.num_layers = n;
  c.num_heads = heads;
  c.mlp_ratio = 2.0;
  c.num_base_classes = 2;
  auto bb = vit::init_backbone<double>(c, seed);
  randomise(bb.named_tensors(), num::Rng(seed).split("verify-layers"), 0.5);
  return bb.layers;
}

CheckResult verdict(std::string name, double worst, double tol, int cases) {
  return {std::move(name), worst < tol,
          std::to_string(cases) + " cases, max |diff| " + sci(worst) + " (tol " + sci(tol) + ")"};
}

}  // namespace

std::string CheckResult::line() const { return std::string(passed ? "PASS " : "FAIL ") + name + ": " + detail; }

CheckResult check_gradients(std::uint64_t seed, double tol) {
  auto c = small_side(16, 2, 10, 2);
  c.bottleneck = 8;
  c.attn_bottleneck = 4;
  c.xi = c.zeta = 0.5;
  c.alpha = 0.3;
  double worst = 0.0;
  std::size_t elements = 0;
  bool ok = true;
  for (auto mode : {fsl::SqMode::softmax, fsl::SqMode::raw}) {
    c.sq_mode = mode;
    auto sc = random_chain(c, seed, 0.3);
    const auto frozen = random_layers(16, 2, 2, seed);
    num::Rng rng = num::Rng(seed).split("verify-grad");
    std::vector<Tensor<double>> xs;
    for (int i = 0; i < 2; ++i) xs.push_back(random_tensor({9, 5, 16}, rng));  // 3-way 1-shot, 2 queries each
    const std::vector<int> s_labels{0, 1, 2}, q_labels{0, 0, 1, 1, 2, 2};
    for (auto [n, t] : sc.named_tensors()) t.set_requires_grad(true);
    const auto named = sc.named_tensors();
    const std::vector<num::NamedTensor> params(named.begin(), named.end());
    const auto loss = [&] {
      const auto f = fsl::extract_features<double>(sc, xs, frozen).pooled;
      return fsl::episode_head<double>(num::narrow(f, 0, 0, 3), s_labels, num::narrow(f, 0, 3, 6), q_labels, 3, &sc,
                                       c.tau)
          .loss;
    };
    const auto report = num::finite_difference_check(loss, params, 1e-4, tol);
    worst = std::max(worst, report.worst());
    for (const auto& e : report.entries) elements += e.elements;
    ok = ok && report.passed();
  }
  return {"gradients", ok,
          std::to_string(elements) + " elements, max rel err " + sci(worst) + " (tol " + sci(tol) + ")"};
}

CheckResult check_prototypes(int cases, std::uint64_t seed) {
  num::Rng rng = num::Rng(seed).split("verify-prototypes");
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    const int ways = pick(rng, 1, 5), shots = pick(rng, 1, 5), d = pick(rng, 2, 8);
    const auto s = random_tensor({static_cast<std::size_t>(ways * shots), static_cast<std::size_t>(d)}, rng);
    // Labels in shuffled order so grouping is actually exercised.
    std::vector<int> labels;
    for (int k = 0; k < ways * shots; ++k) labels.push_back(k % ways);
    for (std::size_t k = labels.size(); k > 1; --k) std::swap(labels[k - 1], labels[rng.below(k)]);
    const auto p = fsl::compute_prototypes<double>(s, labels, ways);
    worst = std::max(worst, oracle::max_diff(p, 0, oracle::prototypes(oracle::rows_of(s), labels, ways)));
  }
  return verdict("prototypes", worst, 1e-10, cases);
}

CheckResult check_frozen_block(int cases, std::uint64_t seed) {
  num::Rng rng = num::Rng(seed).split("verify-frozen");
  double worst = 0.0, identity = 0.0;
  for (int i = 0; i < cases; ++i) {
    const int heads = pick(rng, 1, 2), d = 4 * pick(rng, 1, 2), m = pick(rng, 1, 4), t = pick(rng, 2, 6);
    const auto b = static_cast<std::size_t>(pick(rng, 1, 2));
    const auto w = random_layers(d, 1, heads, rng.next_u64());
    const auto f = random_tensor({b, static_cast<std::size_t>(m), static_cast<std::size_t>(d)}, rng);
    const auto x = random_tensor({b, static_cast<std::size_t>(t), static_cast<std::size_t>(d)}, rng);
    const auto out = fsl::frozen_block<double>(f, x, w[0], heads);
    for (std::size_t e = 0; e < b; ++e) {
      const auto o = oracle::frozen(w[0], oracle::rows_of(f, e), oracle::rows_of(x, e), heads);
      const std::size_t off = e * static_cast<std::size_t>(m * d);
      worst = std::max({worst, oracle::max_diff(out.f_att, off, o.f_att), oracle::max_diff(out.f_mlp, off, o.f_mlp),
                        oracle::max_diff(out.h, off, o.h)});
    }
    for (std::size_t k = 0; k < out.h.numel(); ++k) {
      identity = std::max(identity, std::abs(out.h[k] - (out.f_mlp[k] + out.f_att[k])));
    }
  }
  auto r = verdict("frozen-block", worst, 1e-10, cases);
  r.passed = r.passed && identity == 0.0;
  r.detail += ", h - (f_mlp + f_att) " + sci(identity);
  return r;
}

CheckResult check_combine(int cases, std::uint64_t seed) {
  num::Rng rng = num::Rng(seed).split("verify-combine");
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    const int n = pick(rng, 1, 3), m = pick(rng, 1, 4), d = 2 * pick(rng, 2, 4);
    const auto b = static_cast<std::size_t>(pick(rng, 1, 2));
    const auto sc = random_chain(small_side(d, n, m, 2), rng.next_u64(), 0.4);
    std::vector<Tensor<double>> feats;
    for (int k = 0; k < 3 * n; ++k) {
      feats.push_back(random_tensor({b, static_cast<std::size_t>(m), static_cast<std::size_t>(d)}, rng));
    }
    const auto w = fsl::combine_weights(sc, feats.back());
    const auto agg = fsl::combine(sc, feats, w);
    for (std::size_t e = 0; e < b; ++e) {
      const auto logits = oracle::bottleneck(*sc.combine_weight, Mat{oracle::mean_rows(oracle::rows_of(feats.back(), e))});
      const auto ow = oracle::softmax(logits[0]);
      std::vector<Mat> fm;
      for (const auto& f : feats) fm.push_back(oracle::rows_of(f, e));
      for (std::size_t k = 0; k < ow.size(); ++k) worst = std::max(worst, std::abs(w[e * ow.size() + k] - ow[k]));
      worst = std::max(worst, oracle::max_diff(agg, e * static_cast<std::size_t>(m * d),
                                               oracle::combine(*sc.combine_shared, fm, ow)));
    }
  }
  return verdict("combine", worst, 1e-10, cases);
}

CheckResult check_sq(fsl::SqMode mode, int cases, std::uint64_t seed) {
  num::Rng rng = num::Rng(seed).split("verify-sq").split(static_cast<std::uint64_t>(mode));
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    const int ways = pick(rng, 1, 5), nq = pick(rng, 1, 12), d = pick(rng, 2, 8);
    const double alpha = rng.uniform();
    const auto sc = random_chain(small_side(d, 1, 2, 1), rng.next_u64(), 0.5);
    const auto s = random_tensor({static_cast<std::size_t>(ways), static_cast<std::size_t>(d)}, rng);
    const auto q = random_tensor({static_cast<std::size_t>(nq), static_cast<std::size_t>(d)}, rng);
    const auto out = fsl::sq_attention<double>(s, q, &*sc.sq_proj, alpha, mode);
    const Mat Q = oracle::rows_of(q);
    const Mat expect =
        oracle::sq(oracle::rows_of(s), Q, oracle::bottleneck(*sc.sq_proj, Q), alpha, mode == fsl::SqMode::softmax);
    worst = std::max(worst, oracle::max_diff(out, 0, expect));
  }
  return verdict(std::string("sq-") + fsl::to_string(mode), worst, 1e-10, cases);
}

CheckResult check_combine_weights(int inputs, std::uint64_t seed) {
  const auto c = fsl::SideChainConfig::for_backbone(vit::BackboneConfig{});
  auto sc = fsl::init_side_chain<float>(c, seed);
  // Trained-looking head: the default init leaves the logits nearly uniform.
  num::Rng rng = num::Rng(seed).split("verify-weights");
  for (auto [name, t] : sc.named_tensors()) {
    if (name.starts_with("combine.weight")) {
      for (auto& v : t.mutable_data()) v = static_cast<float>(0.5 * rng.normal());
    }
  }
  const std::size_t k = static_cast<std::size_t>(3 * c.num_layers);
  double worst_sum = 0.0, min_w = 1.0;
  bool count_ok = true;
  num::NoGradGuard no_grad;
  for (int i = 0; i < inputs; ++i) {
    const double scale = std::pow(10.0, rng.uniform(-2.0, 2.0));
    std::vector<float> h(static_cast<std::size_t>(c.side_tokens * c.embed_dim));
    for (auto& v : h) v = static_cast<float>(scale * rng.normal());
    const Tensor<float> h_last({1, static_cast<std::size_t>(c.side_tokens), static_cast<std::size_t>(c.embed_dim)},
                               std::move(h));
    const auto w = fsl::combine_weights(sc, h_last);
    count_ok = count_ok && w.numel() == k;
    double s = 0.0;
    for (float v : w.data()) {
      s += v;
      min_w = std::min(min_w, static_cast<double>(v));
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  return {"combine-weights", count_ok && min_w >= 0.0 && worst_sum < 1e-6,
          std::to_string(inputs) + " inputs, " + std::to_string(k) + " weights each, min " + sci(min_w) +
              ", max |sum - 1| " + sci(worst_sum)};
}

CheckResult check_sq_reduction(const fsl::SideChain<float>& params, const vit::Backbone<float>& bb,
                               const train::FeatureBank& bank, const data::ClassSplit& split,
                               const train::EvalConfig& eval) {
  auto sc = params.cast<float>();
  sc.config.alpha = 0.0;
  sc.config.ablation.sq_attention = true;
  if (!sc.sq_proj) return {"sq-reduction", false, "parameters carry no SQ projection"};
  std::size_t queries = 0, equal = 0;
  num::NoGradGuard no_grad;
  for (int e = 0; e < eval.episodes; ++e) {
    const auto ep = train::eval_episode(split, eval, e);
    auto refs = ep.support;
    refs.insert(refs.end(), ep.query.begin(), ep.query.end());
    const auto f = fsl::extract_features<float>(sc, bank.gather(refs), bb.layers).pooled;
    const auto s = num::narrow(f, 0, 0, ep.support.size());
    const auto q = num::narrow(f, 0, ep.support.size(), ep.query.size());
    const auto with = fsl::episode_head<float>(s, ep.support_labels, q, {}, ep.spec.ways, &sc, sc.config.tau);
    const auto plain = fsl::episode_head<float>(s, ep.support_labels, q, {}, ep.spec.ways, nullptr, sc.config.tau);
    for (std::size_t j = 0; j < with.predictions.size(); ++j) equal += with.predictions[j] == plain.predictions[j];
    queries += with.predictions.size();
  }
  return {"sq-reduction", queries > 0 && equal == queries,
          std::to_string(eval.episodes) + " episodes, " + std::to_string(equal) + "/" + std::to_string(queries) +
              " predictions equal"};
}

CheckResult check_param_counts() {
  vit::BackboneConfig vits;
  vits.image_size = 224;
  vits.patch_size = 16;
  vits.embed_dim = 384;
  vits.num_layers = 12;
  vits.num_heads = 6;
  const auto big = fsl::count_params(fsl::SideChainConfig::for_backbone(vits), vits);

  // Default toy config by hand (d=64, n=6, m=4, r=48, r_a=8). A bottleneck
  // d->r->d with biases has 2dr + r + d elements: 6256 at r=48, 1096 at r=8.
  // Per layer: prompt 4*64 + proj 6256 + q/k/v 3*1096 + ln 2*64 + mlp 6256
  // = 16184. Then h0 256, shared combine 6256, weight head 64*48 + 48 +
  // 48*18 + 18 = 4002, SQ projection 6256.
  const std::size_t hand = 6 * 16184 + 256 + 6256 + 4002 + 6256;
  const vit::BackboneConfig toy;
  const auto small = fsl::count_params(fsl::SideChainConfig::for_backbone(toy), toy);
  std::size_t sum = 0;
  for (const auto& [k, v] : big.breakdown) sum += v;
  const bool ok = big.trainable >= 1'000'000 && big.trainable <= 1'500'000 && sum == big.trainable &&
                  small.trainable == hand;
  return {"param-counts", ok,
          "ViT-S-like trainable " + std::to_string(big.trainable) + " (without SQ and H_0 " +
              std::to_string(big.trainable_without_sq_h0()) + "), toy " + std::to_string(small.trainable) +
              " vs hand count " + std::to_string(hand)};
}

CheckResult check_ci_formula(int lists, std::uint64_t seed) {
  num::Rng rng = num::Rng(seed).split("verify-ci");
  double worst = 0.0;
  for (int i = 0; i < lists; ++i) {
    const int e = pick(rng, 2, 400);
    std::vector<double> acc(static_cast<std::size_t>(e));
    for (auto& a : acc) a = static_cast<double>(rng.below(76)) / 75.0;
    const auto s = train::summarize(acc);
    long double mean = 0;
    for (double a : acc) mean += a;
    mean /= e;
    long double ss = 0;
    for (double a : acc) ss += (a - mean) * (a - mean);
    const long double ci = 100.0L * 1.96L * std::sqrt(ss / (e - 1)) / std::sqrt(static_cast<long double>(e));
    worst = std::max({worst, std::abs(static_cast<double>(100.0L * mean) - s.mean),
                      std::abs(static_cast<double>(ci) - s.ci95)});
  }
  return verdict("ci-formula", worst, 1e-9, lists);
}

Digest probe_activations(const vit::Backbone<float>& bb, const data::Dataset& ds, const data::ImageRef& image) {
  num::NoGradGuard no_grad;
  const std::vector<data::ImageRef> refs{image};
  const auto xs = vit::backbone_forward(bb, data::gather_images(ds, refs, bb.config.image_size), 1);
  Sha256 h;
  for (const auto& x : xs) h.update_values(x.data());
  return h.finish();
}

std::vector<CheckResult> run_suite(std::uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(check_gradients(seed));
  out.push_back(check_prototypes(100, seed));
  out.push_back(check_frozen_block(100, seed));
  out.push_back(check_combine(100, seed));
  out.push_back(check_sq(fsl::SqMode::softmax, 100, seed));
  out.push_back(check_sq(fsl::SqMode::raw, 100, seed));
  out.push_back(check_combine_weights(1000, seed));
  out.push_back(check_param_counts());
  out.push_back(check_ci_formula(50, seed));

  // Training-level properties on a small random backbone.
  data::SyntheticDatasetSpec spec;
  spec.num_classes = 12;
  spec.images_per_class = 30;
  spec.image_size = 10;
  spec.seed = seed;
  const auto ds = data::generate_dataset(spec);
  const auto splits = data::split_classes(12, 30, 0.5, num::Rng(seed).split("split"), 5);
  vit::BackboneConfig bc;
  bc.image_size = 8;
  bc.embed_dim = 16;
  bc.num_layers = 2;
  bc.num_heads = 2;
  bc.mlp_ratio = 2.0;
  bc.num_base_classes = 6;
  const auto bb = vit::init_backbone<float>(bc, seed);
  std::vector<int> all(12);
  for (int i = 0; i < 12; ++i) all[static_cast<std::size_t>(i)] = i;
  const auto bank = train::FeatureBank::build(bb, ds, all);
  auto model = fsl::SideChainConfig::for_backbone(bc);
  model.side_tokens = 3;
  model.bottleneck = 8;
  model.attn_bottleneck = 4;
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.episodes_per_epoch = 10;
  tc.episode.queries = 5;
  tc.seed = seed;
  train::EvalConfig ev;
  ev.episodes = 40;
  ev.episode.queries = 5;
  ev.seed = seed;

  const data::ImageRef probe{splits.novel.classes.front(), 0};
  const Digest bb_before = vit::checkpoint_hash(bb), probe_before = probe_activations(bb, ds, probe);
  const Digest bank_before = bank.digest();
  const auto a = train::train(bb, bank, splits.base, model, tc);
  const auto b = train::train(bb, bank, splits.base, model, tc);
  out.push_back({"frozen-backbone", vit::checkpoint_hash(bb) == bb_before &&
                                        probe_activations(bb, ds, probe) == probe_before && bank.digest() == bank_before,
                 "checkpoint hash, probe activations and cached activations unchanged by training"});

  const Digest params_hash = fsl::side_chain_hash(a.params);
  auto ev2 = ev;
  ev2.seed = seed + 1;
  const auto e1 = train::evaluate(a.params, bb, bank, splits.novel, ev);
  ev.workers = 3;
  const auto e3 = train::evaluate(a.params, bb, bank, splits.novel, ev);
  ev.workers = 1;
  const auto e_other = train::evaluate(a.params, bb, bank, splits.novel, ev2);
  out.push_back({"reproducible", a.report.to_text() == b.report.to_text() && fsl::side_chain_hash(b.params) == params_hash,
                 "identical seeds give identical reports and parameter bytes"});
  out.push_back({"worker-independent", e1.to_text() == e3.to_text(), "1 and 3 evaluation workers agree byte for byte"});
  out.push_back({"seed-isolation",
                 fsl::side_chain_hash(a.params) == params_hash && e_other.episode_digest != e1.episode_digest,
                 "evaluation seed changes the episodes, never the trained parameters"});
  out.push_back(check_sq_reduction(a.params, bb, bank, splits.novel, ev));
  return out;
}

}  // namespace efsl::verify
