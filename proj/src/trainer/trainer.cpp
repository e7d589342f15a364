// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/trainer/trainer.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "efsl/core/error.hpp"
#include "efsl/core/format.hpp"
#include "efsl/core/log.hpp"
#include "efsl/numerics/ops.hpp"
#include "efsl/numerics/optim.hpp"

namespace efsl::train {

using num::Tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void check_compatible(const fsl::SideChainConfig& model, const vit::BackboneConfig& bb) {
  if (model.embed_dim != bb.embed_dim || model.num_layers != bb.num_layers || model.num_heads != bb.num_heads) {
    throw ShapeError("side chain (d=" + std::to_string(model.embed_dim) + ", n=" + std::to_string(model.num_layers) +
                     ", heads=" + std::to_string(model.num_heads) + ") does not match the backbone (d=" +
                     std::to_string(bb.embed_dim) + ", n=" + std::to_string(bb.num_layers) +
                     ", heads=" + std::to_string(bb.num_heads) + ")");
  }
}

void check_bank(const FeatureBank& bank, const data::ClassSplit& split) {
  for (int c : split.classes) {
    if (!bank.contains(c)) throw ValidationError("feature bank is missing class " + std::to_string(c));
  }
}

std::vector<data::ImageRef> episode_refs(const data::Episode& ep) {
  std::vector<data::ImageRef> refs = ep.support;
  refs.insert(refs.end(), ep.query.begin(), ep.query.end());
  return refs;
}

fsl::EpisodeResult<float> side_episode(const fsl::SideChain<float>& sc,
                                       const std::vector<vit::LayerWeights<float>>& frozen, const FeatureBank& bank,
                                       const data::Episode& ep) {
  const auto refs = episode_refs(ep);
  const auto xs = bank.gather(refs);
  const auto ex = fsl::extract_features<float>(sc, xs, frozen);
  const auto ns = ep.support.size();
  const auto support = num::narrow(ex.pooled, 0, 0, ns);
  const auto query = num::narrow(ex.pooled, 0, ns, ep.query.size());
  return fsl::episode_head<float>(support, ep.support_labels, query, ep.query_labels, ep.spec.ways, &sc,
                                  sc.config.tau);
}

fsl::EpisodeResult<float> frozen_episode(const FeatureBank& bank, const data::Episode& ep, double tau) {
  const auto support = bank.pooled_last(ep.support);
  const auto query = bank.pooled_last(ep.query);
  return fsl::episode_head<float>(support, ep.support_labels, query, ep.query_labels, ep.spec.ways, nullptr, tau);
}

// Runs fn(e) for every episode on `workers` threads, each with its own
// episode range; results land in per-episode slots so order never matters.
template <typename Fn>
void parallel_episodes(int episodes, int workers, Fn fn) {
  workers = std::max(1, std::min(workers, episodes));
  if (workers == 1) {
    num::NoGradGuard no_grad;
    for (int e = 0; e < episodes; ++e) fn(e);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> threads;
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        num::NoGradGuard no_grad;  // grad mode is per thread
        for (int e = w; e < episodes; e += workers) fn(e);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
}

struct EpisodeOutcome {
  double accuracy = 0.0;
  Digest hash{};
};

template <typename Fn>
MetricsReport run_eval(const data::ClassSplit& split, const EvalConfig& config, Fn accuracy_of) {
  std::vector<EpisodeOutcome> out(static_cast<std::size_t>(config.episodes));
  parallel_episodes(config.episodes, config.workers, [&](int e) {
    const auto ep = eval_episode(split, config, e);
    out[static_cast<std::size_t>(e)] = {accuracy_of(ep), ep.hash()};
  });
  MetricsReport r;
  r.kind = "eval";
  r.episodes = out.size();
  Sha256 h;
  for (const auto& o : out) {
    r.episode_accuracies.push_back(o.accuracy);
    h.update_values(std::span<const std::uint8_t>(o.hash));
  }
  r.episode_digest = to_hex(h.finish());
  const auto s = summarize(r.episode_accuracies);
  r.accuracy_mean = s.mean;
  r.ci95 = s.ci95;
  return r;
}

std::string kv_text(const std::map<std::string, std::string>& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + "=" + v + "\n";
  return s;
}

std::string provenance_of(const std::map<std::string, std::string>& config, const Digest& backbone,
                          const Digest* params) {
  Sha256 h;
  h.update(kv_text(config));
  h.update_values(std::span<const std::uint8_t>(backbone));
  if (params) h.update_values(std::span<const std::uint8_t>(*params));
  return to_hex(h.finish());
}

void merge(std::map<std::string, std::string>& into, const std::map<std::string, std::string>& from,
           const std::string& prefix = "") {
  for (const auto& [k, v] : from) into[prefix + k] = v;
}

void fill_counts(MetricsReport& r, const fsl::SideChainConfig& model, const vit::BackboneConfig& bb) {
  const auto pc = fsl::count_params(model, bb);
  r.trainable = pc.trainable;
  r.frozen = pc.frozen;
  r.breakdown = pc.breakdown;
}

}  // namespace

std::vector<vit::LayerWeights<float>> frozen_layers(const vit::Backbone<float>& bb) { return bb.layers; }

data::Episode eval_episode(const data::ClassSplit& split, const EvalConfig& config, int index) {
  auto rng = num::Rng(config.seed).split("eval").split(static_cast<std::uint64_t>(index));
  return data::sample_episode(split, config.episode, rng);
}

data::Episode train_episode(const data::ClassSplit& split, const TrainConfig& config, std::int64_t step) {
  auto rng = num::Rng(config.seed).split("train-episodes").split(static_cast<std::uint64_t>(step));
  return data::sample_episode(split, config.episode, rng);
}

TrainResult train(const vit::Backbone<float>& bb, const FeatureBank& bank, const data::ClassSplit& base,
                  const fsl::SideChainConfig& model, const TrainConfig& config, const TrainHooks& hooks) {
  const auto t0 = Clock::now();
  config.validate();
  model.validate();
  check_compatible(model, bb.config);
  check_bank(bank, base);
  const Digest bb_before = vit::checkpoint_hash(bb);

  auto sc = fsl::init_side_chain<float>(model, config.seed);
  auto params = sc.parameters();
  for (auto& p : params) p.set_requires_grad(true);
  num::AdamW<float> opt(params, {.weight_decay = config.weight_decay});
  const auto frozen = frozen_layers(bb);

  MetricsReport r;
  r.kind = "train";
  const std::int64_t total = config.total_steps();
  auto last_good = sc.cast<float>();
  Sha256 episodes_hash;
  std::vector<double> last_epoch;
  for (std::int64_t step = 0; step < total; ++step) {
    if (hooks.before_step) hooks.before_step(step, sc);
    const auto ep = train_episode(base, config, step);
    const Digest eh = ep.hash();
    episodes_hash.update_values(std::span<const std::uint8_t>(eh));
    const double lr = num::cosine_lr(config.lr, step, total);

    fsl::EpisodeResult<float> res;
    double loss = 0.0;
    {
      num::FiniteCheckGuard relaxed(false);  // a NaN here is reported below, with context
      res = side_episode(sc, frozen, bank, ep);
      loss = static_cast<double>(res.loss.item());
    }
    if (!std::isfinite(loss)) {
      std::string where;
      if (!hooks.last_good_path.empty()) {
        fsl::to_archive(last_good, config.seed).save(hooks.last_good_path);
        where = "; last finite parameters saved to " + hooks.last_good_path.string();
      }
      throw NumericError("non-finite training loss at step " + std::to_string(step) + " (lr " + format_real(lr) +
                         ")" + where);
    }
    last_good = sc.cast<float>();
    r.loss_curve.push_back(loss);
    if (step >= total - config.episodes_per_epoch) last_epoch.push_back(res.accuracy);

    opt.zero_grad();
    num::backward(res.loss, std::span<const Tensor<float>>(params));
    num::clip_grad_norm<float>(params, config.clip_norm);
    opt.step(lr);
    if ((step + 1) % config.episodes_per_epoch == 0) {
      double s = 0.0;
      for (std::int64_t i = step + 1 - config.episodes_per_epoch; i <= step; ++i) s += r.loss_curve[i];
      log_info("train epoch ", (step + 1) / config.episodes_per_epoch, "/", config.epochs, " loss ",
               s / config.episodes_per_epoch);
    }
  }
  if (vit::checkpoint_hash(bb) != bb_before) throw InternalError("backbone weights changed during training");

  for (auto& p : params) p.set_requires_grad(false);
  merge(r.config, model.to_kv(), "model.");
  merge(r.config, config.to_kv());
  r.episodes = static_cast<std::size_t>(total);
  r.episode_accuracies = last_epoch;
  const auto s = summarize(last_epoch);
  r.accuracy_mean = s.mean;
  r.ci95 = s.ci95;
  r.episode_digest = to_hex(episodes_hash.finish());
  const Digest ph = fsl::side_chain_hash(sc);
  r.provenance = provenance_of(r.config, bb_before, &ph);
  fill_counts(r, model, bb.config);
  r.wall_time = seconds_since(t0);
  return {std::move(sc), std::move(r)};
}

MetricsReport evaluate(const fsl::SideChain<float>& params, const vit::Backbone<float>& bb, const FeatureBank& bank,
                       const data::ClassSplit& split, const EvalConfig& config) {
  const auto t0 = Clock::now();
  config.validate();
  params.config.validate();
  check_compatible(params.config, bb.config);
  check_bank(bank, split);
  const auto frozen = frozen_layers(bb);
  auto r = run_eval(split, config, [&](const data::Episode& ep) {
    return side_episode(params, frozen, bank, ep).accuracy;
  });
  merge(r.config, params.config.to_kv(), "model.");
  merge(r.config, config.to_kv());
  const Digest ph = fsl::side_chain_hash(params);
  r.provenance = provenance_of(r.config, vit::checkpoint_hash(bb), &ph);
  fill_counts(r, params.config, bb.config);
  r.wall_time = seconds_since(t0);
  return r;
}

MetricsReport baseline_frozen_pn(const vit::Backbone<float>& bb, const FeatureBank& bank,
                                 const data::ClassSplit& split, const EvalConfig& config, double tau) {
  const auto t0 = Clock::now();
  config.validate();
  if (!(tau > 0.0)) throw ValidationError("tau must be > 0");
  check_bank(bank, split);
  auto r = run_eval(split, config, [&](const data::Episode& ep) { return frozen_episode(bank, ep, tau).accuracy; });
  r.kind = "baseline-frozen-pn";
  merge(r.config, config.to_kv());
  r.config["model.tau"] = format_real(tau);
  r.provenance = provenance_of(r.config, vit::checkpoint_hash(bb), nullptr);
  r.frozen = bb.encoder_numel();
  r.wall_time = seconds_since(t0);
  return r;
}

MetricsReport baseline_full_finetune(const vit::Backbone<float>& bb, const data::Dataset& ds,
                                     const data::SplitPair& splits, double tau, const TrainConfig& config,
                                     const EvalConfig& eval) {
  const auto t0 = Clock::now();
  config.validate();
  eval.validate();
  if (!(tau > 0.0)) throw ValidationError("tau must be > 0");
  const Digest bb_before = vit::checkpoint_hash(bb);

  auto tuned = bb.cast<float>();
  std::vector<Tensor<float>> params;
  for (auto& [name, t] : tuned.named_tensors()) {
    if (name.rfind("head.", 0) == 0) continue;
    t.set_requires_grad(true);
    params.push_back(t);
  }
  num::AdamW<float> opt(params, {.weight_decay = config.weight_decay});
  const std::int64_t total = config.total_steps();
  MetricsReport r;
  Sha256 episodes_hash;
  for (std::int64_t step = 0; step < total; ++step) {
    const auto ep = train_episode(splits.base, config, step);
    const Digest eh = ep.hash();
    episodes_hash.update_values(std::span<const std::uint8_t>(eh));
    const auto refs = episode_refs(ep);
    const auto pixels = data::gather_images(ds, refs, bb.config.image_size);
    const auto xs = vit::backbone_forward(tuned, pixels, refs.size());
    const auto pooled = num::mean(xs.back(), 1);
    const auto ns = ep.support.size();
    const auto res = fsl::episode_head<float>(num::narrow(pooled, 0, 0, ns), ep.support_labels,
                                              num::narrow(pooled, 0, ns, ep.query.size()), ep.query_labels,
                                              ep.spec.ways, nullptr, tau);
    const double loss = static_cast<double>(res.loss.item());
    r.loss_curve.push_back(loss);
    opt.zero_grad();
    num::backward(res.loss, std::span<const Tensor<float>>(params));
    num::clip_grad_norm<float>(params, config.clip_norm);
    opt.step(num::cosine_lr(config.lr, step, total));
    if ((step + 1) % config.episodes_per_epoch == 0) {
      log_info("finetune epoch ", (step + 1) / config.episodes_per_epoch, "/", config.epochs);
    }
  }
  tuned.set_requires_grad(false);
  if (vit::checkpoint_hash(bb) != bb_before) throw InternalError("source backbone changed during fine-tuning");

  const auto bank = FeatureBank::build(tuned, ds, splits.novel.classes);
  auto loss_curve = std::move(r.loss_curve);
  r = run_eval(splits.novel, eval, [&](const data::Episode& ep) { return frozen_episode(bank, ep, tau).accuracy; });
  r.kind = "baseline-full-finetune";
  r.loss_curve = std::move(loss_curve);
  merge(r.config, config.to_kv());
  merge(r.config, eval.to_kv());
  r.config["model.tau"] = format_real(tau);
  const Digest th = vit::checkpoint_hash(tuned);
  r.provenance = provenance_of(r.config, bb_before, &th);
  r.trainable = tuned.encoder_numel();
  r.wall_time = seconds_since(t0);
  return r;
}

AblationTable run_ablation(const vit::Backbone<float>& bb, const FeatureBank& bank, const data::SplitPair& splits,
                           const fsl::SideChainConfig& model, const TrainConfig& config, const EvalConfig& eval,
                           const std::vector<AblationRow>& rows) {
  std::vector<AblationRow> all{{"full", model.ablation}};
  all.insert(all.end(), rows.begin(), rows.end());
  EvalConfig one = eval, five = eval;
  one.episode.shots = 1;
  five.episode.shots = 5;
  AblationTable table;
  for (const auto& row : all) {
    auto m = model;
    m.ablation = row.ablation;
    log_info("ablation row ", row.name);
    const auto tr = train(bb, bank, splits.base, m, config);
    AblationResult res;
    res.name = row.name;
    res.trainable = tr.report.trainable;
    res.train_episode_digest = tr.report.episode_digest;
    const auto r1 = evaluate(tr.params, bb, bank, splits.novel, one);
    const auto r5 = evaluate(tr.params, bb, bank, splits.novel, five);
    res.one_shot = {r1.accuracy_mean, r1.ci95};
    res.five_shot = {r5.accuracy_mean, r5.ci95};
    table.rows.push_back(res);
  }
  return table;
}

std::vector<EmbeddingRow> export_embeddings(const fsl::SideChain<float>& params, const vit::Backbone<float>& bb,
                                            const FeatureBank& bank, const data::Episode& episode) {
  check_compatible(params.config, bb.config);
  num::NoGradGuard no_grad;
  const auto res = side_episode(params, frozen_layers(bb), bank, episode);
  const std::size_t d = bank.dim();
  std::vector<EmbeddingRow> rows;
  auto add = [&](const std::string& id, const std::string& role, int cls, const Tensor<float>& t, std::size_t i) {
    const auto v = t.data().subspan(i * d, d);
    rows.push_back({id, role, cls, std::vector<float>(v.begin(), v.end())});
  };
  auto image_id = [](const char* p, std::size_t i, const data::ImageRef& r) {
    return std::string(p) + std::to_string(i) + ":c" + std::to_string(r.cls) + "i" + std::to_string(r.index);
  };
  for (std::size_t i = 0; i < episode.support.size(); ++i) {
    add(image_id("s", i, episode.support[i]), "support", episode.support_labels[i], res.support, i);
  }
  for (std::size_t i = 0; i < episode.query.size(); ++i) {
    add(image_id("q", i, episode.query[i]), "query", episode.query_labels[i], res.query, i);
  }
  for (int c = 0; c < episode.spec.ways; ++c) {
    add("p" + std::to_string(c), "prototype", c, res.prototypes, static_cast<std::size_t>(c));
  }
  for (int c = 0; c < episode.spec.ways; ++c) {
    add("sq" + std::to_string(c), "sq_prototype", c, res.sq_prototypes, static_cast<std::size_t>(c));
  }
  return rows;
}

}  // namespace efsl::train
