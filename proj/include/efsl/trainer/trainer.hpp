// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "efsl/blocks/blocks.hpp"
#include "efsl/episodes/episode.hpp"
#include "efsl/trainer/feature_bank.hpp"

namespace efsl::train {

struct TrainConfig {
  int epochs = 5;
  int episodes_per_epoch = 200;
  data::EpisodeSpec episode;  // meta-training episodes
  double lr = 5e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
  std::int64_t total_steps() const { return static_cast<std::int64_t>(epochs) * episodes_per_epoch; }
  std::map<std::string, std::string> to_kv() const;
};

struct EvalConfig {
  int episodes = 320;
  data::EpisodeSpec episode;
  std::uint64_t seed = 1;
  int workers = 1;

  void validate() const;
  std::map<std::string, std::string> to_kv() const;
};

/// Mean and 95% half-width, both in percent: 1.96 * sd / sqrt(E) with the
/// sample (E - 1) standard deviation; zero width for a single episode.
struct AccuracySummary {
  double mean = 0.0;
  double ci95 = 0.0;
};
AccuracySummary summarize(std::span<const double> accuracies);

struct MetricsReport {
  std::string kind;
  std::map<std::string, std::string> config;  // resolved config echo
  std::size_t episodes = 0;
  double accuracy_mean = 0.0;  // percent
  double ci95 = 0.0;           // percent
  std::vector<double> episode_accuracies;
  std::vector<double> loss_curve;  // one entry per optimizer step
  std::size_t trainable = 0, frozen = 0;
  std::map<std::string, std::size_t> breakdown;
  std::string episode_digest;  // SHA-256 over the hashes of every episode used
  std::string provenance;      // SHA-256 over config, checkpoint and parameters
  double wall_time = 0.0;      // seconds; kept out of to_text()

  /// Canonical key/value text: fixed field order, accuracies and CI with two
  /// decimals. Byte-identical for identical runs.
  std::string to_text() const;
  std::string timing_text() const;
};

struct TrainHooks {
  // Runs before every step; lets tests poison parameters.
  std::function<void(std::int64_t step, fsl::SideChain<float>& params)> before_step;
  // Where the last parameters with a finite loss go when training diverges.
  std::filesystem::path last_good_path;
};

struct TrainResult {
  fsl::SideChain<float> params;
  MetricsReport report;
};

/// Episodic meta-training of a fresh side chain on the base split. The
/// backbone is read-only: its layers are shared, never copied or updated.
TrainResult train(const vit::Backbone<float>& bb, const FeatureBank& bank, const data::ClassSplit& base,
                  const fsl::SideChainConfig& model, const TrainConfig& config, const TrainHooks& hooks = {});

/// Transductive evaluation on `split` (the SQ step sees each episode's
/// unlabeled queries). Episode e draws from its own substream of the seed and
/// results are reduced in episode order, so the worker count never changes
/// the report.
MetricsReport evaluate(const fsl::SideChain<float>& params, const vit::Backbone<float>& bb, const FeatureBank& bank,
                       const data::ClassSplit& split, const EvalConfig& config);

/// Prototype classification on mean-pooled final-layer backbone features.
/// `bank` must hold `bb`'s activations; `bb` is used for accounting only.
MetricsReport baseline_frozen_pn(const vit::Backbone<float>& bb, const FeatureBank& bank, const data::ClassSplit& split,
                                 const EvalConfig& config, double tau);

/// Episodic fine-tuning of a copy of the whole encoder with the same cosine
/// prototype head and episode stream as train(); evaluated like the frozen
/// baseline. `bb` itself is left untouched.
MetricsReport baseline_full_finetune(const vit::Backbone<float>& bb, const data::Dataset& ds,
                                     const data::SplitPair& splits, double tau, const TrainConfig& config,
                                     const EvalConfig& eval);

/// Episodes evaluated by `evaluate` for `config`, in order.
data::Episode eval_episode(const data::ClassSplit& split, const EvalConfig& config, int index);
/// Episode trained on at `step`; depends only on the split, spec and seed.
data::Episode train_episode(const data::ClassSplit& split, const TrainConfig& config, std::int64_t step);

struct AblationRow {
  std::string name;
  fsl::Ablation ablation;
};

struct AblationResult {
  std::string name;
  std::size_t trainable = 0;
  AccuracySummary one_shot, five_shot;
  std::string train_episode_digest;
};

struct AblationTable {
  std::vector<AblationResult> rows;
  std::string to_text() const;
};

/// Full model first, then one row per entry; every row trains with the same
/// seed and episode stream and is evaluated on the same 1- and 5-shot episodes.
AblationTable run_ablation(const vit::Backbone<float>& bb, const FeatureBank& bank, const data::SplitPair& splits,
                           const fsl::SideChainConfig& model, const TrainConfig& config, const EvalConfig& eval,
                           const std::vector<AblationRow>& rows);

struct EmbeddingRow {
  std::string id;
  std::string role;  // support, query, prototype, sq_prototype
  int cls = 0;       // episode class
  std::vector<float> feature;
};

std::vector<EmbeddingRow> export_embeddings(const fsl::SideChain<float>& params, const vit::Backbone<float>& bb,
                                            const FeatureBank& bank, const data::Episode& episode);
std::string embeddings_to_text(const std::vector<EmbeddingRow>& rows);

/// Frozen layer weights as the side chain consumes them.
std::vector<vit::LayerWeights<float>> frozen_layers(const vit::Backbone<float>& bb);

}  // namespace efsl::train
