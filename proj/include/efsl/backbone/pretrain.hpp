// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "efsl/backbone/vit.hpp"
#include "efsl/episodes/dataset.hpp"
#include "efsl/episodes/episode.hpp"

namespace efsl::vit {

struct PretrainConfig {
  int epochs = 10;
  int batch = 16;
  double lr = 2e-3;
  double weight_decay = 0.05;
  double warmup_fraction = 0.05;
  double clip_norm = 1.0;
  bool flip = true;
  std::uint64_t seed = 1;

  void validate() const;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;  // fraction over all base-split images, no flips
};

struct PretrainResult {
  Backbone<float> backbone;
  PretrainReport report;
};

/// Supervised cross-entropy training of the whole toy ViT on the base
/// classes (label = position in base.classes). Centre crop to the backbone's
/// image size plus random horizontal flips. epochs == 0 returns the
/// initialisation. Throws NumericError on a non-finite loss.
PretrainResult pretrain_backbone(const data::Dataset& ds, const data::ClassSplit& base, const BackboneConfig& config,
                                 const PretrainConfig& options);

/// Top-1 accuracy of the pretraining head on the given classes (first
/// `per_class` images of each, all when negative).
double base_accuracy(const Backbone<float>& bb, const data::Dataset& ds, const data::ClassSplit& base,
                     int per_class = -1);

}  // namespace efsl::vit
