// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "efsl/backbone/vit.hpp"
#include "efsl/episodes/episode.hpp"

namespace efsl::train {

/// Frozen backbone activations X_1..X_n for every image of a set of classes,
/// computed once. The backbone never changes during side-chain training, so
/// episodes read their activations from here instead of re-running it.
class FeatureBank {
 public:
  FeatureBank() = default;

  // Images are centre-cropped to the backbone input size, as everywhere else.
  static FeatureBank build(const vit::Backbone<float>& bb, const data::Dataset& ds, std::span<const int> classes,
                           std::size_t chunk = 64);

  int num_layers() const { return static_cast<int>(layers_.size()); }
  std::size_t tokens() const { return tokens_; }
  std::size_t dim() const { return dim_; }
  bool contains(int cls) const;

  /// Per-layer activations for `refs`, each [refs.size(), tokens, d].
  std::vector<num::Tensor<float>> gather(std::span<const data::ImageRef> refs) const;
  /// Final-layer activations averaged over tokens: [refs.size(), d].
  num::Tensor<float> pooled_last(std::span<const data::ImageRef> refs) const;
  /// SHA-256 over every stored activation.
  Digest digest() const;

 private:
  std::size_t row(const data::ImageRef& r) const;

  std::vector<int> slot_;  // class id -> slot, -1 if absent
  int per_class_ = 0;
  std::size_t tokens_ = 0, dim_ = 0;
  std::vector<std::vector<float>> layers_;  // [slots * per_class, tokens, d] per layer
};

}  // namespace efsl::train
