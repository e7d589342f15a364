// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "efsl/core/hash.hpp"
#include "efsl/episodes/dataset.hpp"
#include "efsl/numerics/rng.hpp"

namespace efsl::data {

struct EpisodeSpec {
  int ways = 5;
  int shots = 1;
  int queries = 15;

  void validate() const;
  std::string str() const;  // "5-way 1-shot 15-query"
};

/// A set of original class ids, kept sorted.
struct ClassSplit {
  std::vector<int> classes;
  int images_per_class = 0;
};

struct SplitPair {
  ClassSplit base;
  ClassSplit novel;
};

/// Shuffles the classes with `rng` and assigns round(base_fraction * C) of
/// them to the base side. Throws ValidationError when either side has fewer
/// than `ways` classes.
SplitPair split_classes(int num_classes, int images_per_class, double base_fraction, num::Rng rng, int ways);

struct ImageRef {
  int cls = 0;    // original class id
  int index = 0;  // image index within the class
  bool operator==(const ImageRef&) const = default;
};

/// Support and query sets are class-major: episode class c owns entries
/// [c * K, (c + 1) * K) of the support and [c * Q, (c + 1) * Q) of the query.
struct Episode {
  EpisodeSpec spec;
  std::vector<int> class_map;  // episode class -> original class
  std::vector<ImageRef> support;
  std::vector<int> support_labels;
  std::vector<ImageRef> query;
  std::vector<int> query_labels;

  Digest hash() const;
};

/// Draws N classes uniformly without replacement, then K + Q distinct images
/// per class. Deterministic in the rng state.
Episode sample_episode(const ClassSplit& split, const EpisodeSpec& spec, num::Rng& rng);

/// Centre-cropped images for `refs`, packed as [refs.size(), C, crop, crop].
std::vector<float> gather_images(const Dataset& ds, std::span<const ImageRef> refs, int crop);

}  // namespace efsl::data
