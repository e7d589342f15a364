// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/episodes/episode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "efsl/core/binary.hpp"
#include "efsl/core/error.hpp"

namespace efsl::data {

namespace {

template <typename V>
void shuffle(std::vector<V>& v, num::Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

void EpisodeSpec::validate() const {
  if (ways < 2) throw ValidationError("episode ways must be >= 2, got " + std::to_string(ways));
  if (shots < 1) throw ValidationError("episode shots must be >= 1, got " + std::to_string(shots));
  if (queries < 1) throw ValidationError("episode queries must be >= 1, got " + std::to_string(queries));
}

std::string EpisodeSpec::str() const {
  return std::to_string(ways) + "-way " + std::to_string(shots) + "-shot " + std::to_string(queries) + "-query";
}

SplitPair split_classes(int num_classes, int images_per_class, double base_fraction, num::Rng rng, int ways) {
  if (!(base_fraction > 0.0 && base_fraction < 1.0)) {
    throw ValidationError("base fraction must lie in (0, 1)");
  }
  std::vector<int> order(static_cast<std::size_t>(num_classes));
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  const int n_base = static_cast<int>(std::lround(base_fraction * num_classes));
  SplitPair out;
  out.base.classes.assign(order.begin(), order.begin() + n_base);
  out.novel.classes.assign(order.begin() + n_base, order.end());
  std::sort(out.base.classes.begin(), out.base.classes.end());
  std::sort(out.novel.classes.begin(), out.novel.classes.end());
  out.base.images_per_class = out.novel.images_per_class = images_per_class;
  const auto base_n = static_cast<int>(out.base.classes.size());
  const auto novel_n = static_cast<int>(out.novel.classes.size());
  if (base_n < ways || novel_n < ways) {
    throw ValidationError("class split " + std::to_string(base_n) + " base / " + std::to_string(novel_n) +
                          " novel leaves fewer than " + std::to_string(ways) + " classes on one side");
  }
  return out;
}

Digest Episode::hash() const {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(spec.ways));
  w.u32(static_cast<std::uint32_t>(spec.shots));
  w.u32(static_cast<std::uint32_t>(spec.queries));
  for (int c : class_map) w.u32(static_cast<std::uint32_t>(c));
  for (const auto* set : {&support, &query}) {
    for (const auto& r : *set) {
      w.u32(static_cast<std::uint32_t>(r.cls));
      w.u32(static_cast<std::uint32_t>(r.index));
    }
  }
  return sha256(w.bytes());
}

Episode sample_episode(const ClassSplit& split, const EpisodeSpec& spec, num::Rng& rng) {
  spec.validate();
  const auto n_classes = split.classes.size();
  if (n_classes < static_cast<std::size_t>(spec.ways)) {
    throw ValidationError("split has " + std::to_string(n_classes) + " classes, episode needs " +
                          std::to_string(spec.ways));
  }
  Episode ep;
  ep.spec = spec;
  // Partial Fisher-Yates: the first `ways` slots become the episode classes.
  std::vector<int> pool = split.classes;
  for (int i = 0; i < spec.ways; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(n_classes - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    ep.class_map.push_back(pool[static_cast<std::size_t>(i)]);
  }
  const int need = spec.shots + spec.queries;
  for (int c = 0; c < spec.ways; ++c) {
    const int cls = ep.class_map[static_cast<std::size_t>(c)];
    if (split.images_per_class < need) {
      throw ValidationError("class " + std::to_string(cls) + " has " + std::to_string(split.images_per_class) +
                            " images, episode needs " + std::to_string(need) + " (shots + queries)");
    }
    std::vector<int> idx(static_cast<std::size_t>(split.images_per_class));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < need; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(idx.size() - static_cast<std::size_t>(i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    for (int i = 0; i < spec.shots; ++i) {
      ep.support.push_back({cls, idx[static_cast<std::size_t>(i)]});
      ep.support_labels.push_back(c);
    }
    for (int i = spec.shots; i < need; ++i) {
      ep.query.push_back({cls, idx[static_cast<std::size_t>(i)]});
      ep.query_labels.push_back(c);
    }
  }
  return ep;
}

std::vector<float> gather_images(const Dataset& ds, std::span<const ImageRef> refs, int crop) {
  const std::size_t per = static_cast<std::size_t>(ds.channels()) * crop * crop;
  std::vector<float> out(per * refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    center_crop(ds.image(refs[i].cls, refs[i].index), ds.channels(), ds.image_size(), crop, false,
                std::span<float>(out).subspan(i * per, per));
  }
  return out;
}

}  // namespace efsl::data
