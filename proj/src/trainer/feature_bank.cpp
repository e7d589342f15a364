// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/trainer/feature_bank.hpp"

#include <algorithm>
#include <cstring>

#include "efsl/core/error.hpp"
#include "efsl/core/hash.hpp"

namespace efsl::train {

using num::Tensor;

FeatureBank FeatureBank::build(const vit::Backbone<float>& bb, const data::Dataset& ds, std::span<const int> classes,
                               std::size_t chunk) {
  FeatureBank fb;
  fb.per_class_ = ds.images_per_class();
  fb.tokens_ = static_cast<std::size_t>(bb.config.tokens());
  fb.dim_ = static_cast<std::size_t>(bb.config.embed_dim);
  fb.slot_.assign(static_cast<std::size_t>(ds.num_classes()), -1);
  std::vector<data::ImageRef> all;
  for (int c : classes) {
    if (c < 0 || c >= ds.num_classes()) throw ValidationError("feature bank class " + std::to_string(c) + " out of range");
    if (fb.slot_[static_cast<std::size_t>(c)] >= 0) continue;
    fb.slot_[static_cast<std::size_t>(c)] = static_cast<int>(all.size()) / fb.per_class_;
    for (int i = 0; i < fb.per_class_; ++i) all.push_back({c, i});
  }
  const std::size_t per_image = fb.tokens_ * fb.dim_;
  fb.layers_.assign(static_cast<std::size_t>(bb.config.num_layers), std::vector<float>(all.size() * per_image));
  num::NoGradGuard no_grad;
  for (std::size_t lo = 0; lo < all.size(); lo += chunk) {
    const std::size_t hi = std::min(all.size(), lo + chunk);
    const auto refs = std::span<const data::ImageRef>(all).subspan(lo, hi - lo);
    const auto xs = vit::backbone_forward(bb, data::gather_images(ds, refs, bb.config.image_size), refs.size());
    for (std::size_t l = 0; l < xs.size(); ++l) {
      std::memcpy(fb.layers_[l].data() + lo * per_image, xs[l].data().data(), xs[l].numel() * sizeof(float));
    }
  }
  return fb;
}

bool FeatureBank::contains(int cls) const {
  return cls >= 0 && static_cast<std::size_t>(cls) < slot_.size() && slot_[static_cast<std::size_t>(cls)] >= 0;
}

std::size_t FeatureBank::row(const data::ImageRef& r) const {
  if (!contains(r.cls) || r.index < 0 || r.index >= per_class_) {
    throw ValidationError("feature bank holds no activations for class " + std::to_string(r.cls) + ", image " +
                          std::to_string(r.index));
  }
  return static_cast<std::size_t>(slot_[static_cast<std::size_t>(r.cls)]) * static_cast<std::size_t>(per_class_) +
         static_cast<std::size_t>(r.index);
}

std::vector<Tensor<float>> FeatureBank::gather(std::span<const data::ImageRef> refs) const {
  const std::size_t per_image = tokens_ * dim_;
  std::vector<Tensor<float>> out;
  for (const auto& layer : layers_) {
    std::vector<float> buf(refs.size() * per_image);
    for (std::size_t i = 0; i < refs.size(); ++i) {
      std::memcpy(buf.data() + i * per_image, layer.data() + row(refs[i]) * per_image, per_image * sizeof(float));
    }
    out.emplace_back(num::Shape{refs.size(), tokens_, dim_}, std::move(buf));
  }
  return out;
}

Tensor<float> FeatureBank::pooled_last(std::span<const data::ImageRef> refs) const {
  if (layers_.empty()) throw ValidationError("feature bank is empty");
  std::vector<float> out(refs.size() * dim_, 0.0f);
  const auto& last = layers_.back();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const float* x = last.data() + row(refs[i]) * tokens_ * dim_;
    for (std::size_t j = 0; j < dim_; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < tokens_; ++t) s += x[t * dim_ + j];
      out[i * dim_ + j] = static_cast<float>(s / static_cast<double>(tokens_));
    }
  }
  return Tensor<float>({refs.size(), dim_}, std::move(out));
}

Digest FeatureBank::digest() const {
  Sha256 h;
  for (const auto& layer : layers_) h.update_values(std::span<const float>(layer));
  return h.finish();
}

}  // namespace efsl::train
