// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "efsl/backbone/archive.hpp"
#include "efsl/numerics/layers.hpp"

namespace efsl::vit {

struct BackboneConfig {
  int image_size = 32;
  int patch_size = 4;
  int embed_dim = 64;
  int num_layers = 6;
  int num_heads = 4;
  double mlp_ratio = 4.0;
  int channels = 3;
  int num_base_classes = 30;

  void validate() const;
  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int tokens() const { return num_patches() + 1; }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int mlp_hidden() const;
  std::map<std::string, std::string> to_kv() const;
  static BackboneConfig from_kv(const std::map<std::string, std::string>& kv);
  bool operator==(const BackboneConfig&) const = default;
};

template <typename T>
struct AttentionWeights {
  num::Affine<T> q, k, v, o;
  template <typename U>
  AttentionWeights<U> cast() const {
    return {q.template cast<U>(), k.template cast<U>(), v.template cast<U>(), o.template cast<U>()};
  }
};

template <typename T>
struct Mlp {
  num::Affine<T> fc1, fc2;
  num::Tensor<T> operator()(const num::Tensor<T>& x) const { return fc2(num::gelu(fc1(x))); }
  template <typename U>
  Mlp<U> cast() const {
    return {fc1.template cast<U>(), fc2.template cast<U>()};
  }
};

/// One pre-LN transformer layer.
template <typename T>
struct LayerWeights {
  num::Norm<T> ln1;
  AttentionWeights<T> attn;
  num::Norm<T> ln2;
  Mlp<T> mlp;
  template <typename U>
  LayerWeights<U> cast() const {
    return {ln1.template cast<U>(), attn.template cast<U>(), ln2.template cast<U>(), mlp.template cast<U>()};
  }
};

/// Multi-head scaled dot-product attention: queries from q_in[B, Tq, d],
/// keys and values from kv_in[B, Tk, d], each head scaled by 1/sqrt(d/heads),
/// followed by the output projection.
template <typename T>
num::Tensor<T> multi_head_attention(const num::Tensor<T>& q_in, const num::Tensor<T>& kv_in,
                                    const AttentionWeights<T>& w, int heads);

/// x + Att(LN1 x), then + MLP(LN2 .); x is [B, T, d].
template <typename T>
num::Tensor<T> layer_forward(const LayerWeights<T>& layer, const num::Tensor<T>& x, int heads);

/// Toy Vision Transformer. Weights are [in, out]; the class token is
/// prepended to the patch tokens before the positional embedding is added.
template <typename T>
struct Backbone {
  BackboneConfig config;
  std::uint64_t seed = 0;
  num::Affine<T> patch_embed;
  num::Tensor<T> cls_token;  // [1, d]
  num::Tensor<T> pos_embed;  // [tokens, d]
  std::vector<LayerWeights<T>> layers;
  num::Norm<T> norm;
  num::Affine<T> head;  // pretraining classifier

  // Canonical order; these names are the archive entry names.
  num::NamedTensors<T> named_tensors() const;
  // Elements of everything except the pretraining head.
  std::size_t encoder_numel() const;
  std::size_t numel() const;
  void set_requires_grad(bool on) const;
  // Deep copy, optionally converting precision.
  template <typename U>
  Backbone<U> cast() const {
    Backbone<U> out;
    out.config = config;
    out.seed = seed;
    out.patch_embed = patch_embed.template cast<U>();
    out.cls_token = cls_token.template cast<U>();
    out.pos_embed = pos_embed.template cast<U>();
    for (const auto& l : layers) out.layers.push_back(l.template cast<U>());
    out.norm = norm.template cast<U>();
    out.head = head.template cast<U>();
    return out;
  }
};

template <typename T>
Backbone<T> init_backbone(const BackboneConfig& config, std::uint64_t seed);

/// [B, C, H, W] pixels -> [B, patches, C * p * p], channel-major within a
/// patch, patches in raster order.
template <typename T>
num::Tensor<T> patchify(std::span<const float> images, std::size_t batch, const BackboneConfig& config);

/// Token sequence entering layer 1: [B, tokens, d].
template <typename T>
num::Tensor<T> embed(const Backbone<T>& bb, std::span<const float> images, std::size_t batch);

/// Layer outputs X_1..X_n, each [B, tokens, d], taken after the second
/// residual of every layer.
template <typename T>
std::vector<num::Tensor<T>> backbone_forward(const Backbone<T>& bb, std::span<const float> images,
                                             std::size_t batch);

/// Pretraining logits [B, classes] from the class token after the final LN.
template <typename T>
num::Tensor<T> classify_logits(const Backbone<T>& bb, const num::Tensor<T>& last_layer);

TensorArchive to_archive(const Backbone<float>& bb);
// ShapeError when `expected` is given and the archive's config or any tensor
// shape disagrees with it.
Backbone<float> from_archive(const TensorArchive& ar, const BackboneConfig* expected = nullptr);
Digest save_checkpoint(const Backbone<float>& bb, const std::filesystem::path& path);
Backbone<float> load_checkpoint(const std::filesystem::path& path, const BackboneConfig* expected = nullptr);
// Content hash of the checkpoint archive (equals the file trailer).
Digest checkpoint_hash(const Backbone<float>& bb);

}  // namespace efsl::vit
