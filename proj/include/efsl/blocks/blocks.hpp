// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "efsl/backbone/vit.hpp"
#include "efsl/blocks/side_chain.hpp"

namespace efsl::fsl {

using num::Tensor;

// Side-chain tensors are batched over images: [B, m, d].

template <typename T>
struct LayerFeatures {
  Tensor<T> f_att, f_mlp, h;
};

// Test hooks that zero one residual branch of the frozen block.
struct FrozenHooks {
  bool zero_attention = false;
  bool zero_mlp = false;
};

/// Prompt, projection, bottleneck self-attention and MLP of one layer.
template <typename T>
Tensor<T> active_block(const Tensor<T>& h_prev, const ActiveLayer<T>& layer, const SideChainConfig& config);

/// Cross-attention of side tokens (queries) over backbone tokens x (keys and
/// values) with frozen weights, then the frozen MLP. Throws InternalError if
/// any frozen weight is trainable.
template <typename T>
LayerFeatures<T> frozen_block(const Tensor<T>& f, const Tensor<T>& x, const vit::LayerWeights<T>& weights, int heads,
                              const FrozenHooks& hooks = {});

/// Feature branches in combine order: for each layer f_att, f_mlp, h (enabled
/// branches only).
template <typename T>
std::vector<Tensor<T>> combine_inputs(const std::vector<LayerFeatures<T>>& features, const Ablation& ablation);

/// Mixing weights [B, K] from the final side state.
template <typename T>
Tensor<T> combine_weights(const SideChain<T>& sc, const Tensor<T>& h_last);

/// sum_k w[b, k] * shared(inputs[k][b]) -> [B, m, d].
template <typename T>
Tensor<T> combine(const SideChain<T>& sc, const std::vector<Tensor<T>>& inputs, const Tensor<T>& weights);

template <typename T>
struct Extracted {
  Tensor<T> pooled;  // [B, d]
  Tensor<T> tokens;  // [B, m, d] before pooling
  Tensor<T> weights;  // [B, K], undefined without a combine block
  std::vector<LayerFeatures<T>> layers;
};

/// Full side-chain pass over per-layer backbone activations xs[i] = X_{i+1}.
template <typename T>
Extracted<T> extract_features(const SideChain<T>& sc, std::span<const Tensor<T>> xs,
                              const std::vector<vit::LayerWeights<T>>& frozen, const FrozenHooks& hooks = {});

/// Per-class means; labels in [0, ways). Throws if a class has no support.
template <typename T>
Tensor<T> compute_prototypes(const Tensor<T>& support, std::span<const int> labels, int ways);

/// alpha * A q + (1 - alpha) s with A = s Proj(q)^T (softmax mode: scaled by
/// 1/sqrt(d) and normalised per row).
template <typename T>
Tensor<T> sq_attention(const Tensor<T>& prototypes, const Tensor<T>& queries, const Bottleneck<T>* q_proj,
                       double alpha, SqMode mode);

template <typename T>
struct Classified {
  Tensor<T> logits;  // [NQ, N]
  std::vector<int> predictions;
};

template <typename T>
Classified<T> classify(const Tensor<T>& queries, const Tensor<T>& prototypes, double tau);

template <typename T>
struct EpisodeResult {
  Tensor<T> prototypes, sq_prototypes;
  Tensor<T> support, query;  // pooled features
  Tensor<T> logits;
  Tensor<T> loss;  // undefined without query labels
  std::vector<int> predictions;
  double accuracy = 0.0;  // against query labels when given
};

/// Prototype head over precomputed features: prototypes, optional SQ step,
/// cosine logits, cross-entropy when query labels are supplied.
template <typename T>
EpisodeResult<T> episode_head(const Tensor<T>& support, std::span<const int> support_labels, const Tensor<T>& query,
                              std::span<const int> query_labels, int ways, const SideChain<T>* sc, double tau);

}  // namespace efsl::fsl
