// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/blocks/blocks.hpp"

#include <cmath>

#include "efsl/core/error.hpp"

namespace efsl::fsl {

namespace {

template <typename T>
void require_rank3(const Tensor<T>& t, const char* what, std::size_t m, std::size_t d) {
  if (t.rank() != 3 || (m && t.dim(1) != m) || t.dim(2) != d) {
    throw ShapeError(std::string(what) + " has shape " + num::shape_str(t.shape()) + ", expected [B, " +
                     (m ? std::to_string(m) : std::string("*")) + ", " + std::to_string(d) + "]");
  }
}

template <typename T>
void require_frozen(const num::Tensor<T>& t) {
  if (t.requires_grad()) throw InternalError("frozen block weight is trainable; gradient would leak into the backbone");
}

template <typename T>
void require_frozen(const vit::LayerWeights<T>& w) {
  for (const auto* n : {&w.ln1, &w.ln2}) {
    require_frozen(n->gamma);
    require_frozen(n->beta);
  }
  for (const auto* a : {&w.attn.q, &w.attn.k, &w.attn.v, &w.attn.o, &w.mlp.fc1, &w.mlp.fc2}) {
    require_frozen(a->w);
    require_frozen(a->b);
  }
}

template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t batch) {
  num::Shape shape = x.shape();
  shape.insert(shape.begin(), 1);
  num::Shape full = x.shape();
  full.insert(full.begin(), batch);
  return num::add(num::reshape(x, shape), Tensor<T>::zeros(full));
}

}  // namespace

template <typename T>
Tensor<T> active_block(const Tensor<T>& h_prev, const ActiveLayer<T>& layer, const SideChainConfig& config) {
  const auto d = static_cast<std::size_t>(config.embed_dim);
  require_rank3(h_prev, "active block input", static_cast<std::size_t>(config.side_tokens), d);
  const auto in = layer.prompt ? num::add(h_prev, *layer.prompt) : h_prev;
  const auto z = layer.proj ? (*layer.proj)(in) : in;
  auto zp = z;
  if (layer.q) {
    const auto q = (*layer.q)(z), k = (*layer.k)(z), v = (*layer.v)(z);
    const auto scores = num::scale(num::matmul(q, num::transpose(k)), static_cast<T>(1.0 / std::sqrt(double(d))));
    const auto att = num::matmul(num::softmax(scores, -1), v);
    zp = num::add(num::scale(att, static_cast<T>(config.xi)), z);
  }
  if (layer.mlp) return num::add(num::scale((*layer.mlp)((*layer.ln)(zp)), static_cast<T>(config.zeta)), zp);
  return zp;
}

template <typename T>
LayerFeatures<T> frozen_block(const Tensor<T>& f, const Tensor<T>& x, const vit::LayerWeights<T>& weights, int heads,
                              const FrozenHooks& hooks) {
  require_frozen(weights);
  const std::size_t d = weights.ln1.gamma.numel();
  require_rank3(f, "frozen block query", 0, d);
  require_rank3(x, "frozen block keys", 0, d);
  if (f.dim(0) != x.dim(0)) throw ShapeError("frozen block batch sizes differ");
  LayerFeatures<T> out;
  out.f_att = hooks.zero_attention
                  ? f
                  : num::add(vit::multi_head_attention(weights.ln1(f), weights.ln1(x), weights.attn, heads), f);
  out.f_mlp = hooks.zero_mlp ? Tensor<T>::zeros(out.f_att.shape()) : weights.mlp(weights.ln2(out.f_att));
  out.h = num::add(out.f_mlp, out.f_att);
  return out;
}

template <typename T>
std::vector<Tensor<T>> combine_inputs(const std::vector<LayerFeatures<T>>& features, const Ablation& ablation) {
  std::vector<Tensor<T>> out;
  for (const auto& lf : features) {
    if (ablation.f_att_branch) out.push_back(lf.f_att);
    if (ablation.f_mlp_branch) out.push_back(lf.f_mlp);
    if (ablation.h_branch) out.push_back(lf.h);
  }
  return out;
}

template <typename T>
Tensor<T> combine_weights(const SideChain<T>& sc, const Tensor<T>& h_last) {
  const std::size_t batch = h_last.dim(0);
  const auto k = static_cast<std::size_t>(sc.config.combine_inputs());
  switch (sc.config.ablation.combine_mode) {
    case CombineMode::conditional:
      return num::softmax((*sc.combine_weight)(num::mean(h_last, 1)), 1);
    case CombineMode::fixed:
      return broadcast_batch(num::softmax(*sc.combine_logits, 0), batch);
    case CombineMode::average:
      return Tensor<T>::full({batch, k}, static_cast<T>(1.0 / static_cast<double>(k)));
  }
  throw InternalError("unknown combine mode");
}

template <typename T>
Tensor<T> combine(const SideChain<T>& sc, const std::vector<Tensor<T>>& inputs, const Tensor<T>& weights) {
  if (inputs.empty()) throw ShapeError("combine needs at least one feature");
  if (!sc.combine_shared) throw InternalError("combine called without a combine block");
  const auto& s0 = inputs.front().shape();
  const std::size_t batch = s0[0], k = inputs.size();
  if (weights.shape() != num::Shape{batch, k}) {
    throw ShapeError("combine weights " + num::shape_str(weights.shape()) + " do not match " + std::to_string(k) +
                     " features");
  }
  const auto projected = (*sc.combine_shared)(num::stack(std::span<const Tensor<T>>(inputs), 1));  // [B, K, m, d]
  const auto w = num::reshape(weights, {batch, k, 1, 1});
  return num::sum(num::mul(projected, w), 1);
}

template <typename T>
Extracted<T> extract_features(const SideChain<T>& sc, std::span<const Tensor<T>> xs,
                              const std::vector<vit::LayerWeights<T>>& frozen, const FrozenHooks& hooks) {
  const auto& c = sc.config;
  const auto n = static_cast<std::size_t>(c.num_layers);
  if (xs.size() != n || frozen.size() < n) {
    throw ShapeError("side chain has " + std::to_string(n) + " layers but got " + std::to_string(xs.size()) +
                     " activations and " + std::to_string(frozen.size()) + " frozen layers");
  }
  if (n == 0) throw ShapeError("feature extraction needs at least one layer");
  const std::size_t batch = xs[0].dim(0);
  Extracted<T> out;
  auto h = broadcast_batch(sc.h0, batch);
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = active_block(h, sc.layers[i], c);
    out.layers.push_back(frozen_block(f, xs[i], frozen[i], c.num_heads, hooks));
    h = out.layers.back().h;
  }
  if (c.ablation.combine_block) {
    out.weights = combine_weights(sc, h);
    out.tokens = combine(sc, combine_inputs(out.layers, c.ablation), out.weights);
  } else {
    out.tokens = h;
  }
  out.pooled = num::mean(out.tokens, 1);
  return out;
}

template <typename T>
Tensor<T> compute_prototypes(const Tensor<T>& support, std::span<const int> labels, int ways) {
  if (support.rank() != 2 || support.dim(0) != labels.size()) {
    throw ShapeError("support features " + num::shape_str(support.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const auto n = static_cast<std::size_t>(ways);
  std::vector<std::size_t> counts(n, 0);
  for (int l : labels) {
    if (l < 0 || l >= ways) throw ValidationError("support label " + std::to_string(l) + " outside [0, " +
                                                  std::to_string(ways) + ")");
    ++counts[static_cast<std::size_t>(l)];
  }
  for (std::size_t c = 0; c < n; ++c) {
    if (counts[c] == 0) throw ValidationError("class " + std::to_string(c) + " has no support examples");
  }
  std::vector<T> avg(n * labels.size(), T(0));
  for (std::size_t j = 0; j < labels.size(); ++j) {
    const auto c = static_cast<std::size_t>(labels[j]);
    avg[c * labels.size() + j] = T(1) / static_cast<T>(counts[c]);
  }
  return num::matmul(Tensor<T>({n, labels.size()}, std::move(avg)), support);
}

template <typename T>
Tensor<T> sq_attention(const Tensor<T>& prototypes, const Tensor<T>& queries, const Bottleneck<T>* q_proj,
                       double alpha, SqMode mode) {
  if (prototypes.rank() != 2 || queries.rank() != 2 || prototypes.dim(1) != queries.dim(1) || queries.dim(0) == 0) {
    throw ShapeError("sq attention got prototypes " + num::shape_str(prototypes.shape()) + " and queries " +
                     num::shape_str(queries.shape()));
  }
  const auto keys = q_proj ? (*q_proj)(queries) : queries;
  auto a = num::matmul(prototypes, num::transpose(keys));  // [N, NQ]
  if (mode == SqMode::softmax) {
    a = num::softmax(num::scale(a, static_cast<T>(1.0 / std::sqrt(double(prototypes.dim(1))))), 1);
  }
  return num::add(num::scale(num::matmul(a, queries), static_cast<T>(alpha)),
                  num::scale(prototypes, static_cast<T>(1.0 - alpha)));
}

template <typename T>
Classified<T> classify(const Tensor<T>& queries, const Tensor<T>& prototypes, double tau) {
  if (!(tau > 0.0)) throw ValidationError("temperature must be > 0");
  Classified<T> out;
  out.logits = num::scale(num::pairwise_cosine(queries, prototypes), static_cast<T>(tau));
  out.predictions = num::argmax_rows(out.logits);
  return out;
}

template <typename T>
EpisodeResult<T> episode_head(const Tensor<T>& support, std::span<const int> support_labels, const Tensor<T>& query,
                              std::span<const int> query_labels, int ways, const SideChain<T>* sc, double tau) {
  EpisodeResult<T> r;
  r.support = support;
  r.query = query;
  r.prototypes = compute_prototypes(support, support_labels, ways);
  r.sq_prototypes = r.prototypes;
  if (sc && sc->config.ablation.sq_attention) {
    r.sq_prototypes = sq_attention(r.prototypes, query, sc->sq_proj ? &*sc->sq_proj : nullptr, sc->config.alpha,
                                   sc->config.sq_mode);
  }
  auto cls = classify(query, r.sq_prototypes, tau);
  r.logits = cls.logits;
  r.predictions = std::move(cls.predictions);
  if (!query_labels.empty()) {
    if (query_labels.size() != r.predictions.size()) throw ShapeError("query label count mismatch");
    r.loss = num::cross_entropy(r.logits, query_labels);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < query_labels.size(); ++i) hit += r.predictions[i] == query_labels[i];
    r.accuracy = static_cast<double>(hit) / static_cast<double>(query_labels.size());
  }
  return r;
}

#define EFSL_INSTANTIATE_BLOCKS(T)                                                                                 \
  template Tensor<T> active_block<T>(const Tensor<T>&, const ActiveLayer<T>&, const SideChainConfig&);            \
  template LayerFeatures<T> frozen_block<T>(const Tensor<T>&, const Tensor<T>&, const vit::LayerWeights<T>&, int, \
                                            const FrozenHooks&);                                                  \
  template std::vector<Tensor<T>> combine_inputs<T>(const std::vector<LayerFeatures<T>>&, const Ablation&);       \
  template Tensor<T> combine_weights<T>(const SideChain<T>&, const Tensor<T>&);                                   \
  template Tensor<T> combine<T>(const SideChain<T>&, const std::vector<Tensor<T>>&, const Tensor<T>&);            \
  template Extracted<T> extract_features<T>(const SideChain<T>&, std::span<const Tensor<T>>,                      \
                                            const std::vector<vit::LayerWeights<T>>&, const FrozenHooks&);        \
  template Tensor<T> compute_prototypes<T>(const Tensor<T>&, std::span<const int>, int);                          \
  template Tensor<T> sq_attention<T>(const Tensor<T>&, const Tensor<T>&, const Bottleneck<T>*, double, SqMode);   \
  template Classified<T> classify<T>(const Tensor<T>&, const Tensor<T>&, double);                                 \
  template EpisodeResult<T> episode_head<T>(const Tensor<T>&, std::span<const int>, const Tensor<T>&,             \
                                            std::span<const int>, int, const SideChain<T>*, double);

EFSL_INSTANTIATE_BLOCKS(float)
EFSL_INSTANTIATE_BLOCKS(double)

}  // namespace efsl::fsl
