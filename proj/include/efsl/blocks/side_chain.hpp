// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "efsl/backbone/archive.hpp"
#include "efsl/backbone/vit.hpp"
#include "efsl/numerics/layers.hpp"

namespace efsl::fsl {

enum class Activation { gelu, identity };
enum class SqMode { softmax, raw };
enum class CombineMode { conditional, fixed, average };

const char* to_string(SqMode m);
const char* to_string(CombineMode m);
SqMode parse_sq_mode(const std::string& s);
CombineMode parse_combine_mode(const std::string& s);

/// Component switches; `true` keeps the component. A disabled component owns
/// no parameters.
struct Ablation {
  bool proj = true;
  bool active_attn = true;
  bool active_mlp = true;
  bool prompts = true;
  bool combine_block = true;  // off: classify from pooled H_n
  bool f_att_branch = true;
  bool f_mlp_branch = true;
  bool h_branch = true;
  bool sq_attention = true;
  bool sq_q_proj = true;
  CombineMode combine_mode = CombineMode::conditional;

  int branches() const { return int(f_att_branch) + int(f_mlp_branch) + int(h_branch); }
  bool operator==(const Ablation&) const = default;
};

struct SideChainConfig {
  int embed_dim = 64;
  int num_layers = 6;
  int num_heads = 4;  // frozen cross-attention heads, inherited from the backbone
  int side_tokens = 4;
  int bottleneck = 48;
  int attn_bottleneck = 8;
  double xi = 0.1;
  double zeta = 0.1;
  double alpha = 0.1;
  double tau = 10.0;
  SqMode sq_mode = SqMode::softmax;
  Activation activation = Activation::gelu;
  bool zero_init_proj = true;
  Ablation ablation;

  void validate() const;
  // Number of features entering the combine step (3n with all branches on).
  int combine_inputs() const { return ablation.branches() * num_layers; }
  std::map<std::string, std::string> to_kv() const;
  static SideChainConfig from_kv(const std::map<std::string, std::string>& kv);
  static SideChainConfig for_backbone(const vit::BackboneConfig& bb);
};

/// Two affine maps with the configured activation in between.
template <typename T>
struct Bottleneck {
  num::Affine<T> down, up;
  Activation act = Activation::gelu;

  num::Tensor<T> operator()(const num::Tensor<T>& x) const {
    const auto h = down(x);
    return up(act == Activation::gelu ? num::gelu(h) : h);
  }
  std::size_t numel() const { return down.numel() + up.numel(); }
  template <typename U>
  Bottleneck<U> cast() const {
    return {down.template cast<U>(), up.template cast<U>(), act};
  }
};

template <typename T>
struct ActiveLayer {
  std::optional<num::Tensor<T>> prompt;  // [m, d]
  std::optional<Bottleneck<T>> proj;
  std::optional<Bottleneck<T>> q, k, v;
  std::optional<num::Norm<T>> ln;
  std::optional<Bottleneck<T>> mlp;
};

/// Every trainable side-chain tensor.
template <typename T>
struct SideChain {
  SideChainConfig config;
  num::Tensor<T> h0;  // [m, d]
  std::vector<ActiveLayer<T>> layers;
  std::optional<Bottleneck<T>> combine_shared;
  std::optional<Bottleneck<T>> combine_weight;  // conditional mode: d -> r -> K
  std::optional<num::Tensor<T>> combine_logits;  // fixed mode: [K]
  std::optional<Bottleneck<T>> sq_proj;

  num::NamedTensors<T> named_tensors() const;
  std::vector<num::Tensor<T>> parameters() const;
  std::size_t numel() const;
  template <typename U>
  SideChain<U> cast() const;
};

/// Truncated-normal (0.02) weights, zero biases, identity LN; every tensor
/// draws from a substream keyed by its name, so switching a component off
/// leaves the initial values of all others unchanged.
template <typename T>
SideChain<T> init_side_chain(const SideChainConfig& config, std::uint64_t seed);

// Parameter accounting category of an entry name.
std::string param_category(const std::string& name);

struct ParamCount {
  std::map<std::string, std::size_t> breakdown;  // category -> elements
  std::size_t trainable = 0;
  std::size_t frozen = 0;  // backbone encoder, pretraining head excluded
  std::size_t trainable_without_sq_h0() const;
};

ParamCount count_params(const SideChainConfig& side, const vit::BackboneConfig& backbone);
// Encoder element count computed from the config alone.
std::size_t backbone_encoder_params(const vit::BackboneConfig& c);

TensorArchive to_archive(const SideChain<float>& sc, std::uint64_t seed);
SideChain<float> side_chain_from_archive(const TensorArchive& ar);
Digest side_chain_hash(const SideChain<float>& sc);

}  // namespace efsl::fsl
