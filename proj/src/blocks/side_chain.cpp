// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/blocks/side_chain.hpp"

#include "efsl/core/error.hpp"
#include "efsl/core/format.hpp"

namespace efsl::fsl {

using num::Tensor;

const char* to_string(SqMode m) { return m == SqMode::softmax ? "softmax" : "raw"; }

const char* to_string(CombineMode m) {
  switch (m) {
    case CombineMode::conditional: return "conditional";
    case CombineMode::fixed: return "fixed";
    case CombineMode::average: return "average";
  }
  return "?";
}

SqMode parse_sq_mode(const std::string& s) {
  if (s == "softmax") return SqMode::softmax;
  if (s == "raw") return SqMode::raw;
  throw ValidationError("sq mode must be 'softmax' or 'raw', got '" + s + "'");
}

CombineMode parse_combine_mode(const std::string& s) {
  if (s == "conditional") return CombineMode::conditional;
  if (s == "fixed") return CombineMode::fixed;
  if (s == "average") return CombineMode::average;
  throw ValidationError("combine mode must be conditional, fixed or average, got '" + s + "'");
}

namespace {

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ValidationError("expected true or false, got '" + s + "'");
}

const char* bool_str(bool b) { return b ? "true" : "false"; }

}  // namespace

void SideChainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("side chain: " + what);
  };
  require(embed_dim >= 1, "embed_dim must be >= 1");
  require(num_layers >= 0, "num_layers must be >= 0");
  require(num_heads >= 1 && embed_dim % num_heads == 0, "num_heads must divide embed_dim");
  require(side_tokens >= 1, "side_tokens must be >= 1");
  require(bottleneck >= 1, "bottleneck must be >= 1");
  require(attn_bottleneck >= 1, "attn_bottleneck must be >= 1");
  require(xi >= 0.0 && xi <= 1.0, "xi must lie in [0, 1]");
  require(zeta >= 0.0 && zeta <= 1.0, "zeta must lie in [0, 1]");
  require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
  require(tau > 0.0, "tau must be > 0");
  if (ablation.combine_block) {
    require(ablation.branches() >= 1, "combine block needs at least one feature branch");
  }
}

std::map<std::string, std::string> SideChainConfig::to_kv() const {
  const auto& a = ablation;
  return {
      {"ablation.active_attn", bool_str(a.active_attn)},
      {"ablation.active_mlp", bool_str(a.active_mlp)},
      {"ablation.combine_block", bool_str(a.combine_block)},
      {"ablation.combine_mode", to_string(a.combine_mode)},
      {"ablation.f_att_branch", bool_str(a.f_att_branch)},
      {"ablation.f_mlp_branch", bool_str(a.f_mlp_branch)},
      {"ablation.h_branch", bool_str(a.h_branch)},
      {"ablation.prompts", bool_str(a.prompts)},
      {"ablation.proj", bool_str(a.proj)},
      {"ablation.sq_attention", bool_str(a.sq_attention)},
      {"ablation.sq_q_proj", bool_str(a.sq_q_proj)},
      {"activation", activation == Activation::gelu ? "gelu" : "identity"},
      {"alpha", format_real(alpha)},
      {"attn_bottleneck", std::to_string(attn_bottleneck)},
      {"bottleneck", std::to_string(bottleneck)},
      {"embed_dim", std::to_string(embed_dim)},
      {"num_heads", std::to_string(num_heads)},
      {"num_layers", std::to_string(num_layers)},
      {"side_tokens", std::to_string(side_tokens)},
      {"sq_mode", to_string(sq_mode)},
      {"tau", format_real(tau)},
      {"xi", format_real(xi)},
      {"zero_init_proj", bool_str(zero_init_proj)},
      {"zeta", format_real(zeta)},
  };
}

SideChainConfig SideChainConfig::from_kv(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("side chain config is missing '") + key + "'");
    return it->second;
  };
  auto i32 = [&](const char* key) { return static_cast<int>(parse_int(get(key))); };
  SideChainConfig c;
  auto& a = c.ablation;
  a.active_attn = parse_bool(get("ablation.active_attn"));
  a.active_mlp = parse_bool(get("ablation.active_mlp"));
  a.combine_block = parse_bool(get("ablation.combine_block"));
  a.combine_mode = parse_combine_mode(get("ablation.combine_mode"));
  a.f_att_branch = parse_bool(get("ablation.f_att_branch"));
  a.f_mlp_branch = parse_bool(get("ablation.f_mlp_branch"));
  a.h_branch = parse_bool(get("ablation.h_branch"));
  a.prompts = parse_bool(get("ablation.prompts"));
  a.proj = parse_bool(get("ablation.proj"));
  a.sq_attention = parse_bool(get("ablation.sq_attention"));
  a.sq_q_proj = parse_bool(get("ablation.sq_q_proj"));
  const auto& act = get("activation");
  if (act != "gelu" && act != "identity") throw FormatError("unknown activation '" + act + "'");
  c.activation = act == "gelu" ? Activation::gelu : Activation::identity;
  c.alpha = parse_real(get("alpha"));
  c.attn_bottleneck = i32("attn_bottleneck");
  c.bottleneck = i32("bottleneck");
  c.embed_dim = i32("embed_dim");
  c.num_heads = i32("num_heads");
  c.num_layers = i32("num_layers");
  c.side_tokens = i32("side_tokens");
  c.sq_mode = parse_sq_mode(get("sq_mode"));
  c.tau = parse_real(get("tau"));
  c.xi = parse_real(get("xi"));
  c.zero_init_proj = parse_bool(get("zero_init_proj"));
  c.zeta = parse_real(get("zeta"));
  return c;
}

SideChainConfig SideChainConfig::for_backbone(const vit::BackboneConfig& bb) {
  SideChainConfig c;
  c.embed_dim = bb.embed_dim;
  c.num_layers = bb.num_layers;
  c.num_heads = bb.num_heads;
  return c;
}

namespace {

template <typename T>
Bottleneck<T> zero_bottleneck(std::size_t in, std::size_t mid, std::size_t out, Activation act) {
  return {{Tensor<T>::zeros({in, mid}), Tensor<T>::zeros({mid})},
          {Tensor<T>::zeros({mid, out}), Tensor<T>::zeros({out})},
          act};
}

// Calls f(name, tensor&) on every present tensor in canonical order.
template <typename S, typename F>
void visit(S& sc, F&& f) {
  auto bottleneck = [&](const std::string& prefix, auto& b) {
    f(prefix + ".down.weight", b.down.w);
    f(prefix + ".down.bias", b.down.b);
    f(prefix + ".up.weight", b.up.w);
    f(prefix + ".up.bias", b.up.b);
  };
  f(std::string("h0"), sc.h0);
  for (std::size_t i = 0; i < sc.layers.size(); ++i) {
    auto& l = sc.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    if (l.prompt) f(p + "prompt", *l.prompt);
    if (l.proj) bottleneck(p + "proj", *l.proj);
    if (l.q) bottleneck(p + "attn.q", *l.q);
    if (l.k) bottleneck(p + "attn.k", *l.k);
    if (l.v) bottleneck(p + "attn.v", *l.v);
    if (l.ln) {
      f(p + "ln.gamma", l.ln->gamma);
      f(p + "ln.beta", l.ln->beta);
    }
    if (l.mlp) bottleneck(p + "mlp", *l.mlp);
  }
  if (sc.combine_shared) bottleneck("combine.shared", *sc.combine_shared);
  if (sc.combine_weight) bottleneck("combine.weight", *sc.combine_weight);
  if (sc.combine_logits) f(std::string("combine.logits"), *sc.combine_logits);
  if (sc.sq_proj) bottleneck("sq.proj", *sc.sq_proj);
}

// Zero-valued tensors of the right shapes for `c`.
template <typename T>
SideChain<T> skeleton(const SideChainConfig& c) {
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const auto m = static_cast<std::size_t>(c.side_tokens);
  const auto r = static_cast<std::size_t>(c.bottleneck);
  const auto ra = static_cast<std::size_t>(c.attn_bottleneck);
  const auto& a = c.ablation;
  SideChain<T> sc;
  sc.config = c;
  sc.h0 = Tensor<T>::zeros({m, d});
  for (int i = 0; i < c.num_layers; ++i) {
    ActiveLayer<T> l;
    if (a.prompts) l.prompt = Tensor<T>::zeros({m, d});
    if (a.proj) l.proj = zero_bottleneck<T>(d, r, d, c.activation);
    if (a.active_attn) {
      l.q = zero_bottleneck<T>(d, ra, d, c.activation);
      l.k = zero_bottleneck<T>(d, ra, d, c.activation);
      l.v = zero_bottleneck<T>(d, ra, d, c.activation);
    }
    if (a.active_mlp) {
      l.ln = num::Norm<T>{Tensor<T>::zeros({d}), Tensor<T>::zeros({d})};
      l.mlp = zero_bottleneck<T>(d, r, d, c.activation);
    }
    sc.layers.push_back(std::move(l));
  }
  if (a.combine_block) {
    sc.combine_shared = zero_bottleneck<T>(d, r, d, c.activation);
    const auto k = static_cast<std::size_t>(c.combine_inputs());
    if (k > 0 && a.combine_mode == CombineMode::conditional) sc.combine_weight = zero_bottleneck<T>(d, r, k, c.activation);
    if (k > 0 && a.combine_mode == CombineMode::fixed) sc.combine_logits = Tensor<T>::zeros({k});
  }
  if (a.sq_attention && a.sq_q_proj) sc.sq_proj = zero_bottleneck<T>(d, r, d, c.activation);
  return sc;
}

bool ends_with(const std::string& s, const char* suffix) { return s.ends_with(suffix); }

}  // namespace

template <typename T>
num::NamedTensors<T> SideChain<T>::named_tensors() const {
  num::NamedTensors<T> out;
  visit(*this, [&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
std::vector<Tensor<T>> SideChain<T>::parameters() const {
  std::vector<Tensor<T>> out;
  visit(*this, [&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
std::size_t SideChain<T>::numel() const {
  std::size_t n = 0;
  visit(*this, [&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
template <typename U>
SideChain<U> SideChain<T>::cast() const {
  auto out = skeleton<U>(config);
  const auto src = named_tensors();
  std::size_t i = 0;
  visit(out, [&](const std::string&, Tensor<U>& t) {
    t = src[i++].second.template cast<U>();
  });
  return out;
}

template <typename T>
SideChain<T> init_side_chain(const SideChainConfig& config, std::uint64_t seed) {
  config.validate();
  auto sc = skeleton<T>(config);
  const auto root = num::Rng(seed).split("side-init");
  visit(sc, [&](const std::string& name, Tensor<T>& t) {
    const num::Shape shape = t.shape();
    if (ends_with(name, ".gamma")) {
      t = Tensor<T>::full(shape, T(1));
    } else if (ends_with(name, ".bias") || ends_with(name, ".beta") || name == "combine.logits" ||
               (config.zero_init_proj && name.ends_with("proj.up.weight") && name.starts_with("layers."))) {
      t = Tensor<T>::zeros(shape);
    } else {
      auto rng = root.split(name);
      t = Tensor<T>::trunc_normal(shape, rng, T(0.02));
    }
  });
  return sc;
}

std::string param_category(const std::string& name) {
  if (name == "h0") return "h0";
  if (name.starts_with("combine.shared")) return "combine-shared";
  if (name.starts_with("combine.")) return "combine-weight";
  if (name.starts_with("sq.")) return "sq-proj";
  if (name.ends_with(".prompt")) return "prompts";
  if (name.find(".proj.") != std::string::npos) return "proj";
  if (name.find(".attn.") != std::string::npos) return "active-attn";
  if (name.find(".ln.") != std::string::npos) return "ln";
  if (name.find(".mlp.") != std::string::npos) return "active-mlp";
  throw InternalError("no parameter category for '" + name + "'");
}

std::size_t ParamCount::trainable_without_sq_h0() const {
  std::size_t n = trainable;
  for (const char* k : {"sq-proj", "h0"}) {
    if (auto it = breakdown.find(k); it != breakdown.end()) n -= it->second;
  }
  return n;
}

std::size_t backbone_encoder_params(const vit::BackboneConfig& c) {
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const auto hidden = static_cast<std::size_t>(c.mlp_hidden());
  const auto patch = static_cast<std::size_t>(c.patch_dim());
  const auto tokens = static_cast<std::size_t>(c.tokens());
  const std::size_t per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d);
  return patch * d + d + d + tokens * d + static_cast<std::size_t>(c.num_layers) * per_layer + 2 * d;
}

ParamCount count_params(const SideChainConfig& side, const vit::BackboneConfig& backbone) {
  side.validate();
  backbone.validate();
  ParamCount pc;
  // Shapes only; the skeleton allocates zeros and draws no random numbers.
  const auto sc = skeleton<float>(side);
  visit(sc, [&](const std::string& name, const Tensor<float>& t) {
    pc.breakdown[param_category(name)] += t.numel();
    pc.trainable += t.numel();
  });
  pc.frozen = backbone_encoder_params(backbone);
  return pc;
}

TensorArchive to_archive(const SideChain<float>& sc, std::uint64_t seed) {
  TensorArchive ar(kSideChainMagic);
  for (const auto& [k, v] : sc.config.to_kv()) ar.metadata["config." + k] = v;
  ar.metadata["seed"] = std::to_string(seed);
  for (const auto& [name, t] : sc.named_tensors()) ar.put(name, t);
  return ar;
}

SideChain<float> side_chain_from_archive(const TensorArchive& ar) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : ar.metadata) {
    if (k.starts_with("config.")) kv[k.substr(7)] = v;
  }
  const auto config = SideChainConfig::from_kv(kv);
  config.validate();
  auto sc = skeleton<float>(config);
  std::size_t seen = 0;
  visit(sc, [&](const std::string& name, Tensor<float>& t) {
    const num::Shape shape = t.shape();
    t = ar.get<float>(name, &shape);
    ++seen;
  });
  if (seen != ar.size()) throw FormatError("side chain archive holds tensors not used by its config");
  return sc;
}

Digest side_chain_hash(const SideChain<float>& sc) { return to_archive(sc, 0).digest(); }

template struct SideChain<float>;
template struct SideChain<double>;
template SideChain<double> SideChain<float>::cast<double>() const;
template SideChain<float> SideChain<double>::cast<float>() const;
template SideChain<float> SideChain<float>::cast<float>() const;
template SideChain<double> SideChain<double>::cast<double>() const;
template SideChain<float> init_side_chain<float>(const SideChainConfig&, std::uint64_t);
template SideChain<double> init_side_chain<double>(const SideChainConfig&, std::uint64_t);

}  // namespace efsl::fsl
