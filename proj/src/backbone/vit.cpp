// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/backbone/vit.hpp"

#include <array>
#include <cmath>

#include "efsl/core/error.hpp"
#include "efsl/core/format.hpp"

namespace efsl::vit {

using num::Shape;
using num::Tensor;

void BackboneConfig::validate() const {
  if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0) {
    throw ValidationError("backbone.image_size must be a positive multiple of backbone.patch_size");
  }
  if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0) {
    throw ValidationError("backbone.embed_dim must be a positive multiple of backbone.num_heads");
  }
  if (num_layers < 1) throw ValidationError("backbone.num_layers must be >= 1");
  if (!(mlp_ratio > 0)) throw ValidationError("backbone.mlp_ratio must be > 0");
  if (channels < 1) throw ValidationError("backbone.channels must be >= 1");
  if (num_base_classes < 2) throw ValidationError("backbone.num_base_classes must be >= 2");
}

int BackboneConfig::mlp_hidden() const { return std::max(1, static_cast<int>(std::lround(embed_dim * mlp_ratio))); }

std::map<std::string, std::string> BackboneConfig::to_kv() const {
  return {
      {"channels", std::to_string(channels)},
      {"embed_dim", std::to_string(embed_dim)},
      {"image_size", std::to_string(image_size)},
      {"mlp_ratio", format_real(mlp_ratio)},
      {"num_base_classes", std::to_string(num_base_classes)},
      {"num_heads", std::to_string(num_heads)},
      {"num_layers", std::to_string(num_layers)},
      {"patch_size", std::to_string(patch_size)},
  };
}

BackboneConfig BackboneConfig::from_kv(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("backbone config is missing '") + key + "'");
    return it->second;
  };
  BackboneConfig c;
  c.channels = static_cast<int>(parse_int(get("channels")));
  c.embed_dim = static_cast<int>(parse_int(get("embed_dim")));
  c.image_size = static_cast<int>(parse_int(get("image_size")));
  c.mlp_ratio = parse_real(get("mlp_ratio"));
  c.num_base_classes = static_cast<int>(parse_int(get("num_base_classes")));
  c.num_heads = static_cast<int>(parse_int(get("num_heads")));
  c.num_layers = static_cast<int>(parse_int(get("num_layers")));
  c.patch_size = static_cast<int>(parse_int(get("patch_size")));
  return c;
}

namespace {

// Calls f(name, tensor&) on every tensor in canonical order.
template <typename B, typename F>
void visit(B& bb, F&& f) {
  f("patch_embed.weight", bb.patch_embed.w);
  f("patch_embed.bias", bb.patch_embed.b);
  f("cls_token", bb.cls_token);
  f("pos_embed", bb.pos_embed);
  for (std::size_t i = 0; i < bb.layers.size(); ++i) {
    auto& l = bb.layers[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f(p + "ln1.gamma", l.ln1.gamma);
    f(p + "ln1.beta", l.ln1.beta);
    f(p + "attn.wq", l.attn.q.w);
    f(p + "attn.bq", l.attn.q.b);
    f(p + "attn.wk", l.attn.k.w);
    f(p + "attn.bk", l.attn.k.b);
    f(p + "attn.wv", l.attn.v.w);
    f(p + "attn.bv", l.attn.v.b);
    f(p + "attn.wo", l.attn.o.w);
    f(p + "attn.bo", l.attn.o.b);
    f(p + "ln2.gamma", l.ln2.gamma);
    f(p + "ln2.beta", l.ln2.beta);
    f(p + "mlp.w1", l.mlp.fc1.w);
    f(p + "mlp.b1", l.mlp.fc1.b);
    f(p + "mlp.w2", l.mlp.fc2.w);
    f(p + "mlp.b2", l.mlp.fc2.b);
  }
  f("norm.gamma", bb.norm.gamma);
  f("norm.beta", bb.norm.beta);
  f("head.weight", bb.head.w);
  f("head.bias", bb.head.b);
}

}  // namespace

template <typename T>
num::NamedTensors<T> Backbone<T>::named_tensors() const {
  num::NamedTensors<T> out;
  visit(*this, [&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
std::size_t Backbone<T>::numel() const {
  std::size_t n = 0;
  visit(*this, [&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
std::size_t Backbone<T>::encoder_numel() const {
  return numel() - head.numel();
}

template <typename T>
void Backbone<T>::set_requires_grad(bool on) const {
  visit(*this, [&](const std::string&, const Tensor<T>& t) { Tensor<T>(t).set_requires_grad(on); });
}

template <typename T>
Backbone<T> init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.embed_dim);
  const auto hidden = static_cast<std::size_t>(config.mlp_hidden());
  Backbone<T> bb;
  bb.config = config;
  bb.seed = seed;
  bb.patch_embed = {Tensor<T>::zeros({static_cast<std::size_t>(config.patch_dim()), d}), Tensor<T>::zeros({d})};
  bb.cls_token = Tensor<T>::zeros({1, d});
  bb.pos_embed = Tensor<T>::zeros({static_cast<std::size_t>(config.tokens()), d});
  for (int i = 0; i < config.num_layers; ++i) {
    LayerWeights<T> l;
    l.ln1 = num::Norm<T>::init(d);
    l.ln2 = num::Norm<T>::init(d);
    for (auto* a : {&l.attn.q, &l.attn.k, &l.attn.v, &l.attn.o}) *a = {Tensor<T>::zeros({d, d}), Tensor<T>::zeros({d})};
    l.mlp.fc1 = {Tensor<T>::zeros({d, hidden}), Tensor<T>::zeros({hidden})};
    l.mlp.fc2 = {Tensor<T>::zeros({hidden, d}), Tensor<T>::zeros({d})};
    bb.layers.push_back(std::move(l));
  }
  bb.norm = num::Norm<T>::init(d);
  bb.head = {Tensor<T>::zeros({d, static_cast<std::size_t>(config.num_base_classes)}),
             Tensor<T>::zeros({static_cast<std::size_t>(config.num_base_classes)})};

  // Weight matrices and embeddings: truncated normal, each from its own
  // name-keyed substream. Biases stay zero, LN stays identity.
  const num::Rng root = num::Rng(seed).split("backbone-init");
  visit(bb, [&](const std::string& name, Tensor<T>& t) {
    const bool random = t.rank() == 2;
    if (!random) return;
    num::Rng r = root.split(name);
    t = Tensor<T>::trunc_normal(t.shape(), r, T(0.02));
  });
  return bb;
}

template <typename T>
Tensor<T> patchify(std::span<const float> images, std::size_t batch, const BackboneConfig& c) {
  const auto C = static_cast<std::size_t>(c.channels), S = static_cast<std::size_t>(c.image_size),
             p = static_cast<std::size_t>(c.patch_size);
  if (images.size() != batch * C * S * S || batch == 0) {
    throw ShapeError("backbone expects " + std::to_string(batch) + " images of shape [" + std::to_string(C) + ", " +
                     std::to_string(S) + ", " + std::to_string(S) + "], got " + std::to_string(images.size()) +
                     " values");
  }
  const std::size_t g = S / p, P = g * g, pd = C * p * p;
  std::vector<T> out(batch * P * pd);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const float* img = images.data() + b * C * S * S;
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t ch = 0; ch < C; ++ch)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x) out[o++] = static_cast<T>(img[(ch * S + gy * p + y) * S + gx * p + x]);
  }
  return Tensor<T>({batch, P, pd}, std::move(out));
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in, const AttentionWeights<T>& w,
                               int heads) {
  if (q_in.rank() != 3 || kv_in.rank() != 3 || q_in.dim(0) != kv_in.dim(0) || q_in.dim(2) != kv_in.dim(2)) {
    throw ShapeError("attention inputs " + num::shape_str(q_in.shape()) + " and " + num::shape_str(kv_in.shape()) +
                     " are incompatible");
  }
  const std::size_t B = q_in.dim(0), Tq = q_in.dim(1), Tk = kv_in.dim(1), d = q_in.dim(2);
  const auto h = static_cast<std::size_t>(heads);
  const std::size_t dh = d / h;
  static constexpr std::array<std::size_t, 4> kHeadsFirst{0, 2, 1, 3};
  static constexpr std::array<std::size_t, 4> kKeysT{0, 2, 3, 1};
  const auto q = num::permute(num::reshape(w.q(q_in), {B, Tq, h, dh}), std::span<const std::size_t>(kHeadsFirst));
  const auto kt = num::permute(num::reshape(w.k(kv_in), {B, Tk, h, dh}), std::span<const std::size_t>(kKeysT));
  const auto v = num::permute(num::reshape(w.v(kv_in), {B, Tk, h, dh}), std::span<const std::size_t>(kHeadsFirst));
  const auto scores = num::scale(num::matmul(q, kt), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  const auto att = num::matmul(num::softmax(scores, -1), v);  // [B, h, Tq, dh]
  const auto merged = num::reshape(num::permute(att, std::span<const std::size_t>(kHeadsFirst)), {B, Tq, d});
  return w.o(merged);
}

template <typename T>
Tensor<T> layer_forward(const LayerWeights<T>& layer, const Tensor<T>& x, int heads) {
  const auto n1 = layer.ln1(x);
  const auto h = num::add(x, multi_head_attention(n1, n1, layer.attn, heads));
  return num::add(h, layer.mlp(layer.ln2(h)));
}

template <typename T>
Tensor<T> embed(const Backbone<T>& bb, std::span<const float> images, std::size_t batch) {
  const auto d = static_cast<std::size_t>(bb.config.embed_dim);
  const auto tokens = bb.patch_embed(patchify<T>(images, batch, bb.config));
  const auto cls = num::add(num::reshape(bb.cls_token, {1, 1, d}), Tensor<T>::zeros({batch, 1, d}));
  const std::array<Tensor<T>, 2> parts{cls, tokens};
  return num::add(num::concat(std::span<const Tensor<T>>(parts), 1), bb.pos_embed);
}

template <typename T>
std::vector<Tensor<T>> backbone_forward(const Backbone<T>& bb, std::span<const float> images, std::size_t batch) {
  std::vector<Tensor<T>> xs;
  auto x = embed(bb, images, batch);
  for (const auto& layer : bb.layers) {
    x = layer_forward(layer, x, bb.config.num_heads);
    xs.push_back(x);
  }
  return xs;
}

template <typename T>
Tensor<T> classify_logits(const Backbone<T>& bb, const Tensor<T>& last_layer) {
  const std::size_t B = last_layer.dim(0), d = last_layer.dim(2);
  const auto cls = num::reshape(num::narrow(bb.norm(last_layer), 1, 0, 1), {B, d});
  return bb.head(cls);
}

TensorArchive to_archive(const Backbone<float>& bb) {
  TensorArchive ar(kBackboneMagic);
  for (const auto& [k, v] : bb.config.to_kv()) ar.metadata["config." + k] = v;
  ar.metadata["seed"] = std::to_string(bb.seed);
  for (const auto& [name, t] : bb.named_tensors()) ar.put(name, t);
  return ar;
}

Backbone<float> from_archive(const TensorArchive& ar, const BackboneConfig* expected) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : ar.metadata) {
    if (k.starts_with("config.")) kv[k.substr(7)] = v;
  }
  const auto config = BackboneConfig::from_kv(kv);
  if (expected && !(config == *expected)) {
    for (const auto& [k, v] : expected->to_kv()) {
      if (kv.at(k) != v) {
        throw ShapeError("checkpoint was built with backbone." + k + " = " + kv.at(k) + ", config expects " + v);
      }
    }
  }
  config.validate();
  auto bb = init_backbone<float>(config, 0);
  auto seed_it = ar.metadata.find("seed");
  bb.seed = seed_it == ar.metadata.end() ? 0 : static_cast<std::uint64_t>(parse_int(seed_it->second));
  std::size_t seen = 0;
  visit(bb, [&](const std::string& name, Tensor<float>& t) {
    const Shape shape = t.shape();
    t = ar.get<float>(name, &shape);
    ++seen;
  });
  if (seen != ar.size()) throw FormatError("checkpoint holds tensors not used by this backbone config");
  return bb;
}

Digest save_checkpoint(const Backbone<float>& bb, const std::filesystem::path& path) {
  return to_archive(bb).save(path);
}

Backbone<float> load_checkpoint(const std::filesystem::path& path, const BackboneConfig* expected) {
  return from_archive(TensorArchive::load(path, kBackboneMagic), expected);
}

Digest checkpoint_hash(const Backbone<float>& bb) { return to_archive(bb).digest(); }

#define EFSL_INSTANTIATE_VIT(T)                                                                              \
  template struct Backbone<T>;                                                                               \
  template Backbone<T> init_backbone<T>(const BackboneConfig&, std::uint64_t);                               \
  template Tensor<T> patchify<T>(std::span<const float>, std::size_t, const BackboneConfig&);                \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&, const AttentionWeights<T>&, \
                                             int);                                                           \
  template Tensor<T> layer_forward<T>(const LayerWeights<T>&, const Tensor<T>&, int);                        \
  template Tensor<T> embed<T>(const Backbone<T>&, std::span<const float>, std::size_t);                      \
  template std::vector<Tensor<T>> backbone_forward<T>(const Backbone<T>&, std::span<const float>, std::size_t); \
  template Tensor<T> classify_logits<T>(const Backbone<T>&, const Tensor<T>&);

EFSL_INSTANTIATE_VIT(float)
EFSL_INSTANTIATE_VIT(double)

}  // namespace efsl::vit
