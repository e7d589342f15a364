// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/cli/config.hpp"

#include <algorithm>
#include <array>
#include <sstream>

#include "efsl/core/binary.hpp"
#include "efsl/core/error.hpp"
#include "efsl/core/format.hpp"

namespace efsl::cli {

namespace {

constexpr std::array kSections{"data",     "split", "backbone", "pretrain", "model", "ablation",
                               "train",    "eval",  "ablate",   "export",   "paths"};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

const std::map<std::string, std::vector<std::string>>& word_choices() {
  static const std::map<std::string, std::vector<std::string>> choices{
      {"model.activation", {"gelu", "identity"}},
      {"ablation.combine_mode", {"conditional", "fixed", "average"}},
      {"train.sq_mode", {"softmax", "raw"}},
      {"eval.method", {"side-chain", "frozen-pn", "full-finetune"}},
  };
  return choices;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

// Canonical text of `raw` for a key of kind `k`; throws ValidationError.
std::string canonical(const std::string& key, ValueKind k, const std::string& raw) {
  const std::string v = trim(raw);
  auto fail = [&](const std::string& what) -> std::string {
    throw ValidationError(key + " expects " + what + ", got '" + v + "'");
  };
  switch (k) {
    case ValueKind::integer: {
      try {
        return std::to_string(parse_int(v));
      } catch (const ValidationError&) {
        return fail("an integer");
      }
    }
    case ValueKind::real: {
      try {
        return format_real(parse_real(v));
      } catch (const ValidationError&) {
        return fail("a real number");
      }
    }
    case ValueKind::boolean:
      if (v != "true" && v != "false") return fail("true or false");
      return v;
    case ValueKind::word: {
      const auto& options = word_choices().at(key);
      if (std::find(options.begin(), options.end(), v) == options.end()) return fail("one of " + join(options));
      return v;
    }
    case ValueKind::list: {
      std::vector<std::string> items;
      std::stringstream ss(v);
      std::string item;
      const auto presets = ablation_presets();
      while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        if (std::find(presets.begin(), presets.end(), item) == presets.end()) {
          fail("ablation presets from " + join(presets));
        }
        items.push_back(item);
      }
      return join(items);
    }
    case ValueKind::path:
      return v;
  }
  return v;
}

bool as_bool(const std::string& s) { return s == "true"; }
int as_int(const std::string& s) { return static_cast<int>(parse_int(s)); }
std::uint64_t as_u64(const std::string& s) { return static_cast<std::uint64_t>(parse_int(s)); }

}  // namespace

std::vector<std::string> ablation_presets() {
  return {"no-proj",     "no-active-attn", "no-active-mlp", "no-prompts", "no-combine",     "no-f-att",
          "no-f-mlp",    "no-h",           "no-sq",         "no-sq-proj", "combine-fixed", "combine-average"};
}

fsl::Ablation apply_preset(fsl::Ablation a, const std::string& p) {
  if (p == "no-proj") a.proj = false;
  else if (p == "no-active-attn") a.active_attn = false;
  else if (p == "no-active-mlp") a.active_mlp = false;
  else if (p == "no-prompts") a.prompts = false;
  else if (p == "no-combine") a.combine_block = false;
  else if (p == "no-f-att") a.f_att_branch = false;
  else if (p == "no-f-mlp") a.f_mlp_branch = false;
  else if (p == "no-h") a.h_branch = false;
  else if (p == "no-sq") a.sq_attention = false;
  else if (p == "no-sq-proj") a.sq_q_proj = false;
  else if (p == "combine-fixed") a.combine_mode = fsl::CombineMode::fixed;
  else if (p == "combine-average") a.combine_mode = fsl::CombineMode::average;
  else throw ValidationError("unknown ablation preset '" + p + "'");
  return a;
}

RunConfig::RunConfig() {
  using K = ValueKind;
  auto put = [&](const std::string& key, K kind, const std::string& value) { values_[key] = {kind, value}; };

  for (const auto& [k, v] : data::SyntheticDatasetSpec{}.to_kv()) {
    const bool real = k == "max_rotation" || k.starts_with("noise") || k.ends_with("jitter");
    put("data." + k, real ? K::real : K::integer, v);
  }
  put("split.base_fraction", K::real, "0.75");
  put("split.seed", K::integer, "1");
  for (const auto& [k, v] : vit::BackboneConfig{}.to_kv()) put("backbone." + k, k == "mlp_ratio" ? K::real : K::integer, v);

  const vit::PretrainConfig p;
  put("pretrain.epochs", K::integer, std::to_string(p.epochs));
  put("pretrain.batch", K::integer, std::to_string(p.batch));
  put("pretrain.lr", K::real, format_real(p.lr));
  put("pretrain.weight_decay", K::real, format_real(p.weight_decay));
  put("pretrain.warmup_fraction", K::real, format_real(p.warmup_fraction));
  put("pretrain.clip_norm", K::real, format_real(p.clip_norm));
  put("pretrain.flip", K::boolean, p.flip ? "true" : "false");
  put("pretrain.seed", K::integer, std::to_string(p.seed));

  // Side-chain keys: architecture under [model], switches under [ablation],
  // scalar hyperparameters under [train]. Backbone-derived fields are not keys.
  for (const auto& [k, v] : fsl::SideChainConfig{}.to_kv()) {
    if (k == "embed_dim" || k == "num_layers" || k == "num_heads") continue;
    if (k.starts_with("ablation.")) {
      put(k, k == "ablation.combine_mode" ? K::word : K::boolean, v);
    } else if (k == "xi" || k == "zeta" || k == "alpha" || k == "tau") {
      put("train." + k, K::real, v);
    } else if (k == "sq_mode") {
      put("train.sq_mode", K::word, v);
    } else {
      put("model." + k, k == "activation" ? K::word : k == "zero_init_proj" ? K::boolean : K::integer, v);
    }
  }
  for (const auto& [k, v] : train::TrainConfig{}.to_kv()) {
    const bool real = k == "train.lr" || k == "train.weight_decay" || k == "train.clip_norm";
    put(k, real ? K::real : K::integer, v);
  }
  for (const auto& [k, v] : train::EvalConfig{}.to_kv()) put(k, K::integer, v);
  put("eval.workers", K::integer, "1");
  put("eval.method", K::word, "side-chain");
  put("ablate.rows", K::list, "no-prompts,no-active-attn,no-active-mlp,no-proj,no-combine,combine-average,no-sq");
  put("export.episode", K::integer, "0");
  put("paths.data", K::path, "");
  put("paths.checkpoint", K::path, "");
  put("paths.params", K::path, "");
}

ValueKind RunConfig::kind(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
  return it->second.kind;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
  it->second.text = canonical(key, it->second.kind, value);
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
  return it->second.text;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  for (int line = 1; std::getline(in, raw); ++line) {
    const auto hash = raw.find('#');
    const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    const std::string where = "config line " + std::to_string(line) + ": ";
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ValidationError(where + "unterminated section header");
      section = trim(s.substr(1, s.size() - 2));
      if (std::find(kSections.begin(), kSections.end(), section) == kSections.end()) {
        throw ValidationError(where + "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ValidationError(where + "expected 'key = value'");
    if (section.empty()) throw ValidationError(where + "key outside of any section");
    try {
      c.set(section + "." + trim(s.substr(0, eq)), s.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::vector<std::byte> bytes;
  try {
    bytes = read_file(path);
  } catch (const Error& e) {
    throw ValidationError("cannot read config file " + path.string() + ": " + e.what());
  }
  return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  bool first = true;
  for (const std::string section : kSections) {
    if (!first) os << "\n";
    first = false;
    os << "[" << section << "]\n";
    const std::string prefix = section + ".";
    for (const auto& [k, v] : values_) {
      if (!k.starts_with(prefix)) continue;
      os << k.substr(prefix.size()) << " =" << (v.text.empty() ? "" : " " + v.text) << "\n";
    }
  }
  return os.str();
}

data::SyntheticDatasetSpec RunConfig::dataset() const {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : values_) {
    if (k.starts_with("data.")) kv[k.substr(5)] = v.text;
  }
  auto spec = data::SyntheticDatasetSpec::from_kv(kv);
  spec.validate();
  return spec;
}

double RunConfig::base_fraction() const { return parse_real(get("split.base_fraction")); }
std::uint64_t RunConfig::split_seed() const { return as_u64(get("split.seed")); }

vit::BackboneConfig RunConfig::backbone() const {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : values_) {
    if (k.starts_with("backbone.")) kv[k.substr(9)] = v.text;
  }
  auto c = vit::BackboneConfig::from_kv(kv);
  c.validate();
  return c;
}

vit::PretrainConfig RunConfig::pretrain() const {
  vit::PretrainConfig p;
  p.epochs = as_int(get("pretrain.epochs"));
  p.batch = as_int(get("pretrain.batch"));
  p.lr = parse_real(get("pretrain.lr"));
  p.weight_decay = parse_real(get("pretrain.weight_decay"));
  p.warmup_fraction = parse_real(get("pretrain.warmup_fraction"));
  p.clip_norm = parse_real(get("pretrain.clip_norm"));
  p.flip = as_bool(get("pretrain.flip"));
  p.seed = as_u64(get("pretrain.seed"));
  p.validate();
  return p;
}

fsl::SideChainConfig RunConfig::model() const {
  auto c = fsl::SideChainConfig::for_backbone(backbone());
  c.side_tokens = as_int(get("model.side_tokens"));
  c.bottleneck = as_int(get("model.bottleneck"));
  c.attn_bottleneck = as_int(get("model.attn_bottleneck"));
  c.activation = get("model.activation") == "gelu" ? fsl::Activation::gelu : fsl::Activation::identity;
  c.zero_init_proj = as_bool(get("model.zero_init_proj"));
  c.xi = parse_real(get("train.xi"));
  c.zeta = parse_real(get("train.zeta"));
  c.alpha = parse_real(get("train.alpha"));
  c.tau = parse_real(get("train.tau"));
  c.sq_mode = fsl::parse_sq_mode(get("train.sq_mode"));
  auto& a = c.ablation;
  a.proj = as_bool(get("ablation.proj"));
  a.active_attn = as_bool(get("ablation.active_attn"));
  a.active_mlp = as_bool(get("ablation.active_mlp"));
  a.prompts = as_bool(get("ablation.prompts"));
  a.combine_block = as_bool(get("ablation.combine_block"));
  a.f_att_branch = as_bool(get("ablation.f_att_branch"));
  a.f_mlp_branch = as_bool(get("ablation.f_mlp_branch"));
  a.h_branch = as_bool(get("ablation.h_branch"));
  a.sq_attention = as_bool(get("ablation.sq_attention"));
  a.sq_q_proj = as_bool(get("ablation.sq_q_proj"));
  a.combine_mode = fsl::parse_combine_mode(get("ablation.combine_mode"));
  c.validate();
  return c;
}

train::TrainConfig RunConfig::training() const {
  train::TrainConfig t;
  t.epochs = as_int(get("train.epochs"));
  t.episodes_per_epoch = as_int(get("train.episodes_per_epoch"));
  t.episode = {as_int(get("train.ways")), as_int(get("train.shots")), as_int(get("train.queries"))};
  t.lr = parse_real(get("train.lr"));
  t.weight_decay = parse_real(get("train.weight_decay"));
  t.clip_norm = parse_real(get("train.clip_norm"));
  t.seed = as_u64(get("train.seed"));
  t.validate();
  return t;
}

train::EvalConfig RunConfig::evaluation() const {
  train::EvalConfig e;
  e.episodes = as_int(get("eval.episodes"));
  e.episode = {as_int(get("eval.ways")), as_int(get("eval.shots")), as_int(get("eval.queries"))};
  e.seed = as_u64(get("eval.seed"));
  e.workers = as_int(get("eval.workers"));
  e.validate();
  return e;
}

std::string RunConfig::eval_method() const { return get("eval.method"); }

std::vector<train::AblationRow> RunConfig::ablation_rows() const {
  const auto base = model().ablation;
  std::vector<train::AblationRow> rows;
  std::stringstream ss(get("ablate.rows"));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) rows.push_back({item, apply_preset(base, item)});
  }
  return rows;
}

int RunConfig::export_episode() const {
  const int e = as_int(get("export.episode"));
  if (e < 0) throw ValidationError("export.episode must be >= 0");
  return e;
}

std::filesystem::path RunConfig::path(const std::string& name) const { return get("paths." + name); }

}  // namespace efsl::cli
