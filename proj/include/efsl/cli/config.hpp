// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "efsl/backbone/pretrain.hpp"
#include "efsl/trainer/trainer.hpp"

namespace efsl::cli {

enum class ValueKind { integer, real, boolean, word, list, path };

/// Every setting of a run, keyed "section.name", with all defaults
/// materialised. See docs/config.md for the file grammar.
class RunConfig {
 public:
  RunConfig();

  // Throws ValidationError naming the line for syntax errors, unknown
  // sections or keys, and ill-typed values.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);

  // Same checks as parse; later calls win.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  ValueKind kind(const std::string& key) const;

  /// Canonical text: sections in fixed order, keys sorted, one
  /// "key = value" per line. parse(to_text()) reproduces the config.
  std::string to_text() const;

  data::SyntheticDatasetSpec dataset() const;
  double base_fraction() const;
  std::uint64_t split_seed() const;
  vit::BackboneConfig backbone() const;
  vit::PretrainConfig pretrain() const;
  fsl::SideChainConfig model() const;  // [model], the [train] hyperparameters and [ablation]
  train::TrainConfig training() const;
  train::EvalConfig evaluation() const;
  std::string eval_method() const;
  std::vector<train::AblationRow> ablation_rows() const;
  int export_episode() const;
  std::filesystem::path path(const std::string& name) const;  // paths.<name>, empty if unset

 private:
  struct Value {
    ValueKind kind;
    std::string text;
  };
  std::map<std::string, Value> values_;
};

/// Ablation presets accepted in ablate.rows, each flipping one switch of the
/// base configuration.
std::vector<std::string> ablation_presets();
fsl::Ablation apply_preset(fsl::Ablation base, const std::string& preset);

}  // namespace efsl::cli
