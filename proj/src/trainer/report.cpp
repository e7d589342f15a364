// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>

#include "efsl/core/error.hpp"
#include "efsl/core/format.hpp"
#include "efsl/trainer/trainer.hpp"

namespace efsl::train {

namespace {

void put_spec(std::map<std::string, std::string>& kv, const std::string& prefix, const data::EpisodeSpec& s) {
  kv[prefix + "ways"] = std::to_string(s.ways);
  kv[prefix + "shots"] = std::to_string(s.shots);
  kv[prefix + "queries"] = std::to_string(s.queries);
}

std::string join(const std::vector<double>& v, int decimals) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_fixed(v[i], decimals);
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("train.epochs must be >= 0");
  if (episodes_per_epoch < 1) throw ValidationError("train.episodes_per_epoch must be >= 1");
  episode.validate();
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("train.lr must be finite and >= 0");
  if (!(weight_decay >= 0.0)) throw ValidationError("train.weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) throw ValidationError("train.clip_norm must be > 0");
}

std::map<std::string, std::string> TrainConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["train.epochs"] = std::to_string(epochs);
  kv["train.episodes_per_epoch"] = std::to_string(episodes_per_epoch);
  put_spec(kv, "train.", episode);
  kv["train.lr"] = format_real(lr);
  kv["train.weight_decay"] = format_real(weight_decay);
  kv["train.clip_norm"] = format_real(clip_norm);
  kv["train.seed"] = std::to_string(seed);
  return kv;
}

void EvalConfig::validate() const {
  if (episodes < 1) throw ValidationError("eval.episodes must be >= 1");
  episode.validate();
  if (workers < 1) throw ValidationError("eval.workers must be >= 1");
}

// Worker count is left out on purpose: it never changes the results.
std::map<std::string, std::string> EvalConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["eval.episodes"] = std::to_string(episodes);
  put_spec(kv, "eval.", episode);
  kv["eval.seed"] = std::to_string(seed);
  return kv;
}

AccuracySummary summarize(std::span<const double> accuracies) {
  AccuracySummary s;
  const std::size_t e = accuracies.size();
  if (e == 0) return s;
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  const double mean = sum / static_cast<double>(e);
  s.mean = 100.0 * mean;
  if (e < 2) return s;
  double ss = 0.0;
  for (double a : accuracies) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / static_cast<double>(e - 1));
  s.ci95 = 100.0 * 1.96 * sd / std::sqrt(static_cast<double>(e));
  return s;
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os << "format = efsl-metrics 1\n";
  os << "kind = " << kind << "\n";
  os << "episodes = " << episodes << "\n";
  os << "accuracy_mean = " << format_fixed(accuracy_mean, 2) << "\n";
  os << "ci95 = " << format_fixed(ci95, 2) << "\n";
  os << "params.trainable = " << trainable << "\n";
  os << "params.frozen = " << frozen << "\n";
  for (const auto& [k, v] : breakdown) os << "params.breakdown." << k << " = " << v << "\n";
  os << "episode_digest = " << episode_digest << "\n";
  os << "provenance = " << provenance << "\n";
  for (const auto& [k, v] : config) os << "config." << k << " = " << v << "\n";
  os << "episode_accuracies = " << join(episode_accuracies, 6) << "\n";
  os << "loss_curve = " << join(loss_curve, 6) << "\n";
  return os.str();
}

std::string MetricsReport::timing_text() const {
  return "kind = " + kind + "\nwall_time_seconds = " + format_fixed(wall_time, 3) + "\n";
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os << "format = efsl-ablation 1\n";
  os << "rows = " << rows.size() << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::string p = "row." + std::to_string(i) + ".";
    os << p << "name = " << r.name << "\n";
    os << p << "trainable = " << r.trainable << "\n";
    os << p << "acc_1shot = " << format_fixed(r.one_shot.mean, 2) << "\n";
    os << p << "ci95_1shot = " << format_fixed(r.one_shot.ci95, 2) << "\n";
    os << p << "acc_5shot = " << format_fixed(r.five_shot.mean, 2) << "\n";
    os << p << "ci95_5shot = " << format_fixed(r.five_shot.ci95, 2) << "\n";
    os << p << "train_episode_digest = " << r.train_episode_digest << "\n";
  }
  return os.str();
}

std::string embeddings_to_text(const std::vector<EmbeddingRow>& rows) {
  std::ostringstream os;
  os << "# id role class features...\n";
  for (const auto& r : rows) {
    os << r.id << ' ' << r.role << ' ' << r.cls;
    for (float f : r.feature) os << ' ' << format_real(static_cast<double>(f));
    os << '\n';
  }
  return os.str();
}

}  // namespace efsl::train
