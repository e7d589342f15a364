// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/cli/app.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "efsl/cli/config.hpp"
#include "efsl/core/binary.hpp"
#include "efsl/core/error.hpp"
#include "efsl/core/format.hpp"
#include "efsl/core/log.hpp"
#include "efsl/verify/checks.hpp"

namespace efsl::cli {

namespace fs = std::filesystem;

namespace {

struct Context {
  RunConfig config;
  fs::path out;
};

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::as_bytes(std::span<const char>(text.data(), text.size())));
}

fs::path input(const RunConfig& c, const std::string& name) {
  const auto p = c.path(name);
  if (!p.empty() && !fs::is_regular_file(p)) throw ValidationError("paths." + name + ": no such file " + p.string());
  return p;
}

data::Dataset load_data(const RunConfig& c) {
  const auto path = input(c, "data");
  if (path.empty()) {
    log_info("generating dataset from [data]");
    return data::generate_dataset(c.dataset());
  }
  log_info("loading dataset ", path.string());
  return data::load_dataset(path);
}

data::SplitPair make_splits(const RunConfig& c, const data::Dataset& ds) {
  const int ways = std::max(c.training().episode.ways, c.evaluation().episode.ways);
  return data::split_classes(ds.num_classes(), ds.images_per_class(), c.base_fraction(),
                             num::Rng(c.split_seed()).split("split"), ways);
}

vit::Backbone<float> load_backbone(const RunConfig& c) {
  const auto path = input(c, "checkpoint");
  if (path.empty()) throw ValidationError("this command needs paths.checkpoint (run pretrain first)");
  const auto expected = c.backbone();
  log_info("loading backbone ", path.string());
  return vit::load_checkpoint(path, &expected);
}

// Trained parameters with the run's head settings (alpha, tau, xi, zeta,
// SQ mode and the SQ switch) applied; everything structural must match.
fsl::SideChain<float> load_params(const RunConfig& c) {
  const auto path = input(c, "params");
  if (path.empty()) throw ValidationError("this command needs paths.params (run train first)");
  log_info("loading side chain ", path.string());
  auto sc = fsl::side_chain_from_archive(TensorArchive::load(path, kSideChainMagic));
  const auto want = c.model();
  const auto have_kv = sc.config.to_kv();
  for (const auto& [k, v] : want.to_kv()) {
    static const std::vector<std::string> runtime{"alpha", "tau", "xi", "zeta", "sq_mode", "ablation.sq_attention"};
    if (std::find(runtime.begin(), runtime.end(), k) != runtime.end()) continue;
    if (have_kv.at(k) != v) {
      throw ValidationError(path.string() + " was trained with " + k + " = " + have_kv.at(k) + ", config has " + v);
    }
  }
  sc.config = want;
  return sc;
}

train::FeatureBank bank_for(const vit::Backbone<float>& bb, const data::Dataset& ds, std::vector<int> classes) {
  log_info("caching backbone activations for ", classes.size(), " classes");
  auto bank = train::FeatureBank::build(bb, ds, classes);
  log_info("cached");
  return bank;
}

std::vector<int> concat(const data::SplitPair& s) {
  auto all = s.base.classes;
  all.insert(all.end(), s.novel.classes.begin(), s.novel.classes.end());
  return all;
}

void write_report(const Context& ctx, const std::string& stem, const train::MetricsReport& r) {
  write_text(ctx.out / (stem + "_metrics.txt"), r.to_text());
  write_text(ctx.out / (stem + "_timing.txt"), r.timing_text());
  log_info(stem, ": accuracy ", format_fixed(r.accuracy_mean, 2), " +- ", format_fixed(r.ci95, 2), " over ",
           r.episodes, " episodes");
}

fs::path cmd_gen_data(const Context& ctx) {
  const auto ds = data::generate_dataset(ctx.config.dataset());
  const auto path = ctx.out / "dataset.bin";
  const Digest d = data::save_dataset(ds, path);
  log_info("dataset ", ds.num_classes(), " classes x ", ds.images_per_class(), " images, hash ", to_hex(d));
  return path;
}

fs::path cmd_pretrain(const Context& ctx) {
  const auto& c = ctx.config;
  const auto ds = load_data(c);
  const auto splits = make_splits(c, ds);
  const auto result = vit::pretrain_backbone(ds, splits.base, c.backbone(), c.pretrain());
  const auto ckpt = ctx.out / "backbone.ckpt";
  const Digest h = vit::save_checkpoint(result.backbone, ckpt);
  std::ostringstream os;
  os << "format = efsl-pretrain 1\n";
  os << "checkpoint = backbone.ckpt\n";
  os << "checkpoint_hash = " << to_hex(h) << "\n";
  os << "train_accuracy = " << format_fixed(100.0 * result.report.train_accuracy, 2) << "\n";
  os << "epoch_loss = ";
  for (std::size_t i = 0; i < result.report.epoch_loss.size(); ++i) {
    os << (i ? "," : "") << format_fixed(result.report.epoch_loss[i], 6);
  }
  os << "\n";
  const auto path = ctx.out / "pretrain.txt";
  write_text(path, os.str());
  log_info("base-split train accuracy ", format_fixed(100.0 * result.report.train_accuracy, 2), "%");
  return path;
}

fs::path cmd_train(const Context& ctx) {
  const auto& c = ctx.config;
  const auto model = c.model();
  const auto cfg = c.training();
  const auto bb = load_backbone(c);
  const auto ds = load_data(c);
  const auto splits = make_splits(c, ds);
  const auto bank = bank_for(bb, ds, splits.base.classes);
  train::TrainHooks hooks;
  hooks.last_good_path = ctx.out / "side_chain.last_good.bin";
  const auto r = train::train(bb, bank, splits.base, model, cfg, hooks);
  fsl::to_archive(r.params, cfg.seed).save(ctx.out / "side_chain.bin");
  write_report(ctx, "train", r.report);
  return ctx.out / "train_metrics.txt";
}

fs::path cmd_eval(const Context& ctx) {
  const auto& c = ctx.config;
  const auto method = c.eval_method();
  const auto ev = c.evaluation();
  const auto bb = load_backbone(c);
  const auto ds = load_data(c);
  const auto splits = make_splits(c, ds);
  train::MetricsReport r;
  if (method == "full-finetune") {
    r = train::baseline_full_finetune(bb, ds, splits, c.model().tau, c.training(), ev);
  } else {
    const auto bank = bank_for(bb, ds, splits.novel.classes);
    if (method == "frozen-pn") {
      r = train::baseline_frozen_pn(bb, bank, splits.novel, ev, c.model().tau);
    } else {
      r = train::evaluate(load_params(c), bb, bank, splits.novel, ev);
    }
  }
  write_report(ctx, "eval", r);
  return ctx.out / "eval_metrics.txt";
}

fs::path cmd_ablate(const Context& ctx) {
  const auto& c = ctx.config;
  const auto bb = load_backbone(c);
  const auto ds = load_data(c);
  const auto splits = make_splits(c, ds);
  const auto bank = bank_for(bb, ds, concat(splits));
  const auto table = train::run_ablation(bb, bank, splits, c.model(), c.training(), c.evaluation(), c.ablation_rows());
  log_info("name                 params   1-shot          5-shot");
  for (const auto& r : table.rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-18s %8zu   %6.2f +- %4.2f   %6.2f +- %4.2f", r.name.c_str(), r.trainable,
                  r.one_shot.mean, r.one_shot.ci95, r.five_shot.mean, r.five_shot.ci95);
    log_info(line);
  }
  const auto path = ctx.out / "ablation.txt";
  write_text(path, table.to_text());
  return path;
}

fs::path cmd_count_params(const Context& ctx) {
  const auto& c = ctx.config;
  const auto pc = fsl::count_params(c.model(), c.backbone());
  std::ostringstream os;
  os << "format = efsl-params 1\n";
  os << "trainable = " << pc.trainable << "\n";
  os << "trainable_without_sq_h0 = " << pc.trainable_without_sq_h0() << "\n";
  os << "frozen = " << pc.frozen << "\n";
  for (const auto& [k, v] : pc.breakdown) {
    os << "breakdown." << k << " = " << v << "\n";
    log_info(k, ": ", v);
  }
  log_info("trainable ", pc.trainable, " (", pc.trainable_without_sq_h0(), " without SQ projection and H_0), frozen ",
           pc.frozen);
  const auto path = ctx.out / "params.txt";
  write_text(path, os.str());
  return path;
}

fs::path cmd_export(const Context& ctx) {
  const auto& c = ctx.config;
  const auto params = load_params(c);
  const auto bb = load_backbone(c);
  const auto ds = load_data(c);
  const auto splits = make_splits(c, ds);
  const auto bank = bank_for(bb, ds, splits.novel.classes);
  const auto ep = train::eval_episode(splits.novel, c.evaluation(), c.export_episode());
  const auto rows = train::export_embeddings(params, bb, bank, ep);
  const auto path = ctx.out / "embeddings.txt";
  write_text(path, train::embeddings_to_text(rows));
  log_info("exported ", rows.size(), " rows for evaluation episode ", c.export_episode());
  return path;
}

struct VerifyFailed : Error {
  using Error::Error;
};

fs::path cmd_verify(const Context& ctx) {
  const auto results = verify::run_suite(ctx.config.split_seed());
  std::string text;
  int failed = 0;
  for (const auto& r : results) {
    log_info(r.line());
    text += r.line() + "\n";
    failed += r.passed ? 0 : 1;
  }
  const auto path = ctx.out / "verify.txt";
  write_text(path, text);
  if (failed) throw VerifyFailed(std::to_string(failed) + " of " + std::to_string(results.size()) + " properties failed");
  log_info("all ", results.size(), " properties hold");
  return path;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Few-shot side-chain adaptation of a frozen toy vision transformer", "efsl"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  std::string out = "efsl_out";
  bool quiet = false;

  using Fn = fs::path (*)(const Context&);
  const std::vector<std::tuple<std::string, std::string, Fn>> commands{
      {"gen-data", "Render the synthetic dataset", cmd_gen_data},
      {"pretrain", "Pretrain the backbone on the base classes", cmd_pretrain},
      {"train", "Meta-train a side chain over a frozen checkpoint", cmd_train},
      {"eval", "Evaluate on novel-class episodes (eval.method picks the model)", cmd_eval},
      {"ablate", "Train and evaluate the full model and each ablate.rows preset", cmd_ablate},
      {"count-params", "Count trainable and frozen parameters", cmd_count_params},
      {"export-embeddings", "Dump features and prototypes for one episode", cmd_export},
      {"verify", "Check gradients, reference equivalences and training invariants", cmd_verify},
  };
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "Config file (see docs/config.md)");
    sub->add_option("--set", sets, "Override one key, e.g. --set train.lr=0.001 (repeatable, last wins)");
    sub->add_option("--out", out, "Output directory")->capture_default_str();
    sub->add_flag("--quiet", quiet, "No progress output");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitInvalid;
  }

  const auto* sub = app.get_subcommands().front();
  Fn fn = nullptr;
  for (const auto& [name, help, f] : commands) {
    if (name == sub->get_name()) fn = f;
  }
  set_log_level(quiet ? LogLevel::quiet : LogLevel::info);

  Context ctx;
  try {
    ctx.config = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + s + "'");
      ctx.config.set(s.substr(0, eq), s.substr(eq + 1));
    }
    ctx.config.model();  // surfaces invalid combinations before any work
    ctx.config.training();
    ctx.config.evaluation();
    ctx.out = out;
    fs::create_directories(ctx.out);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }

  set_log_file(ctx.out / "log.txt");
  log_info("efsl ", sub->get_name());
  if (!config_path.empty()) log_info("config file ", config_path);
  for (const auto& s : sets) log_info("override ", s);
  write_text(ctx.out / "config.txt", ctx.config.to_text());

  int code = kExitOk;
  try {
    const auto path = fn(ctx);
    std::cout << path.string() << std::endl;
  } catch (const ValidationError& e) {
    log_error(e.what());
    code = kExitInvalid;
  } catch (const FormatError& e) {  // unreadable, corrupt or wrong-version input file
    log_error(e.what());
    code = kExitInvalid;
  } catch (const std::exception& e) {
    log_error(e.what());
    code = kExitFailure;
  }
  set_log_file({});
  return code;
}

}  // namespace efsl::cli
