// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "efsl/cli/app.hpp"
#include "efsl/cli/config.hpp"
#include "efsl/core/error.hpp"
#include "efsl/core/log.hpp"

using namespace efsl;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(# small enough to pretrain in a second
[data]
num_classes = 12
images_per_class = 24
image_size = 12

[split]
base_fraction = 0.5

[backbone]
image_size = 8
embed_dim = 16
num_layers = 2
num_heads = 2
num_base_classes = 6

[pretrain]
epochs = 1

[train]
epochs = 1
episodes_per_epoch = 6
queries = 3

[eval]
episodes = 12
queries = 3
)";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct Workdir {
  fs::path dir;
  Workdir() : dir(fs::temp_directory_path() / ("efsl_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "tiny.cfg") << kTiny;
  }
  ~Workdir() { fs::remove_all(dir); }
  std::string cfg() const { return (dir / "tiny.cfg").string(); }
};

int efsl_run(std::vector<std::string> args) {
  args.insert(args.begin(), "efsl");
  args.emplace_back("--quiet");
  const int code = cli::run(args);
  set_log_level(LogLevel::quiet);
  return code;
}

}  // namespace

TEST_CASE("config text round-trips and canonicalises values") {
  auto c = cli::RunConfig::parse("[train]\nlr = 1e-3  # comment\n[ablation]\nprompts = false\n");
  cli::RunConfig d;
  d.set("train.lr", "0.001");
  CHECK(c.get("train.lr") == d.get("train.lr"));
  CHECK_FALSE(c.model().ablation.prompts);
  const auto again = cli::RunConfig::parse(c.to_text());
  CHECK(again.to_text() == c.to_text());
  CHECK(c.training().lr == doctest::Approx(1e-3));
}

TEST_CASE("config errors name the line") {
  auto msg = [](const char* text) {
    try {
      cli::RunConfig::parse(text);
    } catch (const ValidationError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(msg("[train]\n\nbogus = 1\n").find("line 3") != std::string::npos);
  CHECK(msg("[nosuch]\n").find("unknown section") != std::string::npos);
  CHECK(msg("lr = 1\n").find("outside") != std::string::npos);
  CHECK(msg("[train]\nepochs = two\n").find("integer") != std::string::npos);
  CHECK(msg("[eval]\nmethod = magic\n").find("frozen-pn") != std::string::npos);
  CHECK(msg("[ablate]\nrows = no-prompts,bad\n").find("presets") != std::string::npos);
}

TEST_CASE("later overrides win") {
  cli::RunConfig c;
  c.set("train.seed", "4");
  c.set("train.seed", "9");
  CHECK(c.training().seed == 9);
}

TEST_CASE("ablation presets flip exactly one switch") {
  const fsl::Ablation base;
  for (const auto& p : cli::ablation_presets()) {
    const auto a = cli::apply_preset(base, p);
    CHECK_MESSAGE(!(a == base), p);
  }
  CHECK_THROWS_AS(cli::apply_preset(base, "nope"), ValidationError);
}

TEST_CASE("exit codes") {
  Workdir w;
  const auto out = (w.dir / "o").string();
  CHECK(efsl_run({}) == cli::kExitInvalid);
  CHECK(efsl_run({"no-such-command"}) == cli::kExitInvalid);
  CHECK(efsl_run({"count-params", "--out", out, "--set", "train.bogus=1"}) == cli::kExitInvalid);
  CHECK(efsl_run({"count-params", "--out", out, "--set", "train.lr"}) == cli::kExitInvalid);
  CHECK(efsl_run({"count-params", "--out", out, "--config", (w.dir / "missing.cfg").string()}) == cli::kExitInvalid);
  CHECK(efsl_run({"train", "--config", w.cfg(), "--out", out}) == cli::kExitInvalid);  // no checkpoint
  CHECK(efsl_run({"train", "--config", w.cfg(), "--out", out, "--set", "paths.checkpoint=" + w.cfg()}) ==
        cli::kExitInvalid);  // not a checkpoint
  CHECK(efsl_run({"count-params", "--config", w.cfg(), "--out", out}) == cli::kExitOk);
  CHECK(fs::exists(w.dir / "o" / "params.txt"));
  CHECK(fs::exists(w.dir / "o" / "config.txt"));
  CHECK(fs::exists(w.dir / "o" / "log.txt"));
}

TEST_CASE("pipeline through the command line is deterministic") {
  Workdir w;
  const auto d = w.dir;
  REQUIRE(efsl_run({"pretrain", "--config", w.cfg(), "--out", (d / "pre").string()}) == 0);
  const auto ckpt = "paths.checkpoint=" + (d / "pre" / "backbone.ckpt").string();
  auto train_eval = [&](const std::string& name, const std::vector<std::string>& extra) {
    const auto out = (d / name).string();
    std::vector<std::string> t{"train", "--config", w.cfg(), "--out", out, "--set", ckpt};
    t.insert(t.end(), extra.begin(), extra.end());
    REQUIRE(efsl_run(t) == 0);
    std::vector<std::string> e{"eval", "--config", w.cfg(), "--out", out, "--set", ckpt,
                               "--set", "paths.params=" + (d / name / "side_chain.bin").string()};
    e.insert(e.end(), extra.begin(), extra.end());
    REQUIRE(efsl_run(e) == 0);
  };
  train_eval("a", {});
  train_eval("b", {});
  train_eval("c", {"--set", "eval.seed=7"});
  CHECK(slurp(d / "a" / "train_metrics.txt") == slurp(d / "b" / "train_metrics.txt"));
  CHECK(slurp(d / "a" / "eval_metrics.txt") == slurp(d / "b" / "eval_metrics.txt"));
  CHECK(slurp(d / "a" / "side_chain.bin") == slurp(d / "c" / "side_chain.bin"));
  CHECK(slurp(d / "a" / "eval_metrics.txt") != slurp(d / "c" / "eval_metrics.txt"));

  // Head-only settings may change at evaluation; structure may not.
  const auto params = "paths.params=" + (d / "a" / "side_chain.bin").string();
  const auto a0 = (d / "alpha0").string(), nosq = (d / "nosq").string();
  REQUIRE(efsl_run({"eval", "--config", w.cfg(), "--out", a0, "--set", ckpt, "--set", params, "--set",
                    "train.alpha=0"}) == 0);
  REQUIRE(efsl_run({"eval", "--config", w.cfg(), "--out", nosq, "--set", ckpt, "--set", params, "--set",
                    "ablation.sq_attention=false"}) == 0);
  auto accuracy_lines = [](const fs::path& p) {
    std::istringstream in(slurp(p));
    std::string out;
    for (std::string line; std::getline(in, line);) {
      if (line.starts_with("accuracy_mean") || line.starts_with("ci95") || line.starts_with("episode_accuracies")) {
        out += line + "\n";
      }
    }
    return out;
  };
  CHECK(accuracy_lines(d / "alpha0" / "eval_metrics.txt") == accuracy_lines(d / "nosq" / "eval_metrics.txt"));
  CHECK(efsl_run({"eval", "--config", w.cfg(), "--out", a0, "--set", ckpt, "--set", params, "--set",
                  "model.bottleneck=8"}) == cli::kExitInvalid);

  REQUIRE(efsl_run({"eval", "--config", w.cfg(), "--out", (d / "pn").string(), "--set", ckpt, "--set",
                    "eval.method=frozen-pn"}) == 0);
  CHECK(slurp(d / "pn" / "eval_metrics.txt").find("kind = baseline-frozen-pn") != std::string::npos);
  REQUIRE(efsl_run({"export-embeddings", "--config", w.cfg(), "--out", (d / "a").string(), "--set", ckpt, "--set",
                    params}) == 0);
  CHECK(slurp(d / "a" / "embeddings.txt").starts_with("# id role class"));
}
