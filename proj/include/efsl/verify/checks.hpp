// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "efsl/trainer/trainer.hpp"

namespace efsl::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // measured values behind the verdict

  std::string line() const;  // "PASS name: detail"
};

/// Episode-loss gradients of the whole side chain against central
/// differences at 64-bit (d=16, n=2, m=10, both SQ modes).
CheckResult check_gradients(std::uint64_t seed = 1, double tol = 1e-4);

/// Random small instances against the straight-line reference code, 64-bit.
CheckResult check_prototypes(int cases = 100, std::uint64_t seed = 1);
CheckResult check_frozen_block(int cases = 100, std::uint64_t seed = 1);
CheckResult check_combine(int cases = 100, std::uint64_t seed = 1);
CheckResult check_sq(fsl::SqMode mode, int cases = 100, std::uint64_t seed = 1);

/// Conditional combine weights at training precision for random final
/// hidden states: count 3n, nonnegative, sum to one within 1e-6.
CheckResult check_combine_weights(int inputs = 1000, std::uint64_t seed = 1);

/// With alpha = 0 the SQ head predicts exactly what plain prototype
/// classification predicts on the same side-chain features.
CheckResult check_sq_reduction(const fsl::SideChain<float>& params, const vit::Backbone<float>& bb,
                               const train::FeatureBank& bank, const data::ClassSplit& split,
                               const train::EvalConfig& eval);

/// ViT-S-like config lands in [1.0M, 1.5M]; the default toy config equals a
/// count worked out by hand.
CheckResult check_param_counts();

/// summarize() against a two-pass long-double evaluation of the CI formula.
CheckResult check_ci_formula(int lists = 50, std::uint64_t seed = 1);

/// Digest of the backbone's per-layer activations for one image.
Digest probe_activations(const vit::Backbone<float>& bb, const data::Dataset& ds, const data::ImageRef& image);

/// Everything above plus training-level invariants (frozen backbone, seed
/// isolation, reproducibility, worker-count independence) on a small
/// randomly initialised backbone. Runs in well under a minute.
std::vector<CheckResult> run_suite(std::uint64_t seed = 1);

}  // namespace efsl::verify
