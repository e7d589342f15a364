// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "efsl/numerics/tensor.hpp"

namespace efsl::num {

using NamedTensor = std::pair<std::string, Tensor<double>>;

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const;
  double worst() const;
  std::string summary() const;
};

/// Compares tape gradients of the scalar `loss_fn` against central
/// differences (f(t + h) - f(t - h)) / 2h for every element of every tensor in
/// `params`. Relative error is |a - n| / max(|a|, |n|, floor); tensors whose
/// worst element exceeds `tol` are flagged. The floor keeps gradients that are
/// exactly zero (e.g. attention key biases) from dividing difference noise by
/// nothing. `loss_fn` must be deterministic.
GradCheckReport finite_difference_check(const std::function<Tensor<double>()>& loss_fn,
                                        const std::vector<NamedTensor>& params, double step, double tol,
                                        double floor = 1e-6);

}  // namespace efsl::num
