// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "efsl/numerics/tensor.hpp"

namespace efsl::num {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Parameters are updated in place through
/// their leaf storage; a parameter without a gradient is left untouched.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWConfig config = {});

  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return steps_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t steps_ = 0;
};

/// base * (1 + cos(pi * step / total)) / 2; reaches 0 at step == total.
double cosine_lr(double base, std::int64_t step, std::int64_t total);

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<const Tensor<T>> params, double max_norm);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace efsl::num
