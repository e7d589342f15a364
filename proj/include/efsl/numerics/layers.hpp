// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "efsl/numerics/ops.hpp"

namespace efsl::num {

/// y = x w + b with w stored [in, out].
template <typename T>
struct Affine {
  Tensor<T> w;
  Tensor<T> b;

  Tensor<T> operator()(const Tensor<T>& x) const { return affine(x, w, b); }
  std::size_t in() const { return w.dim(0); }
  std::size_t out() const { return w.dim(1); }
  std::size_t numel() const { return w.numel() + b.numel(); }

  static Affine init(std::size_t in, std::size_t out, Rng rng, double stddev = 0.02) {
    return {Tensor<T>::trunc_normal({in, out}, rng, static_cast<T>(stddev)), Tensor<T>::zeros({out})};
  }
  template <typename U>
  Affine<U> cast() const {
    return {w.template cast<U>(), b.template cast<U>()};
  }
};

template <typename T>
struct Norm {
  Tensor<T> gamma;
  Tensor<T> beta;

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  std::size_t numel() const { return gamma.numel() + beta.numel(); }

  static Norm init(std::size_t d) { return {Tensor<T>::full({d}, T(1)), Tensor<T>::zeros({d})}; }
  template <typename U>
  Norm<U> cast() const {
    return {gamma.template cast<U>(), beta.template cast<U>()};
  }
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void append(NamedTensors<T>& out, const std::string& prefix, const Affine<T>& a,
            const char* w_name = "weight", const char* b_name = "bias") {
  out.emplace_back(prefix + "." + w_name, a.w);
  out.emplace_back(prefix + "." + b_name, a.b);
}

template <typename T>
void append(NamedTensors<T>& out, const std::string& prefix, const Norm<T>& n) {
  out.emplace_back(prefix + ".gamma", n.gamma);
  out.emplace_back(prefix + ".beta", n.beta);
}

}  // namespace efsl::num
