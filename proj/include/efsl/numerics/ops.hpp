// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "efsl/numerics/tensor.hpp"

namespace efsl::num {

// Elementwise arithmetic with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);

/// Batched matrix product a[.., M, K] x b[.., K, N] -> [.., M, N].
/// Batch dimensions broadcast; a rank-2 `b` is shared by every batch entry.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[.., K] w[K, N] + b[N] in one pass (fused bias).
template <typename T> Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, std::span<const std::size_t> order);
// Swaps the last two dimensions.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
// Rows [start, start + length) along `axis`.
template <typename T> Tensor<T> narrow(const Tensor<T>& x, int axis, std::size_t start, std::size_t length);
// Inserts a new dimension at `axis` and stacks equally-shaped inputs along it.
template <typename T> Tensor<T> stack(std::span<const Tensor<T>> xs, int axis = 0);
// Joins inputs along an existing axis.
template <typename T> Tensor<T> concat(std::span<const Tensor<T>> xs, int axis = 0);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false);

/// Numerically stable softmax (max subtraction) along `axis`.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

/// Mean cross-entropy of row-wise softmax(logits[B, C]) against labels.
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Normalises over the last dimension, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

/// x / max(||x||, eps) over the last dimension.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-8));

/// Cosine similarity over the last dimension; a zero vector scores 0.
template <typename T> Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8));

/// All-pairs cosine similarity: a[P, D], b[R, D] -> [P, R].
template <typename T> Tensor<T> pairwise_cosine(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8));

/// Elementwise op with caller-supplied derivative. Exists so gradient-check
/// tooling can be exercised against a known-wrong derivative.
template <typename T>
Tensor<T> map_elementwise(const Tensor<T>& x, std::function<T(T)> f, std::function<T(T)> df);

/// Row-wise argmax of a [R, C] tensor; ties resolve to the lowest index.
template <typename T> std::vector<int> argmax_rows(const Tensor<T>& x);

}  // namespace efsl::num
