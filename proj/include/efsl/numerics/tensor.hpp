// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "efsl/numerics/rng.hpp"

namespace efsl::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Whether newly created op results record onto the gradient tape.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Verification mode: every op checks that its output is finite and throws
/// NumericError otherwise. Off by default (production propagates).
bool finite_checks_enabled();

class FiniteCheckGuard {
 public:
  explicit FiniteCheckGuard(bool enabled = true);
  ~FiniteCheckGuard();
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // empty for leaves
  std::string_view op = "leaf";

  bool is_leaf() const { return !backward; }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor handle.
///
/// Copies are shallow: two handles may refer to the same tape node. Data is
/// immutable once created, except that leaves may be updated in place by an
/// optimizer through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1));
  static Tensor trunc_normal(Shape shape, Rng& rng, T stddev);
  static Tensor from_node(NodePtr node);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return data().size(); }

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T operator[](std::size_t flat) const { return data()[flat]; }
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  // New leaf holding a copy of the values, off the tape.
  Tensor detach() const;
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(data().begin(), data().end());
    return Tensor<U>(shape(), std::move(v));
  }

  const NodePtr& node() const { return node_; }

 private:
  const Node& checked() const;
  Node& checked();
  NodePtr node_;
};

/// Reverse-mode sweep from a scalar loss. Every requires_grad leaf reachable
/// from `loss` accumulates into its grad; tensors listed in `zero_fill` that
/// the sweep never reached get a zero gradient. Throws ShapeError for a
/// non-scalar loss and InternalError for a cyclic tape.
template <typename T>
void backward(const Tensor<T>& loss, std::span<const Tensor<T>> zero_fill = {});

namespace detail {
// Test hook: wires `parent` as an extra input of `child`. Only used to build
// a deliberately cyclic tape.
template <typename T>
void link_parent_for_testing(const Tensor<T>& child, const Tensor<T>& parent);
}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace efsl::num
