// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/numerics/tensor.hpp"

#include <algorithm>
#include <unordered_map>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "efsl/core/error.hpp"

namespace efsl::num {

namespace {
thread_local bool g_grad_enabled = true;
thread_local bool g_finite_checks = false;

#if defined(__GLIBC__)
// Tape buffers of a few hundred KB are allocated and released on every step.
// Keep them in the heap instead of round-tripping each one through mmap.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool finite_checks_enabled() { return g_finite_checks; }
FiniteCheckGuard::FiniteCheckGuard(bool enabled) : previous_(g_finite_checks) { g_finite_checks = enabled; }
FiniteCheckGuard::~FiniteCheckGuard() { g_finite_checks = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, T stddev) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal()) * stddev;
  return Tensor(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> Tensor<T>::trunc_normal(Shape shape, Rng& rng, T stddev) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(static_cast<double>(stddev)));
  return Tensor(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> Tensor<T>::from_node(NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
const typename Tensor<T>::Node& Tensor<T>::checked() const {
  if (!node_) throw InternalError("use of an undefined tensor");
  return *node_;
}

template <typename T>
typename Tensor<T>::Node& Tensor<T>::checked() {
  if (!node_) throw InternalError("use of an undefined tensor");
  return *node_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return checked().shape;
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return checked().data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  auto& n = checked();
  if (!n.is_leaf()) throw InternalError("in-place update of a non-leaf tensor");
  return n.data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return checked().requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  auto& n = checked();
  if (!n.is_leaf()) throw InternalError("requires_grad can only be set on leaves");
  n.requires_grad = on;
  return *this;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !checked().grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return checked().grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return checked().grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  checked().grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& n = checked();
  return Tensor(n.shape, n.data);
}

template <typename T>
void backward(const Tensor<T>& loss, std::span<const Tensor<T>> zero_fill) {
  using Node = detail::Node<T>;
  if (!loss.defined()) throw InternalError("backward on an undefined tensor");
  if (loss.numel() != 1 || loss.rank() > 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }

  // Iterative DFS post-order; a grey node met again means a cycle.
  enum class Mark : unsigned char { grey, black };
  std::unordered_map<Node*, Mark> mark;
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* root = loss.node().get();
  if (root->requires_grad) {
    stack.emplace_back(root, 0);
    mark[root] = Mark::grey;
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (!p->requires_grad) continue;
      auto it = mark.find(p);
      if (it == mark.end()) {
        mark[p] = Mark::grey;
        stack.emplace_back(p, 0);
      } else if (it->second == Mark::grey) {
        throw InternalError("cyclic gradient tape detected at op '" + std::string(p->op) + "'");
      }
    } else {
      mark[node] = Mark::black;
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (!order.empty()) {
    root->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->is_leaf() || n->grad.empty()) continue;
      n->backward(*n);
      n->grad.clear();  // intermediate grads are single-use
      n->grad.shrink_to_fit();
    }
  }

  for (const auto& t : zero_fill) {
    if (t.defined() && t.requires_grad()) t.node()->grad_buffer();
  }
}

namespace detail {
template <typename T>
void link_parent_for_testing(const Tensor<T>& child, const Tensor<T>& parent) {
  child.node()->parents.push_back(parent.node());
}
template void link_parent_for_testing<float>(const Tensor<float>&, const Tensor<float>&);
template void link_parent_for_testing<double>(const Tensor<double>&, const Tensor<double>&);
}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&, std::span<const Tensor<float>>);
template void backward<double>(const Tensor<double>&, std::span<const Tensor<double>>);

}  // namespace efsl::num
