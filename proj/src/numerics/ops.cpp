// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "efsl/core/error.hpp"

namespace efsl::num {

namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
void check_finite(std::string_view op, const std::vector<T>& data) {
  for (const T v : data) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
  }
}

template <typename T>
Tensor<T> make_op(std::string_view op, Shape shape, std::vector<T> data, std::vector<NodePtr<T>> inputs,
                  std::function<void(Node<T>&)> bw) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (finite_checks_enabled()) check_finite(op, node->data);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto& p) { return p->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(inputs);
      node->backward = std::move(bw);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// [outer, len, inner] view of a shape around one axis.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
  AxisView(const Shape& s, std::size_t axis) {
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  }
};

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;

  BroadcastPlan(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    sa.assign(r, 0);
    sb.assign(r, 0);
    const auto ast = strides_of(a), bst = strides_of(b);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
      const std::size_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
      if (da != db && da != 1 && db != 1) {
        throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
      }
      out[i] = std::max(da, db);
      if (i + a.size() >= r && da != 1) sa[i] = ast[i + a.size() - r];
      if (i + b.size() >= r && db != 1) sb[i] = bst[i + b.size() - r];
    }
  }

  // f(out_index, a_index, b_index) in row-major output order.
  template <typename F>
  void for_each(F&& f) const {
    const std::size_t r = out.size();
    if (r == 0) {
      f(std::size_t{0}, std::size_t{0}, std::size_t{0});
      return;
    }
    const std::size_t n = shape_numel(out);
    const std::size_t inner = out[r - 1], ia_in = sa[r - 1], ib_in = sb[r - 1];
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; o += inner) {
      for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_in, ib + j * ib_in);
      for (std::size_t d = r - 1; d-- > 0;) {
        ++idx[d];
        ia += sa[d];
        ib += sb[d];
        if (idx[d] < out[d]) break;
        ia -= sa[d] * out[d];
        ib -= sb[d] * out[d];
        idx[d] = 0;
      }
    }
  }
};

enum class BinOp { add, sub, mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp kind) {
  const char* name = kind == BinOp::add ? "add" : kind == BinOp::sub ? "sub" : "mul";
  if (a.shape() == b.shape()) {
    const auto x = a.data(), y = b.data();
    std::vector<T> out(x.size());
    switch (kind) {
      case BinOp::add: for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i]; break;
      case BinOp::sub: for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i]; break;
      case BinOp::mul: for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i]; break;
    }
    return make_op<T>(name, a.shape(), std::move(out), {a.node(), b.node()}, [kind](Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto& g = self.grad;
      if (pa.requires_grad) {
        auto& ga = pa.grad_buffer();
        if (kind == BinOp::mul) {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb.data[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
      }
      if (pb.requires_grad) {
        auto& gb = pb.grad_buffer();
        switch (kind) {
          case BinOp::add: for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i]; break;
          case BinOp::sub: for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i]; break;
          case BinOp::mul: for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa.data[i]; break;
        }
      }
    });
  }

  BroadcastPlan plan(a.shape(), b.shape());
  std::vector<T> out(shape_numel(plan.out));
  const auto x = a.data(), y = b.data();
  switch (kind) {
    case BinOp::add: plan.for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = x[i] + y[j]; }); break;
    case BinOp::sub: plan.for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = x[i] - y[j]; }); break;
    case BinOp::mul: plan.for_each([&](std::size_t o, std::size_t i, std::size_t j) { out[o] = x[i] * y[j]; }); break;
  }
  Shape out_shape = plan.out;
  return make_op<T>(name, std::move(out_shape), std::move(out), {a.node(), b.node()},
                    [kind, plan = std::move(plan)](Node<T>& self) {
                      auto& pa = *self.parents[0];
                      auto& pb = *self.parents[1];
                      const auto& g = self.grad;
                      if (pa.requires_grad) {
                        auto& ga = pa.grad_buffer();
                        if (kind == BinOp::mul) {
                          plan.for_each([&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * pb.data[j]; });
                        } else {
                          plan.for_each([&](std::size_t o, std::size_t i, std::size_t) { ga[i] += g[o]; });
                        }
                      }
                      if (pb.requires_grad) {
                        auto& gb = pb.grad_buffer();
                        switch (kind) {
                          case BinOp::add:
                            plan.for_each([&](std::size_t o, std::size_t, std::size_t j) { gb[j] += g[o]; });
                            break;
                          case BinOp::sub:
                            plan.for_each([&](std::size_t o, std::size_t, std::size_t j) { gb[j] -= g[o]; });
                            break;
                          case BinOp::mul:
                            plan.for_each([&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * pa.data[i]; });
                            break;
                        }
                      }
                    });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::add);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::sub);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::mul);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_op<T>("scale", x.shape(), std::move(out), {x.node()}, [factor](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || as[as.size() - 1] != bs[bs.size() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t M = as[as.size() - 2], K = as[as.size() - 1], N = bs[bs.size() - 1];
  Shape a_batch(as.begin(), as.end() - 2), b_batch(bs.begin(), bs.end() - 2);

  if (b_batch.empty()) {
    // Shared right operand: one GEMM over all stacked rows of `a`.
    const std::size_t rows = shape_numel(a_batch) * M;
    Shape out_shape = a_batch;
    out_shape.push_back(M);
    out_shape.push_back(N);
    std::vector<T> out(rows * N);
    MutMap<T>(out.data(), rows, N).noalias() = ConstMap<T>(a.data().data(), rows, K) * ConstMap<T>(b.data().data(), K, N);
    return make_op<T>("matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
                      [rows, K, N](Node<T>& self) {
                        auto& pa = *self.parents[0];
                        auto& pb = *self.parents[1];
                        ConstMap<T> g(self.grad.data(), rows, N);
                        if (pa.requires_grad) {
                          MutMap<T>(pa.grad_buffer().data(), rows, K).noalias() +=
                              g * ConstMap<T>(pb.data.data(), K, N).transpose();
                        }
                        if (pb.requires_grad) {
                          MutMap<T>(pb.grad_buffer().data(), K, N).noalias() +=
                              ConstMap<T>(pa.data.data(), rows, K).transpose() * g;
                        }
                      });
  }

  BroadcastPlan plan(a_batch.empty() ? Shape{1} : a_batch, b_batch);
  Shape out_shape = plan.out;
  out_shape.push_back(M);
  out_shape.push_back(N);
  const std::size_t batches = shape_numel(plan.out);
  std::vector<T> out(batches * M * N);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  plan.for_each([&](std::size_t o, std::size_t i, std::size_t j) {
    MutMap<T>(out.data() + o * M * N, M, N).noalias() =
        ConstMap<T>(ap + i * M * K, M, K) * ConstMap<T>(bp + j * K * N, K, N);
  });
  return make_op<T>("matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
                    [plan = std::move(plan), M, K, N](Node<T>& self) {
                      auto& pa = *self.parents[0];
                      auto& pb = *self.parents[1];
                      const T* g = self.grad.data();
                      if (pa.requires_grad) {
                        T* ga = pa.grad_buffer().data();
                        plan.for_each([&](std::size_t o, std::size_t i, std::size_t j) {
                          MutMap<T>(ga + i * M * K, M, K).noalias() +=
                              ConstMap<T>(g + o * M * N, M, N) * ConstMap<T>(pb.data.data() + j * K * N, K, N).transpose();
                        });
                      }
                      if (pb.requires_grad) {
                        T* gb = pb.grad_buffer().data();
                        plan.for_each([&](std::size_t o, std::size_t i, std::size_t j) {
                          MutMap<T>(gb + j * K * N, K, N).noalias() +=
                              ConstMap<T>(pa.data.data() + i * M * K, M, K).transpose() * ConstMap<T>(g + o * M * N, M, N);
                        });
                      }
                    });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const auto& xs = x.shape();
  if (xs.empty() || w.rank() != 2 || b.rank() != 1 || xs.back() != w.dim(0) || b.dim(0) != w.dim(1)) {
    throw ShapeError("affine: incompatible shapes " + shape_str(xs) + ", " + shape_str(w.shape()) + ", " +
                     shape_str(b.shape()));
  }
  const std::size_t K = w.dim(0), N = w.dim(1), rows = x.numel() / K;
  Shape out_shape = xs;
  out_shape.back() = N;
  std::vector<T> out(rows * N);
  MutMap<T> o(out.data(), rows, N);
  o.noalias() = ConstMap<T>(x.data().data(), rows, K) * ConstMap<T>(w.data().data(), K, N);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data().data(), N);
  return make_op<T>("affine", std::move(out_shape), std::move(out), {x.node(), w.node(), b.node()},
                    [rows, K, N](Node<T>& self) {
                      auto& px = *self.parents[0];
                      auto& pw = *self.parents[1];
                      auto& pb = *self.parents[2];
                      ConstMap<T> g(self.grad.data(), rows, N);
                      if (px.requires_grad) {
                        MutMap<T>(px.grad_buffer().data(), rows, K).noalias() +=
                            g * ConstMap<T>(pw.data.data(), K, N).transpose();
                      }
                      if (pw.requires_grad) {
                        MutMap<T>(pw.grad_buffer().data(), K, N).noalias() +=
                            ConstMap<T>(px.data.data(), rows, K).transpose() * g;
                      }
                      if (pb.requires_grad) {
                        // Plain loop: Eigen's column reduction order depends on alignment.
                        auto& gb = pb.grad_buffer();
                        const T* gr = self.grad.data();
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t n = 0; n < N; ++n) gb[n] += gr[r * N + n];
                        }
                      }
                    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op<T>("reshape", std::move(shape), std::move(out), {x.node()}, [](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::span<const std::size_t> order) {
  const auto& in = x.shape();
  const std::size_t r = in.size();
  std::vector<bool> seen(r, false);
  if (order.size() != r) throw ShapeError("permute: order length does not match rank of " + shape_str(in));
  for (auto o : order) {
    if (o >= r || seen[o]) throw ShapeError("permute: invalid axis order for " + shape_str(in));
    seen[o] = true;
  }
  Shape out_shape(r);
  const auto in_st = strides_of(in);
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[order[i]];
    st[i] = in_st[order[i]];
  }
  // Source offset of every output element, reused by the backward pass.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < n; ++o) {
      src[o] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += st[d];
        if (idx[d] < out_shape[d]) break;
        off -= st[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(n);
  const auto xd = x.data();
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[src[o]];
  return make_op<T>("permute", std::move(out_shape), std::move(out), {x.node()},
                    [src = std::move(src)](Node<T>& self) {
                      auto& gx = self.parents[0]->grad_buffer();
                      for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[o];
                    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  const std::size_t r = x.rank();
  if (r < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[r - 1], order[r - 2]);
  return permute(x, std::span<const std::size_t>(order));
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t a = norm_axis(axis, x.rank());
  AxisView v(x.shape(), a);
  if (length == 0 || start + length > v.len) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[a] = length;
  std::vector<T> out(v.outer * length * v.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * v.len + start) * v.inner), length * v.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * v.inner));
  }
  return make_op<T>("narrow", std::move(out_shape), std::move(out), {x.node()}, [v, start, length](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      const std::size_t src = (o * v.len + start) * v.inner, dst = o * length * v.inner;
      for (std::size_t k = 0; k < length * v.inner; ++k) gx[src + k] += self.grad[dst + k];
    }
  });
}

namespace {

// Shared body of stack/concat: copy blocks of per-input width `widths[k]`
// (elements per outer row) into an output laid out as [outer, sum(widths)].
template <typename T>
Tensor<T> join_blocks(std::string_view op, std::span<const Tensor<T>> xs, Shape out_shape, std::size_t outer,
                      std::vector<std::size_t> widths) {
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  std::vector<T> out(outer * total);
  std::vector<NodePtr<T>> inputs;
  std::size_t col = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto xd = xs[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * total + col));
    }
    col += widths[k];
    inputs.push_back(xs[k].node());
  }
  return make_op<T>(op, std::move(out_shape), std::move(out), std::move(inputs),
                    [outer, total, widths = std::move(widths)](Node<T>& self) {
                      std::size_t c = 0;
                      for (std::size_t k = 0; k < self.parents.size(); ++k) {
                        auto& p = *self.parents[k];
                        if (p.requires_grad) {
                          auto& g = p.grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t j = 0; j < widths[k]; ++j) g[o * widths[k] + j] += self.grad[o * total + c + j];
                          }
                        }
                        c += widths[k];
                      }
                    });
}

}  // namespace

template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> xs, int axis) {
  if (xs.empty()) throw ShapeError("stack of zero tensors");
  const Shape& s0 = xs[0].shape();
  for (const auto& x : xs) {
    if (x.shape() != s0) throw ShapeError("stack: shape " + shape_str(x.shape()) + " differs from " + shape_str(s0));
  }
  const int r = static_cast<int>(s0.size());
  const int ax = axis < 0 ? axis + r + 1 : axis;
  if (ax < 0 || ax > r) throw ShapeError("stack: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s0[static_cast<std::size_t>(i)];
  for (int i = ax; i < r; ++i) inner *= s0[static_cast<std::size_t>(i)];
  Shape out_shape = s0;
  out_shape.insert(out_shape.begin() + ax, xs.size());
  return join_blocks<T>("stack", xs, std::move(out_shape), outer, std::vector<std::size_t>(xs.size(), inner));
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  const std::size_t a = norm_axis(axis, s0.size());
  std::vector<std::size_t> widths;
  Shape out_shape = s0;
  out_shape[a] = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(s0));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != a && s[i] != s0[i]) throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(s0));
    }
    AxisView v(s, a);
    widths.push_back(v.len * v.inner);
    out_shape[a] += s[a];
  }
  return join_blocks<T>("concat", xs, std::move(out_shape), AxisView(s0, a).outer, std::move(widths));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_op<T>("sum", Shape{}, std::vector<T>{s}, {x.node()}, [](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim) {
  const std::size_t a = norm_axis(axis, x.rank());
  AxisView v(x.shape(), a);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[a] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(a));
  }
  std::vector<T> out(v.outer * v.inner, T(0));
  const auto xd = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t l = 0; l < v.len; ++l) {
      const T* row = xd.data() + (o * v.len + l) * v.inner;
      T* dst = out.data() + o * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += row[i];
    }
  }
  return make_op<T>("sum_axis", std::move(out_shape), std::move(out), {x.node()}, [v](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t l = 0; l < v.len; ++l) {
        for (std::size_t i = 0; i < v.inner; ++i) gx[(o * v.len + l) * v.inner + i] += self.grad[o * v.inner + i];
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim) {
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(x.dim(axis)));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t a = norm_axis(axis, x.rank());
  AxisView v(x.shape(), a);
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  if (v.inner == 1) {
    // Contiguous rows: vectorised exp. Eigen evaluates the unaligned head of
    // a mapped buffer with scalar std::exp and the rest with its packet
    // approximation, so each row is copied into Eigen-owned (aligned) storage
    // first; otherwise results would depend on where the allocator put it.
    // The normaliser is summed in a fixed order for the same reason.
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto len = static_cast<Eigen::Index>(v.len);
    Arr y(len);
    for (std::size_t o = 0; o < v.outer; ++o) {
      y = Eigen::Map<const Arr>(xd.data() + o * v.len, len);
      y = (y - y.maxCoeff()).exp();
      T z = 0;
      for (Eigen::Index l = 0; l < len; ++l) z += y[l];
      for (Eigen::Index l = 0; l < len; ++l) out[o * v.len + static_cast<std::size_t>(l)] = y[l] / z;
    }
  }
  for (std::size_t o = 0; o < v.outer && v.inner != 1; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.len * v.inner + i;
      T mx = xd[base];
      for (std::size_t l = 1; l < v.len; ++l) mx = std::max(mx, xd[base + l * v.inner]);
      T z = 0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const T e = std::exp(xd[base + l * v.inner] - mx);
        out[base + l * v.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] /= z;
    }
  }
  return make_op<T>("softmax", x.shape(), std::move(out), {x.node()}, [v](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.len * v.inner + i;
        T dot = 0;
        for (std::size_t l = 0; l < v.len; ++l) dot += g[base + l * v.inner] * y[base + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t k = base + l * v.inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  const auto xd = logits.data();
  std::vector<T> probs(B * C);
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw ShapeError("cross_entropy: label out of range");
    const T* row = xd.data() + b * C;
    const T mx = *std::max_element(row, row + C);
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const T logz = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(row[c] - logz);
    loss += logz - row[y];
  }
  loss /= static_cast<T>(B);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op<T>("cross_entropy", Shape{}, std::vector<T>{loss}, {logits.node()},
                    [probs = std::move(probs), lab = std::move(lab), B, C](Node<T>& self) {
                      auto& gx = self.parents[0]->grad_buffer();
                      const T g = self.grad[0] / static_cast<T>(B);
                      for (std::size_t b = 0; b < B; ++b) {
                        for (std::size_t c = 0; c < C; ++c) gx[b * C + c] += g * probs[b * C + c];
                        gx[b * C + static_cast<std::size_t>(lab[b])] -= g;
                      }
                    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t D = x.dim(-1);
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                     " and beta " + shape_str(beta.shape()));
  }
  const std::size_t R = x.numel() / D;
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  std::vector<T> xhat(x.numel()), rstd(R), out(x.numel());
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = xd.data() + r * D;
    T mu = 0;
    for (std::size_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::size_t j = 0; j < D; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(D);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      xhat[r * D + j] = (row[j] - mu) * rstd[r];
      out[r * D + j] = xhat[r * D + j] * gd[j] + bd[j];
    }
  }
  return make_op<T>("layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
                    [xhat = std::move(xhat), rstd = std::move(rstd), R, D](Node<T>& self) {
                      auto& px = *self.parents[0];
                      auto& pg = *self.parents[1];
                      auto& pb = *self.parents[2];
                      const auto& g = self.grad;
                      if (pg.requires_grad) {
                        auto& gg = pg.grad_buffer();
                        for (std::size_t r = 0; r < R; ++r)
                          for (std::size_t j = 0; j < D; ++j) gg[j] += g[r * D + j] * xhat[r * D + j];
                      }
                      if (pb.requires_grad) {
                        auto& gb = pb.grad_buffer();
                        for (std::size_t r = 0; r < R; ++r)
                          for (std::size_t j = 0; j < D; ++j) gb[j] += g[r * D + j];
                      }
                      if (px.requires_grad) {
                        auto& gx = px.grad_buffer();
                        const auto& gamma_v = pg.data;
                        std::vector<T> dxhat(D);
                        for (std::size_t r = 0; r < R; ++r) {
                          T m1 = 0, m2 = 0;
                          for (std::size_t j = 0; j < D; ++j) {
                            dxhat[j] = g[r * D + j] * gamma_v[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * D + j];
                          }
                          m1 /= static_cast<T>(D);
                          m2 /= static_cast<T>(D);
                          for (std::size_t j = 0; j < D; ++j) {
                            gx[r * D + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * D + j] * m2);
                          }
                        }
                      }
                    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = T(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<const Arr>;
  const auto n = static_cast<Eigen::Index>(x.numel());
  // Inputs are copied into Eigen-owned arrays: those are aligned, so the
  // vectorised tanh covers the same elements wherever the tensor lives.
  const Arr v = Map(x.data().data(), n);
  auto t = std::make_shared<Arr>((kC * (v + kA * v.cube())).tanh());  // kept for backward
  const Arr y = T(0.5) * v * (T(1) + *t);
  std::vector<T> out(y.data(), y.data() + n);
  return make_op<T>("gelu", x.shape(), std::move(out), {x.node()}, [t, n](Node<T>& self) {
    auto& px = *self.parents[0];
    const Arr v = Map(px.data.data(), n), g = Map(self.grad.data(), n);
    const auto& tt = *t;
    const Arr gx =
        g * (T(0.5) * (T(1) + tt) + T(0.5) * v * (T(1) - tt.square()) * kC * (T(1) + T(3) * kA * v.square()));
    auto& buf = px.grad_buffer();
    for (Eigen::Index i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] += gx[i];
  });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  const std::size_t D = x.dim(-1);
  const std::size_t R = x.numel() / D;
  const auto xd = x.data();
  std::vector<T> out(xd.size()), den(R);
  std::vector<bool> clamped(R);
  for (std::size_t r = 0; r < R; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < D; ++j) ss += xd[r * D + j] * xd[r * D + j];
    const T n = std::sqrt(ss);
    clamped[r] = !(n > eps);
    den[r] = clamped[r] ? eps : n;
    for (std::size_t j = 0; j < D; ++j) out[r * D + j] = xd[r * D + j] / den[r];
  }
  return make_op<T>("l2_normalize", x.shape(), std::move(out), {x.node()},
                    [den = std::move(den), clamped = std::move(clamped), R, D](Node<T>& self) {
                      auto& gx = self.parents[0]->grad_buffer();
                      const auto& y = self.data;
                      const auto& g = self.grad;
                      for (std::size_t r = 0; r < R; ++r) {
                        T dot = 0;
                        if (!clamped[r]) {
                          for (std::size_t j = 0; j < D; ++j) dot += y[r * D + j] * g[r * D + j];
                        }
                        for (std::size_t j = 0; j < D; ++j) gx[r * D + j] += (g[r * D + j] - y[r * D + j] * dot) / den[r];
                      }
                    });
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  if (a.dim(-1) != b.dim(-1)) {
    throw ShapeError("cosine_similarity: feature dims differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return sum(mul(l2_normalize(a, eps), l2_normalize(b, eps)), -1);
}

template <typename T>
Tensor<T> pairwise_cosine(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("pairwise_cosine: expected [P, D] and [R, D], got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  return matmul(l2_normalize(a, eps), transpose(l2_normalize(b, eps)));
}

template <typename T>
Tensor<T> map_elementwise(const Tensor<T>& x, std::function<T(T)> f, std::function<T(T)> df) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  return make_op<T>("map", x.shape(), std::move(out), {x.node()}, [df = std::move(df)](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& gx = px.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(px.data[i]);
  });
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("argmax_rows expects rank 2, got " + shape_str(x.shape()));
  const std::size_t R = x.dim(0), C = x.dim(1);
  std::vector<int> out(R);
  const auto xd = x.data();
  for (std::size_t r = 0; r < R; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (xd[r * C + c] > xd[r * C + best]) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

#define EFSL_INSTANTIATE_OPS(T)                                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                 \
  template Tensor<T> permute(const Tensor<T>&, std::span<const std::size_t>);                          \
  template Tensor<T> transpose(const Tensor<T>&);                                                      \
  template Tensor<T> narrow(const Tensor<T>&, int, std::size_t, std::size_t);                          \
  template Tensor<T> stack(std::span<const Tensor<T>>, int);                                           \
  template Tensor<T> concat(std::span<const Tensor<T>>, int);                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                            \
  template Tensor<T> mean(const Tensor<T>&);                                                           \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                                 \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                                \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                   \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);              \
  template Tensor<T> gelu(const Tensor<T>&);                                                           \
  template Tensor<T> l2_normalize(const Tensor<T>&, T);                                                \
  template Tensor<T> cosine_similarity(const Tensor<T>&, const Tensor<T>&, T);                         \
  template Tensor<T> pairwise_cosine(const Tensor<T>&, const Tensor<T>&, T);                           \
  template Tensor<T> map_elementwise(const Tensor<T>&, std::function<T(T)>, std::function<T(T)>);      \
  template std::vector<int> argmax_rows(const Tensor<T>&);

EFSL_INSTANTIATE_OPS(float)
EFSL_INSTANTIATE_OPS(double)

}  // namespace efsl::num
