// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "efsl/numerics/ops.hpp"
#include "efsl/numerics/optim.hpp"

using namespace efsl::num;

TEST_CASE("first AdamW step matches the closed form") {
  Tensor<double> p({2}, {1.0, -3.0});
  p.set_requires_grad(true);
  auto loss = sum(mul(p, Tensor<double>({2}, {2.0, 0.5})));
  backward(loss);
  AdamW<double> opt({p}, AdamWConfig{0.9, 0.999, 1e-8, 0.01});
  opt.step(0.1);
  // Bias-corrected first step: m_hat = g, v_hat = g^2.
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * (2.0 / (2.0 + 1e-8) + 0.01 * 1.0)).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(-3.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * -3.0)).epsilon(1e-14));
  CHECK(opt.steps() == 1);
}

TEST_CASE("AdamW with lr 0 leaves parameters bit-identical") {
  Rng rng(3);
  auto p = Tensor<float>::randn({4, 5}, rng).set_requires_grad(true);
  const std::vector<float> before(p.data().begin(), p.data().end());
  AdamW<float> opt({p});
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    backward(sum(mul(p, p)));
    opt.step(0.0);
  }
  CHECK(std::vector<float>(p.data().begin(), p.data().end()) == before);
}

TEST_CASE("AdamW minimises a quadratic") {
  Tensor<double> p({3}, {4.0, -2.0, 1.0});
  p.set_requires_grad(true);
  const Tensor<double> target({3}, {1.0, 2.0, 3.0});
  AdamW<double> opt({p}, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    auto d = sub(p, target);
    backward(sum(mul(d, d)));
    opt.step(0.05);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(target[i]).epsilon(1e-3));
}

TEST_CASE("parameters without gradients are skipped") {
  Tensor<double> a({1}, {1.0}), b({1}, {2.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  backward(sum(mul(a, a)));
  AdamW<double> opt({a, b});
  opt.step(0.1);
  CHECK(b[0] == 2.0);
  CHECK(a[0] != 1.0);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(1e-3, 0, 100) == doctest::Approx(1e-3));
  CHECK(cosine_lr(1e-3, 50, 100) == doctest::Approx(5e-4));
  CHECK(cosine_lr(1e-3, 100, 100) == doctest::Approx(0.0));
  for (int s = 1; s <= 100; ++s) CHECK(cosine_lr(1.0, s, 100) <= cosine_lr(1.0, s - 1, 100));
}

TEST_CASE("global norm clipping") {
  Tensor<double> a({2}, {0.0, 0.0}), b({1}, {0.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  a.mutable_grad()[0] = 3.0;
  b.mutable_grad()[0] = 4.0;
  std::vector<Tensor<double>> ps{a, b};
  CHECK(clip_grad_norm<double>(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
  // Below the threshold nothing changes.
  CHECK(clip_grad_norm<double>(ps, 2.0) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}
