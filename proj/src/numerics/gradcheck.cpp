// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace efsl::num {

bool GradCheckReport::passed() const {
  return std::none_of(entries.begin(), entries.end(), [](const auto& e) { return e.flagged; });
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

std::string GradCheckReport::summary() const {
  std::string s;
  char line[256];
  for (const auto& e : entries) {
    std::snprintf(line, sizeof line, "%-32s n=%-6zu rel=%.3e abs=%.3e%s\n", e.name.c_str(), e.elements,
                  e.max_rel_error, e.max_abs_error, e.flagged ? "  FLAGGED" : "");
    s += line;
  }
  return s;
}

GradCheckReport finite_difference_check(const std::function<Tensor<double>()>& loss_fn,
                                        const std::vector<NamedTensor>& params, double step, double tol,
                                        double floor) {
  std::vector<Tensor<double>> leaves;
  for (const auto& [name, t] : params) {
    Tensor<double> leaf = t;
    leaf.zero_grad();
    leaves.push_back(leaf);
  }
  const Tensor<double> loss = loss_fn();
  backward(loss, std::span<const Tensor<double>>(leaves));

  GradCheckReport report;
  report.tolerance = tol;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    auto& leaf = leaves[p];
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_data();
    GradCheckEntry entry{params[p].first, values.size()};
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss_fn().item();
      values[i] = saved - step;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
    }
    entry.flagged = entry.max_rel_error > tol;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace efsl::num
