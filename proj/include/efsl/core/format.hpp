// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

namespace efsl {

// Shortest decimal text that parses back to exactly `v`.
std::string format_real(double v);
// Fixed-point with `decimals` digits after the point ("12.30").
std::string format_fixed(double v, int decimals);
double parse_real(const std::string& text);
long long parse_int(const std::string& text);

}  // namespace efsl
