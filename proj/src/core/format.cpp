// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/core/format.hpp"

#include <charconv>
#include <cstdio>

#include "efsl/core/error.hpp"

namespace efsl {

std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw InternalError("format_real failed");
  std::string s(buf, end);
  // Keep reals visibly typed as reals in text formats.
  if (s.find_first_of(".eE") == std::string::npos && s != "inf" && s != "-inf" && s != "nan") s += ".0";
  return s;
}

std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s.rfind("-0.", 0) == 0 && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

double parse_real(const std::string& text) {
  double v = 0;
  const char* b = text.data();
  const char* e = b + text.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) throw ValidationError("not a real number: '" + text + "'");
  return v;
}

long long parse_int(const std::string& text) {
  long long v = 0;
  const char* b = text.data();
  const char* e = b + text.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) throw ValidationError("not an integer: '" + text + "'");
  return v;
}

}  // namespace efsl
