// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

namespace efsl::num {

struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

/// Counter-based SplitMix64 generator keyed by (seed, stream).
///
/// Draw k of a generator is a pure function of (seed, stream, k), so
/// sequences are reproducible across runs and platforms. Substreams for
/// independent purposes (init, data, episodes, ...) come from split().
/// The real-valued helpers avoid <random> distributions, whose output is
/// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);
  explicit Rng(RngState state) : Rng(state.seed, state.stream) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n);
  // Standard normal (Marsaglia polar method).
  double normal();
  // Normal with standard deviation `stddev`, redrawn outside +-2 stddev.
  double truncated_normal(double stddev);
  bool bernoulli(double p) { return uniform() < p; }

  Rng split(std::uint64_t tag) const;
  Rng split(std::string_view tag) const;

  RngState state() const { return {seed_, stream_}; }
  std::uint64_t draws() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a(std::string_view text);

}  // namespace efsl::num
