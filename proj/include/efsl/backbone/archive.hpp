// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "efsl/core/hash.hpp"
#include "efsl/numerics/tensor.hpp"

namespace efsl {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

using Magic = std::array<char, 8>;
inline constexpr Magic kBackboneMagic{'E', 'F', 'S', 'L', 'B', 'K', 'B', 'N'};
inline constexpr Magic kSideChainMagic{'E', 'F', 'S', 'L', 'S', 'I', 'D', 'E'};

/// Named-tensor container shared by backbone checkpoints and side-chain
/// parameter files.
///
/// Layout (little-endian): 8-byte magic, u32 version, metadata (u32 count,
/// then sorted key/value strings), directory (u32 count; per entry name,
/// u8 dtype, u32 rank, u64 dims, u64 payload offset, u64 byte length),
/// payloads, 32-byte SHA-256 of everything before it.
class TensorArchive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  explicit TensorArchive(Magic magic) : magic_(magic) {}

  std::map<std::string, std::string> metadata;

  template <typename T>
  void put(const std::string& name, const num::Tensor<T>& t);
  // Throws FormatError if absent, ShapeError if `expected` is given and differs.
  template <typename T>
  num::Tensor<T> get(const std::string& name, const num::Shape* expected = nullptr) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> names() const;
  const Magic& magic() const { return magic_; }

  std::vector<std::byte> serialize() const;
  // Checks magic, version (VersionError) and hash (FormatError).
  static TensorArchive deserialize(std::span<const std::byte> bytes, const Magic& magic);
  Digest save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path, const Magic& magic);
  // The trailer hash serialize() would write.
  Digest digest() const;

 private:
  struct Entry {
    std::string name;
    DType dtype;
    num::Shape shape;
    std::vector<double> values;
  };
  const Entry* find(std::string_view name) const;

  Magic magic_;
  std::vector<Entry> entries_;
};

}  // namespace efsl
