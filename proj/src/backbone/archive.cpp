// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/backbone/archive.hpp"

#include <cstring>

#include "efsl/core/binary.hpp"
#include "efsl/core/error.hpp"

namespace efsl {

namespace {

std::string magic_str(const Magic& m) { return std::string(m.data(), m.size()); }

std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

}  // namespace

template <typename T>
void TensorArchive::put(const std::string& name, const num::Tensor<T>& t) {
  if (find(name)) throw InternalError("archive entry '" + name + "' written twice");
  Entry e{name, sizeof(T) == 4 ? DType::f32 : DType::f64, t.shape(), {t.data().begin(), t.data().end()}};
  entries_.push_back(std::move(e));
}

template <typename T>
num::Tensor<T> TensorArchive::get(const std::string& name, const num::Shape* expected) const {
  const Entry* e = find(name);
  if (!e) throw FormatError("archive has no tensor named '" + name + "'");
  if (expected && *expected != e->shape) {
    throw ShapeError("tensor '" + name + "' has shape " + num::shape_str(e->shape) + ", config expects " +
                     num::shape_str(*expected));
  }
  return num::Tensor<T>(e->shape, std::vector<T>(e->values.begin(), e->values.end()));
}

bool TensorArchive::contains(std::string_view name) const { return find(name) != nullptr; }

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

const TensorArchive::Entry* TensorArchive::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

std::vector<std::byte> TensorArchive::serialize() const {
  ByteWriter w;
  w.raw(std::as_bytes(std::span<const char>(magic_)));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(entries_.size()));
  std::uint64_t offset = 0;
  for (const auto& e : entries_) {
    const std::uint64_t nbytes = e.values.size() * dtype_size(e.dtype);
    w.str(e.name);
    w.u8(static_cast<std::uint8_t>(e.dtype));
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u64(d);
    w.u64(offset);
    w.u64(nbytes);
    offset += nbytes;
  }
  for (const auto& e : entries_) {
    if (e.dtype == DType::f32) {
      for (double v : e.values) w.f32(static_cast<float>(v));
    } else {
      for (double v : e.values) w.f64(v);
    }
  }
  const Digest d = sha256(w.bytes());
  w.raw(std::as_bytes(std::span<const std::uint8_t>(d)));
  return w.take();
}

Digest TensorArchive::digest() const {
  const auto bytes = serialize();
  Digest d{};
  std::memcpy(d.data(), bytes.data() + bytes.size() - 32, 32);
  return d;
}

TensorArchive TensorArchive::deserialize(std::span<const std::byte> bytes, const Magic& magic) {
  if (bytes.size() < 8 + 4 + 32) throw FormatError("archive truncated (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), magic.data(), 8) != 0) {
    throw FormatError("archive magic mismatch, expected " + magic_str(magic));
  }
  ByteReader r(bytes.first(bytes.size() - 32));
  r.raw(8);
  const auto version = r.u32();
  if (version != kVersion) {
    throw VersionError("archive version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kVersion) + ")");
  }
  const Digest expect = sha256(bytes.first(bytes.size() - 32));
  if (std::memcmp(expect.data(), bytes.data() + bytes.size() - 32, 32) != 0) {
    throw FormatError("archive content hash mismatch (corrupted or truncated file)");
  }
  TensorArchive ar(magic);
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
    auto k = r.str();
    ar.metadata[k] = r.str();
  }
  struct Dir {
    Entry entry;
    std::uint64_t offset, nbytes;
  };
  std::vector<Dir> dir;
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
    Dir d;
    d.entry.name = r.str();
    const auto tag = r.u8();
    if (tag != 1 && tag != 2) throw FormatError("unknown dtype tag " + std::to_string(tag));
    d.entry.dtype = static_cast<DType>(tag);
    const auto rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) d.entry.shape.push_back(r.u64());
    d.offset = r.u64();
    d.nbytes = r.u64();
    if (d.nbytes != num::shape_numel(d.entry.shape) * dtype_size(d.entry.dtype)) {
      throw FormatError("entry '" + d.entry.name + "' byte length disagrees with its shape");
    }
    dir.push_back(std::move(d));
  }
  const std::size_t base = r.position();
  for (auto& d : dir) {
    r.seek(base + d.offset);
    auto& e = d.entry;
    e.values.resize(num::shape_numel(e.shape));
    for (auto& v : e.values) v = e.dtype == DType::f32 ? static_cast<double>(r.f32()) : r.f64();
    if (ar.find(e.name)) throw FormatError("duplicate archive entry '" + e.name + "'");
    ar.entries_.push_back(std::move(e));
  }
  return ar;
}

Digest TensorArchive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  write_file(path, bytes);
  Digest d{};
  std::memcpy(d.data(), bytes.data() + bytes.size() - 32, 32);
  return d;
}

TensorArchive TensorArchive::load(const std::filesystem::path& path, const Magic& magic) {
  return deserialize(read_file(path), magic);
}

template void TensorArchive::put<float>(const std::string&, const num::Tensor<float>&);
template void TensorArchive::put<double>(const std::string&, const num::Tensor<double>&);
template num::Tensor<float> TensorArchive::get<float>(const std::string&, const num::Shape*) const;
template num::Tensor<double> TensorArchive::get<double>(const std::string&, const num::Shape*) const;

}  // namespace efsl
