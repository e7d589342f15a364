// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "efsl/core/hash.hpp"

namespace efsl::data {

enum class ShapeKind : std::uint8_t { circle = 0, square = 1, triangle = 2, cross = 3, ring = 4 };
inline constexpr int kNumShapes = 5;
inline constexpr int kNumHueBands = 8;
inline constexpr int kNumTextureBands = 3;

const char* shape_name(ShapeKind s);

/// Recipe for a synthetic image classification set.
///
/// A class is a fixed (shape, hue band, texture band) triple; every image of
/// that class is rendered with independent nuisances drawn per image: centre
/// jitter, scale jitter, rotation and background noise level.
struct SyntheticDatasetSpec {
  int num_classes = 40;
  int images_per_class = 200;
  int image_size = 40;
  int channels = 3;
  std::uint64_t seed = 1;
  double position_jitter = 0.08;  // fraction of the image side
  double scale_jitter = 0.20;     // relative
  double max_rotation = 3.141592653589793;  // radians, uniform in [-max, max]
  double noise_min = 0.02;
  double noise_max = 0.15;

  void validate() const;
  // Canonical key/value form, used by the container and config echo.
  std::map<std::string, std::string> to_kv() const;
  static SyntheticDatasetSpec from_kv(const std::map<std::string, std::string>& kv);
};

struct ClassFactors {
  ShapeKind shape = ShapeKind::circle;
  int hue_band = 0;
  int texture_band = 0;
  double hue = 0.0;           // [0, 1)
  double texture_freq = 0.0;  // stripe cycles across the shape, 0 = flat
};

/// Images grouped by class: class c owns images [c * per_class, (c + 1) * per_class).
class Dataset {
 public:
  Dataset() = default;
  Dataset(SyntheticDatasetSpec spec, std::vector<ClassFactors> classes, std::vector<float> pixels);

  const SyntheticDatasetSpec& spec() const { return spec_; }
  int num_classes() const { return static_cast<int>(classes_.size()); }
  int images_per_class() const { return spec_.images_per_class; }
  int channels() const { return spec_.channels; }
  int image_size() const { return spec_.image_size; }
  std::size_t image_floats() const;
  const ClassFactors& factors(int cls) const { return classes_.at(static_cast<std::size_t>(cls)); }
  std::span<const float> image(int cls, int index) const;
  std::span<const float> pixels() const { return pixels_; }

 private:
  SyntheticDatasetSpec spec_;
  std::vector<ClassFactors> classes_;
  std::vector<float> pixels_;
};

/// Renders every image; image (c, i) depends only on (spec, c, i).
Dataset generate_dataset(const SyntheticDatasetSpec& spec);

// Container: magic "EFSLDATA", u32 version, spec key/values, class table,
// u32 channels/height/width, float32 payload, SHA-256 trailer.
std::vector<std::byte> serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(std::span<const std::byte> bytes);
Digest save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Copies the centred crop of one [C, S, S] image into out[C, crop, crop],
/// optionally mirrored left-right.
void center_crop(std::span<const float> image, int channels, int size, int crop, bool flip, std::span<float> out);

}  // namespace efsl::data
