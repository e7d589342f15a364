// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/episodes/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "efsl/core/binary.hpp"
#include "efsl/core/error.hpp"
#include "efsl/core/format.hpp"
#include "efsl/numerics/rng.hpp"

namespace efsl::data {

namespace {

constexpr char kMagic[8] = {'E', 'F', 'S', 'L', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;
constexpr double kPi = 3.141592653589793;
constexpr double kTextureFreqs[kNumTextureBands] = {0.0, 0.75, 1.5};

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double x = h * 6.0;
  const int sector = static_cast<int>(x) % 6;
  const double f = x - std::floor(x);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

bool inside(ShapeKind shape, double u, double v) {
  switch (shape) {
    case ShapeKind::circle: return u * u + v * v <= 1.0;
    case ShapeKind::square: return std::max(std::abs(u), std::abs(v)) <= 0.8;
    case ShapeKind::triangle: return v >= -0.5 && v <= 1.0 - std::sqrt(3.0) * std::abs(u);
    case ShapeKind::cross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case ShapeKind::ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
  }
  return false;
}

void render(const SyntheticDatasetSpec& spec, const ClassFactors& cf, num::Rng rng, std::span<float> out) {
  const int S = spec.image_size;
  const double cx = 0.5 + rng.uniform(-spec.position_jitter, spec.position_jitter);
  const double cy = 0.5 + rng.uniform(-spec.position_jitter, spec.position_jitter);
  const double radius = 0.30 * (1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter));
  const double theta = rng.uniform(-spec.max_rotation, spec.max_rotation);
  const double noise = rng.uniform(spec.noise_min, spec.noise_max);
  const double phase = rng.uniform(0.0, 2 * kPi);
  const double bg_level = rng.uniform(0.3, 0.6);
  const double ct = std::cos(theta), st = std::sin(theta);
  const auto fg = hsv_to_rgb(cf.hue + rng.uniform(-0.015, 0.015), 0.85, 0.95);

  const std::size_t plane = static_cast<std::size_t>(S) * S;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      // 2x2 supersampled coverage and texture.
      double cover = 0.0, shade = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = (x + 0.25 + 0.5 * sx) / S - cx;
          const double py = (y + 0.25 + 0.5 * sy) / S - cy;
          const double u = (ct * px + st * py) / radius;
          const double v = (-st * px + ct * py) / radius;
          if (inside(cf.shape, u, v)) {
            cover += 0.25;
            shade += 0.25 * (0.6 + 0.4 * std::sin(2 * kPi * cf.texture_freq * u + phase));
          }
        }
      }
      const double tex = cover > 0 ? shade / cover : 0.0;
      for (int c = 0; c < spec.channels; ++c) {
        const double bg = bg_level + noise * rng.normal();
        const double col = fg[static_cast<std::size_t>(c % 3)] * tex;
        const double value = cover * col + (1.0 - cover) * bg;
        out[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * S + x] =
            static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
}

std::vector<ClassFactors> draw_class_factors(const SyntheticDatasetSpec& spec) {
  std::vector<ClassFactors> combos;
  for (int s = 0; s < kNumShapes; ++s)
    for (int h = 0; h < kNumHueBands; ++h)
      for (int t = 0; t < kNumTextureBands; ++t) {
        ClassFactors cf;
        cf.shape = static_cast<ShapeKind>(s);
        cf.hue_band = h;
        cf.texture_band = t;
        cf.hue = (h + 0.5) / kNumHueBands;
        cf.texture_freq = kTextureFreqs[t];
        combos.push_back(cf);
      }
  num::Rng rng = num::Rng(spec.seed).split("class-factors");
  for (std::size_t i = combos.size(); i > 1; --i) std::swap(combos[i - 1], combos[rng.below(i)]);
  combos.resize(static_cast<std::size_t>(spec.num_classes));
  return combos;
}

}  // namespace

const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::cross: return "cross";
    case ShapeKind::ring: return "ring";
  }
  return "?";
}

void SyntheticDatasetSpec::validate() const {
  const int max_classes = kNumShapes * kNumHueBands * kNumTextureBands;
  if (num_classes < 1 || num_classes > max_classes) {
    throw ValidationError("data.num_classes must be in [1, " + std::to_string(max_classes) + "]");
  }
  if (images_per_class < 1) throw ValidationError("data.images_per_class must be >= 1");
  if (image_size < 4) throw ValidationError("data.image_size must be >= 4");
  if (channels < 1 || channels > 3) throw ValidationError("data.channels must be in [1, 3]");
  if (position_jitter < 0 || scale_jitter < 0 || scale_jitter >= 1 || max_rotation < 0) {
    throw ValidationError("data nuisance ranges must be non-negative (scale_jitter < 1)");
  }
  if (noise_min < 0 || noise_max < noise_min) throw ValidationError("data noise range must satisfy 0 <= min <= max");
}

std::map<std::string, std::string> SyntheticDatasetSpec::to_kv() const {
  return {
      {"channels", std::to_string(channels)},
      {"image_size", std::to_string(image_size)},
      {"images_per_class", std::to_string(images_per_class)},
      {"max_rotation", format_real(max_rotation)},
      {"noise_max", format_real(noise_max)},
      {"noise_min", format_real(noise_min)},
      {"num_classes", std::to_string(num_classes)},
      {"position_jitter", format_real(position_jitter)},
      {"scale_jitter", format_real(scale_jitter)},
      {"seed", std::to_string(seed)},
  };
}

SyntheticDatasetSpec SyntheticDatasetSpec::from_kv(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("dataset spec block is missing '") + key + "'");
    return it->second;
  };
  SyntheticDatasetSpec s;
  s.channels = static_cast<int>(parse_int(get("channels")));
  s.image_size = static_cast<int>(parse_int(get("image_size")));
  s.images_per_class = static_cast<int>(parse_int(get("images_per_class")));
  s.max_rotation = parse_real(get("max_rotation"));
  s.noise_max = parse_real(get("noise_max"));
  s.noise_min = parse_real(get("noise_min"));
  s.num_classes = static_cast<int>(parse_int(get("num_classes")));
  s.position_jitter = parse_real(get("position_jitter"));
  s.scale_jitter = parse_real(get("scale_jitter"));
  s.seed = static_cast<std::uint64_t>(parse_int(get("seed")));
  return s;
}

Dataset::Dataset(SyntheticDatasetSpec spec, std::vector<ClassFactors> classes, std::vector<float> pixels)
    : spec_(std::move(spec)), classes_(std::move(classes)), pixels_(std::move(pixels)) {
  if (classes_.size() != static_cast<std::size_t>(spec_.num_classes) ||
      pixels_.size() != image_floats() * classes_.size() * static_cast<std::size_t>(spec_.images_per_class)) {
    throw FormatError("dataset payload does not match its spec");
  }
}

std::size_t Dataset::image_floats() const {
  return static_cast<std::size_t>(spec_.channels) * spec_.image_size * spec_.image_size;
}

std::span<const float> Dataset::image(int cls, int index) const {
  if (cls < 0 || cls >= num_classes() || index < 0 || index >= spec_.images_per_class) {
    throw ValidationError("image (" + std::to_string(cls) + ", " + std::to_string(index) + ") out of range");
  }
  const std::size_t flat = static_cast<std::size_t>(cls) * spec_.images_per_class + static_cast<std::size_t>(index);
  return std::span<const float>(pixels_).subspan(flat * image_floats(), image_floats());
}

Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  auto classes = draw_class_factors(spec);
  const std::size_t per_image = static_cast<std::size_t>(spec.channels) * spec.image_size * spec.image_size;
  std::vector<float> pixels(per_image * classes.size() * static_cast<std::size_t>(spec.images_per_class));
  const num::Rng images = num::Rng(spec.seed).split("images");
  for (int c = 0; c < spec.num_classes; ++c) {
    const num::Rng class_rng = images.split(static_cast<std::uint64_t>(c));
    for (int i = 0; i < spec.images_per_class; ++i) {
      const std::size_t flat = static_cast<std::size_t>(c) * spec.images_per_class + static_cast<std::size_t>(i);
      render(spec, classes[static_cast<std::size_t>(c)], class_rng.split(static_cast<std::uint64_t>(i)),
             std::span<float>(pixels).subspan(flat * per_image, per_image));
    }
  }
  return Dataset(spec, std::move(classes), std::move(pixels));
}

std::vector<std::byte> serialize_dataset(const Dataset& ds) {
  ByteWriter w;
  w.raw(std::as_bytes(std::span<const char>(kMagic, 8)));
  w.u32(kVersion);
  const auto kv = ds.spec().to_kv();
  w.u32(static_cast<std::uint32_t>(kv.size()));
  for (const auto& [k, v] : kv) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ds.num_classes()));
  const std::uint64_t class_bytes = ds.image_floats() * sizeof(float) * static_cast<std::uint64_t>(ds.images_per_class());
  for (int c = 0; c < ds.num_classes(); ++c) {
    const auto& f = ds.factors(c);
    w.u32(static_cast<std::uint32_t>(c));
    w.u8(static_cast<std::uint8_t>(f.shape));
    w.u32(static_cast<std::uint32_t>(f.hue_band));
    w.u32(static_cast<std::uint32_t>(f.texture_band));
    w.f64(f.hue);
    w.f64(f.texture_freq);
    w.u32(static_cast<std::uint32_t>(ds.images_per_class()));
    w.u64(class_bytes * static_cast<std::uint64_t>(c));
  }
  w.u32(static_cast<std::uint32_t>(ds.channels()));
  w.u32(static_cast<std::uint32_t>(ds.image_size()));
  w.u32(static_cast<std::uint32_t>(ds.image_size()));
  for (float v : ds.pixels()) w.f32(v);
  const Digest d = sha256(w.bytes());
  w.raw(std::as_bytes(std::span<const std::uint8_t>(d)));
  return w.take();
}

Dataset deserialize_dataset(std::span<const std::byte> bytes) {
  if (bytes.size() < 8 + 4 + 32) throw FormatError("dataset container truncated");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("not a dataset container (bad magic)");
  ByteReader r(bytes.first(bytes.size() - 32));
  r.raw(8);
  const auto version = r.u32();
  if (version != kVersion) {
    throw VersionError("dataset container version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kVersion) + ")");
  }
  const Digest expect = sha256(bytes.first(bytes.size() - 32));
  if (std::memcmp(expect.data(), bytes.data() + bytes.size() - 32, 32) != 0) {
    throw FormatError("dataset container content hash mismatch (corrupted file)");
  }
  std::map<std::string, std::string> kv;
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
    auto k = r.str();
    kv[k] = r.str();
  }
  const auto spec = SyntheticDatasetSpec::from_kv(kv);
  const auto num_classes = r.u32();
  std::vector<ClassFactors> classes(num_classes);
  for (std::uint32_t c = 0; c < num_classes; ++c) {
    if (r.u32() != c) throw FormatError("dataset class table out of order");
    auto& f = classes[c];
    f.shape = static_cast<ShapeKind>(r.u8());
    f.hue_band = static_cast<int>(r.u32());
    f.texture_band = static_cast<int>(r.u32());
    f.hue = r.f64();
    f.texture_freq = r.f64();
    if (r.u32() != static_cast<std::uint32_t>(spec.images_per_class)) throw FormatError("class image count mismatch");
    r.u64();
  }
  const auto ch = r.u32(), h = r.u32(), wd = r.u32();
  if (ch != static_cast<std::uint32_t>(spec.channels) || h != static_cast<std::uint32_t>(spec.image_size) || wd != h) {
    throw FormatError("dataset image dimensions disagree with spec block");
  }
  const std::size_t count = static_cast<std::size_t>(ch) * h * wd * num_classes * spec.images_per_class;
  if (r.remaining() != count * sizeof(float)) throw FormatError("dataset payload size mismatch");
  std::vector<float> pixels(count);
  for (auto& p : pixels) p = r.f32();
  return Dataset(spec, std::move(classes), std::move(pixels));
}

Digest save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const auto bytes = serialize_dataset(ds);
  write_file(path, bytes);
  Digest d{};
  std::memcpy(d.data(), bytes.data() + bytes.size() - 32, 32);
  return d;
}

Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file(path)); }

void center_crop(std::span<const float> image, int channels, int size, int crop, bool flip, std::span<float> out) {
  if (crop > size) throw ValidationError("crop size exceeds image size");
  const int off = (size - crop) / 2;
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < crop; ++y) {
      for (int x = 0; x < crop; ++x) {
        const int sx = flip ? off + crop - 1 - x : off + x;
        out[(static_cast<std::size_t>(c) * crop + y) * crop + x] =
            image[(static_cast<std::size_t>(c) * size + (off + y)) * size + sx];
      }
    }
  }
}

}  // namespace efsl::data
