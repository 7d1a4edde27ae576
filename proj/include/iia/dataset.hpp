#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iia/error.hpp"
#include "iia/rng.hpp"
#include "iia/tensor.hpp"
#include "iia/weights_io.hpp"

namespace iia {

struct Sample {
  Tensor image;
  std::size_t label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class DataSource { mnist, cifar10, synthetic };

/// Labelled images sharing one shape. Pixels are float32 in [0, 1] for every
/// source the parsers and generators produce.
struct Dataset {
  std::string name;
  std::vector<Sample> items;
  DataSource source = DataSource::synthetic;
  std::uint64_t seed = 0;
  std::size_t num_classes = 10;

  std::size_t size() const noexcept { return items.size(); }
  bool empty() const noexcept { return items.empty(); }
  const Shape& image_shape() const { return items.at(0).image.shape(); }

  void validate() const {
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].image.shape() != items[0].image.shape()) {
        throw DimensionError("dataset " + name + ": item " + std::to_string(i) + " has shape " +
                             shape_string(items[i].image.shape()) + ", expected " +
                             shape_string(items[0].image.shape()));
      }
      if (items[i].label >= num_classes) {
        throw ConfigError("dataset " + name + ": item " + std::to_string(i) + " label " +
                          std::to_string(items[i].label) + " out of range");
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ------------------------------------------------------------------ IDX

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at, const char* what) {
  if (b.size() < at + 4) {
    throw ParseError("truncated header: missing " + std::string(what), std::min(b.size(), at));
  }
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline float byte_to_unit(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

inline std::uint8_t unit_to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

/// Images from an IDX3 buffer as [1, rows, cols] tensors scaled by 1/255.
inline std::vector<Tensor> parse_idx_images(std::span<const std::uint8_t> b) {
  const auto magic = detail::read_be32(b, 0, "magic");
  if (magic != kIdxImageMagic) {
    throw ParseError("bad IDX image magic " + std::to_string(magic) + ", expected 2051", 0);
  }
  const std::size_t count = detail::read_be32(b, 4, "image count");
  const std::size_t rows = detail::read_be32(b, 8, "row count");
  const std::size_t cols = detail::read_be32(b, 12, "column count");
  if (count > 0 && (rows == 0 || cols == 0)) {
    throw ParseError("IDX image dimensions must be positive", rows == 0 ? 8 : 12);
  }
  const std::size_t per = std::max<std::size_t>(rows * cols, 1);
  const std::size_t need = count * per;
  if (b.size() - 16 < need) {
    const std::size_t whole = (b.size() - 16) / per;
    throw ParseError("truncated IDX image payload: header declares " + std::to_string(count) + " images, " +
                         std::to_string(whole) + " complete",
                     16 + whole * per);
  }
  if (b.size() - 16 > need) throw ParseError("trailing bytes after IDX image payload", 16 + need);
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<float> px(per);
    for (std::size_t p = 0; p < per; ++p) px[p] = detail::byte_to_unit(b[16 + i * per + p]);
    out.emplace_back(Shape{1, rows, cols}, std::move(px));
  }
  return out;
}

inline std::vector<std::size_t> parse_idx_labels(std::span<const std::uint8_t> b, std::size_t num_classes = 10) {
  const auto magic = detail::read_be32(b, 0, "magic");
  if (magic != kIdxLabelMagic) {
    throw ParseError("bad IDX label magic " + std::to_string(magic) + ", expected 2049", 0);
  }
  const std::size_t count = detail::read_be32(b, 4, "label count");
  if (b.size() - 8 < count) {
    throw ParseError("truncated IDX label payload: header declares " + std::to_string(count) + " labels, " +
                         std::to_string(b.size() - 8) + " present",
                     b.size());
  }
  if (b.size() - 8 > count) throw ParseError("trailing bytes after IDX label payload", 8 + count);
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = b[8 + i];
    if (out[i] >= num_classes) {
      throw ParseError("label " + std::to_string(out[i]) + " of item " + std::to_string(i) + " out of range",
                       8 + i);
    }
  }
  return out;
}

inline Dataset parse_idx_bytes(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                               std::string name = "mnist") {
  auto imgs = parse_idx_images(images);
  auto lbls = parse_idx_labels(labels);
  if (imgs.size() != lbls.size()) {
    throw ParseError("image count " + std::to_string(imgs.size()) + " does not match label count " +
                         std::to_string(lbls.size()),
                     4);
  }
  Dataset d{std::move(name), {}, DataSource::mnist, 0, 10};
  d.items.reserve(imgs.size());
  for (std::size_t i = 0; i < imgs.size(); ++i) d.items.push_back({std::move(imgs[i]), lbls[i]});
  return d;
}

/// MNIST-style IDX pair (big-endian headers, magics 2051 and 2049). Errors
/// name the offending file.
inline Dataset parse_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  auto in_file = [](const std::filesystem::path& p, auto&& parse) {
    const auto bytes = read_file_bytes(p);
    try {
      return parse(bytes);
    } catch (const ParseError& e) {
      throw ParseError(p.string() + ": " + e.message(), e.offset());
    }
  };
  auto imgs = in_file(images_path, [](const auto& b) { return parse_idx_images(b); });
  auto lbls = in_file(labels_path, [](const auto& b) { return parse_idx_labels(b); });
  if (imgs.size() != lbls.size()) {
    throw ParseError(labels_path.string() + ": label count " + std::to_string(lbls.size()) +
                         " does not match image count " + std::to_string(imgs.size()),
                     4);
  }
  Dataset d{"mnist", {}, DataSource::mnist, 0, 10};
  d.items.reserve(imgs.size());
  for (std::size_t i = 0; i < imgs.size(); ++i) d.items.push_back({std::move(imgs[i]), lbls[i]});
  return d;
}

/// Encodes single-channel images (shape [1,H,W] or [H,W]) as an IDX pair.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> encode_idx(const Dataset& d) {
  std::vector<std::uint8_t> img, lbl;
  std::size_t rows = 0, cols = 0;
  if (!d.empty()) {
    const auto& s = d.image_shape();
    if (!(s.size() == 3 && s[0] == 1) && s.size() != 2) {
      throw DimensionError("IDX images must be single-channel, got " + shape_string(s));
    }
    rows = s[s.size() - 2];
    cols = s[s.size() - 1];
  }
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(d.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  detail::put_be32(lbl, kIdxLabelMagic);
  detail::put_be32(lbl, static_cast<std::uint32_t>(d.size()));
  for (const auto& s : d.items) {
    const Tensor px = dequantize(s.image);
    for (float v : px.floats()) img.push_back(detail::unit_to_byte(v));
    lbl.push_back(static_cast<std::uint8_t>(s.label));
  }
  return {std::move(img), std::move(lbl)};
}

inline void write_idx(const Dataset& d, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  const auto [img, lbl] = encode_idx(d);
  write_file_bytes(images_path, img);
  write_file_bytes(labels_path, lbl);
}

// ------------------------------------------------------------- CIFAR-10

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

/// CIFAR-10 binary records: one label byte then R, G and B 32x32 planes.
inline Dataset parse_cifar10_bytes(std::span<const std::uint8_t> b, std::string name = "cifar10") {
  if (b.size() % kCifarRecord != 0) {
    throw ParseError("CIFAR-10 file size " + std::to_string(b.size()) + " is not a multiple of 3073",
                     b.size() - b.size() % kCifarRecord);
  }
  Dataset d{std::move(name), {}, DataSource::cifar10, 0, 10};
  const std::size_t n = b.size() / kCifarRecord;
  d.items.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t at = r * kCifarRecord;
    const std::size_t label = b[at];
    if (label > 9) {
      throw ParseError("record " + std::to_string(r) + " has label " + std::to_string(label) + " > 9", at);
    }
    std::vector<float> px(kCifarPixels);
    for (std::size_t p = 0; p < kCifarPixels; ++p) px[p] = detail::byte_to_unit(b[at + 1 + p]);
    d.items.push_back({Tensor({3, 32, 32}, std::move(px)), label});
  }
  return d;
}

inline Dataset parse_cifar10(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_cifar10_bytes(bytes);
}

inline std::vector<std::uint8_t> encode_cifar10(const Dataset& d) {
  std::vector<std::uint8_t> out;
  out.reserve(d.size() * kCifarRecord);
  for (const auto& s : d.items) {
    if (s.image.shape() != Shape{3, 32, 32}) {
      throw DimensionError("CIFAR-10 records need [3x32x32] images, got " + shape_string(s.image.shape()));
    }
    out.push_back(static_cast<std::uint8_t>(s.label));
    const Tensor px = dequantize(s.image);
    for (float v : px.floats()) out.push_back(detail::unit_to_byte(v));
  }
  return out;
}

inline void write_cifar10(const Dataset& d, const std::filesystem::path& path) {
  write_file_bytes(path, encode_cifar10(d));
}

// ------------------------------------------------------------ synthetic

enum class SynthMode { uniform, gaussianActivationProbe };

/// Seeded images. `uniform` draws each pixel in [0,1); the Gaussian probe
/// mode draws N(0.5, 0.25^2) clipped to [0,1]. Labels cycle 0..classes-1.
inline Dataset synthesize(std::size_t count, const Shape& shape, std::uint64_t seed,
                          SynthMode mode = SynthMode::uniform, std::size_t num_classes = 10) {
  Xoshiro256 rng(seed);
  Dataset d{"synthetic", {}, DataSource::synthetic, seed, num_classes};
  d.items.reserve(count);
  const std::size_t n = shape_size(shape);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<float> px(n);
    for (auto& p : px) {
      if (mode == SynthMode::uniform) {
        p = static_cast<float>(rng.uniform01());
      } else {
        p = static_cast<float>(std::clamp(0.5 + 0.25 * rng.normal(), 0.0, 1.0));
      }
    }
    d.items.push_back({Tensor(shape, std::move(px)), i % num_classes});
  }
  return d;
}

// ---------------------------------------------------------------- split

struct SplitPlan {
  std::size_t validation_count = 100;
  std::size_t stream_count = 1000;
  std::uint64_t seed = 0;
};

/// Item indices of each part, each part in ascending order.
struct SplitIndices {
  std::vector<std::size_t> validation;
  std::vector<std::size_t> stream;
  std::vector<std::size_t> rest;
};

inline SplitIndices split_indices(std::size_t available, const SplitPlan& plan) {
  const std::size_t need = plan.validation_count + plan.stream_count;
  if (need > available) {
    throw ConfigError("split needs " + std::to_string(need) + " items (" + std::to_string(plan.validation_count) +
                      " validation + " + std::to_string(plan.stream_count) + " stream), " +
                      std::to_string(available) + " available");
  }
  std::vector<std::size_t> perm(available);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Xoshiro256 rng(plan.seed);
  for (std::size_t i = available; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  SplitIndices s;
  s.validation.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(plan.validation_count));
  s.stream.assign(perm.begin() + static_cast<std::ptrdiff_t>(plan.validation_count),
                  perm.begin() + static_cast<std::ptrdiff_t>(need));
  s.rest.assign(perm.begin() + static_cast<std::ptrdiff_t>(need), perm.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.stream.begin(), s.stream.end());
  std::sort(s.rest.begin(), s.rest.end());
  return s;
}

inline Dataset subset(const Dataset& d, std::span<const std::size_t> indices, std::string name) {
  Dataset out{std::move(name), {}, d.source, d.seed, d.num_classes};
  out.items.reserve(indices.size());
  for (auto i : indices) out.items.push_back(d.items.at(i));
  return out;
}

/// Disjoint validation and stream parts, deterministic from plan.seed.
inline std::pair<Dataset, Dataset> split(const Dataset& d, const SplitPlan& plan) {
  const auto s = split_indices(d.size(), plan);
  return {subset(d, s.validation, d.name + "/validation"), subset(d, s.stream, d.name + "/stream")};
}

/// Items used by neither part of `split(d, plan)`.
inline Dataset split_remainder(const Dataset& d, const SplitPlan& plan) {
  const auto s = split_indices(d.size(), plan);
  return subset(d, s.rest, d.name + "/rest");
}

}  // namespace iia
