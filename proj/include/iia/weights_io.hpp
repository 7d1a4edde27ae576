#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "iia/error.hpp"
#include "iia/model.hpp"
#include "iia/tensor.hpp"

namespace iia {

// "DLAW" tensor container, little-endian:
//   magic "DLAW" | u32 version (1) | u32 entry count
//   per entry: u16 name length | UTF-8 name | u8 dtype (0 float32, 1 Q16.16)
//              | u8 rank | rank x u32 dims | product(dims) x 4-byte payload

inline constexpr std::uint32_t kWeightFileVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw ParseError("truncated " + std::string(what) + ": need " + std::to_string(n) + " bytes, " +
                           std::to_string(data_.size() - pos_) + " available",
                       pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensors(std::span<const NamedTensor> entries) {
  detail::ByteWriter w;
  w.bytes("DLAW");
  w.u32(kWeightFileVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > 0xffff) throw ConfigError("tensor name too long: " + name.substr(0, 32) + "...");
    if (t.is_fixed() && !(t.dtype().format == kQ16_16)) {
      throw ConfigError("tensor " + name + ": only float32 and Q16.16 can be stored, got " +
                        t.dtype().name());
    }
    if (t.rank() == 0 || t.rank() > 0xff) throw ConfigError("tensor " + name + " has unsupported rank");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(t.is_fixed() ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    if (t.is_fixed()) {
      for (auto v : t.raw()) w.u32(static_cast<std::uint32_t>(v));
    } else {
      for (auto v : t.floats()) w.u32(std::bit_cast<std::uint32_t>(v));
    }
  }
  return w.take();
}

inline std::vector<NamedTensor> decode_tensors(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (magic != "DLAW") throw ParseError("bad magic, expected \"DLAW\"", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kWeightFileVersion) {
    throw ParseError("unsupported version " + std::to_string(version), version_at);
  }
  const auto count = r.u32("entry count");
  std::vector<NamedTensor> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t entry_at = r.offset();
    const auto name_len = r.u16("name length");
    std::string name = r.str(name_len, "name");
    const std::size_t dtype_at = r.offset();
    const auto dtype = r.u8("dtype");
    if (dtype > 1) throw ParseError("unknown dtype code " + std::to_string(dtype), dtype_at);
    const std::size_t rank_at = r.offset();
    const auto rank = r.u8("rank");
    if (rank == 0) throw ParseError("tensor " + name + " has rank 0", rank_at);
    Shape shape(rank);
    std::uint64_t elems = 1;
    for (auto& d : shape) {
      const std::size_t dim_at = r.offset();
      d = r.u32("dims");
      if (d == 0) throw ParseError("tensor " + name + " has a zero dimension", dim_at);
      elems *= d;
      if (elems > (std::uint64_t{1} << 40)) throw ParseError("tensor " + name + " is implausibly large", dim_at);
    }
    const std::size_t payload_at = r.offset();
    try {
      r.need(static_cast<std::size_t>(elems) * 4, "payload");
    } catch (const ParseError&) {
      throw ParseError("truncated payload for tensor " + name + " (entry at " + std::to_string(entry_at) +
                           "): dims " + shape_string(shape) + " need " + std::to_string(elems * 4) + " bytes, " +
                           std::to_string(bytes.size() - payload_at) + " available",
                       payload_at);
    }
    if (dtype == 1) {
      std::vector<std::int32_t> raw(elems);
      for (auto& v : raw) v = static_cast<std::int32_t>(r.u32("payload"));
      out.push_back({std::move(name), Tensor::from_raw(std::move(shape), kQ16_16, std::move(raw))});
    } else {
      std::vector<float> v(elems);
      for (auto& x : v) x = std::bit_cast<float>(r.u32("payload"));
      out.push_back({std::move(name), Tensor(std::move(shape), std::move(v))});
    }
  }
  if (!r.at_end()) throw ParseError("trailing bytes after last entry", r.offset());
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_tensor_file(const std::filesystem::path& path, std::span<const NamedTensor> entries) {
  const auto bytes = encode_tensors(entries);
  write_file_bytes(path, bytes);
}

inline std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_tensors(bytes);
}

/// "<layer>.weight" and "<layer>.bias" entries for every parameterised layer
/// in `layers`, in layer order.
inline std::vector<NamedTensor> parameter_entries(std::span<const LayerSpec> layers) {
  std::vector<NamedTensor> out;
  for (const auto& l : layers) {
    if (!l.has_params_slot()) continue;
    if (!l.params) throw ConfigError("layer " + l.name + " has no parameters to save");
    out.push_back({l.name + ".weight", l.params->weights});
    out.push_back({l.name + ".bias", l.params->bias});
  }
  return out;
}

inline void save_weights(const ModelSpec& model, const std::filesystem::path& path) {
  write_tensor_file(path, parameter_entries(model.layers));
}

inline std::vector<NamedTensor> load_weights(const std::filesystem::path& path) {
  return read_tensor_file(path);
}

/// Installs named parameter tensors into the model and validates shapes.
inline ModelSpec apply_weights(ModelSpec model, std::span<const NamedTensor> entries) {
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& e : entries)
      if (e.name == name) return e.tensor;
    throw ConfigError("weight file has no entry \"" + name + "\"");
  };
  for (auto& l : model.layers) {
    if (!l.has_params_slot()) continue;
    // Look both up before copying: GCC < 13 leaks partially built aggregates on throw.
    const Tensor& w = find(l.name + ".weight");
    const Tensor& b = find(l.name + ".bias");
    l.params = Kernel{w, b};
  }
  model.validate();
  return model;
}

}  // namespace iia
