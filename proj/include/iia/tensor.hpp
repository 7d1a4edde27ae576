#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iia/error.hpp"
#include "iia/fixed_point.hpp"

namespace iia {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Element type of a tensor: IEEE float32 or a fixed-point format.
struct DType {
  enum class Kind : std::uint8_t { float32, fixed };

  Kind kind = Kind::float32;
  FixedFormat format{};

  static constexpr DType float32() noexcept { return {}; }
  static constexpr DType fixed(FixedFormat f) noexcept { return {Kind::fixed, f}; }

  bool is_fixed() const noexcept { return kind == Kind::fixed; }
  std::string name() const { return is_fixed() ? format.name() : "float32"; }

  friend bool operator==(const DType& a, const DType& b) noexcept {
    return a.kind == b.kind && (a.kind == Kind::float32 || a.format == b.format);
  }
};

/// Dense row-major n-dimensional array. Float tensors store float32 values;
/// fixed tensors store raw two's-complement words. A tensor also carries the
/// number of saturations that occurred while it was produced.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> values)
      : shape_(std::move(shape)), floats_(std::move(values)) {
    check_shape(floats_.size());
  }

  static Tensor zeros(Shape shape, DType dtype = DType::float32()) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.check_shape_dims();
    t.dtype_ = dtype;
    if (dtype.is_fixed()) {
      dtype.format.validate();
      t.raw_.assign(shape_size(t.shape_), 0);
    } else {
      t.floats_.assign(shape_size(t.shape_), 0.0f);
    }
    return t;
  }

  static Tensor from_raw(Shape shape, FixedFormat fmt, std::vector<std::int32_t> raw) {
    fmt.validate();
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = DType::fixed(fmt);
    t.raw_ = std::move(raw);
    t.check_shape(t.raw_.size());
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return dtype_.is_fixed() ? raw_.size() : floats_.size(); }
  bool empty() const noexcept { return size() == 0; }
  const DType& dtype() const noexcept { return dtype_; }
  bool is_fixed() const noexcept { return dtype_.is_fixed(); }

  std::span<const float> floats() const {
    require_float();
    return floats_;
  }
  std::span<float> floats() {
    require_float();
    return floats_;
  }
  std::span<const std::int32_t> raw() const {
    require_fixed();
    return raw_;
  }
  std::span<std::int32_t> raw() {
    require_fixed();
    return raw_;
  }

  /// Numeric value of element i (exact for both dtypes).
  double value(std::size_t i) const {
    return is_fixed() ? from_fixed_raw(raw_[i], dtype_.format)
                      : static_cast<double>(floats_[i]);
  }

  std::vector<double> values() const {
    std::vector<double> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(i);
    return out;
  }

  std::size_t saturations() const noexcept { return saturations_; }
  void set_saturations(std::size_t n) noexcept { saturations_ = n; }

  /// Same data under a new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                           shape_string(shape));
    }
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  /// Bytes of payload as stored (4 per element for both dtypes).
  std::size_t byte_size() const noexcept { return size() * 4; }

  /// Shape, dtype and bit pattern equality (distinguishes -0.0 from 0.0).
  friend bool operator==(const Tensor& a, const Tensor& b) noexcept {
    if (a.shape_ != b.shape_ || !(a.dtype_ == b.dtype_)) return false;
    if (a.is_fixed()) return a.raw_ == b.raw_;
    return a.floats_.size() == b.floats_.size() &&
           (a.floats_.empty() ||
            std::memcmp(a.floats_.data(), b.floats_.data(), a.floats_.size() * sizeof(float)) == 0);
  }

 private:
  void check_shape_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }
  void check_shape(std::size_t n) const {
    check_shape_dims();
    if (shape_size(shape_) != n) {
      throw DimensionError("data length " + std::to_string(n) + " does not match shape " +
                           shape_string(shape_));
    }
  }
  void require_float() const {
    if (is_fixed()) throw DimensionError("expected float32 tensor, got " + dtype_.name());
  }
  void require_fixed() const {
    if (!is_fixed()) throw DimensionError("expected fixed-point tensor, got float32");
  }

  Shape shape_;
  DType dtype_{};
  std::vector<float> floats_;
  std::vector<std::int32_t> raw_;
  std::size_t saturations_ = 0;
};

/// Layer parameters: weights plus a 1-D bias with one entry per output
/// channel (conv) or unit (dense).
struct Kernel {
  Tensor weights;
  Tensor bias;

  friend bool operator==(const Kernel&, const Kernel&) = default;
};

/// Rounds every element to the nearest value of `fmt` (ties to even),
/// saturating out-of-range values. The count of saturated elements is
/// recorded on the result.
inline Tensor quantize(const Tensor& input, FixedFormat fmt) {
  fmt.validate();
  std::vector<std::int32_t> raw(input.size());
  std::size_t sat = 0;
  if (input.is_fixed() && input.dtype().format == fmt) {
    auto src = input.raw();
    raw.assign(src.begin(), src.end());
  } else {
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = to_fixed_raw(input.value(i), fmt, sat);
  }
  Tensor out = Tensor::from_raw(input.shape(), fmt, std::move(raw));
  out.set_saturations(sat);
  return out;
}

/// Converts to float32 (exact for fixed formats of 24 significant bits or
/// fewer, round-to-nearest otherwise).
inline Tensor dequantize(const Tensor& input) {
  if (!input.is_fixed()) return input;
  std::vector<float> v(input.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(input.value(i));
  return Tensor(input.shape(), std::move(v));
}

/// Converts `t` to `dtype`, quantizing or dequantizing as needed.
inline Tensor convert(const Tensor& t, const DType& dtype) {
  if (t.dtype() == dtype) return t;
  return dtype.is_fixed() ? quantize(t, dtype.format) : dequantize(t);
}

}  // namespace iia
