#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "iia/error.hpp"

namespace iia {

/// Two's-complement fixed-point format Q<int_bits>.<frac_bits>, stored in a
/// 32-bit word. Representable range is
/// [-2^(int_bits-1), 2^(int_bits-1) - 2^-frac_bits].
struct FixedFormat {
  int int_bits = 16;
  int frac_bits = 16;

  constexpr int total_bits() const noexcept { return int_bits + frac_bits; }

  constexpr std::int64_t raw_min() const noexcept {
    return -(std::int64_t{1} << (total_bits() - 1));
  }
  constexpr std::int64_t raw_max() const noexcept {
    return (std::int64_t{1} << (total_bits() - 1)) - 1;
  }

  double scale() const noexcept { return std::ldexp(1.0, frac_bits); }
  double lowest() const noexcept { return static_cast<double>(raw_min()) / scale(); }
  double highest() const noexcept { return static_cast<double>(raw_max()) / scale(); }

  void validate() const {
    if (int_bits < 1 || frac_bits < 0 || total_bits() > 32) {
      throw ConfigError("fixed-point format Q" + std::to_string(int_bits) + "." +
                        std::to_string(frac_bits) + " does not fit a 32-bit word");
    }
  }

  std::string name() const {
    return "Q" + std::to_string(int_bits) + "." + std::to_string(frac_bits);
  }

  friend constexpr bool operator==(const FixedFormat&, const FixedFormat&) = default;
};

inline constexpr FixedFormat kQ16_16{16, 16};

/// Clamps a wide raw value into the format. Bumps `saturations` on clamp.
inline std::int32_t saturate_raw(std::int64_t raw, const FixedFormat& fmt,
                                 std::size_t& saturations) noexcept {
  if (raw > fmt.raw_max()) {
    ++saturations;
    return static_cast<std::int32_t>(fmt.raw_max());
  }
  if (raw < fmt.raw_min()) {
    ++saturations;
    return static_cast<std::int32_t>(fmt.raw_min());
  }
  return static_cast<std::int32_t>(raw);
}

/// Nearest representable raw value, ties to even. NaN maps to zero and counts
/// as a saturation.
inline std::int32_t to_fixed_raw(double value, const FixedFormat& fmt,
                                 std::size_t& saturations) noexcept {
  if (std::isnan(value)) {
    ++saturations;
    return 0;
  }
  const double scaled = std::nearbyint(value * fmt.scale());
  if (scaled > static_cast<double>(fmt.raw_max())) {
    ++saturations;
    return static_cast<std::int32_t>(fmt.raw_max());
  }
  if (scaled < static_cast<double>(fmt.raw_min())) {
    ++saturations;
    return static_cast<std::int32_t>(fmt.raw_min());
  }
  return static_cast<std::int32_t>(scaled);
}

inline double from_fixed_raw(std::int32_t raw, const FixedFormat& fmt) noexcept {
  return static_cast<double>(raw) / fmt.scale();
}

/// Arithmetic right shift of a product accumulator by `shift` bits with
/// round-half-to-even.
inline std::int64_t rescale_round_even(std::int64_t acc, int shift) noexcept {
  if (shift <= 0) return acc;
  const std::int64_t floor_q = acc >> shift;  // arithmetic shift floors
  const std::int64_t rem = acc - (floor_q << shift);
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  if (rem > half || (rem == half && (floor_q & 1))) return floor_q + 1;
  return floor_q;
}

}  // namespace iia
