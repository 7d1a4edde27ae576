#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>

#include "iia/error.hpp"
#include "iia/fixed_point.hpp"
#include "iia/tensor.hpp"

namespace iia {

enum class Padding { valid, same };

namespace detail {

// Accumulator policies. Float accumulates in float32; fixed accumulates the
// 2*frac-scaled products in 64 bits and rounds once when the output is
// written. Both add the bias after the full dot product.
template <class T>
struct Arith;

template <>
struct Arith<float> {
  using acc_t = float;
  acc_t zero() const noexcept { return 0.0f; }
  acc_t mul_add(acc_t acc, float w, float x) const noexcept { return acc + w * x; }
  acc_t add_bias(acc_t acc, float b) const noexcept { return acc + b; }
  float finish(acc_t acc) const noexcept { return acc; }
  std::size_t saturations = 0;
};

template <>
struct Arith<std::int32_t> {
  using acc_t = std::int64_t;
  FixedFormat fmt;
  std::size_t saturations = 0;

  acc_t zero() const noexcept { return 0; }
  acc_t mul_add(acc_t acc, std::int32_t w, std::int32_t x) noexcept {
    return sat_add(acc, static_cast<std::int64_t>(w) * x);
  }
  acc_t add_bias(acc_t acc, std::int32_t b) noexcept {
    return sat_add(acc, static_cast<std::int64_t>(b) * (std::int64_t{1} << fmt.frac_bits));
  }
  std::int32_t finish(acc_t acc) noexcept {
    return saturate_raw(rescale_round_even(acc, fmt.frac_bits), fmt, saturations);
  }

 private:
  acc_t sat_add(acc_t a, acc_t b) noexcept {
    acc_t r;
    if (__builtin_add_overflow(a, b, &r)) {
      ++saturations;
      return b > 0 ? std::numeric_limits<acc_t>::max() : std::numeric_limits<acc_t>::min();
    }
    return r;
  }
};

template <class T>
std::span<const T> data_of(const Tensor& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t.floats();
  } else {
    return t.raw();
  }
}

template <class T>
std::span<T> data_of(Tensor& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t.floats();
  } else {
    return t.raw();
  }
}

inline void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.dtype() == b.dtype())) {
    throw DimensionError(std::string(op) + ": dtype mismatch " + a.dtype().name() + " vs " +
                         b.dtype().name());
  }
}

inline std::size_t pooled_extent(std::size_t in, std::size_t window, std::size_t stride) {
  return (in - window) / stride + 1;
}

template <class T>
Tensor conv2d_typed(const Tensor& input, const Kernel& k, std::size_t stride, Padding pad) {
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t O = k.weights.dim(0), KH = k.weights.dim(2), KW = k.weights.dim(3);

  std::size_t OH, OW, pad_top = 0, pad_left = 0;
  if (pad == Padding::valid) {
    OH = pooled_extent(H, KH, stride);
    OW = pooled_extent(W, KW, stride);
  } else {
    OH = (H + stride - 1) / stride;
    OW = (W + stride - 1) / stride;
    const std::size_t need_h = (OH - 1) * stride + KH;
    const std::size_t need_w = (OW - 1) * stride + KW;
    pad_top = need_h > H ? (need_h - H) / 2 : 0;
    pad_left = need_w > W ? (need_w - W) / 2 : 0;
  }

  Arith<T> arith{};
  if constexpr (!std::is_same_v<T, float>) arith.fmt = input.dtype().format;

  Tensor out = Tensor::zeros({O, OH, OW}, input.dtype());
  auto x = data_of<T>(input);
  auto w = data_of<T>(k.weights);
  auto b = data_of<T>(k.bias);
  auto y = data_of<T>(out);

  for (std::size_t o = 0; o < O; ++o) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        auto acc = arith.zero();
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t ky = 0; ky < KH; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad_top);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad_left);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              acc = arith.mul_add(acc, w[((o * C + c) * KH + ky) * KW + kx],
                                  x[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)]);
            }
          }
        }
        y[(o * OH + oy) * OW + ox] = arith.finish(arith.add_bias(acc, b[o]));
      }
    }
  }
  out.set_saturations(arith.saturations);
  return out;
}

template <class T>
Tensor dense_typed(const Tensor& input, const Kernel& k) {
  const std::size_t M = k.weights.dim(0), N = k.weights.dim(1);
  Arith<T> arith{};
  if constexpr (!std::is_same_v<T, float>) arith.fmt = input.dtype().format;

  Tensor out = Tensor::zeros({M}, input.dtype());
  auto x = data_of<T>(input);
  auto w = data_of<T>(k.weights);
  auto b = data_of<T>(k.bias);
  auto y = data_of<T>(out);
  for (std::size_t i = 0; i < M; ++i) {
    auto acc = arith.zero();
    for (std::size_t j = 0; j < N; ++j) acc = arith.mul_add(acc, w[i * N + j], x[j]);
    y[i] = arith.finish(arith.add_bias(acc, b[i]));
  }
  out.set_saturations(arith.saturations);
  return out;
}

template <class T>
Tensor maxpool_typed(const Tensor& input, std::size_t window, std::size_t stride) {
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t OH = pooled_extent(H, window, stride), OW = pooled_extent(W, window, stride);
  Tensor out = Tensor::zeros({C, OH, OW}, input.dtype());
  auto x = data_of<T>(input);
  auto y = data_of<T>(out);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        T best = x[(c * H + oy * stride) * W + ox * stride];
        for (std::size_t ky = 0; ky < window; ++ky) {
          for (std::size_t kx = 0; kx < window; ++kx) {
            const T v = x[(c * H + oy * stride + ky) * W + ox * stride + kx];
            if (v > best) best = v;
          }
        }
        y[(c * OH + oy) * OW + ox] = best;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Output spatial shape of conv2d for the given geometry.
inline Shape conv2d_output_shape(const Shape& input, const Shape& weights, std::size_t stride,
                                 Padding pad = Padding::valid) {
  if (input.size() != 3 || weights.size() != 4) {
    throw DimensionError("conv2d expects input [C,H,W] and weights [O,C,kH,kW], got " +
                         shape_string(input) + " and " + shape_string(weights));
  }
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  if (input[0] != weights[1]) {
    throw DimensionError("conv2d channel mismatch: input " + shape_string(input) + " vs weights " +
                         shape_string(weights));
  }
  if (pad == Padding::same) {
    return {weights[0], (input[1] + stride - 1) / stride, (input[2] + stride - 1) / stride};
  }
  if (input[1] < weights[2] || input[2] < weights[3]) {
    throw DimensionError("conv2d kernel larger than input: input " + shape_string(input) +
                         " vs weights " + shape_string(weights));
  }
  return {weights[0], detail::pooled_extent(input[1], weights[2], stride),
          detail::pooled_extent(input[2], weights[3], stride)};
}

inline Shape maxpool2d_output_shape(const Shape& input, std::size_t window, std::size_t stride) {
  if (input.size() != 3) throw DimensionError("maxpool2d expects [C,H,W], got " + shape_string(input));
  if (window == 0 || stride == 0) throw DimensionError("maxpool2d window and stride must be positive");
  if (input[1] < window || input[2] < window) {
    throw DimensionError("maxpool2d window " + std::to_string(window) + " larger than input " +
                         shape_string(input));
  }
  return {input[0], detail::pooled_extent(input[1], window, stride),
          detail::pooled_extent(input[2], window, stride)};
}

/// Cross-correlation of a [C,H,W] input with [O,C,kH,kW] weights plus a
/// per-channel bias. Accumulation order: input channel, then kernel row,
/// then kernel column; the bias is added last.
inline Tensor conv2d(const Tensor& input, const Kernel& kernel, std::size_t stride = 1,
                     Padding pad = Padding::valid) {
  conv2d_output_shape(input.shape(), kernel.weights.shape(), stride, pad);
  detail::require_same_dtype(input, kernel.weights, "conv2d");
  detail::require_same_dtype(input, kernel.bias, "conv2d");
  if (kernel.bias.rank() != 1 || kernel.bias.dim(0) != kernel.weights.dim(0)) {
    throw DimensionError("conv2d bias " + shape_string(kernel.bias.shape()) +
                         " does not match weights " + shape_string(kernel.weights.shape()));
  }
  return input.is_fixed() ? detail::conv2d_typed<std::int32_t>(input, kernel, stride, pad)
                          : detail::conv2d_typed<float>(input, kernel, stride, pad);
}

inline Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride) {
  maxpool2d_output_shape(input.shape(), window, stride);
  return input.is_fixed() ? detail::maxpool_typed<std::int32_t>(input, window, stride)
                          : detail::maxpool_typed<float>(input, window, stride);
}

/// out[i] = sum_j W[i][j] * in[j] + bias[i], j ascending.
inline Tensor dense(const Tensor& input, const Kernel& kernel) {
  if (input.rank() != 1 || kernel.weights.rank() != 2 || kernel.weights.dim(1) != input.dim(0)) {
    throw DimensionError("dense: input " + shape_string(input.shape()) + " incompatible with weights " +
                         shape_string(kernel.weights.shape()));
  }
  if (kernel.bias.rank() != 1 || kernel.bias.dim(0) != kernel.weights.dim(0)) {
    throw DimensionError("dense: bias " + shape_string(kernel.bias.shape()) +
                         " does not match weights " + shape_string(kernel.weights.shape()));
  }
  detail::require_same_dtype(input, kernel.weights, "dense");
  detail::require_same_dtype(input, kernel.bias, "dense");
  return input.is_fixed() ? detail::dense_typed<std::int32_t>(input, kernel)
                          : detail::dense_typed<float>(input, kernel);
}

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  out.set_saturations(0);
  if (out.is_fixed()) {
    for (auto& v : out.raw()) v = v > 0 ? v : 0;
  } else {
    for (auto& v : out.floats()) v = v > 0.0f ? v : 0.0f;
  }
  return out;
}

inline Tensor flatten(const Tensor& input) {
  Tensor out = input.reshaped({input.size()});
  out.set_saturations(0);
  return out;
}

/// Index of the maximum element; ties resolve to the lowest index.
inline std::size_t argmax(const Tensor& input) {
  if (input.empty()) throw DimensionError("argmax of empty tensor");
  std::size_t best = 0;
  if (input.is_fixed()) {
    auto v = input.raw();
    for (std::size_t i = 1; i < v.size(); ++i)
      if (v[i] > v[best]) best = i;
  } else {
    auto v = input.floats();
    for (std::size_t i = 1; i < v.size(); ++i)
      if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Elementwise r * x. Float32 multiplies in float; fixed-point rounds and
/// saturates.
inline Tensor scale(const Tensor& input, float r) {
  Tensor out = input;
  std::size_t sat = 0;
  if (out.is_fixed()) {
    const auto& fmt = out.dtype().format;
    for (auto& v : out.raw()) v = to_fixed_raw(static_cast<double>(r) * from_fixed_raw(v, fmt), fmt, sat);
  } else {
    for (auto& v : out.floats()) v = r * v;
  }
  out.set_saturations(sat);
  return out;
}

}  // namespace iia
