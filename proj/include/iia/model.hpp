#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "iia/error.hpp"
#include "iia/ops.hpp"
#include "iia/rng.hpp"
#include "iia/tensor.hpp"

namespace iia {

using Json = nlohmann::ordered_json;

enum class LayerKind { conv, maxpool, relu, flatten, dense };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "maxpool") return LayerKind::maxpool;
  if (s == "relu") return LayerKind::relu;
  if (s == "flatten") return LayerKind::flatten;
  if (s == "dense") return LayerKind::dense;
  throw ConfigError("unknown layer kind \"" + s + "\"");
}

/// Kind-specific layer geometry. Only the fields of the layer's kind are
/// meaningful.
struct Hyperparams {
  std::size_t out_channels = 0;  // conv
  std::size_t kernel_h = 0;      // conv
  std::size_t kernel_w = 0;      // conv
  std::size_t window = 0;        // maxpool
  std::size_t stride = 1;        // conv, maxpool
  std::size_t units = 0;         // dense
  Padding padding = Padding::valid;

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  Hyperparams hyper;
  std::optional<Kernel> params;

  bool has_params_slot() const noexcept {
    return kind == LayerKind::conv || kind == LayerKind::dense;
  }

  static LayerSpec conv(std::string name, std::size_t out_ch, std::size_t k, std::size_t stride = 1,
                        Padding pad = Padding::valid) {
    LayerSpec l{std::move(name), LayerKind::conv, {}, std::nullopt};
    l.hyper.out_channels = out_ch;
    l.hyper.kernel_h = l.hyper.kernel_w = k;
    l.hyper.stride = stride;
    l.hyper.padding = pad;
    return l;
  }
  static LayerSpec maxpool(std::string name, std::size_t window, std::size_t stride) {
    LayerSpec l{std::move(name), LayerKind::maxpool, {}, std::nullopt};
    l.hyper.window = window;
    l.hyper.stride = stride;
    return l;
  }
  static LayerSpec relu(std::string name) { return {std::move(name), LayerKind::relu, {}, std::nullopt}; }
  static LayerSpec flatten(std::string name) {
    return {std::move(name), LayerKind::flatten, {}, std::nullopt};
  }
  static LayerSpec dense(std::string name, std::size_t units) {
    LayerSpec l{std::move(name), LayerKind::dense, {}, std::nullopt};
    l.hyper.units = units;
    return l;
  }
};

/// Shapes of the parameter tensors a layer expects given its input shape.
struct ParamShapes {
  Shape weights;
  Shape bias;
};

inline ParamShapes param_shapes(const LayerSpec& layer, const Shape& input) {
  if (layer.kind == LayerKind::conv) {
    if (input.size() != 3) {
      throw DimensionError("layer " + layer.name + " expects [C,H,W] input, got " + shape_string(input));
    }
    return {{layer.hyper.out_channels, input[0], layer.hyper.kernel_h, layer.hyper.kernel_w},
            {layer.hyper.out_channels}};
  }
  if (layer.kind == LayerKind::dense) {
    if (input.size() != 1) {
      throw DimensionError("layer " + layer.name + " expects a flat input, got " + shape_string(input));
    }
    return {{layer.hyper.units, input[0]}, {layer.hyper.units}};
  }
  throw ConfigError("layer " + layer.name + " (" + to_string(layer.kind) + ") has no parameters");
}

/// Output shape of a layer for a given input shape.
inline Shape layer_output_shape(const LayerSpec& layer, const Shape& input) {
  switch (layer.kind) {
    case LayerKind::conv: {
      const auto ps = param_shapes(layer, input);
      return conv2d_output_shape(input, ps.weights, layer.hyper.stride, layer.hyper.padding);
    }
    case LayerKind::maxpool:
      return maxpool2d_output_shape(input, layer.hyper.window, layer.hyper.stride);
    case LayerKind::relu:
      return input;
    case LayerKind::flatten:
      return {shape_size(input)};
    case LayerKind::dense:
      param_shapes(layer, input);
      return {layer.hyper.units};
  }
  return input;
}

/// Ordered layer pipeline with a fixed input shape.
struct ModelSpec {
  std::string name;
  Shape input_shape;
  std::vector<LayerSpec> layers;

  /// Output shape after every layer, checking consecutive compatibility.
  std::vector<Shape> tap_shapes() const { return propagate(input_shape, layers); }

  static std::vector<Shape> propagate(const Shape& input, std::span<const LayerSpec> layers) {
    std::vector<Shape> shapes;
    shapes.reserve(layers.size());
    Shape cur = input;
    for (const auto& l : layers) {
      cur = layer_output_shape(l, cur);
      shapes.push_back(cur);
    }
    return shapes;
  }

  std::optional<std::size_t> index_of(const std::string& layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == layer) return i;
    return std::nullopt;
  }

  std::string layer_names() const {
    std::string s;
    for (const auto& l : layers) s += (s.empty() ? "" : ", ") + l.name;
    return s;
  }

  /// Index of a named layer; unknown names list the valid ones.
  std::size_t require_layer(const std::string& layer) const {
    auto idx = index_of(layer);
    if (!idx) throw ConfigError("unknown layer \"" + layer + "\"; valid layers: " + layer_names());
    return *idx;
  }

  Shape output_shape() const { return tap_shapes().back(); }

  bool has_all_params() const {
    return std::all_of(layers.begin(), layers.end(),
                       [](const LayerSpec& l) { return !l.has_params_slot() || l.params.has_value(); });
  }

  /// Checks name uniqueness, presence of a dense layer, shape propagation,
  /// and (when present) parameter shapes.
  void validate() const {
    if (input_shape.empty()) throw ConfigError("model " + name + " has no input shape");
    if (layers.empty()) throw ConfigError("model " + name + " has no layers");
    std::set<std::string> seen;
    for (const auto& l : layers) {
      if (l.name.empty()) throw ConfigError("model " + name + " has a layer without a name");
      if (!seen.insert(l.name).second) throw ConfigError("duplicate layer name \"" + l.name + "\"");
    }
    if (std::none_of(layers.begin(), layers.end(),
                     [](const LayerSpec& l) { return l.kind == LayerKind::dense; })) {
      throw ConfigError("model " + name + " needs at least one dense layer");
    }
    Shape cur = input_shape;
    for (const auto& l : layers) {
      if (l.params) {
        const auto ps = param_shapes(l, cur);
        if (l.params->weights.shape() != ps.weights || l.params->bias.shape() != ps.bias) {
          throw DimensionError("layer " + l.name + " parameters " + shape_string(l.params->weights.shape()) +
                               "/" + shape_string(l.params->bias.shape()) + " do not match expected " +
                               shape_string(ps.weights) + "/" + shape_string(ps.bias));
        }
      }
      cur = layer_output_shape(l, cur);
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      if (l.params) n += l.params->weights.size() + l.params->bias.size();
    return n;
  }
};

/// LeNet-5 style network for 1x28x28 digits. Dense layers are tapped before
/// their activation, so "fc1" holds raw affine outputs.
inline ModelSpec build_lenet() {
  ModelSpec m{"lenet", {1, 28, 28}, {}};
  m.layers = {LayerSpec::conv("conv1", 6, 5),  LayerSpec::relu("relu1"),
              LayerSpec::maxpool("pool1", 2, 2), LayerSpec::conv("conv2", 16, 5),
              LayerSpec::relu("relu2"),          LayerSpec::maxpool("pool2", 2, 2),
              LayerSpec::flatten("flatten"),     LayerSpec::dense("fc1", 120),
              LayerSpec::relu("relu3"),          LayerSpec::dense("fc2", 84),
              LayerSpec::relu("relu4"),          LayerSpec::dense("fc3", 10)};
  m.validate();
  return m;
}

/// Small two-conv network for 3x32x32 colour images.
inline ModelSpec build_cifar_net() {
  ModelSpec m{"cifar", {3, 32, 32}, {}};
  m.layers = {LayerSpec::conv("conv1", 32, 5),   LayerSpec::relu("relu1"),
              LayerSpec::maxpool("pool1", 2, 2), LayerSpec::conv("conv2", 32, 5),
              LayerSpec::relu("relu2"),          LayerSpec::maxpool("pool2", 2, 2),
              LayerSpec::flatten("flatten"),     LayerSpec::dense("fc1", 64),
              LayerSpec::relu("relu3"),          LayerSpec::dense("fc2", 10)};
  m.validate();
  return m;
}

/// Fills every parameter tensor from xoshiro256** seeded with `seed`,
/// uniform in [-s, s] with s = 1/sqrt(fan_in). Layers are visited in order,
/// weights before bias.
inline ModelSpec seed_weights(ModelSpec model, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  Shape cur = model.input_shape;
  for (auto& l : model.layers) {
    if (l.has_params_slot()) {
      const auto ps = param_shapes(l, cur);
      const std::size_t fan_in = shape_size(ps.weights) / ps.weights[0];
      const float s = static_cast<float>(1.0 / std::sqrt(static_cast<double>(fan_in)));
      auto draw = [&](const Shape& shape) {
        std::vector<float> v(shape_size(shape));
        for (auto& x : v) x = std::clamp(static_cast<float>(rng.uniform(-s, s)), -s, s);
        return Tensor(shape, std::move(v));
      };
      Tensor w = draw(ps.weights);
      Tensor b = draw(ps.bias);
      l.params = Kernel{std::move(w), std::move(b)};
    }
    cur = layer_output_shape(l, cur);
  }
  return model;
}

/// Model with all parameters set to zero.
inline ModelSpec zero_weights(ModelSpec model) {
  Shape cur = model.input_shape;
  for (auto& l : model.layers) {
    if (l.has_params_slot()) {
      const auto ps = param_shapes(l, cur);
      l.params = Kernel{Tensor::zeros(ps.weights), Tensor::zeros(ps.bias)};
    }
    cur = layer_output_shape(l, cur);
  }
  return model;
}

/// Copy of the model with every parameter converted to `dtype`.
inline ModelSpec with_numeric(ModelSpec model, const DType& dtype) {
  for (auto& l : model.layers) {
    if (l.params) {
      l.params->weights = convert(l.params->weights, dtype);
      l.params->bias = convert(l.params->bias, dtype);
    }
  }
  return model;
}

/// Named per-layer outputs of one inference.
struct ForwardTrace {
  std::size_t final_label = 0;
  std::vector<std::pair<std::string, Tensor>> taps;

  const Tensor& tap(const std::string& layer) const {
    for (const auto& [n, t] : taps)
      if (n == layer) return t;
    throw ConfigError("trace has no tap named \"" + layer + "\"");
  }

  const Tensor& last() const { return taps.back().second; }

  std::size_t saturations() const {
    std::size_t n = 0;
    for (const auto& [_, t] : taps) n += t.saturations();
    return n;
  }

  friend bool operator==(const ForwardTrace&, const ForwardTrace&) = default;
};

/// Applies one layer. Parameters are converted to the input's dtype when they
/// differ.
inline Tensor apply_layer(const LayerSpec& layer, const Tensor& x) {
  auto with_params = [&](auto&& op) -> Tensor {
    if (!layer.params) throw ConfigError("layer " + layer.name + " has no parameters loaded");
    const Kernel& k = *layer.params;
    if (k.weights.dtype() == x.dtype() && k.bias.dtype() == x.dtype()) return op(k);
    return op(Kernel{convert(k.weights, x.dtype()), convert(k.bias, x.dtype())});
  };
  switch (layer.kind) {
    case LayerKind::conv:
      return with_params(
          [&](const Kernel& k) { return conv2d(x, k, layer.hyper.stride, layer.hyper.padding); });
    case LayerKind::maxpool:
      return maxpool2d(x, layer.hyper.window, layer.hyper.stride);
    case LayerKind::relu:
      return relu(x);
    case LayerKind::flatten:
      return flatten(x);
    case LayerKind::dense:
      return with_params([&](const Kernel& k) { return dense(x, k); });
  }
  throw InvariantError("unhandled layer kind");
}

/// Runs a contiguous slice of layers, recording every output.
inline std::vector<std::pair<std::string, Tensor>> run_layers(std::span<const LayerSpec> layers,
                                                              const Tensor& input) {
  std::vector<std::pair<std::string, Tensor>> taps;
  taps.reserve(layers.size());
  const Tensor* cur = &input;
  for (const auto& l : layers) {
    taps.emplace_back(l.name, apply_layer(l, *cur));
    cur = &taps.back().second;
  }
  return taps;
}

/// Full inference. The image is converted to `numeric` before the first layer.
inline ForwardTrace forward(const ModelSpec& model, const Tensor& image,
                            const DType& numeric = DType::float32()) {
  if (image.shape() != model.input_shape) {
    throw DimensionError("model " + model.name + " expects input " + shape_string(model.input_shape) +
                         ", got " + shape_string(image.shape()));
  }
  ForwardTrace trace;
  trace.taps = run_layers(model.layers, convert(image, numeric));
  trace.final_label = argmax(trace.last());
  return trace;
}

// ---------------------------------------------------------------- JSON

inline void to_json(Json& j, const LayerSpec& l) {
  j = Json{{"name", l.name}, {"kind", to_string(l.kind)}};
  Json h = Json::object();
  switch (l.kind) {
    case LayerKind::conv:
      h = Json{{"outChannels", l.hyper.out_channels},
               {"kernelH", l.hyper.kernel_h},
               {"kernelW", l.hyper.kernel_w},
               {"stride", l.hyper.stride},
               {"padding", l.hyper.padding == Padding::same ? "same" : "valid"}};
      break;
    case LayerKind::maxpool:
      h = Json{{"window", l.hyper.window}, {"stride", l.hyper.stride}};
      break;
    case LayerKind::dense:
      h = Json{{"units", l.hyper.units}};
      break;
    default:
      break;
  }
  j["hyperparams"] = std::move(h);
}

inline void from_json(const Json& j, LayerSpec& l) {
  l.name = j.at("name").get<std::string>();
  l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  const Json h = j.value("hyperparams", Json::object());
  l.hyper = Hyperparams{};
  switch (l.kind) {
    case LayerKind::conv: {
      l.hyper.out_channels = h.at("outChannels").get<std::size_t>();
      l.hyper.kernel_h = h.at("kernelH").get<std::size_t>();
      l.hyper.kernel_w = h.value("kernelW", l.hyper.kernel_h);
      l.hyper.stride = h.value("stride", std::size_t{1});
      const auto pad = h.value("padding", std::string("valid"));
      if (pad != "valid" && pad != "same") throw ConfigError("layer " + l.name + ": unknown padding " + pad);
      l.hyper.padding = pad == "same" ? Padding::same : Padding::valid;
      break;
    }
    case LayerKind::maxpool:
      l.hyper.window = h.at("window").get<std::size_t>();
      l.hyper.stride = h.value("stride", l.hyper.window);
      break;
    case LayerKind::dense:
      l.hyper.units = h.at("units").get<std::size_t>();
      break;
    default:
      break;
  }
  l.params.reset();
}

inline void to_json(Json& j, const ModelSpec& m) {
  j = Json{{"name", m.name}, {"inputShape", m.input_shape}, {"layers", m.layers}};
}

inline void from_json(const Json& j, ModelSpec& m) {
  m.name = j.at("name").get<std::string>();
  m.input_shape = j.at("inputShape").get<Shape>();
  m.layers = j.at("layers").get<std::vector<LayerSpec>>();
}

/// Parses and validates a ModelSpec JSON document.
inline ModelSpec model_from_json(const Json& j) {
  ModelSpec m;
  try {
    m = j.get<ModelSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model JSON: ") + e.what());
  }
  m.validate();
  return m;
}

}  // namespace iia
