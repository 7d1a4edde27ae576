#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iia/dataset.hpp"
#include "iia/error.hpp"
#include "iia/model.hpp"
#include "iia/profiler.hpp"
#include "iia/trojan.hpp"
#include "iia/weights_io.hpp"

namespace iia {

// ===================================================== altered validation

struct ScalePlan {
  enum class Mode { perImage, perPixel };
  std::uint64_t seed = 0;
  Mode mode = Mode::perImage;
  double r_min = 0.5;
  double r_max = 2.0;

  void validate() const {
    if (!(r_min > 0.0) || !(r_min <= r_max)) {
      throw ConfigError("scale range must satisfy 0 < rMin <= rMax, got [" + exact_decimal(r_min) + ", " +
                        exact_decimal(r_max) + "]");
    }
  }
};

/// Scaled dataset plus the factors used: one per image (perImage) or one per
/// pixel (perPixel).
struct AlteredDataset {
  Dataset data;
  std::vector<std::vector<float>> factors;
};

/// Replaces each image A by r*A. Labels are kept.
inline AlteredDataset alter_validation(const Dataset& d, const ScalePlan& plan) {
  plan.validate();
  Xoshiro256 rng(plan.seed);
  auto draw = [&]() -> float {
    if (plan.r_min == plan.r_max) return static_cast<float>(plan.r_min);
    return static_cast<float>(rng.uniform(plan.r_min, plan.r_max));
  };
  AlteredDataset out{Dataset{d.name + "/altered", {}, d.source, d.seed, d.num_classes}, {}};
  out.data.items.reserve(d.size());
  for (const auto& s : d.items) {
    Tensor img = dequantize(s.image);
    std::vector<float> f;
    if (plan.mode == ScalePlan::Mode::perImage) {
      f.push_back(draw());
      img = scale(img, f[0]);
    } else {
      f.resize(img.size());
      auto px = img.floats();
      for (std::size_t i = 0; i < px.size(); ++i) {
        f[i] = draw();
        px[i] = f[i] * px[i];
      }
    }
    out.data.items.push_back({std::move(img), s.label});
    out.factors.push_back(std::move(f));
  }
  return out;
}

// ============================================================== reports

struct DefenseReport {
  enum class Kind { alteredValidation, distributed };
  enum class Verdict { effective, ineffective, inconclusive };

  Kind kind = Kind::alteredValidation;
  double adversary_trigger_rate_designed = 0.0;
  double adversary_trigger_rate_actual = 0.0;
  std::size_t band_collision_count = 0;
  std::vector<std::string> exposure_findings;
  Verdict verdict = Verdict::inconclusive;
  /// Set when the verdict is inconclusive because the adversary's
  /// distribution had zero spread.
  bool degenerate = false;
};

inline std::string to_string(DefenseReport::Verdict v) {
  switch (v) {
    case DefenseReport::Verdict::effective: return "effective";
    case DefenseReport::Verdict::ineffective: return "ineffective";
    case DefenseReport::Verdict::inconclusive: return "inconclusive";
  }
  return "?";
}

inline std::string to_string(DefenseReport::Kind k) {
  return k == DefenseReport::Kind::alteredValidation ? "alteredValidation" : "distributed";
}

struct AlteredDefenseOptions {
  std::string watch_layer = "fc1";
  std::vector<BandSide> sides{BandSide::upper, BandSide::lower};
  BandFit fit = BandFit::exact;
  DType numeric = DType::float32();
  std::vector<Tensor> malicious_images;  // defaults to one noise image
};

/// Simulates an adversary who only sees the scaled validation set.
///
/// The adversary profiles the watch layer on the altered images, forges
/// bands, and predicts its trigger rate by running the attack over a stream
/// altered the same way (the traffic it believes it will see). The report
/// compares that prediction with the rate on the true stream and counts how
/// many true validation observations the adversary's bands swallow.
///
/// Verdict: effective when the two rates differ by more than three combined
/// 95% Wilson half-widths or any collision exists; ineffective otherwise;
/// inconclusive when no band could be forged.
inline DefenseReport evaluate_altered_defense(const ModelSpec& model, const Dataset& true_validation,
                                              const ScalePlan& plan, const Dataset& stream, double k_lo,
                                              double k_hi, const AlteredDefenseOptions& opt = {}) {
  DefenseReport rep;
  rep.kind = DefenseReport::Kind::alteredValidation;
  const auto altered = alter_validation(true_validation, plan);

  std::vector<SigmaBand> bands;
  try {
    const auto adv_stats = profile_layer(model, altered.data, opt.watch_layer, opt.numeric);
    bands = forge_bands(adv_stats, k_lo, k_hi, opt.sides, opt.fit);
  } catch (const DegenerateError& e) {
    rep.degenerate = true;
    rep.exposure_findings.push_back(std::string("adversary cannot forge: ") + e.what());
    return rep;
  } catch (const ForgeError& e) {
    rep.exposure_findings.push_back(std::string("adversary cannot forge: ") + e.what());
    return rep;
  }

  const auto true_stats = profile_layer(model, true_validation, opt.watch_layer, opt.numeric);
  for (const auto& b : bands) rep.band_collision_count += true_stats.count_within(b.lo, b.hi);

  TrojanConfig cfg;
  cfg.watch_layer = opt.watch_layer;
  cfg.bands = bands;
  cfg.malicious_images = opt.malicious_images.empty()
                             ? noise_images(1, model.input_shape, derive_seed(plan.seed, 0x6d616c))
                             : opt.malicious_images;

  ScalePlan stream_plan = plan;
  stream_plan.seed = derive_seed(plan.seed, 0x737472);
  const auto believed_stream = alter_validation(stream, stream_plan).data;

  const auto designed = run_compromised(model, cfg, believed_stream, opt.numeric).report;
  const auto actual = run_compromised(model, cfg, stream, opt.numeric).report;
  rep.adversary_trigger_rate_designed = designed.trigger_rate;
  rep.adversary_trigger_rate_actual = actual.trigger_rate;

  const double hw_d = wilson(designed.trigger_count, designed.images_processed).half_width;
  const double hw_a = wilson(actual.trigger_count, actual.images_processed).half_width;
  const double tolerance = 3.0 * std::sqrt(hw_d * hw_d + hw_a * hw_a);
  const double gap = std::abs(actual.trigger_rate - designed.trigger_rate);

  for (const auto& b : bands) {
    rep.exposure_findings.push_back("adversary " + to_string(b.side) + " band [" + exact_decimal(b.lo) + ", " +
                                    exact_decimal(b.hi) + "] holds " +
                                    std::to_string(true_stats.count_within(b.lo, b.hi)) +
                                    " true validation observations");
  }
  rep.exposure_findings.push_back("designed rate " + exact_decimal(designed.trigger_rate) + " vs actual rate " +
                                  exact_decimal(actual.trigger_rate) + " (gap " + exact_decimal(gap) +
                                  ", tolerance " + exact_decimal(tolerance) + ")");
  rep.verdict = (gap > tolerance || rep.band_collision_count > 0) ? DefenseReport::Verdict::effective
                                                                  : DefenseReport::Verdict::ineffective;
  return rep;
}

// ================================================= distributed layers

/// What one contracted designer receives: a contiguous slice of layers with
/// their parameters and the shapes at the slice boundary.
struct DesignerView {
  std::size_t group_index = 0;
  std::vector<LayerSpec> layers;
  Shape input_dims;
  Shape output_dims;
};

inline std::vector<DesignerView> partition_at(const ModelSpec& model, const std::vector<std::size_t>& cuts) {
  const std::size_t L = model.layers.size();
  std::size_t prev = 0;
  for (auto c : cuts) {
    if (c <= prev || c >= L) {
      throw ConfigError("cut points must be strictly increasing layer indices in (0, " + std::to_string(L) + ")");
    }
    prev = c;
  }
  if (cuts.empty()) throw ConfigError("partition needs at least 2 groups");
  const auto shapes = model.tap_shapes();
  std::vector<DesignerView> views;
  std::size_t begin = 0;
  for (std::size_t g = 0; g <= cuts.size(); ++g) {
    const std::size_t end = g < cuts.size() ? cuts[g] : L;
    DesignerView v;
    v.group_index = g;
    v.layers.assign(model.layers.begin() + static_cast<std::ptrdiff_t>(begin),
                    model.layers.begin() + static_cast<std::ptrdiff_t>(end));
    v.input_dims = begin == 0 ? model.input_shape : shapes[begin - 1];
    v.output_dims = shapes[end - 1];
    views.push_back(std::move(v));
    begin = end;
  }
  return views;
}

/// Splits into k contiguous groups of near-equal size (earlier groups take
/// the remainder).
inline std::vector<DesignerView> partition(const ModelSpec& model, std::size_t k) {
  const std::size_t L = model.layers.size();
  if (k < 2 || k > L) {
    throw ConfigError("group count " + std::to_string(k) + " out of range [2, " + std::to_string(L) + "]");
  }
  std::vector<std::size_t> cuts;
  std::size_t at = 0;
  for (std::size_t g = 0; g + 1 < k; ++g) {
    at += L / k + (g < L % k ? 1 : 0);
    cuts.push_back(at);
  }
  return partition_at(model, cuts);
}

inline Tensor run_view(const DesignerView& v, const Tensor& input) {
  if (input.shape() != v.input_dims) {
    throw DimensionError("group " + std::to_string(v.group_index) + " expects " + shape_string(v.input_dims) +
                         ", got " + shape_string(input.shape()));
  }
  auto taps = run_layers(v.layers, input);
  return std::move(taps.back().second);
}

/// Chains every group's hardware: the output of group g feeds group g+1.
inline Tensor run_views(std::span<const DesignerView> views, const Tensor& image,
                        const DType& numeric = DType::float32()) {
  Tensor cur = convert(image, numeric);
  for (const auto& v : views) cur = run_view(v, cur);
  return cur;
}

inline std::size_t view_parameter_bytes(const DesignerView& v) {
  std::size_t n = 0;
  for (const auto& l : v.layers)
    if (l.params) n += l.params->weights.byte_size() + l.params->bias.byte_size();
  return n;
}

/// Structural information audit of a partition.
inline DefenseReport evaluate_distributed_defense(std::span<const DesignerView> views, const ModelSpec& full) {
  if (views.size() < 2) throw ConfigError("distributed defense needs at least 2 groups");
  std::size_t at = 0;
  Shape expected_in = full.input_shape;
  const auto shapes = full.tap_shapes();
  for (std::size_t g = 0; g < views.size(); ++g) {
    const auto& v = views[g];
    if (v.group_index != g || v.layers.empty()) throw ConfigError("views are not an ordered partition");
    if (v.input_dims != expected_in) {
      throw ConfigError("group " + std::to_string(g) + " input dims " + shape_string(v.input_dims) +
                        " do not match upstream " + shape_string(expected_in));
    }
    for (const auto& l : v.layers) {
      if (at >= full.layers.size() || full.layers[at].name != l.name || full.layers[at].params != l.params) {
        throw ConfigError("group " + std::to_string(g) + " layer " + l.name + " does not match the full model");
      }
      ++at;
    }
    if (v.output_dims != shapes[at - 1]) throw ConfigError("group " + std::to_string(g) + " output dims inconsistent");
    expected_in = v.output_dims;
  }
  if (at != full.layers.size()) throw ConfigError("views do not cover every layer of the model");

  DefenseReport rep;
  rep.kind = DefenseReport::Kind::distributed;
  const Shape final_out = shapes.back();
  bool effective = true;
  for (std::size_t g = 0; g < views.size(); ++g) {
    const auto& v = views[g];
    const bool terminal = g + 1 == views.size();
    std::size_t hidden_param_layers = 0;
    for (std::size_t h = 0; h < views.size(); ++h) {
      if (h == g) continue;
      for (const auto& l : views[h].layers) hidden_param_layers += l.params ? 1 : 0;
    }
    const bool lacks_params = hidden_param_layers > 0;
    const bool no_labels = v.layers.back().name != full.layers.back().name;
    const bool partial_dims = !(v.input_dims == full.input_shape && v.output_dims == final_out);

    const std::string head = "group " + std::to_string(g) + " [" + v.layers.front().name + ".." +
                             v.layers.back().name + "]: ";
    rep.exposure_findings.push_back(head + (lacks_params ? "lacks" : "HOLDS ALL") + " parameters" +
                                    (lacks_params ? " of " + std::to_string(hidden_param_layers) +
                                                        " layers held by other groups"
                                                  : ""));
    rep.exposure_findings.push_back(head + (no_labels ? "cannot map its output " + shape_string(v.output_dims) +
                                                            " to class labels"
                                                      : "produces the class output"));
    rep.exposure_findings.push_back(head + (partial_dims ? "does not see both the model input and final output dims"
                                                         : "SEES both the model input and final output dims"));
    effective = effective && lacks_params && (terminal || no_labels);
  }
  rep.verdict = effective ? DefenseReport::Verdict::effective : DefenseReport::Verdict::ineffective;
  return rep;
}

// ----------------------------------------------------------------- JSON

inline void to_json(Json& j, const ScalePlan& p) {
  j = Json{{"seed", p.seed},
           {"mode", p.mode == ScalePlan::Mode::perImage ? "perImage" : "perPixel"},
           {"range", {p.r_min, p.r_max}}};
}

inline void from_json(const Json& j, ScalePlan& p) {
  p.seed = j.value("seed", p.seed);
  const auto mode = j.value("mode", std::string("perImage"));
  if (mode != "perImage" && mode != "perPixel") throw ConfigError("unknown scale mode " + mode);
  p.mode = mode == "perImage" ? ScalePlan::Mode::perImage : ScalePlan::Mode::perPixel;
  if (j.contains("range")) {
    const auto r = j.at("range").get<std::vector<double>>();
    if (r.size() != 2) throw ConfigError("scale range needs two values [rMin, rMax]");
    p.r_min = r[0];
    p.r_max = r[1];
  }
  p.validate();
}

inline void to_json(Json& j, const DefenseReport& r) {
  j = Json{{"kind", to_string(r.kind)},
           {"adversaryTriggerRateDesigned", r.adversary_trigger_rate_designed},
           {"adversaryTriggerRateActual", r.adversary_trigger_rate_actual},
           {"bandCollisionCount", r.band_collision_count},
           {"exposureFindings", r.exposure_findings},
           {"verdict", to_string(r.verdict)}};
}

/// ModelSpec-style JSON fragment describing one view.
inline Json view_json(const DesignerView& v) {
  return Json{{"name", "group" + std::to_string(v.group_index)},
              {"groupIndex", v.group_index},
              {"inputShape", v.input_dims},
              {"outputShape", v.output_dims},
              {"layers", v.layers}};
}

/// Writes group<i>.json and group<i>.dlaw (parameters of this group only).
inline void save_view(const DesignerView& v, const std::filesystem::path& dir) {
  const auto stem = dir / ("group" + std::to_string(v.group_index));
  std::ofstream out(stem.string() + ".json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + stem.string() + ".json");
  out << view_json(v).dump(2) << '\n';
  write_tensor_file(stem.string() + ".dlaw", parameter_entries(v.layers));
}

}  // namespace iia
