#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iia/dataset.hpp"
#include "iia/error.hpp"
#include "iia/model.hpp"
#include "iia/profiler.hpp"

namespace iia {

/// Which stored image the payload injects.
struct Selection {
  enum class Kind { roundRobin, fixedIndex };
  Kind kind = Kind::roundRobin;
  std::size_t index = 0;

  static Selection round_robin() { return {}; }
  static Selection fixed(std::size_t i) { return {Kind::fixedIndex, i}; }

  friend bool operator==(const Selection&, const Selection&) = default;
};

struct TrojanConfig {
  std::string watch_layer = "fc1";
  std::vector<SigmaBand> bands;
  std::vector<Tensor> malicious_images;
  Selection selection;
};

/// Checks a configuration against the model it will be inserted into.
inline void validate(const TrojanConfig& cfg, const ModelSpec& model) {
  if (cfg.malicious_images.empty()) throw ConfigError("trojan needs at least one malicious image");
  model.require_layer(cfg.watch_layer);
  for (std::size_t i = 0; i < cfg.malicious_images.size(); ++i) {
    if (cfg.malicious_images[i].shape() != model.input_shape) {
      throw ConfigError("malicious image " + std::to_string(i) + " has shape " +
                        shape_string(cfg.malicious_images[i].shape()) + ", model input is " +
                        shape_string(model.input_shape));
    }
  }
  for (const auto& b : cfg.bands) {
    if (b.layer_name != cfg.watch_layer) {
      throw ConfigError("band on layer " + b.layer_name + " does not match watch layer " + cfg.watch_layer);
    }
    if (!(b.lo <= b.hi)) throw ConfigError("band on " + b.layer_name + " has lo > hi");
  }
  if (cfg.selection.kind == Selection::Kind::fixedIndex && cfg.selection.index >= cfg.malicious_images.size()) {
    throw ConfigError("fixed malicious index " + std::to_string(cfg.selection.index) + " out of range (" +
                      std::to_string(cfg.malicious_images.size()) + " images)");
  }
}

/// Seeded uniform-noise images in [0, 1).
inline std::vector<Tensor> noise_images(std::size_t count, const Shape& shape, std::uint64_t seed) {
  std::vector<Tensor> out;
  auto d = synthesize(count, shape, seed, SynthMode::uniform);
  for (auto& s : d.items) out.push_back(std::move(s.image));
  return out;
}

struct TriggerEvent {
  enum class Kind { Triggered, Substituted };
  std::size_t cycle = 0;
  Kind kind = Kind::Triggered;
  double hit_value = 0.0;                 // Triggered
  std::size_t hit_index = 0;              // Triggered
  std::size_t used_malicious_index = 0;  // Substituted

  friend bool operator==(const TriggerEvent&, const TriggerEvent&) = default;
};

enum class TrojanMode { Dormant, Armed };

struct TrojanState {
  TrojanMode mode = TrojanMode::Dormant;
  std::size_t fired_count = 0;
  std::vector<TriggerEvent> log;
  std::size_t next_malicious = 0;  // round-robin cursor

  friend bool operator==(const TrojanState&, const TrojanState&) = default;
};

/// First element (ascending index) inside any band, bounds inclusive.
inline std::optional<BandHit> check_trigger(const Tensor& layer_output, const std::vector<SigmaBand>& bands) {
  return first_band_hit(layer_output, bands);
}

struct StepResult {
  Tensor effective_input;
  TrojanState state;
  std::vector<TriggerEvent> events;
  ForwardTrace trace;
};

/// One image cycle through the compromised pipeline.
///
/// Dormant: the legitimate input passes through and the watch-layer tap is
/// checked; a hit arms the trojan. Armed: the legitimate input is dropped,
/// a stored image is injected in its place, trigger checking is suppressed,
/// and the trojan returns to Dormant.
inline StepResult step(TrojanState state, const ModelSpec& model, const TrojanConfig& cfg, std::size_t cycle,
                       const Tensor& legitimate, const DType& numeric = DType::float32()) {
  if (legitimate.shape() != model.input_shape) {
    throw DimensionError("cycle " + std::to_string(cycle) + ": input " + shape_string(legitimate.shape()) +
                         " does not match model input " + shape_string(model.input_shape));
  }
  if (cfg.malicious_images.empty()) throw ConfigError("trojan needs at least one malicious image");
  StepResult r;
  if (state.mode == TrojanMode::Dormant) {
    r.trace = forward(model, legitimate, numeric);
    r.effective_input = legitimate;
    if (auto hit = check_trigger(r.trace.tap(cfg.watch_layer), cfg.bands)) {
      state.mode = TrojanMode::Armed;
      r.events.push_back({cycle, TriggerEvent::Kind::Triggered, hit->value, hit->index, 0});
    }
  } else {
    std::size_t idx = cfg.selection.index;
    if (cfg.selection.kind == Selection::Kind::roundRobin) {
      idx = state.next_malicious % cfg.malicious_images.size();
      state.next_malicious = (idx + 1) % cfg.malicious_images.size();
    }
    r.effective_input = cfg.malicious_images.at(idx);
    r.trace = forward(model, r.effective_input, numeric);
    state.mode = TrojanMode::Dormant;
    ++state.fired_count;
    r.events.push_back({cycle, TriggerEvent::Kind::Substituted, 0.0, 0, idx});
  }
  state.log.insert(state.log.end(), r.events.begin(), r.events.end());
  r.state = std::move(state);
  return r;
}

struct AttackReport {
  std::size_t images_processed = 0;
  std::size_t trigger_count = 0;
  double trigger_rate = 0.0;
  std::size_t substitutions = 0;
  std::size_t misclassifications = 0;
  bool clean_equivalence = true;
};

struct CompromisedRun {
  std::vector<std::size_t> labels;
  std::vector<bool> substituted;
  AttackReport report;
  TrojanState state;
};

/// Per-cycle callback receiving the trace the pipeline produced.
using TraceObserver = std::function<void(std::size_t cycle, const ForwardTrace&)>;

/// Labels of the unmodified pipeline, one per stream item.
inline std::vector<std::size_t> run_clean(const ModelSpec& model, const Dataset& stream,
                                          const DType& numeric = DType::float32()) {
  const ModelSpec prepared = with_numeric(model, numeric);
  return parallel_map(stream.size(),
                      [&](std::size_t i) { return forward(prepared, stream.items[i].image, numeric).final_label; });
}

/// Fills the comparison fields of a compromised run against clean labels.
inline AttackReport evaluate_attack(std::span<const std::size_t> clean_labels, const CompromisedRun& run,
                                    const Dataset& stream) {
  if (clean_labels.size() != run.labels.size() || run.labels.size() != stream.size() ||
      run.substituted.size() != run.labels.size()) {
    throw DimensionError("evaluate_attack: clean labels (" + std::to_string(clean_labels.size()) +
                         "), compromised labels (" + std::to_string(run.labels.size()) + ") and stream (" +
                         std::to_string(stream.size()) + ") lengths differ");
  }
  AttackReport r;
  r.images_processed = stream.size();
  for (const auto& e : run.state.log) {
    if (e.kind == TriggerEvent::Kind::Triggered) ++r.trigger_count;
    else ++r.substitutions;
  }
  r.trigger_rate = r.images_processed ? static_cast<double>(r.trigger_count) / static_cast<double>(r.images_processed)
                                      : 0.0;
  for (std::size_t c = 0; c < run.labels.size(); ++c) {
    if (run.substituted[c]) {
      if (run.labels[c] != clean_labels[c]) ++r.misclassifications;
    } else if (run.labels[c] != clean_labels[c]) {
      r.clean_equivalence = false;
    }
  }
  return r;
}

/// Feeds the stream through the compromised pipeline strictly in order and
/// evaluates it against a clean baseline.
inline CompromisedRun run_compromised(const ModelSpec& model, const TrojanConfig& cfg, const Dataset& stream,
                                      const DType& numeric = DType::float32(), const TraceObserver& observe = {}) {
  validate(cfg, model);
  const ModelSpec prepared = with_numeric(model, numeric);
  CompromisedRun run;
  run.labels.reserve(stream.size());
  run.substituted.reserve(stream.size());
  for (std::size_t c = 0; c < stream.size(); ++c) {
    auto r = step(std::move(run.state), prepared, cfg, c, stream.items[c].image, numeric);
    run.state = std::move(r.state);
    const bool sub = !r.events.empty() && r.events.front().kind == TriggerEvent::Kind::Substituted;
    run.labels.push_back(r.trace.final_label);
    run.substituted.push_back(sub);
    if (observe) observe(c, r.trace);
  }
  const auto clean = run_clean(prepared, stream, numeric);
  run.report = evaluate_attack(clean, run, stream);
  return run;
}

// ----------------------------------------------------------------- JSON

inline std::string to_string(TriggerEvent::Kind k) {
  return k == TriggerEvent::Kind::Triggered ? "Triggered" : "Substituted";
}

inline void to_json(Json& j, const TriggerEvent& e) {
  j = Json{{"cycle", e.cycle}, {"kind", to_string(e.kind)}};
  if (e.kind == TriggerEvent::Kind::Triggered) {
    j["hitValue"] = e.hit_value;
    j["hitIndex"] = e.hit_index;
  } else {
    j["usedMaliciousIndex"] = e.used_malicious_index;
  }
}

inline void from_json(const Json& j, TriggerEvent& e) {
  e.cycle = j.at("cycle").get<std::size_t>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "Triggered" && kind != "Substituted") throw ConfigError("unknown event kind " + kind);
  e.kind = kind == "Triggered" ? TriggerEvent::Kind::Triggered : TriggerEvent::Kind::Substituted;
  e.hit_value = j.value("hitValue", 0.0);
  e.hit_index = j.value("hitIndex", std::size_t{0});
  e.used_malicious_index = j.value("usedMaliciousIndex", std::size_t{0});
}

inline void to_json(Json& j, const AttackReport& r) {
  j = Json{{"imagesProcessed", r.images_processed}, {"triggerCount", r.trigger_count},
           {"triggerRate", r.trigger_rate},         {"substitutions", r.substitutions},
           {"misclassifications", r.misclassifications}, {"cleanEquivalence", r.clean_equivalence}};
}

inline void to_json(Json& j, const Selection& s) {
  if (s.kind == Selection::Kind::roundRobin) j = "roundRobin";
  else j = Json{{"fixedIndex", s.index}};
}

inline void from_json(const Json& j, Selection& s) {
  if (j.is_string()) {
    if (j.get<std::string>() != "roundRobin") throw ConfigError("unknown selection " + j.dump());
    s = Selection::round_robin();
  } else {
    s = Selection::fixed(j.at("fixedIndex").get<std::size_t>());
  }
}

/// "cycle,label,substituted" rows; substituted is 0 or 1.
inline std::string labels_csv(std::span<const std::size_t> labels, const std::vector<bool>& substituted) {
  std::string out = "cycle,label,substituted\n";
  for (std::size_t c = 0; c < labels.size(); ++c) {
    out += std::to_string(c) + ',' + std::to_string(labels[c]) + ',' +
           (c < substituted.size() && substituted[c] ? "1" : "0") + '\n';
  }
  return out;
}

}  // namespace iia
