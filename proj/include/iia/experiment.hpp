#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "iia/dataset.hpp"
#include "iia/defense.hpp"
#include "iia/error.hpp"
#include "iia/model.hpp"
#include "iia/profiler.hpp"
#include "iia/trojan.hpp"
#include "iia/weights_io.hpp"

namespace iia {

inline constexpr int kFormatVersion = 1;

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitData = 3,
  kExitDegenerate = 4,
  kExitInternal = 5,
};

struct DatasetSource {
  std::string kind = "mnist";  // mnist | cifar10 | synthetic
  std::filesystem::path images, labels, path;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  SynthMode mode = SynthMode::uniform;
};

struct PartitionSpec {
  std::size_t groups = 0;
  std::vector<std::size_t> cuts;
};

struct MonteCarloSpec {
  std::string source = "model";  // model | gaussian
  std::size_t samples = 100000;
  std::uint64_t seed = 0;
};

/// Fully resolved experiment: defaults applied, seeds derived, paths made
/// absolute and checked.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string model_name = "lenet";
  std::optional<std::filesystem::path> model_path;
  std::optional<std::filesystem::path> weights_path;
  std::uint64_t weights_seed = 0;
  DType numeric = DType::float32();
  DatasetSource dataset;
  SplitPlan split;
  std::string watch_layer = "fc1";
  double k_lo = 3.0;
  double k_hi = 4.0;
  std::vector<BandSide> sides{BandSide::upper, BandSide::lower};
  BandFit fit = BandFit::exact;
  MonteCarloSpec monte_carlo;
  std::optional<std::filesystem::path> malicious_path;
  std::size_t malicious_noise_count = 1;
  std::uint64_t malicious_seed = 0;
  Selection selection;
  std::optional<std::vector<SigmaBand>> explicit_bands;
  std::optional<ScalePlan> altered;
  std::optional<PartitionSpec> partition;
  std::filesystem::path output_dir = "out";

  Json resolved;  // echoed into every report
};

struct Overrides {
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::uint64_t> seed;
};

namespace detail {

template <class T>
T field(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

inline std::filesystem::path existing(const std::filesystem::path& base, const std::string& p,
                                      const std::string& field_name) {
  auto full = std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p;
  full = full.lexically_normal();
  if (!std::filesystem::exists(full)) throw ConfigError(field_name + ": file not found: " + full.string());
  return full;
}

inline DType parse_numeric(const std::string& s) {
  if (s == "float32") return DType::float32();
  if (s == "Q16.16" || s == "q16.16") return DType::fixed(kQ16_16);
  throw ConfigError("numeric: expected \"float32\" or \"Q16.16\", got \"" + s + "\"");
}

}  // namespace detail

/// Parses an experiment document. Relative paths resolve against `base`.
inline ExperimentConfig parse_experiment(const Json& j, const std::filesystem::path& base, const Overrides& ov = {}) {
  using detail::field;
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig c;
  c.seed = ov.seed ? *ov.seed : field<std::uint64_t>(j, "seed", 0, "");

  // model
  const auto model_name = field<std::string>(j, "modelName", "lenet", "");
  if (model_name == "lenet" || model_name == "cifar") {
    c.model_name = model_name;
  } else {
    c.model_path = detail::existing(base, model_name, "modelName");
    c.model_name = c.model_path->string();
  }

  // weights: path string, integer seed, or {"seed": n} / {"path": p}
  if (!j.contains("weights")) throw ConfigError("weights: required (a weight-file path or a seed)");
  const auto& w = j.at("weights");
  if (w.is_string()) {
    c.weights_path = detail::existing(base, w.get<std::string>(), "weights");
  } else if (w.is_number_unsigned()) {
    c.weights_seed = w.get<std::uint64_t>();
  } else if (w.is_object() && w.contains("path")) {
    c.weights_path = detail::existing(base, w.at("path").get<std::string>(), "weights.path");
  } else if (w.is_object()) {
    c.weights_seed = field<std::uint64_t>(w, "seed", derive_seed(c.seed, 1), "weights.");
  } else {
    throw ConfigError("weights: expected a path, a seed, or an object");
  }
  c.numeric = detail::parse_numeric(field<std::string>(j, "numeric", "float32", ""));

  // dataset + split
  if (!j.contains("dataset")) throw ConfigError("dataset: required");
  const auto& d = j.at("dataset");
  c.dataset.kind = field<std::string>(d, "kind", "mnist", "dataset.");
  if (c.dataset.kind == "mnist") {
    c.dataset.images = detail::existing(base, field<std::string>(d, "images", "", "dataset."), "dataset.images");
    c.dataset.labels = detail::existing(base, field<std::string>(d, "labels", "", "dataset."), "dataset.labels");
  } else if (c.dataset.kind == "cifar10") {
    c.dataset.path = detail::existing(base, field<std::string>(d, "path", "", "dataset."), "dataset.path");
  } else if (c.dataset.kind == "synthetic") {
    c.dataset.count = field<std::size_t>(d, "count", 0, "dataset.");
    c.dataset.seed = field<std::uint64_t>(d, "seed", derive_seed(c.seed, 6), "dataset.");
    const auto mode = field<std::string>(d, "mode", "uniform", "dataset.");
    if (mode != "uniform" && mode != "gaussianActivationProbe") throw ConfigError("dataset.mode: unknown " + mode);
    c.dataset.mode = mode == "uniform" ? SynthMode::uniform : SynthMode::gaussianActivationProbe;
  } else {
    throw ConfigError("dataset.kind: expected mnist, cifar10 or synthetic, got \"" + c.dataset.kind + "\"");
  }
  const Json sp = d.value("split", Json::object());
  c.split.validation_count = field<std::size_t>(sp, "validationCount", 100, "dataset.split.");
  c.split.stream_count = field<std::size_t>(sp, "streamCount", 1000, "dataset.split.");
  c.split.seed = field<std::uint64_t>(sp, "seed", derive_seed(c.seed, 2), "dataset.split.");

  // profiling and forging
  c.watch_layer = field<std::string>(j, "watchLayer", "fc1", "");
  c.k_lo = field<double>(j, "kLo", 3.0, "");
  c.k_hi = field<double>(j, "kHi", 4.0, "");
  if (!(c.k_lo < c.k_hi)) throw ConfigError("kLo must be smaller than kHi");
  if (j.contains("sides")) {
    c.sides.clear();
    for (const auto& s : j.at("sides")) c.sides.push_back(band_side_from_string(s.get<std::string>()));
    if (c.sides.empty()) throw ConfigError("sides: at least one of upper/lower");
  }
  c.fit = band_fit_from_string(field<std::string>(j, "bandFit", "exact", ""));
  const Json mc = j.value("monteCarlo", Json::object());
  c.monte_carlo.source = field<std::string>(mc, "source", "model", "monteCarlo.");
  if (c.monte_carlo.source != "model" && c.monte_carlo.source != "gaussian") {
    throw ConfigError("monteCarlo.source: expected model or gaussian");
  }
  c.monte_carlo.samples = field<std::size_t>(mc, "samples", 100000, "monteCarlo.");
  c.monte_carlo.seed = field<std::uint64_t>(mc, "seed", derive_seed(c.seed, 5), "monteCarlo.");

  // trojan
  const Json t = j.value("trojan", Json::object());
  if (t.contains("maliciousImages")) {
    const auto& m = t.at("maliciousImages");
    if (m.is_string()) {
      c.malicious_path = detail::existing(base, m.get<std::string>(), "trojan.maliciousImages");
    } else {
      c.malicious_noise_count = field<std::size_t>(m, "noise", 1, "trojan.maliciousImages.");
      if (c.malicious_noise_count == 0) throw ConfigError("trojan.maliciousImages.noise must be positive");
      c.malicious_seed = field<std::uint64_t>(m, "seed", derive_seed(c.seed, 3), "trojan.maliciousImages.");
    }
  } else {
    c.malicious_seed = derive_seed(c.seed, 3);
  }
  if (t.contains("selection")) {
    try {
      c.selection = t.at("selection").get<Selection>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("trojan.selection: expected \"roundRobin\" or {\"fixedIndex\": i}");
    }
  }
  if (t.contains("bands")) {
    try {
      c.explicit_bands = t.at("bands").get<std::vector<SigmaBand>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("trojan.bands: ") + e.what());
    }
  }

  // defense
  if (j.contains("defense")) {
    const auto& df = j.at("defense");
    if (df.contains("altered")) {
      ScalePlan p;
      p.seed = derive_seed(c.seed, 4);
      try {
        from_json(df.at("altered"), p);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("defense.altered: ") + e.what());
      }
      c.altered = p;
    }
    if (df.contains("partition")) {
      const auto& pj = df.at("partition");
      PartitionSpec ps;
      ps.groups = field<std::size_t>(pj, "groups", 0, "defense.partition.");
      ps.cuts = field<std::vector<std::size_t>>(pj, "cuts", {}, "defense.partition.");
      if (ps.groups == 0 && ps.cuts.empty()) throw ConfigError("defense.partition: give groups or cuts");
      c.partition = ps;
    }
  }

  c.output_dir = ov.output_dir ? *ov.output_dir : base / field<std::string>(j, "outputDir", "out", "");
  c.output_dir = c.output_dir.lexically_normal();

  // Echo of the resolved configuration.
  Json r;
  r["seed"] = c.seed;
  r["modelName"] = c.model_name;
  if (c.weights_path) r["weights"] = Json{{"path", c.weights_path->string()}};
  else r["weights"] = Json{{"seed", c.weights_seed}};
  r["numeric"] = c.numeric.name();
  Json ds{{"kind", c.dataset.kind}};
  if (c.dataset.kind == "mnist") {
    ds["images"] = c.dataset.images.string();
    ds["labels"] = c.dataset.labels.string();
  } else if (c.dataset.kind == "cifar10") {
    ds["path"] = c.dataset.path.string();
  } else {
    ds["count"] = c.dataset.count;
    ds["seed"] = c.dataset.seed;
    ds["mode"] = c.dataset.mode == SynthMode::uniform ? "uniform" : "gaussianActivationProbe";
  }
  ds["split"] = Json{{"validationCount", c.split.validation_count},
                     {"streamCount", c.split.stream_count},
                     {"seed", c.split.seed}};
  r["dataset"] = ds;
  r["watchLayer"] = c.watch_layer;
  r["kLo"] = c.k_lo;
  r["kHi"] = c.k_hi;
  Json sides = Json::array();
  for (auto s : c.sides) sides.push_back(to_string(s));
  r["sides"] = sides;
  r["bandFit"] = to_string(c.fit);
  r["monteCarlo"] = Json{{"source", c.monte_carlo.source}, {"samples", c.monte_carlo.samples}, {"seed", c.monte_carlo.seed}};
  Json tj;
  if (c.malicious_path) tj["maliciousImages"] = c.malicious_path->string();
  else tj["maliciousImages"] = Json{{"noise", c.malicious_noise_count}, {"seed", c.malicious_seed}};
  tj["selection"] = c.selection;
  if (c.explicit_bands) tj["bands"] = *c.explicit_bands;
  r["trojan"] = tj;
  if (c.altered || c.partition) {
    Json df = Json::object();
    if (c.altered) df["altered"] = *c.altered;
    if (c.partition) {
      df["partition"] = c.partition->cuts.empty() ? Json{{"groups", c.partition->groups}}
                                                  : Json{{"cuts", c.partition->cuts}};
    }
    r["defense"] = df;
  }
  r["outputDir"] = c.output_dir.string();
  c.resolved = std::move(r);
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path, const Overrides& ov = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment(j, std::filesystem::absolute(path).parent_path(), ov);
}

// ------------------------------------------------------------ pipeline

/// Model, data and trojan material materialised from a config.
struct Workspace {
  ModelSpec model;
  Dataset validation;
  Dataset stream;
  Dataset probe;  // items outside both parts of the split
};

inline ModelSpec load_model(const ExperimentConfig& c) {
  ModelSpec m;
  if (c.model_name == "lenet") {
    m = build_lenet();
  } else if (c.model_name == "cifar") {
    m = build_cifar_net();
  } else {
    std::ifstream in(*c.model_path, std::ios::binary);
    try {
      m = model_from_json(Json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(c.model_path->string() + ": " + e.what(), e.byte);
    }
  }
  if (c.weights_path) return apply_weights(std::move(m), load_weights(*c.weights_path));
  return seed_weights(std::move(m), c.weights_seed);
}

inline Dataset load_dataset(const ExperimentConfig& c, const Shape& input_shape) {
  Dataset d;
  if (c.dataset.kind == "mnist") d = parse_idx(c.dataset.images, c.dataset.labels);
  else if (c.dataset.kind == "cifar10") d = parse_cifar10(c.dataset.path);
  else d = synthesize(c.dataset.count, input_shape, c.dataset.seed, c.dataset.mode);
  if (!d.empty() && d.image_shape() != input_shape) {
    throw ConfigError("dataset images " + shape_string(d.image_shape()) + " do not fit model input " +
                      shape_string(input_shape));
  }
  return d;
}

inline Workspace make_workspace(const ExperimentConfig& c) {
  Workspace w;
  w.model = load_model(c);
  w.model.require_layer(c.watch_layer);
  const Dataset all = load_dataset(c, w.model.input_shape);
  const auto idx = split_indices(all.size(), c.split);
  w.validation = subset(all, idx.validation, all.name + "/validation");
  w.stream = subset(all, idx.stream, all.name + "/stream");
  w.probe = subset(all, idx.rest, all.name + "/rest");
  return w;
}

inline std::vector<Tensor> load_malicious(const ExperimentConfig& c, const ModelSpec& m) {
  if (c.malicious_path) {
    std::vector<Tensor> out;
    for (auto& e : read_tensor_file(*c.malicious_path)) out.push_back(std::move(e.tensor));
    return out;
  }
  return noise_images(c.malicious_noise_count, m.input_shape, c.malicious_seed);
}

inline std::vector<SigmaBand> resolve_bands(const ExperimentConfig& c, const Workspace& w, LayerStats* stats_out = nullptr) {
  auto stats = profile_layer(w.model, w.validation, c.watch_layer, c.numeric);
  auto bands = c.explicit_bands ? *c.explicit_bands : forge_bands(stats, c.k_lo, c.k_hi, c.sides, c.fit);
  if (stats_out) *stats_out = std::move(stats);
  return bands;
}

// ------------------------------------------------------------- outputs

inline Json envelope(const ExperimentConfig& c) {
  return Json{{"formatVersion", kFormatVersion}, {"config", c.resolved}};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline void write_json(const std::filesystem::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

inline void prepare_output(const ExperimentConfig& c) {
  std::error_code ec;
  std::filesystem::create_directories(c.output_dir, ec);
  if (ec) throw IoError("cannot create output directory " + c.output_dir.string() + ": " + ec.message());
}

/// profile: layer_stats.json and histogram.csv
inline std::vector<std::filesystem::path> cmd_profile(const ExperimentConfig& c) {
  const auto w = make_workspace(c);
  const auto stats = profile_layer(w.model, w.validation, c.watch_layer, c.numeric);
  prepare_output(c);
  Json j = envelope(c);
  j["stats"] = stats;
  const auto a = c.output_dir / "layer_stats.json";
  const auto b = c.output_dir / "histogram.csv";
  write_json(a, j);
  export_histogram(stats, b);
  return {a, b};
}

/// forge: bands.json and trigger_estimate.json
inline std::vector<std::filesystem::path> cmd_forge(const ExperimentConfig& c) {
  const auto w = make_workspace(c);
  LayerStats stats;
  const auto bands = resolve_bands(c, w, &stats);
  const auto layer_len = shape_size(w.model.tap_shapes()[w.model.require_layer(c.watch_layer)]);
  SamplingSource src = GaussianSampling{c.monte_carlo.samples, c.monte_carlo.seed};
  if (c.monte_carlo.source == "model") {
    if (w.probe.empty()) throw ConfigError("monteCarlo.source model needs dataset items outside the split");
    src = ModelSampling{&w.model, &w.probe, c.numeric};
  }
  const auto est = estimate_trigger_rate(stats, bands, layer_len, src);
  prepare_output(c);
  Json jb = envelope(c);
  jb["bands"] = bands;
  Json je = envelope(c);
  je["estimate"] = est;
  je["layerLength"] = layer_len;
  je["monteCarloSource"] = c.monte_carlo.source;
  const auto a = c.output_dir / "bands.json";
  const auto b = c.output_dir / "trigger_estimate.json";
  write_json(a, jb);
  write_json(b, je);
  return {a, b};
}

/// attack: attack_report.json, labels.csv, clean_labels.csv, events.json
inline std::vector<std::filesystem::path> cmd_attack(const ExperimentConfig& c) {
  const auto w = make_workspace(c);
  TrojanConfig cfg;
  cfg.watch_layer = c.watch_layer;
  cfg.bands = resolve_bands(c, w);
  cfg.malicious_images = load_malicious(c, w.model);
  cfg.selection = c.selection;
  const auto run = run_compromised(w.model, cfg, w.stream, c.numeric);
  const auto clean = run_clean(w.model, w.stream, c.numeric);
  prepare_output(c);

  Json jr = envelope(c);
  jr["report"] = run.report;
  jr["bands"] = cfg.bands;
  Json je = envelope(c);
  je["events"] = run.state.log;
  const auto a = c.output_dir / "attack_report.json";
  const auto b = c.output_dir / "labels.csv";
  const auto d = c.output_dir / "clean_labels.csv";
  const auto e = c.output_dir / "events.json";
  write_json(a, jr);
  write_text(b, labels_csv(run.labels, run.substituted));
  write_text(d, labels_csv(clean, std::vector<bool>(clean.size(), false)));
  write_json(e, je);
  return {a, b, d, e};
}

/// defend: defense_report.json (+ views/ for a partition)
inline std::vector<std::filesystem::path> cmd_defend(const ExperimentConfig& c, bool* degenerate = nullptr) {
  if (!c.altered && !c.partition) throw ConfigError("defense: section missing (give altered and/or partition)");
  const auto w = make_workspace(c);
  prepare_output(c);
  std::vector<std::filesystem::path> written;
  Json reports = Json::array();
  if (c.altered) {
    AlteredDefenseOptions opt;
    opt.watch_layer = c.watch_layer;
    opt.sides = c.sides;
    opt.fit = c.fit;
    opt.numeric = c.numeric;
    opt.malicious_images = load_malicious(c, w.model);
    const auto rep = evaluate_altered_defense(w.model, w.validation, *c.altered, w.stream, c.k_lo, c.k_hi, opt);
    if (rep.degenerate && degenerate) *degenerate = true;
    reports.push_back(rep);
  }
  if (c.partition) {
    const auto views = c.partition->cuts.empty() ? partition(w.model, c.partition->groups)
                                                 : partition_at(w.model, c.partition->cuts);
    const auto rep = evaluate_distributed_defense(views, w.model);
    reports.push_back(rep);
    const auto vdir = c.output_dir / "views";
    std::filesystem::create_directories(vdir);
    for (const auto& v : views) {
      save_view(v, vdir);
      written.push_back(vdir / ("group" + std::to_string(v.group_index) + ".json"));
      written.push_back(vdir / ("group" + std::to_string(v.group_index) + ".dlaw"));
    }
  }
  Json j = envelope(c);
  j["reports"] = reports;
  const auto p = c.output_dir / "defense_report.json";
  write_json(p, j);
  written.insert(written.begin(), p);
  return written;
}

/// report: summary.json gathering whatever the other commands produced.
inline std::vector<std::filesystem::path> cmd_report(const ExperimentConfig& c) {
  Json j = envelope(c);
  bool any = false;
  for (const auto* name : {"layer_stats.json", "bands.json", "trigger_estimate.json", "attack_report.json",
                           "defense_report.json"}) {
    const auto p = c.output_dir / name;
    if (!std::filesystem::exists(p)) continue;
    std::ifstream in(p, std::ios::binary);
    Json doc;
    try {
      doc = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(p.string() + ": " + e.what(), e.byte);
    }
    doc.erase("config");
    doc.erase("formatVersion");
    j[std::filesystem::path(name).stem().string()] = doc;
    any = true;
  }
  if (!any) throw ConfigError("outputDir " + c.output_dir.string() + " holds no results to report");
  const auto p = c.output_dir / "summary.json";
  write_json(p, j);
  return {p};
}

/// Dispatches a subcommand and maps failures onto exit codes.
inline int run_command(const std::string& command, const std::filesystem::path& config_path, const Overrides& ov,
                       std::ostream& out, std::ostream& err) {
  try {
    const auto c = load_experiment(config_path, ov);
    std::vector<std::filesystem::path> files;
    bool degenerate = false;
    if (command == "profile") files = cmd_profile(c);
    else if (command == "forge") files = cmd_forge(c);
    else if (command == "attack") files = cmd_attack(c);
    else if (command == "defend") files = cmd_defend(c, &degenerate);
    else if (command == "report") files = cmd_report(c);
    else throw ConfigError("unknown command " + command);
    for (const auto& f : files) out << f.string() << '\n';
    if (degenerate) {
      err << "error: adversary statistics are degenerate; verdict inconclusive\n";
      return kExitDegenerate;
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParseError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const IoError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const DegenerateError& e) {
    err << "degenerate statistics: " << e.what() << '\n';
    return kExitDegenerate;
  } catch (const ForgeError& e) {
    err << "degenerate statistics: " << e.what() << '\n';
    return kExitDegenerate;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace iia
