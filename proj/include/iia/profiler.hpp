#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iterator>
#include <limits>
#include <tuple>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "iia/dataset.hpp"
#include "iia/error.hpp"
#include "iia/model.hpp"
#include "iia/rng.hpp"

namespace iia {

// ------------------------------------------------------------- numerics

/// Standard normal CDF.
inline double normal_cdf(double x) noexcept { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline constexpr double kZ95 = 1.959963984540054;

struct WilsonInterval {
  double center = 0.0;
  double half_width = 0.0;
};

/// Wilson score interval for `hits` successes out of `n` trials.
inline WilsonInterval wilson(std::size_t hits, std::size_t n, double z = kZ95) {
  if (n == 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(hits) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  return {(p + z2 / (2 * nn)) / denom, z / denom * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn))};
}

/// Shortest decimal string that parses back to exactly `v`.
inline std::string exact_decimal(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

// ---------------------------------------------------------------- stats

struct Histogram {
  std::size_t bin_count = 0;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;

  double edge(std::size_t i) const noexcept {
    if (i >= bin_count) return hi;
    return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bin_count);
  }

  std::size_t bin_of(double v) const noexcept {
    if (hi <= lo) return 0;
    const double f = (v - lo) / (hi - lo) * static_cast<double>(bin_count);
    if (f <= 0) return 0;
    return std::min(static_cast<std::size_t>(f), bin_count - 1);
  }

  friend bool operator==(const Histogram&, const Histogram&) = default;
};

/// Distribution summary of every scalar a layer produced over a dataset.
/// `observations` keeps the sorted raw values so forged bands can be checked
/// against them; it is not serialised.
struct LayerStats {
  std::string layer_name;
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
  Histogram histogram;
  std::vector<double> observations;

  /// Observations inside the closed interval [lo, hi].
  std::size_t count_within(double lo, double hi) const {
    auto a = std::lower_bound(observations.begin(), observations.end(), lo);
    auto b = std::upper_bound(observations.begin(), observations.end(), hi);
    return b > a ? static_cast<std::size_t>(b - a) : 0;
  }
};

inline constexpr std::size_t kDefaultHistogramBins = 101;

namespace detail {

inline double pairwise_sum(const double* v, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(v, h) + pairwise_sum(v + h, n - h);
}

}  // namespace detail

/// Summarises a multiset of values. The result depends only on the multiset,
/// not on input order: values are sorted before any reduction.
inline LayerStats summarize(std::string layer_name, std::vector<double> values,
                            std::size_t bins = kDefaultHistogramBins) {
  LayerStats s;
  s.layer_name = std::move(layer_name);
  std::sort(values.begin(), values.end());
  s.count = values.size();
  if (values.empty()) {
    s.observations = std::move(values);
    return s;
  }
  const double n = static_cast<double>(values.size());
  s.mean = detail::pairwise_sum(values.data(), values.size()) / n;
  std::vector<double> sq(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) sq[i] = (values[i] - s.mean) * (values[i] - s.mean);
  std::sort(sq.begin(), sq.end());
  s.stddev = std::sqrt(detail::pairwise_sum(sq.data(), sq.size()) / n);
  s.min = values.front();
  s.max = values.back();
  s.histogram.bin_count = std::max<std::size_t>(bins, 1);
  s.histogram.lo = s.min;
  s.histogram.hi = s.max;
  s.histogram.counts.assign(s.histogram.bin_count, 0);
  for (double v : values) ++s.histogram.counts[s.histogram.bin_of(v)];
  s.observations = std::move(values);
  return s;
}

/// Runs `fn(i)` for i in [0, n) on worker threads; results land at index i,
/// so the output is independent of scheduling.
template <class Fn>
auto parallel_map(std::size_t n, Fn fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<R> out(n);
  const std::size_t workers = std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 16);
  if (n < 2 * workers) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::vector<std::future<void>> jobs;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t stop = std::min(n, start + chunk);
    jobs.push_back(std::async(std::launch::async, [&, start, stop] {
      for (std::size_t i = start; i < stop; ++i) out[i] = fn(i);
    }));
  }
  for (auto& j : jobs) j.get();
  return out;
}

/// Statistics of layer `layer_name` over every element of every image.
inline LayerStats profile_layer(const ModelSpec& model, const Dataset& validation, const std::string& layer_name,
                                const DType& numeric = DType::float32(),
                                std::size_t bins = kDefaultHistogramBins) {
  model.require_layer(layer_name);
  const ModelSpec prepared = with_numeric(model, numeric);
  auto per_image = parallel_map(validation.size(), [&](std::size_t i) {
    return forward(prepared, validation.items[i].image, numeric).tap(layer_name).values();
  });
  std::vector<double> all;
  for (auto& v : per_image) all.insert(all.end(), v.begin(), v.end());
  return summarize(layer_name, std::move(all), bins);
}

// ---------------------------------------------------------------- bands

enum class BandSide { upper, lower };

inline std::string to_string(BandSide s) { return s == BandSide::upper ? "upper" : "lower"; }

inline BandSide band_side_from_string(const std::string& s) {
  if (s == "upper") return BandSide::upper;
  if (s == "lower") return BandSide::lower;
  throw ConfigError("unknown band side \"" + s + "\" (expected upper or lower)");
}

/// Closed trigger interval [lo, hi] on one tail of a layer's distribution.
struct SigmaBand {
  std::string layer_name;
  double lo = 0.0;
  double hi = 0.0;
  BandSide side = BandSide::upper;
  double k_lo = 3.0;
  double k_hi = 4.0;

  bool contains(double v) const noexcept { return v >= lo && v <= hi; }

  friend bool operator==(const SigmaBand&, const SigmaBand&) = default;
};

/// How a band is placed inside its sigma region.
///   exact     the whole region [mean + kLo*sd, mean + kHi*sd] (mirrored for
///             the lower side); rejected if any observation falls inside.
///   clearGap  the widest sub-interval of that region that holds no
///             observation; the region itself when it is already clear.
enum class BandFit { exact, clearGap };

inline std::string to_string(BandFit f) { return f == BandFit::exact ? "exact" : "clearGap"; }

inline BandFit band_fit_from_string(const std::string& s) {
  if (s == "exact") return BandFit::exact;
  if (s == "clearGap") return BandFit::clearGap;
  throw ConfigError("unknown band fit \"" + s + "\" (expected exact or clearGap)");
}

namespace detail {

/// Widest closed sub-interval of [lo, hi] free of the sorted observations.
/// Ties go to the interval nearest `lo`.
inline std::pair<double, double> widest_clear_gap(const std::vector<double>& sorted, double lo, double hi) {
  auto a = std::lower_bound(sorted.begin(), sorted.end(), lo);
  auto b = std::upper_bound(sorted.begin(), sorted.end(), hi);
  if (a == b) return {lo, hi};
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::pair<double, double> best{0.0, 0.0};
  double best_width = -1.0;
  auto consider = [&](double gl, double gh) {
    if (gh >= gl && gh - gl > best_width) {
      best = {gl, gh};
      best_width = gh - gl;
    }
  };
  // Gap edges sit one ulp inside the neighbouring observations.
  consider(lo, std::nextafter(*a, -inf));
  for (auto it = a; std::next(it) != b; ++it) {
    if (*std::next(it) > *it) consider(std::nextafter(*it, inf), std::nextafter(*std::next(it), -inf));
  }
  consider(std::nextafter(*std::prev(b), inf), hi);
  return best;
}

}  // namespace detail

/// Bands between the kLo- and kHi-sigma limits of `stats` for each requested
/// side. Every returned band holds zero retained observations.
inline std::vector<SigmaBand> forge_bands(const LayerStats& stats, double k_lo = 3.0, double k_hi = 4.0,
                                          const std::vector<BandSide>& sides = {BandSide::upper,
                                                                                BandSide::lower},
                                          BandFit fit = BandFit::exact) {
  if (!(k_lo < k_hi)) {
    throw ConfigError("kLo (" + exact_decimal(k_lo) + ") must be smaller than kHi (" + exact_decimal(k_hi) + ")");
  }
  if (!(stats.stddev > 0.0)) {
    throw DegenerateError("layer " + stats.layer_name + " has zero spread (stddev 0 over " +
                          std::to_string(stats.count) + " observations); no sigma band exists");
  }
  std::vector<SigmaBand> bands;
  for (auto side : sides) {
    SigmaBand b{stats.layer_name, 0, 0, side, k_lo, k_hi};
    if (side == BandSide::upper) {
      b.lo = stats.mean + k_lo * stats.stddev;
      b.hi = stats.mean + k_hi * stats.stddev;
    } else {
      b.lo = stats.mean - k_hi * stats.stddev;
      b.hi = stats.mean - k_lo * stats.stddev;
    }
    if (const auto hits = stats.count_within(b.lo, b.hi); hits > 0) {
      if (fit == BandFit::exact) {
        throw ForgeError(to_string(side) + " band [" + exact_decimal(b.lo) + ", " + exact_decimal(b.hi) +
                             "] of layer " + stats.layer_name + " contains " + std::to_string(hits) +
                             " validation observations",
                         hits);
      }
      std::tie(b.lo, b.hi) = detail::widest_clear_gap(stats.observations, b.lo, b.hi);
      if (!(b.lo < b.hi)) {
        throw ForgeError(to_string(side) + " sigma region of layer " + stats.layer_name +
                             " has no observation-free gap",
                         hits);
      }
    }
    bands.push_back(std::move(b));
  }
  for (const auto& b : bands) {
    if (stats.count_within(b.lo, b.hi) != 0) throw InvariantError("forged band overlaps validation data");
  }
  return bands;
}

/// Index and value of the first element (ascending index) inside any band.
struct BandHit {
  std::size_t index = 0;
  double value = 0.0;

  friend bool operator==(const BandHit&, const BandHit&) = default;
};

inline std::optional<BandHit> first_band_hit(const Tensor& t, const std::vector<SigmaBand>& bands) {
  if (bands.empty()) return std::nullopt;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t.value(i);
    for (const auto& b : bands)
      if (b.contains(v)) return BandHit{i, v};
  }
  return std::nullopt;
}

// --------------------------------------------------------- trigger rate

struct TriggerRateEstimate {
  double analytic = 0.0;
  double monte_carlo = 0.0;
  std::size_t samples = 0;
  double confidence_half_width = 0.0;
};

/// Per-element probability that an N(mean, stddev^2) draw lands in a band.
inline double gaussian_element_probability(double mean, double stddev, const std::vector<SigmaBand>& bands) {
  double p = 0.0;
  for (const auto& b : bands) {
    if (stddev > 0) {
      p += normal_cdf((b.hi - mean) / stddev) - normal_cdf((b.lo - mean) / stddev);
    } else if (b.contains(mean)) {
      p += 1.0;
    }
  }
  return std::clamp(p, 0.0, 1.0);
}

/// Probability that at least one of `layer_length` i.i.d. elements hits.
inline double any_element_probability(double p_elem, std::size_t layer_length) {
  if (p_elem >= 1.0) return 1.0;
  return -std::expm1(static_cast<double>(layer_length) * std::log1p(-p_elem));
}

/// Monte-Carlo over synthetic i.i.d. Gaussian activation vectors.
struct GaussianSampling {
  std::size_t samples = 100000;
  std::uint64_t seed = 0;
};

/// Monte-Carlo over real model activations on probe images.
struct ModelSampling {
  const ModelSpec* model = nullptr;
  const Dataset* probe = nullptr;
  DType numeric = DType::float32();
};

using SamplingSource = std::variant<GaussianSampling, ModelSampling>;

/// Fills one synthetic activation vector N(mean, stddev^2) per element.
inline Tensor gaussian_activation(Xoshiro256& rng, double mean, double stddev, std::size_t length) {
  std::vector<float> v(length);
  for (auto& x : v) x = static_cast<float>(mean + stddev * rng.normal());
  return Tensor({length}, std::move(v));
}

/// Counts hits over `source`. Returns (hits, trials).
inline std::pair<std::size_t, std::size_t> sample_trigger_hits(const LayerStats& stats,
                                                               const std::vector<SigmaBand>& bands,
                                                               std::size_t layer_length, const SamplingSource& source) {
  if (const auto* g = std::get_if<GaussianSampling>(&source)) {
    Xoshiro256 rng(g->seed);
    std::size_t hits = 0;
    for (std::size_t s = 0; s < g->samples; ++s) {
      if (first_band_hit(gaussian_activation(rng, stats.mean, stats.stddev, layer_length), bands)) ++hits;
    }
    return {hits, g->samples};
  }
  const auto& m = std::get<ModelSampling>(source);
  if (!m.model || !m.probe) throw ConfigError("model sampling needs a model and a probe dataset");
  m.model->require_layer(stats.layer_name);
  const ModelSpec prepared = with_numeric(*m.model, m.numeric);
  auto hit = parallel_map(m.probe->size(), [&](std::size_t i) -> int {
    const auto trace = forward(prepared, m.probe->items[i].image, m.numeric);
    return first_band_hit(trace.tap(stats.layer_name), bands).has_value() ? 1 : 0;
  });
  std::size_t hits = 0;
  for (int h : hit) hits += static_cast<std::size_t>(h);
  return {hits, m.probe->size()};
}

/// Analytic (i.i.d. Gaussian) and Monte-Carlo per-image trigger probability.
inline TriggerRateEstimate estimate_trigger_rate(const LayerStats& stats, const std::vector<SigmaBand>& bands,
                                                 std::size_t layer_length, const SamplingSource& source) {
  if (layer_length == 0) throw ConfigError("layer length must be positive");
  TriggerRateEstimate e;
  if (bands.empty()) return e;
  e.analytic = any_element_probability(gaussian_element_probability(stats.mean, stats.stddev, bands), layer_length);
  const auto [hits, n] = sample_trigger_hits(stats, bands, layer_length, source);
  e.samples = n;
  e.monte_carlo = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
  e.confidence_half_width = wilson(hits, n).half_width;
  return e;
}

// ------------------------------------------------------------ histogram

/// Writes "bin_lo,bin_hi,count" rows with shortest round-trip edges.
inline void export_histogram(const LayerStats& stats, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write histogram " + path.string());
  out << "bin_lo,bin_hi,count\n";
  const auto& h = stats.histogram;
  for (std::size_t i = 0; i < h.bin_count; ++i) {
    out << exact_decimal(h.edge(i)) << ',' << exact_decimal(h.edge(i + 1)) << ',' << h.counts[i] << '\n';
  }
  if (!out) throw IoError("write failed for histogram " + path.string());
}

struct HistogramRow {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;

  friend bool operator==(const HistogramRow&, const HistogramRow&) = default;
};

inline std::vector<HistogramRow> histogram_rows(const Histogram& h) {
  std::vector<HistogramRow> rows;
  for (std::size_t i = 0; i < h.bin_count; ++i) rows.push_back({h.edge(i), h.edge(i + 1), h.counts[i]});
  return rows;
}

inline std::vector<HistogramRow> read_histogram_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open histogram " + path.string());
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line) || line != "bin_lo,bin_hi,count") {
    throw ParseError("histogram CSV header must be \"bin_lo,bin_hi,count\"", 0);
  }
  offset += line.size() + 1;
  std::vector<HistogramRow> rows;
  while (std::getline(in, line)) {
    HistogramRow r;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    auto field = [&](auto& dst, bool last) {
      auto [q, ec] = std::from_chars(p, end, dst);
      if (ec != std::errc{} || (last ? q != end : (q == end || *q != ','))) {
        throw ParseError("malformed histogram row \"" + line + "\"", offset + static_cast<std::size_t>(p - line.data()));
      }
      p = last ? q : q + 1;
    };
    field(r.lo, false);
    field(r.hi, false);
    field(r.count, true);
    rows.push_back(r);
    offset += line.size() + 1;
  }
  return rows;
}

// ----------------------------------------------------------------- JSON

inline void to_json(Json& j, const Histogram& h) {
  j = Json{{"binCount", h.bin_count}, {"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}};
}

inline void from_json(const Json& j, Histogram& h) {
  h.bin_count = j.at("binCount").get<std::size_t>();
  h.lo = j.at("lo").get<double>();
  h.hi = j.at("hi").get<double>();
  h.counts = j.at("counts").get<std::vector<std::size_t>>();
}

inline void to_json(Json& j, const LayerStats& s) {
  j = Json{{"layerName", s.layer_name}, {"count", s.count}, {"mean", s.mean}, {"stddev", s.stddev},
           {"min", s.min},              {"max", s.max},     {"histogram", s.histogram}};
}

inline void from_json(const Json& j, LayerStats& s) {
  s.layer_name = j.at("layerName").get<std::string>();
  s.count = j.at("count").get<std::size_t>();
  s.mean = j.at("mean").get<double>();
  s.stddev = j.at("stddev").get<double>();
  s.min = j.at("min").get<double>();
  s.max = j.at("max").get<double>();
  s.histogram = j.at("histogram").get<Histogram>();
  s.observations.clear();
}

inline void to_json(Json& j, const SigmaBand& b) {
  j = Json{{"layerName", b.layer_name}, {"lo", b.lo},     {"hi", b.hi},
           {"side", to_string(b.side)}, {"kLo", b.k_lo}, {"kHi", b.k_hi}};
}

inline void from_json(const Json& j, SigmaBand& b) {
  b.layer_name = j.at("layerName").get<std::string>();
  b.lo = j.at("lo").get<double>();
  b.hi = j.at("hi").get<double>();
  b.side = band_side_from_string(j.value("side", std::string("upper")));
  b.k_lo = j.value("kLo", 3.0);
  b.k_hi = j.value("kHi", 4.0);
  if (!(b.lo < b.hi)) throw ConfigError("band on " + b.layer_name + " needs lo < hi");
}

inline void to_json(Json& j, const TriggerRateEstimate& e) {
  j = Json{{"analytic", e.analytic},
           {"monteCarlo", e.monte_carlo},
           {"samples", e.samples},
           {"confidenceHalfWidth", e.confidence_half_width}};
}

}  // namespace iia
