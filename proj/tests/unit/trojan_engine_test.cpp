#include <gtest/gtest.h>

#include "iia/trojan.hpp"
#include "test_support.hpp"

namespace iia {
namespace {

// fc1 copies the two input pixels; fc2 maps them to 3 classes.
ModelSpec tiny_model() {
  ModelSpec m{"tiny", {1, 1, 2}, {LayerSpec::flatten("flat"), LayerSpec::dense("fc1", 2), LayerSpec::relu("r"),
                                  LayerSpec::dense("fc2", 3)}};
  m.layers[1].params = Kernel{Tensor({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2})};
  m.layers[3].params = Kernel{Tensor({3, 2}, {1, 0, 0, 1, -1, -1}), Tensor({3}, {0, 0, 0.5f})};
  m.validate();
  return m;
}

Tensor img(float a, float b = 0.0f) { return Tensor({1, 1, 2}, {a, b}); }

// Cycles listed in `hot` carry a pixel inside the band [5, 6].
Dataset stream_with_hits(std::size_t n, const std::vector<std::size_t>& hot) {
  Dataset d{"s", {}, DataSource::synthetic, 0, 10};
  for (std::size_t c = 0; c < n; ++c) {
    const bool h = std::find(hot.begin(), hot.end(), c) != hot.end();
    d.items.push_back({img(h ? 5.5f : 0.1f * static_cast<float>(c % 7), 0.3f), 0});
  }
  return d;
}

TrojanConfig band_config(std::vector<Tensor> malicious) {
  TrojanConfig cfg;
  cfg.watch_layer = "fc1";
  cfg.bands = {{"fc1", 5, 6, BandSide::upper, 3, 4}};
  cfg.malicious_images = std::move(malicious);
  return cfg;
}

std::vector<TriggerEvent> kinds_at(const TrojanState& s, TriggerEvent::Kind k) {
  std::vector<TriggerEvent> out;
  for (const auto& e : s.log)
    if (e.kind == k) out.push_back(e);
  return out;
}

TEST(CheckTrigger, FirstHitInclusive) {
  const std::vector<SigmaBand> b{{"fc1", 3, 4, BandSide::upper, 3, 4}};
  const auto h = check_trigger(Tensor({3}, {0, 3.5f, 0}), b);
  ASSERT_TRUE(h);
  EXPECT_EQ(*h, (BandHit{1, 3.5}));
  EXPECT_TRUE(check_trigger(Tensor({1}, {3.0f}), b));
}

TEST(Step, DormantPassThroughWithoutHits) {
  const auto m = tiny_model();
  const auto cfg = band_config({img(0.9f)});
  TrojanState s;
  const auto stream = stream_with_hits(20, {});
  for (std::size_t c = 0; c < stream.size(); ++c) {
    auto r = step(s, m, cfg, c, stream.items[c].image);
    EXPECT_EQ(r.effective_input, stream.items[c].image);
    s = r.state;
  }
  EXPECT_TRUE(s.log.empty());
  EXPECT_EQ(s.mode, TrojanMode::Dormant);
}

TEST(Step, HitAtSevenSubstitutesAtEight) {
  const auto m = tiny_model();
  const auto mal = img(0.0f, 0.9f);
  const auto cfg = band_config({mal});
  const auto stream = stream_with_hits(12, {7});
  TrojanState s;
  std::vector<Tensor> eff;
  for (std::size_t c = 0; c < stream.size(); ++c) {
    auto r = step(s, m, cfg, c, stream.items[c].image);
    eff.push_back(r.effective_input);
    s = r.state;
  }
  ASSERT_EQ(s.log.size(), 2u);
  EXPECT_EQ(s.log[0].kind, TriggerEvent::Kind::Triggered);
  EXPECT_EQ(s.log[0].cycle, 7u);
  EXPECT_EQ(s.log[0].hit_index, 0u);
  EXPECT_EQ(s.log[0].hit_value, 5.5);
  EXPECT_EQ(s.log[1].kind, TriggerEvent::Kind::Substituted);
  EXPECT_EQ(s.log[1].cycle, 8u);
  EXPECT_EQ(eff[7], stream.items[7].image);
  EXPECT_EQ(eff[8], mal);
  EXPECT_EQ(eff[9], stream.items[9].image);
  EXPECT_EQ(s.fired_count, 1u);
  EXPECT_EQ(s.mode, TrojanMode::Dormant);
}

TEST(Step, SubstitutedCycleNeverArms) {
  // The malicious image itself lies in the band; its cycle must not re-arm.
  const auto m = tiny_model();
  const auto cfg = band_config({img(5.2f)});
  const auto stream = stream_with_hits(8, {2, 4});
  const auto run = run_compromised(m, cfg, stream);
  const auto trig = kinds_at(run.state, TriggerEvent::Kind::Triggered);
  const auto subs = kinds_at(run.state, TriggerEvent::Kind::Substituted);
  ASSERT_EQ(trig.size(), 2u);
  ASSERT_EQ(subs.size(), 2u);
  EXPECT_EQ(trig[0].cycle, 2u);
  EXPECT_EQ(subs[0].cycle, 3u);
  EXPECT_EQ(trig[1].cycle, 4u);
  EXPECT_EQ(subs[1].cycle, 5u);
  EXPECT_EQ(run.substituted, (std::vector<bool>{false, false, false, true, false, true, false, false}));
}

TEST(Step, HitDuringArmedCycleIsDropped) {
  // Hits at t and t+1: the second arrives while Armed and is intercepted.
  const auto run = run_compromised(tiny_model(), band_config({img(0.0f, 0.9f)}), stream_with_hits(6, {1, 2}));
  ASSERT_EQ(run.state.log.size(), 2u);
  EXPECT_EQ(run.state.log[1].cycle, 2u);
  EXPECT_EQ(run.report.trigger_count, 1u);
}

TEST(Step, SelectionPolicies) {
  const auto m = tiny_model();
  const std::vector<Tensor> mal{img(0, 0.1f), img(0, 0.2f), img(0, 0.3f)};
  const auto stream = stream_with_hits(20, {0, 2, 4, 6, 8});
  auto cfg = band_config(mal);
  auto used = [&](const CompromisedRun& r) {
    std::vector<std::size_t> u;
    for (const auto& e : kinds_at(r.state, TriggerEvent::Kind::Substituted)) u.push_back(e.used_malicious_index);
    return u;
  };
  EXPECT_EQ(used(run_compromised(m, cfg, stream)), (std::vector<std::size_t>{0, 1, 2, 0, 1}));
  cfg.selection = Selection::fixed(2);
  EXPECT_EQ(used(run_compromised(m, cfg, stream)), (std::vector<std::size_t>{2, 2, 2, 2, 2}));
  cfg.selection = Selection::fixed(3);
  EXPECT_THROW(run_compromised(m, cfg, stream), ConfigError);
}

TEST(Step, ConfigurationErrors) {
  const auto m = tiny_model();
  EXPECT_THROW(validate(band_config({}), m), ConfigError);
  EXPECT_THROW(step({}, m, band_config({}), 0, img(0)), ConfigError);
  EXPECT_THROW(validate(band_config({Tensor::zeros({1, 2, 2})}), m), ConfigError);
  EXPECT_THROW(step({}, m, band_config({img(0)}), 0, Tensor::zeros({1, 2, 2})), DimensionError);
  auto cfg = band_config({img(0)});
  cfg.bands[0].layer_name = "fc2";
  EXPECT_THROW(validate(cfg, m), ConfigError);
}

TEST(EvaluateAttack, Examples) {
  const Dataset stream = stream_with_hits(4, {});
  CompromisedRun run;
  run.labels = {1, 2, 0, 1};
  run.substituted = {false, false, false, false};
  auto r = evaluate_attack(std::vector<std::size_t>{1, 2, 0, 1}, run, stream);
  EXPECT_EQ(r.misclassifications, 0u);
  EXPECT_TRUE(r.clean_equivalence);

  run.substituted[2] = true;
  run.state.log = {{1, TriggerEvent::Kind::Triggered, 5, 0, 0}, {2, TriggerEvent::Kind::Substituted, 0, 0, 0}};
  r = evaluate_attack(std::vector<std::size_t>{1, 2, 1, 1}, run, stream);
  EXPECT_EQ(r.misclassifications, 1u);
  EXPECT_EQ(r.substitutions, 1u);
  EXPECT_TRUE(r.clean_equivalence);

  EXPECT_THROW(evaluate_attack(std::vector<std::size_t>{1, 2}, run, stream), DimensionError);
}

TEST(EvaluateAttack, TwentyOfAThousand) {
  std::vector<std::size_t> hot;
  for (std::size_t c = 0; c < 1000; c += 50) hot.push_back(c);
  const auto run = run_compromised(tiny_model(), band_config({img(0, 0.9f)}), stream_with_hits(1000, hot));
  EXPECT_EQ(run.report.images_processed, 1000u);
  EXPECT_EQ(run.report.trigger_count, 20u);
  EXPECT_EQ(run.report.substitutions, 20u);
  EXPECT_DOUBLE_EQ(run.report.trigger_rate, 0.02);
  EXPECT_TRUE(run.report.clean_equivalence);
}

TEST(RunCompromised, UnreachableBandsAreDormantEquivalent) {
  const auto m = seed_weights(build_lenet(), 5);
  const auto stream = synthesize(40, {1, 28, 28}, 8);
  TrojanConfig cfg;
  cfg.bands = {{"fc1", 1e9, 2e9, BandSide::upper, 3, 4}};
  cfg.malicious_images = noise_images(1, m.input_shape, 1);
  std::vector<ForwardTrace> traces;
  const auto run = run_compromised(m, cfg, stream, DType::float32(),
                                   [&](std::size_t, const ForwardTrace& t) { traces.push_back(t); });
  EXPECT_EQ(run.report.trigger_count, 0u);
  EXPECT_EQ(run.labels, run_clean(m, stream));
  for (std::size_t c = 0; c < stream.size(); ++c) EXPECT_EQ(traces[c], forward(m, stream.items[c].image));
}

TEST(RunCompromised, Deterministic) {
  const auto m = tiny_model();
  const auto cfg = band_config({img(0, 0.9f), img(0.7f, 0)});
  const auto stream = stream_with_hits(30, {3, 9, 10, 20});
  const auto a = run_compromised(m, cfg, stream), b = run_compromised(m, cfg, stream);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.state, b.state);
}

// Random streams and band placements: next-cycle and reset discipline, and
// substituted labels equal a clean forward of the injected image.
TEST(TrojanProperty, NextCycleDisciplineFuzz) {
  const auto m = tiny_model();
  Xoshiro256 rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    Dataset stream{"f", {}, DataSource::synthetic, 0, 10};
    for (std::size_t c = 0; c < n; ++c) stream.items.push_back({img(static_cast<float>(rng.uniform(0, 1)), static_cast<float>(rng.uniform(0, 1))), 0});
    TrojanConfig cfg;
    const double lo = rng.uniform(0, 1);
    cfg.bands = {{"fc1", lo, lo + rng.uniform(0, 0.3), BandSide::upper, 3, 4}};
    for (std::size_t i = 0, k = 1 + rng.below(3); i < k; ++i)
      cfg.malicious_images.push_back(img(static_cast<float>(rng.uniform(0, 1)), static_cast<float>(rng.uniform(0, 1))));
    const auto run = run_compromised(m, cfg, stream);
    std::vector<int> kind(n, 0);  // 1 triggered, 2 substituted
    for (const auto& e : run.state.log) kind[e.cycle] = e.kind == TriggerEvent::Kind::Triggered ? 1 : 2;
    for (std::size_t c = 0; c < n; ++c) {
      if (kind[c] == 2) {
        ASSERT_GT(c, 0u);
        ASSERT_EQ(kind[c - 1], 1);
        const auto& e = *std::find_if(run.state.log.begin(), run.state.log.end(),
                                      [&](const TriggerEvent& ev) { return ev.cycle == c; });
        ASSERT_EQ(run.labels[c], forward(m, cfg.malicious_images[e.used_malicious_index]).final_label);
      }
      if (kind[c] == 1 && c + 1 < n) ASSERT_EQ(kind[c + 1], 2);
    }
    EXPECT_LE(run.report.substitutions, run.report.trigger_count);
    EXPECT_EQ(run.state.fired_count, run.report.substitutions);
    EXPECT_TRUE(run.report.clean_equivalence);
  }
}

TEST(Serialization, EventsAndLabels) {
  const Json t = TriggerEvent{7, TriggerEvent::Kind::Triggered, 1900.5, 3, 0};
  EXPECT_EQ(t.dump(), R"({"cycle":7,"kind":"Triggered","hitValue":1900.5,"hitIndex":3})");
  const Json s = TriggerEvent{8, TriggerEvent::Kind::Substituted, 0, 0, 1};
  EXPECT_EQ(s.get<TriggerEvent>(), (TriggerEvent{8, TriggerEvent::Kind::Substituted, 0, 0, 1}));
  EXPECT_EQ(labels_csv(std::vector<std::size_t>{3, 1}, {false, true}), "cycle,label,substituted\n0,3,0\n1,1,1\n");
  const Json r = AttackReport{1000, 20, 0.02, 20, 17, true};
  EXPECT_EQ(r["triggerRate"], 0.02);
  EXPECT_EQ(r["cleanEquivalence"], true);
  EXPECT_EQ(Json(Selection::fixed(2)).dump(), R"({"fixedIndex":2})");
  EXPECT_EQ(Json("roundRobin").get<Selection>(), Selection::round_robin());
}

}  // namespace
}  // namespace iia
