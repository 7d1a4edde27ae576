#include <gtest/gtest.h>

#include <cstring>

#include "iia/model.hpp"
#include "iia/weights_io.hpp"
#include "test_support.hpp"

namespace iia {
namespace {

using testing::TempDir;

TEST(LeNet, Dimensions) {
  const auto m = build_lenet();
  const auto shapes = m.tap_shapes();
  EXPECT_EQ(m.input_shape, (Shape{1, 28, 28}));
  EXPECT_EQ(shapes[m.require_layer("flatten")], Shape{256});
  EXPECT_EQ(shapes[m.require_layer("fc1")], Shape{120});
  EXPECT_EQ(shapes[m.require_layer("fc2")], Shape{84});
  EXPECT_EQ(m.output_shape(), Shape{10});
}

TEST(CifarNet, Dimensions) {
  const auto m = build_cifar_net();
  EXPECT_EQ(m.input_shape, (Shape{3, 32, 32}));
  EXPECT_EQ(m.tap_shapes()[m.require_layer("flatten")], Shape{800});
  EXPECT_EQ(m.output_shape(), Shape{10});
}

TEST(ModelSpec, UnknownLayerListsValidNames) {
  try {
    build_lenet().require_layer("fc9");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("conv1, relu1"), std::string::npos);
  }
}

TEST(ModelSpec, ValidateRejectsDuplicatesAndMissingDense) {
  ModelSpec dup{"m", {1, 4, 4}, {LayerSpec::flatten("a"), LayerSpec::dense("a", 2)}};
  EXPECT_THROW(dup.validate(), ConfigError);
  ModelSpec nodense{"m", {1, 4, 4}, {LayerSpec::flatten("a")}};
  EXPECT_THROW(nodense.validate(), ConfigError);
  ModelSpec bad{"m", {1, 4, 4}, {LayerSpec::conv("c", 2, 5), LayerSpec::flatten("f"), LayerSpec::dense("d", 2)}};
  EXPECT_THROW(bad.validate(), DimensionError);
}

TEST(Forward, ZeroModelZeroImage) {
  const auto m = zero_weights(build_lenet());
  const auto t = forward(m, Tensor::zeros({1, 28, 28}));
  EXPECT_EQ(t.final_label, 0u);
  ASSERT_EQ(t.taps.size(), m.layers.size());
  for (const auto& [name, tap] : t.taps)
    for (float v : tap.floats()) EXPECT_EQ(v, 0.0f) << name;
}

TEST(Forward, MissingParamsIsConfigError) {
  EXPECT_THROW(forward(build_lenet(), Tensor::zeros({1, 28, 28})), ConfigError);
}

TEST(Forward, WrongInputShape) {
  EXPECT_THROW(forward(seed_weights(build_lenet(), 1), Tensor::zeros({1, 32, 32})), DimensionError);
}

TEST(Forward, DeterministicAndShapeConsistent) {
  const auto m = seed_weights(build_lenet(), 4);
  Xoshiro256 rng(1);
  const auto x = testing::random_tensor(rng, {1, 28, 28}, 0.0, 1.0);
  const auto a = forward(m, x), b = forward(m, x);
  EXPECT_EQ(a, b);
  const auto shapes = m.tap_shapes();
  for (std::size_t i = 0; i < a.taps.size(); ++i) {
    EXPECT_EQ(a.taps[i].first, m.layers[i].name);
    EXPECT_EQ(a.taps[i].second.shape(), shapes[i]);
  }
  EXPECT_EQ(a.final_label, argmax(a.last()));
}

TEST(Forward, MatchesManualComposition) {
  const auto m = seed_weights(build_lenet(), 9);
  Xoshiro256 rng(2);
  const auto x = testing::random_tensor(rng, {1, 28, 28}, 0.0, 1.0);
  auto p = [&](const char* n) { return *m.layers[m.require_layer(n)].params; };
  Tensor h = maxpool2d(relu(conv2d(x, p("conv1"))), 2, 2);
  h = maxpool2d(relu(conv2d(h, p("conv2"))), 2, 2);
  const Tensor fc1 = dense(flatten(h), p("fc1"));
  const Tensor fc3 = dense(relu(dense(relu(fc1), p("fc2"))), p("fc3"));
  const auto t = forward(m, x);
  EXPECT_EQ(t.tap("fc1"), fc1);
  EXPECT_EQ(t.tap("fc3"), fc3);
  EXPECT_EQ(t.final_label, argmax(fc3));
}

TEST(Forward, FixedPointTracksFloat) {
  const auto m = seed_weights(build_lenet(), 3);
  Xoshiro256 rng(6);
  const auto x = testing::random_tensor(rng, {1, 28, 28}, 0.0, 1.0);
  const auto f = forward(m, x);
  const auto q = forward(m, x, DType::fixed(kQ16_16));
  EXPECT_TRUE(q.tap("fc1").is_fixed());
  EXPECT_EQ(q.saturations(), 0u);
  for (std::size_t i = 0; i < 120; ++i) EXPECT_NEAR(q.tap("fc1").value(i), f.tap("fc1").value(i), 1e-3);
}

TEST(SeedWeights, DeterministicAndBounded) {
  const auto a = seed_weights(build_lenet(), 7), b = seed_weights(build_lenet(), 7), c = seed_weights(build_lenet(), 8);
  EXPECT_TRUE(a.has_all_params());
  bool differs = false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].params, b.layers[i].params);
    differs |= a.layers[i].params != c.layers[i].params;
  }
  EXPECT_TRUE(differs);
  const auto& fc1 = *a.layers[a.require_layer("fc1")].params;
  const float s = static_cast<float>(1.0 / 16.0);  // fan_in 256
  for (float v : fc1.weights.floats()) EXPECT_LE(std::abs(v), s);
}

TEST(ModelJson, RoundTrip) {
  const auto m = build_cifar_net();
  Json j = m;
  EXPECT_EQ(j["inputShape"], Json({3, 32, 32}));
  EXPECT_EQ(j["layers"][0]["hyperparams"]["outChannels"], 32);
  const auto back = model_from_json(Json::parse(j.dump()));
  EXPECT_EQ(Json(back), j);
  EXPECT_EQ(back.tap_shapes(), m.tap_shapes());
}

TEST(ModelJson, UnknownKindRejected) {
  Json j = build_lenet();
  j["layers"][0]["kind"] = "lstm";
  EXPECT_THROW(model_from_json(j), ConfigError);
}

TEST(WeightFile, SaveLoadBitwise) {
  TempDir dir("weights");
  const auto m = seed_weights(build_lenet(), 12);
  save_weights(m, dir / "w.dlaw");
  const auto back = apply_weights(build_lenet(), load_weights(dir / "w.dlaw"));
  for (std::size_t i = 0; i < m.layers.size(); ++i) EXPECT_EQ(back.layers[i].params, m.layers[i].params);
  // Byte-level identity on re-save.
  save_weights(back, dir / "w2.dlaw");
  EXPECT_EQ(read_file_bytes(dir / "w.dlaw"), read_file_bytes(dir / "w2.dlaw"));
}

TEST(WeightFile, FixedEntriesRoundTrip) {
  const std::vector<NamedTensor> e{{"q", quantize(Tensor({2, 2}, {1.5f, -2.25f, 0, 7}), kQ16_16)},
                                   {"f", Tensor({3}, {0.1f, -0.0f, 3e38f})}};
  const auto back = decode_tensors(encode_tensors(e));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].tensor, e[0].tensor);
  EXPECT_EQ(back[1].tensor, e[1].tensor);
  EXPECT_EQ(back[1].name, "f");
}

TEST(WeightFile, Layout) {
  const std::vector<NamedTensor> e{{"ab", Tensor({1}, {1.0f})}};
  const auto b = encode_tensors(e);
  const std::vector<std::uint8_t> want{'D', 'L', 'A', 'W', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 'a', 'b',
                                       0,   1,   1,   0,   0, 0, 0, 0, 0x80, 0x3f};
  EXPECT_EQ(b, want);
}

TEST(WeightFile, BadMagic) {
  auto b = encode_tensors(std::vector<NamedTensor>{{"x", Tensor({1}, {1})}});
  std::memcpy(b.data(), "XXXX", 4);
  try {
    decode_tensors(b);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(WeightFile, TruncatedPayload) {
  auto b = encode_tensors(std::vector<NamedTensor>{{"x", Tensor::zeros({2, 2})}});
  b.resize(b.size() - 4);  // 12 of 16 payload bytes
  try {
    decode_tensors(b);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 4u + 4 + 4 + 2 + 1 + 1 + 1 + 8);
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(WeightFile, BadVersionAndTrailingBytes) {
  auto b = encode_tensors(std::vector<NamedTensor>{{"x", Tensor({1}, {1})}});
  auto v = b;
  v[4] = 2;
  try {
    decode_tensors(v);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  b.push_back(0);
  EXPECT_THROW(decode_tensors(b), ParseError);
}

TEST(WeightFile, MissingOrMisshapedEntries) {
  const auto m = seed_weights(build_lenet(), 1);
  auto entries = parameter_entries(m.layers);
  auto missing = entries;
  missing.pop_back();
  EXPECT_THROW(apply_weights(build_lenet(), missing), ConfigError);
  entries[0].tensor = Tensor::zeros({1});
  EXPECT_THROW(apply_weights(build_lenet(), entries), DimensionError);
}

TEST(WeightFile, MissingFileIsIoError) {
  EXPECT_THROW(load_weights("/nonexistent/w.dlaw"), IoError);
}

}  // namespace
}  // namespace iia
