#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "iia/experiment.hpp"
#include "test_support.hpp"

namespace iia {
namespace {

using testing::TempDir;
namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Json read_json(const fs::path& p) { return Json::parse(slurp(p)); }

// Small synthetic experiment written into a fresh temp directory.
class Experiment : public ::testing::Test {
 protected:
  TempDir dir{"cli"};

  Json base() const {
    return Json{{"seed", 5},
                {"modelName", "lenet"},
                {"weights", Json{{"seed", 2}}},
                {"dataset", Json{{"kind", "synthetic"},
                                 {"count", 160},
                                 {"split", Json{{"validationCount", 40}, {"streamCount", 100}}}}},
                {"bandFit", "clearGap"},
                {"outputDir", "out"}};
  }

  fs::path write(const Json& j, const std::string& name = "exp.json") {
    const auto p = dir / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  int run(const std::string& cmd, const fs::path& cfg, const Overrides& ov = {}) {
    out_.str("");
    err_.str("");
    return run_command(cmd, cfg, ov, out_, err_);
  }

  std::string err() const { return err_.str(); }
  std::vector<std::string> written() const {
    std::vector<std::string> v;
    std::istringstream in(out_.str());
    for (std::string line; std::getline(in, line);) v.push_back(line);
    return v;
  }

 private:
  std::ostringstream out_, err_;
};

TEST_F(Experiment, MissingWeightsFieldIsConfigError) {
  auto j = base();
  j.erase("weights");
  EXPECT_EQ(run("profile", write(j)), kExitConfig);
  EXPECT_NE(err().find("weights"), std::string::npos) << err();
}

TEST_F(Experiment, MissingWeightsPathNamesTheField) {
  auto j = base();
  j["weights"] = "nowhere.dlaw";
  EXPECT_EQ(run("profile", write(j)), kExitConfig);
  EXPECT_NE(err().find("weights"), std::string::npos) << err();
  EXPECT_NE(err().find("nowhere.dlaw"), std::string::npos) << err();
}

TEST_F(Experiment, ProfileWritesTwoFilesDeterministically) {
  const auto cfg = write(base());
  ASSERT_EQ(run("profile", cfg), kExitOk) << err();
  const auto files = written();
  ASSERT_EQ(files.size(), 2u);
  EXPECT_EQ(std::distance(fs::directory_iterator(dir / "out"), fs::directory_iterator{}), 2);
  const auto stats = slurp(dir / "out/layer_stats.json");
  const auto hist = slurp(dir / "out/histogram.csv");
  ASSERT_EQ(run("profile", cfg), kExitOk);
  EXPECT_EQ(slurp(dir / "out/layer_stats.json"), stats);
  EXPECT_EQ(slurp(dir / "out/histogram.csv"), hist);
  const auto j = Json::parse(stats);
  EXPECT_EQ(j["formatVersion"], kFormatVersion);
  EXPECT_EQ(j["stats"]["count"], 40 * 120);
  EXPECT_EQ(j["config"]["weights"]["seed"], 2);
  EXPECT_EQ(j["config"]["dataset"]["split"]["validationCount"], 40);
}

TEST_F(Experiment, ResolvedConfigAppliesDefaults) {
  const auto c = load_experiment(write(base()));
  EXPECT_EQ(c.watch_layer, "fc1");
  EXPECT_EQ(c.k_lo, 3.0);
  EXPECT_EQ(c.k_hi, 4.0);
  EXPECT_EQ(c.resolved["numeric"], "float32");
  EXPECT_EQ(c.resolved["sides"], Json({"upper", "lower"}));
  EXPECT_EQ(c.resolved["trojan"]["selection"], "roundRobin");
  EXPECT_EQ(c.split.seed, derive_seed(5, 2));
  const auto d = load_experiment(write(base()), {std::nullopt, 6});
  EXPECT_EQ(d.seed, 6u);
  EXPECT_NE(d.split.seed, c.split.seed);
}

TEST_F(Experiment, ForgeOutputsAndInvariant) {
  const auto cfg = write(base());
  ASSERT_EQ(run("forge", cfg), kExitOk) << err();
  const auto bands = read_json(dir / "out/bands.json")["bands"].get<std::vector<SigmaBand>>();
  ASSERT_EQ(bands.size(), 2u);
  const auto est = read_json(dir / "out/trigger_estimate.json");
  EXPECT_EQ(est["config"], read_json(dir / "out/bands.json")["config"]);
  for (const char* k : {"analytic", "monteCarlo", "samples", "confidenceHalfWidth"}) EXPECT_TRUE(est["estimate"].contains(k));
  const auto c = load_experiment(cfg);
  const auto w = make_workspace(c);
  const auto stats = profile_layer(w.model, w.validation, "fc1");
  for (const auto& b : bands) EXPECT_EQ(stats.count_within(b.lo, b.hi), 0u);
}

TEST_F(Experiment, ForgeErrors) {
  auto j = base();
  j["kLo"] = 4;
  j["kHi"] = 3;
  EXPECT_EQ(run("forge", write(j)), kExitConfig);

  const auto wpath = dir / "zero.dlaw";
  save_weights(zero_weights(build_lenet()), wpath);
  j = base();
  j["weights"] = wpath.string();
  EXPECT_EQ(run("forge", write(j)), kExitDegenerate);
  EXPECT_NE(err().find("degenerate"), std::string::npos);

  j = base();
  j["watchLayer"] = "fc9";
  EXPECT_EQ(run("forge", write(j)), kExitConfig);
  EXPECT_NE(err().find("conv1"), std::string::npos);
}

TEST_F(Experiment, AttackWithUnreachableBands) {
  auto j = base();
  j["trojan"] = Json{{"bands", Json::array({SigmaBand{"fc1", 1e9, 2e9, BandSide::upper, 3, 4}})}};
  ASSERT_EQ(run("attack", write(j)), kExitOk) << err();
  const auto r = read_json(dir / "out/attack_report.json")["report"];
  EXPECT_EQ(r["triggerCount"], 0);
  EXPECT_EQ(r["imagesProcessed"], 100);
  EXPECT_EQ(slurp(dir / "out/labels.csv"), slurp(dir / "out/clean_labels.csv"));
  EXPECT_EQ(read_json(dir / "out/events.json")["events"], Json::array());
}

TEST_F(Experiment, AttackReportRateAndCsv) {
  ASSERT_EQ(run("attack", write(base())), kExitOk) << err();
  const auto r = read_json(dir / "out/attack_report.json")["report"];
  EXPECT_DOUBLE_EQ(r["triggerRate"].get<double>(), r["triggerCount"].get<double>() / r["imagesProcessed"].get<double>());
  const auto csv = slurp(dir / "out/labels.csv");
  EXPECT_EQ(csv.rfind("cycle,label,substituted\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 101);
}

TEST_F(Experiment, DefendVerdicts) {
  auto j = base();
  EXPECT_EQ(run("defend", write(j)), kExitConfig);
  EXPECT_NE(err().find("defense"), std::string::npos);

  j["defense"] = Json{{"altered", Json{{"range", {1.0, 1.0}}}}, {"partition", Json{{"groups", 2}}}};
  ASSERT_EQ(run("defend", write(j)), kExitOk) << err();
  const auto reps = read_json(dir / "out/defense_report.json")["reports"];
  ASSERT_EQ(reps.size(), 2u);
  EXPECT_EQ(reps[0]["kind"], "alteredValidation");
  EXPECT_EQ(reps[0]["verdict"], "ineffective");
  EXPECT_EQ(reps[1]["kind"], "distributed");
  EXPECT_EQ(reps[1]["verdict"], "effective");
  EXPECT_FALSE(reps[1]["exposureFindings"].empty());
  EXPECT_TRUE(fs::exists(dir / "out/views/group1.dlaw"));
}

TEST_F(Experiment, DefendZeroWeightsIsDegenerate) {
  const auto wpath = dir / "zero.dlaw";
  save_weights(zero_weights(build_lenet()), wpath);
  auto j = base();
  j["weights"] = wpath.string();
  j["defense"] = Json{{"altered", Json::object()}};
  EXPECT_EQ(run("defend", write(j)), kExitDegenerate);
  EXPECT_EQ(read_json(dir / "out/defense_report.json")["reports"][0]["verdict"], "inconclusive");
}

TEST_F(Experiment, ReportGathersOutputs) {
  const auto cfg = write(base());
  EXPECT_EQ(run("report", cfg), kExitConfig);
  ASSERT_EQ(run("profile", cfg), kExitOk);
  ASSERT_EQ(run("report", cfg), kExitOk);
  const auto s = read_json(dir / "out/summary.json");
  EXPECT_TRUE(s.contains("layer_stats"));
  EXPECT_FALSE(s.contains("attack_report"));
  EXPECT_EQ(s["formatVersion"], kFormatVersion);
}

TEST_F(Experiment, MalformedDataIsDataError) {
  std::ofstream(dir / "img", std::ios::binary) << "garbage!";
  std::ofstream(dir / "lbl", std::ios::binary) << "garbage!";
  auto j = base();
  j["dataset"] = Json{{"kind", "mnist"}, {"images", "img"}, {"labels", "lbl"}};
  EXPECT_EQ(run("profile", write(j)), kExitData);
  EXPECT_NE(err().find("byte offset 0"), std::string::npos) << err();
}

TEST_F(Experiment, ConfigShapeErrors) {
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_EQ(run("profile", dir / "bad.json"), kExitConfig);
  EXPECT_EQ(run("profile", dir / "absent.json"), kExitConfig);
  auto j = base();
  j["numeric"] = "float16";
  EXPECT_EQ(run("profile", write(j)), kExitConfig);
  j = base();
  j["dataset"]["split"]["streamCount"] = 500;
  EXPECT_EQ(run("profile", write(j)), kExitConfig);
  EXPECT_EQ(run("explode", write(base())), kExitConfig);
}

TEST_F(Experiment, CustomModelAndWeightFiles) {
  const auto m = seed_weights(build_cifar_net(), 4);
  std::ofstream(dir / "model.json") << Json(build_cifar_net()).dump();
  save_weights(m, dir / "w.dlaw");
  auto j = base();
  j["modelName"] = "model.json";
  j["weights"] = "w.dlaw";
  ASSERT_EQ(run("profile", write(j)), kExitOk) << err();
  EXPECT_EQ(read_json(dir / "out/layer_stats.json")["stats"]["count"], 40 * 64);
}

TEST_F(Experiment, BinaryFlagsAndExitCodes) {
  const std::string cli = IIA_CLI_PATH;
  const auto cfg = write(base());
  const auto out = dir / "elsewhere";
  auto sh = [](const std::string& cmd) {
    const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  };
  EXPECT_EQ(sh(cli + " profile --config " + cfg.string() + " --out " + out.string() + " --seed 9"), 0);
  EXPECT_TRUE(fs::exists(out / "layer_stats.json"));
  EXPECT_EQ(read_json(out / "layer_stats.json")["config"]["seed"], 9);
  EXPECT_EQ(sh(cli + " profile"), kExitConfig);
  EXPECT_EQ(sh(cli), kExitConfig);
  EXPECT_EQ(sh(cli + " --help"), 0);
}

}  // namespace
}  // namespace iia
