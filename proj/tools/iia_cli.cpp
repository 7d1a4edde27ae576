#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "iia/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Profile, forge, attack and defend an inference pipeline."};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  for (const char* name : {"profile", "forge", "attack", "defend", "report"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "Experiment JSON")->required();
    sub->add_option("--out", out, "Output directory (overrides outputDir)");
    sub->add_option("--seed", seed, "Master seed (overrides seed)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : iia::kExitConfig;
  }

  const auto* sub = app.get_subcommands().front();
  iia::Overrides ov;
  if (!out.empty()) ov.output_dir = out;
  if (sub->count("--seed")) ov.seed = seed;
  return iia::run_command(sub->get_name(), config, ov, std::cout, std::cerr);
}
