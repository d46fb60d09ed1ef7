// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/pipeline.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <sys/wait.h>

namespace dwd {
namespace {

using nlohmann::json;

const std::filesystem::path kScratch = std::filesystem::temp_directory_path() / "deadwood-unit" / "pipeline";

json tiny_config(const std::string& run) {
  json j = json::parse(R"({
    "seed": 3,
    "dataset": {"kind": "gaussian-blobs", "n": 300, "noise": 1.0, "classes": 3, "split": [0.8, 0.0, 0.2]},
    "architecture": {"name": "tiny", "input_shape": [2],
                     "layers": [{"kind": "dense", "in": 2, "out": 12}, {"kind": "relu"},
                                {"kind": "dense", "in": 12, "out": 3}]},
    "pretrain": {"epochs": 15, "lr": 0.02},
    "prune": {"target_fraction": 0.5, "max_epochs": 10, "lr": 0.05, "rho": [0.01]},
    "finetune": {"epsilon_max": 0.05, "max_epochs": 3, "patience": 3,
                 "validation_attack": {"family": "pgd", "epsilon_max": 0.05, "num_steps": 3}},
    "evaluate": {"attack": {"family": "pgd", "epsilon_max": 0.05, "num_steps": 3}}
  })");
  j["output_dir"] = (kScratch / run).string();
  return j;
}

struct CliResult {
  int code;
  std::string output;
};

CliResult cli(const std::string& args) {
  const std::string cmd = std::string(DWD_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), out};
}

std::string write_config(const json& j, const std::string& name) {
  std::filesystem::create_directories(kScratch);
  const auto path = kScratch / name;
  std::ofstream(path) << j.dump(2);
  return path.string();
}

TEST(Config, DefaultsParse) {
  const ExperimentConfig c = config_from_json(default_config_json());
  EXPECT_EQ(c.prune.rho_schedule, (std::vector<Scalar>{1e-3}));
  EXPECT_EQ(c.finetune.coefficients.alpha, 0.351);
  EXPECT_TRUE(c.architecture == Architecture::desk_mlp());
  EXPECT_EQ(c.prune_method, "lagrangian");
}

TEST(Config, RoundTripsThroughJson) {
  const ExperimentConfig c = config_from_json(tiny_config("rt"));
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  EXPECT_EQ(c.prune.target_fraction, 0.5);
  EXPECT_EQ(c.finetune.validation_attack.num_steps, 3);
  EXPECT_EQ(c.evaluate.attack.epsilon_max, 0.05);
}

TEST(Config, SeedIsMandatory) {
  json j = tiny_config("x");
  j.erase("seed");
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field, "seed");
  }
}

TEST(Config, UnknownKeyCarriesLine) {
  const std::string text = "{\n  \"seed\": 1,\n  \"prune\": {\n    \"lr\": 0.1,\n    \"rate\": 2\n  }\n}\n";
  try {
    config_from_json(json::parse(text), text);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field, "prune.rate");
    EXPECT_EQ(e.line, 5);
  }
}

TEST(Config, TypeAndRangeErrors) {
  const std::string text = "{\n  \"seed\": 1,\n  \"pretrain\": {\n    \"epochs\": \"many\"\n  }\n}";
  try {
    config_from_json(json::parse(text), text);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field, "pretrain.epochs");
    EXPECT_EQ(e.line, 4);
  }
  json j = tiny_config("x");
  j["prune"]["target_fraction"] = 1.0;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = tiny_config("x");
  j["dataset"]["split"] = {0.5, 0.5, 0.5};
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = tiny_config("x");
  j["finetune"]["variant"] = "distill";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = tiny_config("x");
  j["architecture"] = "resnet";
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, Overrides) {
  json j = tiny_config("x");
  apply_override(j, "prune.target_fraction=0.95");
  apply_override(j, "finetune.variant=vanilla-kd");
  apply_override(j, "prune.rho=[0.1,0.2]");
  const ExperimentConfig c = config_from_json(j);
  EXPECT_EQ(c.prune.target_fraction, 0.95);
  EXPECT_EQ(c.finetune.variant, FineTuneVariant::kVanillaKd);
  EXPECT_EQ(c.prune.rho_schedule, (std::vector<Scalar>{0.1, 0.2}));
  EXPECT_THROW(apply_override(j, "novalue"), ConfigError);
}

TEST(Config, BundledConfigsParse) {
  for (const char* name : {"desk_mlp.json", "desk_cnn.json", "two_moons.json"}) {
    std::string source;
    const json doc = load_config_document(std::filesystem::path(DWD_CONFIG_DIR) / name, &source);
    EXPECT_NO_THROW(config_from_json(doc, source)) << name;
  }
}

TEST(Pipeline, RerunIsBitExact) {
  const ExperimentConfig c = config_from_json(tiny_config("rerun"));
  const DataBundle data = load_data(c.dataset);
  const PipelineOutcome a = run_pipeline(c, data);
  const PipelineOutcome b = run_pipeline(c, data);
  EXPECT_EQ(a.final_eba, b.final_eba);
  EXPECT_EQ(a.final_era, b.final_era);
  EXPECT_TRUE((a.pruned.student.flat_weights() == b.pruned.student.flat_weights()).all());
  EXPECT_EQ(a.pruned.mask, b.pruned.mask);
}

TEST(Pipeline, IterativeModeRunsRounds) {
  json j = tiny_config("iter");
  j["prune"]["mode"] = "iterative";
  j["prune"]["iterative_step"] = 0.25;
  const ExperimentConfig c = config_from_json(j);
  const DataBundle data = load_data(c.dataset);
  const PruneStage s = run_prune(run_pretrain(c, data), c, data);
  EXPECT_EQ(s.round_finetunes.size(), 1u);
  EXPECT_EQ(s.mask.retained_count, retained_target(s.student.maskable_count(), 0.5));
}

TEST(Pipeline, RecordedRunLeavesFullAuditTrail) {
  const ExperimentConfig c = config_from_json(tiny_config("recorded"));
  std::filesystem::remove_all(c.output_dir);
  run_recorded(c, load_data(c.dataset));
  for (const char* f : {"config.resolved.json", "pretrain_trace.csv", "prune_trace.csv", "finetune_trace.csv",
                        "pretrained.dwd", "finetuned.dwd", "reports/pretrained/report.json",
                        "reports/fine-tuned/report.json"}) {
    EXPECT_TRUE(std::filesystem::exists(c.output_dir / f)) << f;
  }
  std::ifstream in(c.output_dir / "config.resolved.json");
  EXPECT_EQ(config_to_json(config_from_json(json::parse(in))), config_to_json(c));
}

TEST(Cli, UnknownSubcommandIsUsageError) {
  const CliResult r = cli("frobnicate");
  EXPECT_EQ(r.code, 64);
  EXPECT_NE(r.output.find("Usage"), std::string::npos);
  EXPECT_EQ(cli("").code, 64);
  EXPECT_EQ(cli("ablate no-such-variant --seed 1").code, 64);
}

TEST(Cli, MissingDatasetIsConfigError) {
  json j = tiny_config("missing");
  j["dataset"] = {{"kind", "idx"}, {"images", "/nonexistent/images.gz"}, {"labels", "/nonexistent/labels.gz"}};
  const CliResult r = cli("--config " + write_config(j, "missing.json") + " pretrain");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("dataset.images"), std::string::npos) << r.output;
}

TEST(Cli, StageOrderIsEnforced) {
  const json j = tiny_config("order");
  std::filesystem::remove_all(j["output_dir"].get<std::string>());
  const std::string cfg = write_config(j, "order.json");
  EXPECT_EQ(cli("--config " + cfg + " prune").code, 3);
  EXPECT_EQ(cli("--config " + cfg + " finetune").code, 3);
  EXPECT_EQ(cli("--config " + cfg + " eval").code, 3);
}

TEST(Cli, ChainedStagesWithZeroBudget) {
  const json j = tiny_config("chain");
  const std::filesystem::path out = j["output_dir"].get<std::string>();
  std::filesystem::remove_all(out);
  const std::string cfg = write_config(j, "chain.json");
  ASSERT_EQ(cli("--config " + cfg + " pretrain").code, 0);
  ASSERT_EQ(cli("--config " + cfg + " prune").code, 0);
  const CliResult r = cli("--config " + cfg + " --override evaluate.attack.epsilon_max=0 eval");
  ASSERT_EQ(r.code, 0) << r.output;
  const EvalReport report = read_report(out / "reports" / "eval");
  EXPECT_EQ(report.era, report.eba);
  EXPECT_EQ(report.extra["stage"], "pruned");
  ASSERT_EQ(cli("--config " + cfg + " finetune").code, 0);
  EXPECT_TRUE(std::filesystem::exists(out / "finetuned.dwd"));
  EXPECT_TRUE(std::filesystem::exists(out / "config.resolved.json"));
}

TEST(Cli, SeedFlagOverridesConfig) {
  json j = tiny_config("seedflag");
  j.erase("seed");
  const std::string cfg = write_config(j, "noseed.json");
  EXPECT_EQ(cli("--config " + cfg + " pretrain").code, 2);
  EXPECT_EQ(cli("--config " + cfg + " --seed 11 pretrain").code, 0);
  std::ifstream in(kScratch / "seedflag" / "config.resolved.json");
  EXPECT_EQ(json::parse(in)["seed"], 11);
}

TEST(Cli, AblationKdGrid) {
  const json j = tiny_config("grid");
  std::filesystem::remove_all(j["output_dir"].get<std::string>());
  const CliResult r = cli("--config " + write_config(j, "grid.json") + " reproduce ablation-kd");
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(std::filesystem::path(j["output_dir"].get<std::string>()) / "ablation-kd" / "summary.csv");
  std::string line;
  std::getline(in, line);
  std::map<std::string, int> per_variant;
  std::set<std::string> targets;
  while (std::getline(in, line)) {
    std::stringstream row(line);
    std::string suite, name, target, variant;
    std::getline(row, suite, ',');
    std::getline(row, name, ',');
    std::getline(row, target, ',');
    std::getline(row, variant, ',');
    ++per_variant[variant];
    targets.insert(target);
  }
  EXPECT_EQ(per_variant, (std::map<std::string, int>{{"adversarial-kd", 3}, {"modified-kd", 3}, {"vanilla-kd", 3}}));
  EXPECT_EQ(targets, (std::set<std::string>{"0.90", "0.95", "0.99"}));
}

}  // namespace
}  // namespace dwd
