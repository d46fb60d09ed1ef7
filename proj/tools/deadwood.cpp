// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// deadwood: experiment runner.
//
//   deadwood [--config PATH] [--seed N] [--out DIR] [--override KEY=VALUE]...
//            {pretrain | prune | finetune | eval | ablate VARIANT | reproduce SUITE}

#include "deadwood/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using dwd::ExperimentConfig;
using dwd::Scalar;
using nlohmann::json;

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;
constexpr int kExitUsage = 64;
constexpr Scalar kMissing = std::numeric_limits<Scalar>::quiet_NaN();

struct Row {
  std::string name;
  Scalar target = kMissing;
  std::string variant;
  std::uint64_t seed = 0;
  Scalar dense_eba = kMissing, dense_era = kMissing;
  Scalar pruned_eba = kMissing, pruned_era = kMissing;
  Scalar eba = kMissing, era = kMissing;
  std::string connected = "-";
  Scalar seconds = kMissing;
};

std::string cell(Scalar v, int precision = 2) {
  if (std::isnan(v)) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

class Summary {
 public:
  explicit Summary(std::string suite) : suite_(std::move(suite)) {}

  void add(Row row) {
    std::cerr << "[" << suite_ << "] " << row.name << ": eba " << cell(row.eba) << " era " << cell(row.era)
              << " (" << cell(row.seconds, 1) << " s)\n";
    rows_.push_back(std::move(row));
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream csv(dir / "summary.csv");
    csv << "suite,name,target,variant,seed,dense_eba,dense_era,pruned_eba,pruned_era,eba,era,connected,seconds\n";
    for (const Row& r : rows_) {
      csv << suite_ << ',' << r.name << ',' << cell(r.target, 2) << ',' << r.variant << ',' << r.seed << ','
          << cell(r.dense_eba) << ',' << cell(r.dense_era) << ',' << cell(r.pruned_eba) << ',' << cell(r.pruned_era)
          << ',' << cell(r.eba) << ',' << cell(r.era) << ',' << r.connected << ',' << cell(r.seconds, 3) << '\n';
    }
    std::ofstream md(dir / "summary.md");
    md << "# " << suite_ << "\n\n"
       << "| name | target | variant | seed | dense eba | dense era | pruned eba | pruned era | eba | era | connected "
          "| seconds |\n"
       << "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
    for (const Row& r : rows_) {
      md << "| " << r.name << " | " << cell(r.target) << " | " << r.variant << " | " << r.seed << " | "
         << cell(r.dense_eba) << " | " << cell(r.dense_era) << " | " << cell(r.pruned_eba) << " | "
         << cell(r.pruned_era) << " | " << cell(r.eba) << " | " << cell(r.era) << " | " << r.connected << " | "
         << cell(r.seconds, 1) << " |\n";
    }
    for (const auto& [label, text] : notes_) md << "\n" << label << ": " << text << "\n";
  }

  void note(const std::string& label, const std::string& text) { notes_[label] = text; }

 private:
  std::string suite_;
  std::vector<Row> rows_;
  std::map<std::string, std::string> notes_;
};

Scalar seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<Scalar>(std::chrono::steady_clock::now() - start).count();
}

Row outcome_row(const std::string& name, const ExperimentConfig& c, const dwd::PipelineOutcome& o, Scalar seconds) {
  Row r;
  r.name = name;
  r.target = c.prune.target_fraction;
  r.variant = to_string(c.finetune.variant);
  r.seed = c.seed;
  r.dense_eba = o.dense_eba;
  r.dense_era = o.dense_era;
  r.pruned_eba = o.pruned_eba;
  r.pruned_era = o.pruned_era;
  r.eba = o.final_eba;
  r.era = o.final_era;
  r.connected = dwd::connectivity_check(o.pruned.student, o.pruned.mask).connected ? "yes" : "no";
  r.seconds = seconds;
  return r;
}

Row recorded(const std::string& name, const ExperimentConfig& c, const dwd::DataBundle& data,
             const dwd::MaskedModel* dense = nullptr, const dwd::PruneStage* pruned = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  const dwd::PipelineOutcome o = dwd::run_recorded(c, data, dense, pruned);
  return outcome_row(name, c, o, seconds_since(start));
}

std::string target_tag(Scalar f) { return std::to_string(static_cast<int>(std::lround(f * 100))); }

// Applies an ablation variant to the config; false when the name is unknown.
bool apply_variant(ExperimentConfig& c, const std::string& variant) {
  if (variant == "no-accuracy") {
    c.prune.include_accuracy = false;
  } else if (variant == "lwm") {
    c.prune_method = "lwm";
  } else if (variant == "attack-loss") {
    c.prune.robustness = dwd::RobustnessTerm::kAttackLoss;
  } else if (variant == "iterative") {
    c.prune.mode = dwd::PruneMode::kIterative;
  } else if (variant == "from-scratch") {
    c.prune.from_scratch = true;
  } else {
    try {
      c.finetune.variant = dwd::finetune_variant_from_string(variant);
    } catch (const dwd::ContractError&) {
      return false;
    }
  }
  return true;
}

const std::vector<std::string> kAblations{"no-accuracy",    "lwm",           "attack-loss",   "iterative",
                                          "from-scratch",   "modified-kd",   "vanilla-kd",    "adversarial-kd",
                                          "pgd-finetune",   "fgsm-finetune", "proxy-finetune"};
const std::vector<std::string> kSuites{"desk",     "ablation-kd", "ablation-loss", "attacks",
                                       "pgd-sweep", "seeds",       "connectivity"};

ExperimentConfig with(const ExperimentConfig& base, const std::filesystem::path& sub,
                      const std::function<void(ExperimentConfig&)>& edit = {}) {
  ExperimentConfig c = base;
  c.output_dir = base.output_dir / sub;
  if (edit) edit(c);
  return c;
}

void suite_desk(const ExperimentConfig& base, const dwd::DataBundle& data, Summary& s) {
  const dwd::MaskedModel dense = dwd::run_pretrain(base, data);
  for (Scalar f : {0.90, 0.95, 0.99}) {
    const auto c = with(base, "desk-" + target_tag(f), [&](auto& x) { x.prune.target_fraction = f; });
    s.add(recorded("deadwood-" + target_tag(f), c, data, &dense));
  }
}

void suite_ablation_kd(const ExperimentConfig& base, const dwd::DataBundle& data, Summary& s) {
  const dwd::MaskedModel dense = dwd::run_pretrain(base, data);
  for (Scalar f : {0.90, 0.95, 0.99}) {
    ExperimentConfig pc = base;
    pc.prune.target_fraction = f;
    const dwd::PruneStage pruned = dwd::run_prune(dense, pc, data);
    for (const char* v : {"modified-kd", "vanilla-kd", "adversarial-kd"}) {
      const auto c = with(pc, std::string(v) + "-" + target_tag(f), [&](auto& x) { apply_variant(x, v); });
      s.add(recorded(std::string(v) + "-" + target_tag(f), c, data, &dense, &pruned));
    }
  }
}

void suite_ablation_loss(const ExperimentConfig& base, const dwd::DataBundle& data, Summary& s) {
  const dwd::MaskedModel dense = dwd::run_pretrain(base, data);
  for (const char* v : {"full", "no-accuracy", "attack-loss", "lwm"}) {
    const auto c = with(base, std::string("loss-") + v, [&](auto& x) { apply_variant(x, v); });
    s.add(recorded(v, c, data, &dense));
  }
}

void suite_attacks(const ExperimentConfig& base, const dwd::DataBundle& data, Summary& s) {
  const dwd::MaskedModel dense = dwd::run_pretrain(base, data);
  const dwd::PruneStage pruned = dwd::run_prune(dense, base, data);
  for (const char* v : {"modified-kd", "fgsm-finetune", "pgd-finetune"}) {
    const auto c = with(base, std::string("attack-") + v, [&](auto& x) { apply_variant(x, v); });
    s.add(recorded(v, c, data, &dense, &pruned));
  }
  const Scalar eps = base.evaluate.attack.epsilon_max;
  const dwd::AttackSpec specs[] = {dwd::AttackSpec::fgsm(eps), dwd::AttackSpec::fgsm_looping(eps),
                                   dwd::AttackSpec::pgd(eps, 10)};
  for (const dwd::AttackSpec& spec : specs) {
    Row r;
    r.name = "throughput-" + to_string(spec.family);
    r.seed = base.seed;
    r.seconds = dwd::attack_throughput(dense, data.test, spec);
    s.add(r);
  }
  s.note("throughput rows", "seconds per 1000 adversarial examples on the dense model");
}

void suite_pgd_sweep(const ExperimentConfig& base, const dwd::DataBundle& data, Summary& s) {
  const auto c = with(base, "pgd-sweep");
  const auto start = std::chrono::steady_clock::now();
  const dwd::PipelineOutcome o = dwd::run_recorded(c, data);
  s.add(outcome_row("pipeline", c, o, seconds_since(start)));
  const std::vector<dwd::Index> steps = base.evaluate.sweep_steps.empty() ? std::vector<dwd::Index>{10, 50, 100}
                                                                          : base.evaluate.sweep_steps;
  const dwd::PgdSweep sweep =
      dwd::pgd_strength_sweep(o.pruned.student, data.test, steps, base.evaluate.attack.epsilon_max);
  for (const dwd::SweepRow& row : sweep.rows) {
    Row r;
    r.name = "pgd-" + std::to_string(row.steps);
    r.seed = base.seed;
    r.era = row.era;
    s.add(r);
  }
  s.note("era across steps", "mean " + cell(sweep.mean) + ", std dev " + cell(sweep.std_dev, 3));
}

void suite_seeds(const ExperimentConfig& base, const dwd::DataBundle& data, Summary& s) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 5; ++i) seeds.push_back(base.seed + i);
  const dwd::SeedSummary summary = dwd::multi_seed_run(
      [&](std::uint64_t seed) {
        ExperimentConfig c = with(base, "seed-" + std::to_string(seed));
        c.seed = c.pretrain.seed = c.prune.seed = c.finetune.seed = seed;
        const Row r = recorded("seed-" + std::to_string(seed), c, data);
        s.add(r);
        return dwd::SeedOutcome{r.eba, r.era};
      },
      seeds);
  s.note("eba", "mean " + cell(summary.eba_mean) + ", std dev " + cell(summary.eba_std, 3));
  s.note("era", "mean " + cell(summary.era_mean) + ", std dev " + cell(summary.era_std, 3));
}

void suite_connectivity(const ExperimentConfig& base, const dwd::DataBundle& data, Summary& s) {
  for (std::uint64_t i = 0; i < 5; ++i) {
    ExperimentConfig seeded = base;
    seeded.seed = seeded.pretrain.seed = seeded.prune.seed = seeded.finetune.seed = base.seed + i;
    const dwd::MaskedModel dense = dwd::run_pretrain(seeded, data);
    for (const char* v : {"full", "no-accuracy", "lwm"}) {
      ExperimentConfig c = seeded;
      apply_variant(c, v);
      const auto start = std::chrono::steady_clock::now();
      const dwd::PruneStage stage = dwd::run_prune(dense, c, data);
      Row r;
      r.name = std::string(v) + "-seed" + std::to_string(c.seed);
      r.target = c.prune.target_fraction;
      r.variant = v;
      r.seed = c.seed;
      r.pruned_eba = dwd::evaluate_eba(stage.student, data.test);
      r.eba = r.pruned_eba;
      r.connected = dwd::connectivity_check(stage.student, stage.mask).connected ? "yes" : "no";
      r.seconds = seconds_since(start);
      s.add(r);
    }
  }
  s.note("eba", "binarized masks before fine-tuning");
}

ExperimentConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed,
                                const std::string& out, const std::vector<std::string>& overrides) {
  std::string source;
  json doc = path.empty() ? json::object() : dwd::load_config_document(path, &source);
  if (!doc.is_object()) throw dwd::ConfigError("", "config must be a JSON object", 1);
  for (const std::string& o : overrides) dwd::apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  if (!out.empty()) doc["output_dir"] = out;
  return dwd::config_from_json(doc, source);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust pruning experiments: pretrain, prune, fine-tune, evaluate."};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON experiment config");
  app.add_option("--seed", seed, "experiment seed (overrides the config)");
  app.add_option("--out", out, "output directory (overrides the config)");
  app.add_option("--override", overrides, "KEY=VALUE with a dotted key, e.g. prune.target_fraction=0.95")
      ->allow_extra_args(false);

  app.add_subcommand("pretrain", "train the dense model");
  app.add_subcommand("prune", "prune the pretrained checkpoint");
  app.add_subcommand("finetune", "distil the pruned checkpoint from the pretrained one");
  app.add_subcommand("eval", "evaluate the latest checkpoint in the run directory");
  std::string variant;
  app.add_subcommand("ablate", "run the full pipeline with one ablation")
      ->add_option("variant", variant, "ablation variant")
      ->required()
      ->check(CLI::IsMember(kAblations));
  std::string suite;
  app.add_subcommand("reproduce", "run a desk-scale experiment suite")
      ->add_option("suite", suite, "suite name")
      ->required()
      ->check(CLI::IsMember(kSuites));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "deadwood: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    ExperimentConfig config = resolve_config(config_path, seed, out, overrides);
    if (command == "pretrain") {
      dwd::stage_pretrain(config);
    } else if (command == "prune") {
      dwd::stage_prune(config);
    } else if (command == "finetune") {
      dwd::stage_finetune(config);
    } else if (command == "eval") {
      const dwd::EvalReport r = dwd::stage_eval(config);
      std::cout << "eba " << cell(r.eba) << " era " << cell(r.era) << "\n";
    } else if (command == "ablate") {
      apply_variant(config, variant);
      config.output_dir /= "ablate-" + variant;
      const dwd::DataBundle data = dwd::load_data(config.dataset);
      Summary s("ablate-" + variant);
      s.add(recorded(variant, config, data));
      s.write(config.output_dir);
    } else {
      const std::map<std::string, std::function<void(const ExperimentConfig&, const dwd::DataBundle&, Summary&)>>
          suites{{"desk", suite_desk},       {"ablation-kd", suite_ablation_kd}, {"ablation-loss", suite_ablation_loss},
                 {"attacks", suite_attacks}, {"pgd-sweep", suite_pgd_sweep},     {"seeds", suite_seeds},
                 {"connectivity", suite_connectivity}};
      config.output_dir /= suite;
      const dwd::DataBundle data = dwd::load_data(config.dataset);
      Summary s(suite);
      suites.at(suite)(config, data, s);
      s.write(config.output_dir);
      std::cout << "summary written to " << (config.output_dir / "summary.md").string() << "\n";
    }
  } catch (const dwd::ConfigError& e) {
    std::cerr << "deadwood: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const dwd::StageError& e) {
    std::cerr << "deadwood: stage error: " << e.what() << "\n";
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "deadwood: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
