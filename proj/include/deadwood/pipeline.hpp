// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// Declarative experiment configuration and the stage runners that chain
// pretraining, pruning, fine-tuning and evaluation.

#pragma once

#include "deadwood/checkpoint.hpp"
#include "deadwood/data.hpp"
#include "deadwood/eval.hpp"
#include "deadwood/finetune.hpp"
#include "deadwood/prune.hpp"
#include "deadwood/train.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dwd {

/// Invalid configuration. `field` is the dotted key, `line` the 1-based line
/// in the source file when known (0 otherwise).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message, int line = 0);
  std::string field;
  int line = 0;
};

/// A stage was run before the stage it consumes.
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::string kind = "idx";  // idx | two-moons | gaussian-blobs | cache
  std::filesystem::path images = "data/mnist5k/images-idx3-ubyte.gz";
  std::filesystem::path labels = "data/mnist5k/labels-idx1-ubyte.gz";
  std::filesystem::path cache;
  Index subset = 0;  // stratified subset size; 0 keeps everything
  Index n = 1000;    // synthetic sample count
  Scalar noise = 0.1;
  Index classes = 3;
  std::array<Scalar, 3> split{0.8, 0.0, 0.2};
  std::uint64_t split_seed = 0;
  Scalar val_fraction = 0.1;  // carved from train for fine-tuning
};

struct EvaluateSpec {
  AttackSpec attack = AttackSpec::pgd(8.0 / 255.0, 10);
  std::vector<Index> sweep_steps;  // empty skips the sweep
  bool throughput = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  DatasetSpec dataset;
  Architecture architecture = Architecture::desk_mlp();
  PretrainConfig pretrain;
  PruneRunConfig prune;
  std::string prune_method = "lagrangian";  // lagrangian | lwm
  FineTuneConfig finetune;
  EvaluateSpec evaluate;
};

/// Every key with its default value.
nlohmann::json default_config_json();

/// Parses a config document. `source` is the original text, used to attach
/// line numbers to errors. Unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j, const std::string& source = "");
nlohmann::json config_to_json(const ExperimentConfig& config);

/// Reads a JSON config file merged over the defaults.
nlohmann::json load_config_document(const std::filesystem::path& path, std::string* source = nullptr);

/// Applies KEY=VALUE where KEY is dotted (prune.target_fraction) and VALUE is
/// JSON, falling back to a plain string.
void apply_override(nlohmann::json& document, const std::string& assignment);

struct DataBundle {
  Dataset train;     // full training split (pretraining, pruning)
  Dataset ft_train;  // train minus the validation carve-out
  Dataset val;
  Dataset test;
};

DataBundle load_data(const DatasetSpec& spec);

/// Dense model trained per config.pretrain (or left at its random
/// initialization when config.prune.from_scratch is set).
MaskedModel run_pretrain(const ExperimentConfig& config, const DataBundle& data, TrainTrace* trace = nullptr);

struct PruneStage {
  MaskedModel student;  // binarized: mask applied, pruned weights zeroed
  BinaryMask mask;
  PruneTrace trace;  // last round for iterative mode
  std::vector<FineTuneTrace> round_finetunes;  // iterative mode only
};

/// Single-shot: one prune run (or the layer-wise magnitude baseline when
/// prune_method is lwm). Iterative: rounds of prune-then-fine-tune with
/// the target raised by iterative_step each round; the final round's
/// fine-tune is left to run_finetune.
PruneStage run_prune(const MaskedModel& dense, const ExperimentConfig& config, const DataBundle& data);

FineTuneTrace run_finetune(MaskedModel& student, const BinaryMask& mask, const MaskedModel& teacher,
                           const ExperimentConfig& config, const DataBundle& data);

struct PipelineOutcome {
  MaskedModel dense;
  TrainTrace pretrain;
  PruneStage pruned;
  FineTuneTrace finetune;
  Scalar dense_eba = 0.0, dense_era = 0.0;
  Scalar pruned_eba = 0.0, pruned_era = 0.0;
  Scalar final_eba = 0.0, final_era = 0.0;
};

/// pretrain -> prune -> fine-tune -> evaluate, in memory. A supplied dense
/// model or prune result is cloned and its stage skipped.
PipelineOutcome run_pipeline(const ExperimentConfig& config, const DataBundle& data,
                             const MaskedModel* dense = nullptr, const PruneStage* pruned = nullptr);

/// run_pipeline plus every artifact under config.output_dir: resolved config,
/// traces, dense/pruned/final reports and the final checkpoint.
PipelineOutcome run_recorded(const ExperimentConfig& config, const DataBundle& data,
                             const MaskedModel* dense = nullptr, const PruneStage* pruned = nullptr);

// On-disk stages used by the command-line tool. Each writes its checkpoint,
// traces and report under config.output_dir.
std::filesystem::path checkpoint_path(const ExperimentConfig& config, Stage stage);
void stage_pretrain(const ExperimentConfig& config);
void stage_prune(const ExperimentConfig& config);
void stage_finetune(const ExperimentConfig& config);
EvalReport stage_eval(const ExperimentConfig& config);

}  // namespace dwd
