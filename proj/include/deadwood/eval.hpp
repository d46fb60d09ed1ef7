// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "deadwood/attacks.hpp"
#include "deadwood/data.hpp"
#include "deadwood/model.hpp"
#include "deadwood/prune.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dwd {

inline constexpr const char* kReportSchema = "dwd-report/1";

/// Worker threads for evaluation: DWD_THREADS if set and positive, else 1.
Index evaluation_threads();

std::vector<int> predict(const MaskedModel& model, const Tensor& x);

/// Percentage of argmax-correct predictions.
Scalar evaluate_eba(const MaskedModel& model, const Dataset& data, Index batch_size = 500);

/// Percentage correct on attacked inputs.
Scalar evaluate_era(const MaskedModel& model, const Dataset& data, const AttackSpec& spec, Index batch_size = 500);

struct SweepRow {
  Index steps = 0;
  Scalar step_size = 0.0;
  Scalar era = 0.0;
};

struct PgdSweep {
  Scalar epsilon_max = 0.0;
  std::vector<SweepRow> rows;
  Scalar mean = 0.0;
  Scalar std_dev = 0.0;  // sample standard deviation
};

/// era for each step count with step size 2.5 * epsilon_max / steps.
PgdSweep pgd_strength_sweep(const MaskedModel& model, const Dataset& data, const std::vector<Index>& steps,
                            Scalar epsilon_max, Index batch_size = 500);

struct DistanceGroup {
  std::string name;
  Index count = 0;
  bool present = false;
  Scalar mean_proxy = 0.0;  // 1 - sum p^2, high near the boundary
  Scalar mean_score = 0.0;  // (sum p^2 - 1/K) / (1 - 1/K), high far from it
};

struct DistanceStats {
  DistanceGroup benign_correct{"benign-correct"};
  DistanceGroup benign_wrong{"benign-wrong"};
  DistanceGroup adv_correct{"adv-correct"};
  DistanceGroup adv_wrong{"adv-wrong"};

  std::vector<const DistanceGroup*> groups() const;
};

/// Per-row distance score in [0, 1].
Array distance_scores(const Tensor& probabilities);

DistanceStats boundary_distance_stats(const MaskedModel& model, const Dataset& data, const AttackSpec& spec,
                                      Index batch_size = 500);

struct SeedSummary {
  std::vector<std::uint64_t> seeds;
  std::vector<Scalar> eba;
  std::vector<Scalar> era;
  Scalar eba_mean = 0.0;
  Scalar eba_std = 0.0;
  Scalar era_mean = 0.0;
  Scalar era_std = 0.0;
};

struct SeedOutcome {
  Scalar eba = 0.0;
  Scalar era = 0.0;
};

/// Runs the experiment once per seed and reports mean and sample std dev.
SeedSummary multi_seed_run(const std::function<SeedOutcome(std::uint64_t)>& experiment,
                           const std::vector<std::uint64_t>& seeds);

Scalar sample_std(const std::vector<Scalar>& values);

struct EvalReport {
  std::string schema = kReportSchema;
  Scalar eba = 0.0;
  Scalar era = 0.0;
  AttackSpec attack;
  std::vector<LayerSparsity> per_layer;
  std::optional<PgdSweep> sweep;
  std::optional<DistanceStats> distance;
  std::optional<Connectivity> connectivity;
  std::uint64_t seed = 0;
  std::map<std::string, Scalar> timings;  // seconds, or seconds per 1000 samples for throughput
  nlohmann::json extra = nlohmann::json::object();

  void validate() const;
};

nlohmann::json attack_spec_to_json(const AttackSpec& spec);
AttackSpec attack_spec_from_json(const nlohmann::json& j);

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// Writes report.json plus per_layer.csv, sweep.csv and distance.csv under dir.
void write_report(const std::filesystem::path& dir, const EvalReport& report);
EvalReport read_report(const std::filesystem::path& dir);

/// Assembles eba, era, per-layer sparsity, connectivity and distance stats.
EvalReport evaluate_model(const MaskedModel& model, const std::optional<BinaryMask>& mask, const Dataset& test,
                          const AttackSpec& spec, std::uint64_t seed);

}  // namespace dwd
