// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// Lagrangian-dual sparsification of a relaxed mask, followed by global
// binarization and structural analysis of the retained weights.

#pragma once

#include "deadwood/attacks.hpp"
#include "deadwood/data.hpp"
#include "deadwood/losses.hpp"
#include "deadwood/model.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dwd {

enum class PruneMode { kSingleShot, kIterative };

/// Which robustness term enters the Lagrangian during pruning.
enum class RobustnessTerm {
  kProxy,        // 1 - sum p^2 on the clean batch
  kAttackLoss,   // CE on an FGSM-looping perturbed batch
};

struct PruneRunConfig {
  Scalar target_fraction = 0.9;
  Index max_epochs = 30;
  Scalar lr = 1e-2;
  std::vector<Scalar> rho_schedule{1e-3};
  std::uint64_t seed = 0;
  PruneMode mode = PruneMode::kSingleShot;
  Scalar iterative_step = 0.2;
  Index batch_size = 64;
  Scalar sparsity_threshold = 0.01;
  /// Samples used for the epoch-end multiplier update; 0 means all.
  Index dual_subsample = 0;
  bool include_accuracy = true;
  RobustnessTerm robustness = RobustnessTerm::kProxy;
  AttackSpec attack = AttackSpec::fgsm_looping(8.0 / 255.0);
  /// Start from freshly initialized weights instead of the given model.
  bool from_scratch = false;

  void validate() const;
};

struct PruneEpoch {
  Index epoch = 0;
  Scalar loss = 0.0;         // full Lagrangian on the dual subsample
  Scalar accuracy_loss = 0.0;
  Scalar adv_proxy = 0.0;
  Scalar prune_proxy = 0.0;
  Scalar lambda_a = 0.0;     // after the epoch's dual update
  Scalar lambda_p = 0.0;
  Scalar sparsity = 0.0;     // fraction of |b| below the threshold
};

struct PruneTrace {
  std::vector<PruneEpoch> epochs;
  Index k = 0;
  Index k_prime = 0;
  bool reached_target = false;

  void write_csv(const std::filesystem::path& path) const;
};

class PruneDivergence : public std::runtime_error {
 public:
  PruneDivergence(const std::string& what, PruneTrace trace) : std::runtime_error(what), trace(std::move(trace)) {}
  PruneTrace trace;
};

struct PruneResult {
  BinaryMask mask;
  PruneTrace trace;
};

/// Trains the relaxed mask of `model` in place (weights frozen, biases
/// trainable) and binarizes it to the k' largest |b|. Stops once the soft
/// sparsity reaches the target or after max_epochs.
PruneResult prune(MaskedModel& model, const Dataset& data, const PruneRunConfig& config);

/// prune() without the cross-entropy term.
PruneResult ablate_no_accuracy(MaskedModel& model, const Dataset& data, PruneRunConfig config);

/// Mean |b| over retained indices / mean |b| over removed ones; +inf when
/// nothing is removed.
Scalar magnitude_separation(const MaskedModel& model, const BinaryMask& mask);
Scalar magnitude_separation(const Array& b, const BinaryMask& mask);

struct Connectivity {
  bool connected = true;
  /// Parameter-layer positions (0-based, in order) where no retained weight
  /// lies on an input-to-output path.
  std::vector<Index> broken_layers;
};

/// Forward and backward reachability over retained weights. Convolutions are
/// analysed at channel level: channel i feeds channel o if any retained
/// kernel weight connects them.
Connectivity connectivity_check(const MaskedModel& model, const BinaryMask& mask);

struct LayerSparsity {
  Index layer = 0;  // parameter-layer position
  std::string kind;
  Index total = 0;
  Index pruned = 0;
  Scalar pruned_fraction = 0.0;
};

std::vector<LayerSparsity> per_layer_sparsity(const BinaryMask& mask, const MaskedModel& model);

/// Global top-k' by |theta|.
BinaryMask prune_lwm_baseline(const MaskedModel& model, Scalar target_fraction);

}  // namespace dwd
