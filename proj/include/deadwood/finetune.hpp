// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// Retraining of the retained weights of a binarized student against the
// original model as teacher.

#pragma once

#include "deadwood/attacks.hpp"
#include "deadwood/data.hpp"
#include "deadwood/losses.hpp"
#include "deadwood/model.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace dwd {

enum class FineTuneVariant {
  kModifiedKd,     // alpha CE + beta soft + gamma CE on FGSM-looping inputs
  kVanillaKd,      // alpha CE + beta soft
  kAdversarialKd,  // beta soft + gamma CE on FGSM-looping inputs
  kPgdFinetune,    // modified KD with PGD inputs
  kFgsmFinetune,   // modified KD with fixed-epsilon FGSM inputs
  kProxyFinetune,  // modified KD with the adversarial proxy as third term
};

std::string to_string(FineTuneVariant variant);
FineTuneVariant finetune_variant_from_string(const std::string& name);

/// The variant's coefficients after zeroing the terms it drops.
KDCoefficients effective_coefficients(FineTuneVariant variant, const KDCoefficients& coef);

/// Vanilla KD selects on validation eba, every other variant on era.
bool selects_on_era(FineTuneVariant variant);

struct FineTuneConfig {
  KDCoefficients coefficients;
  Index max_epochs = 100;
  Index early_stop_patience = 30;
  Scalar lr = 1e-3;
  Index batch_size = 64;
  std::vector<Scalar> epsilon_set;  // empty means default_epsilon_set(epsilon_max)
  FineTuneVariant variant = FineTuneVariant::kModifiedKd;
  Index pgd_steps = 10;             // pgd-finetune inputs
  AttackSpec validation_attack = AttackSpec::pgd(8.0 / 255.0, 10);
  std::uint64_t seed = 0;

  void validate() const;
};

struct FineTuneEpoch {
  Index epoch = 0;
  Scalar hard = 0.0;
  Scalar soft = 0.0;
  Scalar atk = 0.0;
  Scalar total = 0.0;
  Scalar val_eba = 0.0;
  Scalar val_era = 0.0;
};

struct FineTuneTrace {
  std::vector<FineTuneEpoch> epochs;
  Index best_epoch = -1;
  Scalar best_metric = 0.0;
  KDCoefficients coefficients;  // effective

  void write_csv(const std::filesystem::path& path) const;
};

class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Throws InvariantViolation if a weight at a pruned position is not exactly 0.
void check_mask_conservation(const MaskedModel& model, const BinaryMask& mask);

/// Trains `student` in place and leaves it at the best validation epoch.
/// `student` must already carry `mask` (see apply_binary_mask). The teacher
/// is only read; any change to it is an InvariantViolation.
FineTuneTrace fine_tune(MaskedModel& student, const BinaryMask& mask, const MaskedModel& teacher,
                        const Dataset& train, const Dataset& val, const FineTuneConfig& config);

}  // namespace dwd
