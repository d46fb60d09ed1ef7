// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "deadwood/attacks.hpp"
#include "deadwood/data.hpp"
#include "deadwood/model.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace dwd {

struct PretrainConfig {
  Index epochs = 10;
  Scalar lr = 1e-3;
  Index batch_size = 64;
  std::uint64_t seed = 0;
  /// Adds CE on FGSM-looping inputs: 0.5 CE(x) + 0.5 CE(x + eps).
  bool robust = false;
  AttackSpec attack = AttackSpec::fgsm_looping(8.0 / 255.0);

  void validate() const;
};

struct TrainEpoch {
  Index epoch = 0;
  Scalar loss = 0.0;  // mean batch loss
  Scalar train_eba = 0.0;
};

struct TrainTrace {
  std::vector<TrainEpoch> epochs;
  void write_csv(const std::filesystem::path& path) const;
};

/// Trains weights and biases of the dense model in place.
TrainTrace pretrain(MaskedModel& model, const Dataset& data, const PretrainConfig& config);

}  // namespace dwd
