// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "deadwood/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dwd {

struct AdamOptions {
  Scalar lr = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
};

/// First/second moment buffers, one pair per parameter, plus the shared step
/// counter. Buffers are sized lazily on the first step.
struct AdamState {
  std::vector<Array> first_moment;
  std::vector<Array> second_moment;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update applied in place to every parameter.
/// Throws ContractError if a parameter has no populated gradient.
void adam_step(std::span<Tensor> params, const AdamOptions& options, AdamState& state);

void zero_grads(std::span<Tensor> params);

}  // namespace dwd
