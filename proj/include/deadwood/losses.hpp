// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "deadwood/model.hpp"
#include "deadwood/tensor.hpp"

#include <span>
#include <vector>

namespace dwd {

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Mean over rows of 1 - sum_k p_k^2. Rows must be probability vectors
/// (non-negative, summing to 1 within 1e-6).
Tensor adversarial_proxy(const Tensor& probabilities);

/// Per-row 1 - sum_k p_k^2 without the normalization check, for reporting.
Array adversarial_proxy_rows(const Tensor& probabilities);

/// |sum_i b_i^2 - k'| over every mask tensor.
Tensor pruning_proxy(std::span<const Tensor> masks, Index k_prime);
Tensor pruning_proxy(const Tensor& mask, Index k_prime);

struct LagrangianState {
  Scalar lambda_a = 0.0;
  Scalar lambda_p = 0.0;
  /// rho for epoch e is rho_schedule[min(e, size-1)].
  std::vector<Scalar> rho_schedule{1e-3};
  Index k_prime = 0;

  Scalar rho(Index epoch) const;
};

struct LagrangianTerms {
  Tensor accuracy;  // cross entropy, or a zero constant when excluded
  Tensor adv;       // adversarial proxy
  Tensor prune;     // pruning proxy
  Tensor total;
};

/// CE + lambda_a |L_adv| + lambda_p |sum b^2 - k'| from one forward pass.
/// include_accuracy=false drops the CE term.
LagrangianTerms lagrangian_loss(const MaskedModel& model, const Tensor& x, std::span<const int> labels,
                                const LagrangianState& state, bool include_accuracy = true);

/// lambda_a += rho |adv_value|, lambda_p += rho |prune_value|.
LagrangianState dual_ascent_update(const LagrangianState& state, Index epoch, Scalar adv_value, Scalar prune_value);

struct KDCoefficients {
  Scalar alpha = 0.351;
  Scalar beta = 0.526;
  Scalar gamma = 0.240;
  Scalar temperature = 4.0;
  Scalar epsilon_max = 8.0 / 255.0;

  void validate() const;
};

/// KL(softmax_T(teacher) || softmax_T(student)) * T^2, batch mean.
Tensor kd_soft_loss(const Tensor& teacher_logits, const Tensor& student_logits, Scalar temperature);

struct KDTerms {
  Tensor hard;
  Tensor soft;
  Tensor atk;
  Tensor total;
};

/// alpha CE(student(x), y) + beta soft(teacher(x), student(x)) + gamma CE(student(x_perturbed), y).
/// Terms with a zero coefficient are still evaluated for reporting.
KDTerms kd_finetune_loss(const MaskedModel& student, const MaskedModel& teacher, const Tensor& x,
                         std::span<const int> labels, const Tensor& x_perturbed, const KDCoefficients& coef);

}  // namespace dwd
