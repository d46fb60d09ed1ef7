// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dwd {

namespace {

Index rows_of(const Tensor& t) { return t.rank() == 1 ? 1 : t.dim(0); }
Index cols_of(const Tensor& t) { return t.rank() == 1 ? t.dim(0) : t.dim(1); }

Tensor one_hot(std::span<const int> labels, Index classes, Shape shape) {
  Array v = Array::Zero(static_cast<Index>(labels.size()) * classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
    v[static_cast<Index>(i) * classes + labels[i]] = 1.0;
  }
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Index n = rows_of(logits);
  if (logits.rank() < 1 || logits.rank() > 2) throw DimensionError("cross_entropy expects rank-1 or rank-2 logits");
  if (static_cast<Index>(labels.size()) != n) throw DimensionError("cross_entropy: label count differs from batch");
  const Tensor picked = mul(log_softmax(logits), one_hot(labels, cols_of(logits), logits.shape()));
  return scale(sum(picked), -1.0 / static_cast<Scalar>(n));
}

Tensor adversarial_proxy(const Tensor& probabilities) {
  const ConstMatrixMap p = probabilities.matrix_view();
  if ((p.array() < 0.0).any()) throw ContractError("adversarial_proxy: negative probability");
  const Eigen::VectorXd row_sums = p.rowwise().sum();
  if (((row_sums.array() - 1.0).abs() > 1e-6).any()) throw ContractError("adversarial_proxy: row does not sum to 1");
  const auto n = static_cast<Scalar>(p.rows());
  return 1.0 - scale(sum(square(probabilities)), 1.0 / n);
}

Array adversarial_proxy_rows(const Tensor& probabilities) {
  const ConstMatrixMap p = probabilities.matrix_view();
  return 1.0 - p.array().square().rowwise().sum();
}

Tensor pruning_proxy(std::span<const Tensor> masks, Index k_prime) {
  if (masks.empty()) throw ContractError("pruning_proxy: no masks");
  Tensor total = sum(square(masks[0]));
  for (std::size_t i = 1; i < masks.size(); ++i) total = total + sum(square(masks[i]));
  return abs(total - static_cast<Scalar>(k_prime));
}

Tensor pruning_proxy(const Tensor& mask, Index k_prime) { return pruning_proxy(std::span<const Tensor>(&mask, 1), k_prime); }

Scalar LagrangianState::rho(Index epoch) const {
  if (rho_schedule.empty()) throw ContractError("empty rho schedule");
  return rho_schedule[static_cast<std::size_t>(std::min<Index>(epoch, static_cast<Index>(rho_schedule.size()) - 1))];
}

LagrangianTerms lagrangian_loss(const MaskedModel& model, const Tensor& x, std::span<const int> labels,
                                const LagrangianState& state, bool include_accuracy) {
  if (state.lambda_a < 0.0 || state.lambda_p < 0.0) throw ContractError("Lagrange multipliers must be non-negative");
  const Tensor logits = forward(model, x);
  LagrangianTerms t;
  t.accuracy = include_accuracy ? cross_entropy(logits, labels) : Tensor::scalar(0.0);
  t.adv = adversarial_proxy(softmax(logits));
  const std::vector<Tensor> masks = model.masks();
  t.prune = pruning_proxy(masks, state.k_prime);
  t.total = t.accuracy + state.lambda_a * abs(t.adv) + state.lambda_p * t.prune;
  return t;
}

LagrangianState dual_ascent_update(const LagrangianState& state, Index epoch, Scalar adv_value, Scalar prune_value) {
  const Scalar rho = state.rho(epoch);
  if (rho < 0.0) throw ContractError("dual ascent step must be non-negative");
  LagrangianState next = state;
  next.lambda_a += rho * std::abs(adv_value);
  next.lambda_p += rho * std::abs(prune_value);
  return next;
}

void KDCoefficients::validate() const {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw ContractError("KD coefficients must be non-negative");
  if (alpha + beta + gamma <= 0.0) throw ContractError("KD coefficients must not all be zero");
  if (temperature <= 0.0) throw ContractError("KD temperature must be positive");
  if (epsilon_max < 0.0) throw ContractError("epsilon_max must be non-negative");
}

Tensor kd_soft_loss(const Tensor& teacher_logits, const Tensor& student_logits, Scalar temperature) {
  if (temperature <= 0.0) throw ContractError("temperature must be positive");
  if (teacher_logits.shape() != student_logits.shape()) throw DimensionError("kd_soft_loss: logit shapes differ");
  const Tensor p_teacher = softmax_at_temperature(teacher_logits.detach(), temperature);
  const Array& p = p_teacher.values();
  Scalar neg_entropy = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) neg_entropy += p[i] * std::log(p[i]);
  }
  const auto n = static_cast<Scalar>(rows_of(student_logits));
  const Tensor cross = sum(mul(log_softmax(scale(student_logits, 1.0 / temperature)), p_teacher));
  const Scalar t2 = temperature * temperature;
  return scale(Tensor::scalar(neg_entropy) - cross, t2 / n);
}

KDTerms kd_finetune_loss(const MaskedModel& student, const MaskedModel& teacher, const Tensor& x,
                         std::span<const int> labels, const Tensor& x_perturbed, const KDCoefficients& coef) {
  coef.validate();
  const Tensor student_logits = forward(student, x);
  const Tensor teacher_logits = forward(teacher, x.detach()).detach();
  KDTerms t;
  t.hard = cross_entropy(student_logits, labels);
  t.soft = kd_soft_loss(teacher_logits, student_logits, coef.temperature);
  t.atk = cross_entropy(forward(student, x_perturbed.detach()), labels);
  t.total = coef.alpha * t.hard + coef.beta * t.soft + coef.gamma * t.atk;
  return t;
}

}  // namespace dwd
