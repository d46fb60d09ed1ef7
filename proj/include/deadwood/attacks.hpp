// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "deadwood/data.hpp"
#include "deadwood/model.hpp"
#include "deadwood/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace dwd {

struct ClipRange {
  Scalar lo = 0.0;
  Scalar hi = 1.0;
};

enum class AttackFamily { kFgsm, kFgsmLooping, kPgd };

std::string to_string(AttackFamily family);
AttackFamily attack_family_from_string(const std::string& name);

struct AttackSpec {
  AttackFamily family = AttackFamily::kPgd;
  Scalar epsilon_max = 8.0 / 255.0;
  std::vector<Scalar> epsilon_set;  // fgsm-looping; empty means default_epsilon_set
  Index num_steps = 10;
  Scalar step_size = 0.0;  // pgd; 0 means 2.5 * epsilon_max / num_steps
  ClipRange clip;
  bool random_start = false;
  std::uint64_t seed = 0;

  static AttackSpec fgsm(Scalar epsilon_max);
  static AttackSpec fgsm_looping(Scalar epsilon_max);
  static AttackSpec pgd(Scalar epsilon_max, Index num_steps);

  Scalar effective_step_size() const;
  std::vector<Scalar> effective_epsilon_set() const;
  void validate() const;
};

/// {epsilon_max * i / 8 : i = 1..8}, ascending.
std::vector<Scalar> default_epsilon_set(Scalar epsilon_max);

/// Differentiable scalar loss of an input batch.
using InputLoss = std::function<Tensor(const Tensor& x)>;

/// clip(x + eps * sign(grad_x loss(x))).
Tensor fgsm(const InputLoss& loss, const Tensor& x, Scalar epsilon, ClipRange clip = {});
Tensor fgsm(const MaskedModel& model, const Tensor& x, std::span<const int> labels, Scalar epsilon,
            ClipRange clip = {});

/// FGSM with eps = E[epoch mod |E|].
Scalar looping_epsilon(std::span<const Scalar> epsilon_set, Index epoch);
Tensor perturb_looping(const MaskedModel& model, const Tensor& x, std::span<const int> labels,
                       std::span<const Scalar> epsilon_set, Index epoch, ClipRange clip = {});

/// Signed-gradient steps, each followed by projection onto the L-inf ball of
/// radius epsilon_max around x and clipping.
Tensor pgd(const InputLoss& loss, const Tensor& x, Scalar epsilon_max, Index num_steps, Scalar step_size,
           ClipRange clip = {}, bool random_start = false, std::uint64_t seed = 0);
Tensor pgd(const MaskedModel& model, const Tensor& x, std::span<const int> labels, Scalar epsilon_max,
           Index num_steps, Scalar step_size, ClipRange clip = {}, bool random_start = false,
           std::uint64_t seed = 0);

/// Dispatches on spec.family; `epoch` selects the looping epsilon.
Tensor run_attack(const MaskedModel& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                  Index epoch = 0);

/// Wall-clock seconds per 1000 adversarial examples, over the first
/// `max_samples` samples of the dataset, after one warm-up batch.
Scalar attack_throughput(const MaskedModel& model, const Dataset& data, const AttackSpec& spec,
                         Index batch_size = 100, Index max_samples = 1000);

}  // namespace dwd
