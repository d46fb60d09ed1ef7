// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/attacks.hpp"

#include "deadwood/losses.hpp"

#include <chrono>
#include <random>

namespace dwd {

namespace {

Array input_gradient(const InputLoss& loss, const Tensor& x) {
  const Tensor leaf(x.shape(), x.values(), true);
  Array g = gradient(loss(leaf), leaf);
  if (!g.allFinite()) throw NumericError("attack: non-finite input gradient");
  return g;
}

Array sign(const Array& g) { return g.sign(); }

InputLoss model_loss(const MaskedModel& model, std::span<const int> labels) {
  return [&model, labels](const Tensor& x) { return cross_entropy(forward(model, x), labels); };
}

}  // namespace

std::string to_string(AttackFamily family) {
  switch (family) {
    case AttackFamily::kFgsm: return "fgsm";
    case AttackFamily::kFgsmLooping: return "fgsm-looping";
    case AttackFamily::kPgd: return "pgd";
  }
  return "unknown";
}

AttackFamily attack_family_from_string(const std::string& name) {
  for (AttackFamily f : {AttackFamily::kFgsm, AttackFamily::kFgsmLooping, AttackFamily::kPgd}) {
    if (to_string(f) == name) return f;
  }
  throw ContractError("unknown attack family '" + name + "'");
}

AttackSpec AttackSpec::fgsm(Scalar epsilon_max) {
  AttackSpec s;
  s.family = AttackFamily::kFgsm;
  s.epsilon_max = epsilon_max;
  return s;
}

AttackSpec AttackSpec::fgsm_looping(Scalar epsilon_max) {
  AttackSpec s = fgsm(epsilon_max);
  s.family = AttackFamily::kFgsmLooping;
  return s;
}

AttackSpec AttackSpec::pgd(Scalar epsilon_max, Index num_steps) {
  AttackSpec s;
  s.epsilon_max = epsilon_max;
  s.num_steps = num_steps;
  return s;
}

Scalar AttackSpec::effective_step_size() const {
  return step_size > 0.0 ? step_size : 2.5 * epsilon_max / static_cast<Scalar>(num_steps);
}

std::vector<Scalar> AttackSpec::effective_epsilon_set() const {
  return epsilon_set.empty() ? default_epsilon_set(epsilon_max) : epsilon_set;
}

void AttackSpec::validate() const {
  if (epsilon_max < 0.0) throw ContractError("epsilon_max must be non-negative");
  if (clip.lo > clip.hi) throw ContractError("clip range is empty");
  for (Scalar e : epsilon_set) {
    if (e < 0.0 || e > epsilon_max) throw ContractError("epsilon set entries must lie in [0, epsilon_max]");
  }
  if (family == AttackFamily::kPgd) {
    if (num_steps < 1) throw ContractError("pgd needs at least one step");
    if (step_size < 0.0) throw ContractError("pgd step size must be positive");
  }
}

std::vector<Scalar> default_epsilon_set(Scalar epsilon_max) {
  std::vector<Scalar> out;
  for (int i = 1; i <= 8; ++i) out.push_back(epsilon_max * i / 8.0);
  return out;
}

Tensor fgsm(const InputLoss& loss, const Tensor& x, Scalar epsilon, ClipRange clip) {
  if (epsilon < 0.0) throw ContractError("fgsm: epsilon must be non-negative");
  if (epsilon == 0.0) return x.detach();
  const Array g = input_gradient(loss, x);
  Array out = (x.values() + epsilon * sign(g)).max(clip.lo).min(clip.hi);
  return Tensor(x.shape(), std::move(out));
}

Tensor fgsm(const MaskedModel& model, const Tensor& x, std::span<const int> labels, Scalar epsilon, ClipRange clip) {
  return fgsm(model_loss(model, labels), x, epsilon, clip);
}

Scalar looping_epsilon(std::span<const Scalar> epsilon_set, Index epoch) {
  if (epsilon_set.empty()) throw ContractError("fgsm-looping: empty epsilon set");
  if (epoch < 0) throw ContractError("fgsm-looping: negative epoch");
  return epsilon_set[static_cast<std::size_t>(epoch % static_cast<Index>(epsilon_set.size()))];
}

Tensor perturb_looping(const MaskedModel& model, const Tensor& x, std::span<const int> labels,
                       std::span<const Scalar> epsilon_set, Index epoch, ClipRange clip) {
  return fgsm(model, x, labels, looping_epsilon(epsilon_set, epoch), clip);
}

Tensor pgd(const InputLoss& loss, const Tensor& x, Scalar epsilon_max, Index num_steps, Scalar step_size,
           ClipRange clip, bool random_start, std::uint64_t seed) {
  if (epsilon_max < 0.0) throw ContractError("pgd: epsilon_max must be non-negative");
  if (num_steps < 1) throw ContractError("pgd: num_steps must be at least 1");
  if (!(step_size > 0.0) && epsilon_max > 0.0) throw ContractError("pgd: step size must be positive");
  if (epsilon_max == 0.0) return x.detach();
  const Array& x0 = x.values();
  const Array lo = (x0 - epsilon_max).max(clip.lo);
  const Array hi = (x0 + epsilon_max).min(clip.hi);
  Array adv = x0;
  if (random_start) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Scalar> u(-epsilon_max, epsilon_max);
    for (Index i = 0; i < adv.size(); ++i) adv[i] += u(rng);
    adv = adv.max(lo).min(hi);
  }
  for (Index s = 0; s < num_steps; ++s) {
    const Array g = input_gradient(loss, Tensor(x.shape(), adv));
    adv = (adv + step_size * sign(g)).max(lo).min(hi);
  }
  return Tensor(x.shape(), std::move(adv));
}

Tensor pgd(const MaskedModel& model, const Tensor& x, std::span<const int> labels, Scalar epsilon_max,
           Index num_steps, Scalar step_size, ClipRange clip, bool random_start, std::uint64_t seed) {
  return pgd(model_loss(model, labels), x, epsilon_max, num_steps, step_size, clip, random_start, seed);
}

Tensor run_attack(const MaskedModel& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec,
                  Index epoch) {
  spec.validate();
  switch (spec.family) {
    case AttackFamily::kFgsm: return fgsm(model, x, labels, spec.epsilon_max, spec.clip);
    case AttackFamily::kFgsmLooping: {
      const std::vector<Scalar> set = spec.effective_epsilon_set();
      return perturb_looping(model, x, labels, set, epoch, spec.clip);
    }
    case AttackFamily::kPgd:
      return pgd(model, x, labels, spec.epsilon_max, spec.num_steps, spec.effective_step_size(), spec.clip,
                 spec.random_start, spec.seed);
  }
  throw ContractError("unknown attack family");
}

Scalar attack_throughput(const MaskedModel& model, const Dataset& data, const AttackSpec& spec, Index batch_size,
                         Index max_samples) {
  const Index n = std::min(data.size(), max_samples);
  if (n == 0) throw ContractError("attack_throughput: empty dataset");
  const auto batches = sequential_batches(n, batch_size);
  {
    const auto& b = batches.front();
    (void)run_attack(model, data.batch_inputs(b), data.batch_labels(b), spec, 0);
  }
  const auto start = std::chrono::steady_clock::now();
  Index epoch = 0;
  for (const auto& b : batches) {
    (void)run_attack(model, data.batch_inputs(b), data.batch_labels(b), spec, epoch++);
  }
  const std::chrono::duration<Scalar> elapsed = std::chrono::steady_clock::now() - start;
  return elapsed.count() * 1000.0 / static_cast<Scalar>(n);
}

}  // namespace dwd
