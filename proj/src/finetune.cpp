// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/finetune.hpp"

#include "deadwood/eval.hpp"
#include "deadwood/optim.hpp"

#include <fstream>
#include <iomanip>

namespace dwd {

std::string to_string(FineTuneVariant variant) {
  switch (variant) {
    case FineTuneVariant::kModifiedKd: return "modified-kd";
    case FineTuneVariant::kVanillaKd: return "vanilla-kd";
    case FineTuneVariant::kAdversarialKd: return "adversarial-kd";
    case FineTuneVariant::kPgdFinetune: return "pgd-finetune";
    case FineTuneVariant::kFgsmFinetune: return "fgsm-finetune";
    case FineTuneVariant::kProxyFinetune: return "proxy-finetune";
  }
  return "unknown";
}

FineTuneVariant finetune_variant_from_string(const std::string& name) {
  for (FineTuneVariant v : {FineTuneVariant::kModifiedKd, FineTuneVariant::kVanillaKd, FineTuneVariant::kAdversarialKd,
                            FineTuneVariant::kPgdFinetune, FineTuneVariant::kFgsmFinetune,
                            FineTuneVariant::kProxyFinetune}) {
    if (to_string(v) == name) return v;
  }
  throw ContractError("unknown fine-tune variant '" + name + "'");
}

KDCoefficients effective_coefficients(FineTuneVariant variant, const KDCoefficients& coef) {
  KDCoefficients c = coef;
  if (variant == FineTuneVariant::kVanillaKd) c.gamma = 0.0;
  if (variant == FineTuneVariant::kAdversarialKd) c.alpha = 0.0;
  return c;
}

bool selects_on_era(FineTuneVariant variant) { return variant != FineTuneVariant::kVanillaKd; }

void FineTuneConfig::validate() const {
  coefficients.validate();
  effective_coefficients(variant, coefficients).validate();
  if (max_epochs < 0) throw ContractError("fine-tune max_epochs must be non-negative");
  if (early_stop_patience < 1 || early_stop_patience > std::max<Index>(max_epochs, 1)) {
    throw ContractError("early_stop_patience must lie in [1, max_epochs]");
  }
  if (!(lr > 0.0)) throw ContractError("fine-tune lr must be positive");
  if (batch_size < 1) throw ContractError("fine-tune batch_size must be positive");
  if (pgd_steps < 1) throw ContractError("pgd_steps must be positive");
  for (Scalar e : epsilon_set) {
    if (e < 0.0 || e > coefficients.epsilon_max) throw ContractError("epsilon set entries must lie in [0, epsilon_max]");
  }
  validation_attack.validate();
}

void FineTuneTrace::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << std::setprecision(17) << "epoch,hard,soft,atk,total,val_eba,val_era\n";
  for (const FineTuneEpoch& e : epochs) {
    out << e.epoch << ',' << e.hard << ',' << e.soft << ',' << e.atk << ',' << e.total << ',' << e.val_eba << ','
        << e.val_era << '\n';
  }
}

void check_mask_conservation(const MaskedModel& model, const BinaryMask& mask) {
  if (mask.size() != model.maskable_count()) throw DimensionError("mask size differs from the model");
  std::size_t offset = 0;
  for (const ParamLayer& p : model.param_layers()) {
    const Array& w = p.weight.values();
    for (Index i = 0; i < w.size(); ++i, ++offset) {
      if (!mask.bits[offset] && w[i] != 0.0) {
        throw InvariantViolation("pruned weight " + std::to_string(offset) + " became nonzero");
      }
    }
  }
}

namespace {

Array snapshot(const MaskedModel& m) {
  std::vector<Scalar> v;
  for (const ParamLayer& p : m.param_layers()) {
    for (const Tensor* t : {&p.weight, &p.bias, &p.mask}) v.insert(v.end(), t->values().begin(), t->values().end());
  }
  return Eigen::Map<const Array>(v.data(), static_cast<Index>(v.size()));
}

KDTerms batch_terms(const MaskedModel& student, const MaskedModel& teacher, const Tensor& x,
                    const std::vector<int>& y, const FineTuneConfig& config, const KDCoefficients& coef,
                    const std::vector<Scalar>& eps_set, Index epoch) {
  const ClipRange clip = config.validation_attack.clip;
  switch (config.variant) {
    case FineTuneVariant::kVanillaKd: return kd_finetune_loss(student, teacher, x, y, x, coef);
    case FineTuneVariant::kModifiedKd:
    case FineTuneVariant::kAdversarialKd:
      return kd_finetune_loss(student, teacher, x, y, perturb_looping(student, x, y, eps_set, epoch, clip), coef);
    case FineTuneVariant::kFgsmFinetune:
      return kd_finetune_loss(student, teacher, x, y, fgsm(student, x, y, coef.epsilon_max, clip), coef);
    case FineTuneVariant::kPgdFinetune: {
      const Scalar step = 2.5 * coef.epsilon_max / static_cast<Scalar>(config.pgd_steps);
      return kd_finetune_loss(student, teacher, x, y,
                              pgd(student, x, y, coef.epsilon_max, config.pgd_steps, step, clip), coef);
    }
    case FineTuneVariant::kProxyFinetune: {
      const Tensor logits = forward(student, x);
      KDTerms t;
      t.hard = cross_entropy(logits, y);
      t.soft = kd_soft_loss(forward(teacher, x).detach(), logits, coef.temperature);
      t.atk = adversarial_proxy(softmax(logits));
      t.total = coef.alpha * t.hard + coef.beta * t.soft + coef.gamma * t.atk;
      return t;
    }
  }
  throw ContractError("unknown fine-tune variant");
}

}  // namespace

FineTuneTrace fine_tune(MaskedModel& student, const BinaryMask& mask, const MaskedModel& teacher,
                        const Dataset& train, const Dataset& val, const FineTuneConfig& config) {
  config.validate();
  if (train.empty()) throw ContractError("fine_tune: empty training set");
  if (val.empty()) throw ContractError("fine_tune: empty validation set");
  if (!(student.architecture() == teacher.architecture())) throw ContractError("student and teacher differ in shape");
  check_mask_conservation(student, mask);
  const Array teacher_before = snapshot(teacher);

  FineTuneTrace trace;
  trace.coefficients = effective_coefficients(config.variant, config.coefficients);
  const KDCoefficients& coef = trace.coefficients;
  const std::vector<Scalar> eps_set =
      config.epsilon_set.empty() ? default_epsilon_set(coef.epsilon_max) : config.epsilon_set;
  const bool on_era = selects_on_era(config.variant);

  const TrainMode previous = student.mode();
  student.set_mode(TrainMode::kFineTune);
  std::vector<Tensor> params = student.trainable();
  AdamState adam;
  const AdamOptions options{config.lr};
  MaskedModel best = student.clone();
  Index since_best = 0;

  for (Index epoch = 0; epoch < config.max_epochs; ++epoch) {
    FineTuneEpoch rec;
    rec.epoch = epoch;
    Index batches = 0;
    for (const auto& batch : shuffled_batches(train.size(), config.batch_size, config.seed * 104729ULL + epoch)) {
      const Tensor x = train.batch_inputs(batch);
      const std::vector<int> y = train.batch_labels(batch);
      const KDTerms t = batch_terms(student, teacher, x, y, config, coef, eps_set, epoch);
      student.zero_grad();
      backward(t.total);
      for (Tensor& p : params) {
        if (!p.has_grad()) p.zero_grad();
      }
      adam_step(params, options, adam);
      rec.hard += t.hard.item();
      rec.soft += t.soft.item();
      rec.atk += t.atk.item();
      ++batches;
    }
    const auto nb = static_cast<Scalar>(batches);
    rec.hard /= nb;
    rec.soft /= nb;
    rec.atk /= nb;
    rec.total = coef.alpha * rec.hard + coef.beta * rec.soft + coef.gamma * rec.atk;
    check_mask_conservation(student, mask);

    rec.val_eba = evaluate_eba(student, val);
    rec.val_era = evaluate_era(student, val, config.validation_attack);
    trace.epochs.push_back(rec);
    const Scalar metric = on_era ? rec.val_era : rec.val_eba;
    if (trace.best_epoch < 0 || metric > trace.best_metric) {
      trace.best_epoch = epoch;
      trace.best_metric = metric;
      best = student.clone();
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      break;
    }
  }

  if (!(snapshot(teacher) == teacher_before).all()) throw InvariantViolation("teacher parameters changed");
  if (trace.best_epoch >= 0) {
    auto& dst = student.param_layers();
    const auto& src = best.param_layers();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i].weight.mutable_values() = src[i].weight.values();
      dst[i].bias.mutable_values() = src[i].bias.values();
    }
  }
  student.set_mode(previous);
  return trace;
}

}  // namespace dwd
