// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/train.hpp"

#include "deadwood/eval.hpp"
#include "deadwood/losses.hpp"
#include "deadwood/optim.hpp"

#include <fstream>
#include <iomanip>

namespace dwd {

void PretrainConfig::validate() const {
  if (epochs < 0) throw ContractError("pretrain epochs must be non-negative");
  if (!(lr > 0.0)) throw ContractError("pretrain lr must be positive");
  if (batch_size < 1) throw ContractError("pretrain batch_size must be positive");
  attack.validate();
}

void TrainTrace::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << std::setprecision(17) << "epoch,loss,train_eba\n";
  for (const TrainEpoch& e : epochs) out << e.epoch << ',' << e.loss << ',' << e.train_eba << '\n';
}

TrainTrace pretrain(MaskedModel& model, const Dataset& data, const PretrainConfig& config) {
  config.validate();
  if (data.empty()) throw ContractError("pretrain: empty dataset");
  const TrainMode previous = model.mode();
  model.set_mode(TrainMode::kPretrain);
  std::vector<Tensor> params = model.trainable();
  AdamState adam;
  const AdamOptions options{config.lr};
  const std::vector<Scalar> eps_set = config.attack.effective_epsilon_set();
  TrainTrace trace;
  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    Scalar total = 0.0;
    Index batches = 0;
    for (const auto& batch : shuffled_batches(data.size(), config.batch_size, config.seed * 7919ULL + epoch)) {
      const Tensor x = data.batch_inputs(batch);
      const std::vector<int> y = data.batch_labels(batch);
      Tensor loss = cross_entropy(forward(model, x), y);
      if (config.robust) {
        const Tensor adv = perturb_looping(model, x, y, eps_set, epoch, config.attack.clip);
        loss = 0.5 * loss + 0.5 * cross_entropy(forward(model, adv), y);
      }
      model.zero_grad();
      backward(loss);
      adam_step(params, options, adam);
      total += loss.item();
      ++batches;
    }
    trace.epochs.push_back({epoch, total / static_cast<Scalar>(std::max<Index>(batches, 1)), evaluate_eba(model, data)});
  }
  model.set_mode(previous);
  return trace;
}

}  // namespace dwd
