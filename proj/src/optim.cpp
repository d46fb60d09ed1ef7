// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/optim.hpp"

#include <cmath>

namespace dwd {

void adam_step(std::span<Tensor> params, const AdamOptions& options, AdamState& state) {
  if (options.lr <= 0.0) throw ContractError("adam_step: learning rate must be positive");
  for (const Tensor& p : params) {
    if (!p.has_grad()) throw ContractError("adam_step: parameter without gradient");
  }
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.push_back(Array::Zero(p.size()));
      state.second_moment.push_back(Array::Zero(p.size()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state was built for a different parameter list");
  }

  ++state.step;
  const Scalar t = static_cast<Scalar>(state.step);
  const Scalar correction1 = 1.0 - std::pow(options.beta1, t);
  const Scalar correction2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Array& g = params[i].grad();
    Array& m = state.first_moment[i];
    Array& v = state.second_moment[i];
    m = options.beta1 * m + (1.0 - options.beta1) * g;
    v = options.beta2 * v + (1.0 - options.beta2) * g.square();
    params[i].mutable_values() -=
        options.lr * (m / correction1) / ((v / correction2).sqrt() + options.eps);
  }
}

void zero_grads(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace dwd
