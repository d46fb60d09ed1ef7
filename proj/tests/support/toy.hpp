// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// Exhaustive-search oracle for pruning on models small enough to enumerate
// every binary mask of a given cardinality.

#pragma once

#include "deadwood/losses.hpp"
#include "deadwood/prune.hpp"
#include "deadwood/train.hpp"

#include <bit>
#include <limits>

namespace dwd::testing {

/// Three overlapping Gaussian blobs in 2-D and a pretrained 6-weight
/// linear classifier (2 inputs, 3 classes).
struct Toy {
  Dataset data;
  MaskedModel model;
};

inline Toy blobs_toy(std::uint64_t seed, Index n = 300) {
  Dataset d = make_synthetic(SyntheticKind::kGaussianBlobs, n, 1.5, seed, 3);
  MaskedModel m(Architecture::mlp({2, 3}), seed);
  PretrainConfig cfg;
  cfg.epochs = 60;
  cfg.lr = 0.05;
  cfg.batch_size = 32;
  cfg.seed = seed;
  pretrain(m, d, cfg);
  return {std::move(d), std::move(m)};
}

/// Pruning settings under which the toy converges.
inline PruneRunConfig toy_prune_config(std::uint64_t seed, Scalar target = 0.5) {
  PruneRunConfig c;
  c.target_fraction = target;
  c.rho_schedule = {0.1};
  c.lr = 0.05;
  c.max_epochs = 100;
  c.batch_size = 32;
  c.seed = seed;
  return c;
}

/// Lagrangian of `model` on the whole dataset with the relaxed mask replaced
/// by `mask`; weights and biases are taken from `model` as they stand.
inline Scalar mask_objective(const MaskedModel& model, const BinaryMask& mask, const Dataset& data,
                             Scalar lambda_a, Scalar lambda_p) {
  MaskedModel m = model.clone();
  Array b(mask.size());
  for (Index i = 0; i < b.size(); ++i) b[i] = mask.bits[static_cast<std::size_t>(i)];
  m.set_flat_mask(b);
  LagrangianState s;
  s.lambda_a = lambda_a;
  s.lambda_p = lambda_p;
  s.k_prime = mask.retained_count;
  return lagrangian_loss(m, data.all_inputs(), data.labels, s).total.item();
}

/// Minimum of mask_objective over all masks with exactly k' ones.
inline Scalar exhaustive_optimum(const MaskedModel& model, Index k_prime, const Dataset& data, Scalar lambda_a,
                                 Scalar lambda_p) {
  const Index k = model.maskable_count();
  Scalar best = std::numeric_limits<Scalar>::infinity();
  for (std::uint64_t bits = 0; bits < (1ULL << k); ++bits) {
    if (std::popcount(bits) != k_prime) continue;
    BinaryMask m;
    m.bits.resize(static_cast<std::size_t>(k));
    for (Index i = 0; i < k; ++i) m.bits[static_cast<std::size_t>(i)] = (bits >> i) & 1ULL;
    m.retained_count = k_prime;
    best = std::min(best, mask_objective(model, m, data, lambda_a, lambda_p));
  }
  return best;
}

}  // namespace dwd::testing
