// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/prune.hpp"

#include "deadwood/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

namespace dwd {

void PruneRunConfig::validate() const {
  if (!(target_fraction >= 0.0 && target_fraction < 1.0)) throw ContractError("target_fraction must lie in [0, 1)");
  if (!(iterative_step > 0.0 && iterative_step <= 1.0)) throw ContractError("iterative_step must lie in (0, 1]");
  if (max_epochs < 0) throw ContractError("max_epochs must be non-negative");
  if (!(lr > 0.0)) throw ContractError("prune lr must be positive");
  if (batch_size < 1) throw ContractError("batch_size must be positive");
  if (rho_schedule.empty()) throw ContractError("rho schedule must not be empty");
  for (Scalar r : rho_schedule) {
    if (r < 0.0) throw ContractError("rho schedule entries must be non-negative");
  }
}

void PruneTrace::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << std::setprecision(17);
  out << "epoch,loss,adv_proxy,prune_proxy,lambda_a,lambda_p,sparsity\n";
  for (const PruneEpoch& e : epochs) {
    out << e.epoch << ',' << e.loss << ',' << e.adv_proxy << ',' << e.prune_proxy << ',' << e.lambda_a << ','
        << e.lambda_p << ',' << e.sparsity << '\n';
  }
}

namespace {

Scalar soft_sparsity(const MaskedModel& model, Scalar threshold) {
  const Array b = model.flat_mask();
  return static_cast<Scalar>((b.abs() < threshold).count()) / static_cast<Scalar>(b.size());
}

// Robustness term for one batch: the proxy on clean inputs or the loss on
// FGSM-looping inputs.
Tensor robustness_term(const MaskedModel& model, const Tensor& logits, const Tensor& x, std::span<const int> y,
                       const PruneRunConfig& config, Index epoch) {
  if (config.robustness == RobustnessTerm::kProxy) return adversarial_proxy(softmax(logits));
  const std::vector<Scalar> set = config.attack.effective_epsilon_set();
  const Tensor adv = perturb_looping(model, x.detach(), y, set, epoch, config.attack.clip);
  return cross_entropy(forward(model, adv), y);
}

struct EpochValues {
  Scalar accuracy = 0.0;
  Scalar adv = 0.0;
};

EpochValues dataset_values(const MaskedModel& model, const Dataset& data, const std::vector<Index>& subset,
                           const PruneRunConfig& config, Index epoch) {
  EpochValues v;
  for (const auto& batch : sequential_batches(static_cast<Index>(subset.size()), 500)) {
    std::vector<Index> idx;
    for (Index i : batch) idx.push_back(subset[static_cast<std::size_t>(i)]);
    const Tensor x = data.batch_inputs(idx);
    const std::vector<int> y = data.batch_labels(idx);
    const Tensor logits = forward(model, x);
    const auto w = static_cast<Scalar>(idx.size());
    v.accuracy += w * cross_entropy(logits, y).item();
    v.adv += w * robustness_term(model, logits, x, y, config, epoch).item();
  }
  const auto n = static_cast<Scalar>(subset.size());
  v.accuracy /= n;
  v.adv /= n;
  return v;
}

}  // namespace

PruneResult prune(MaskedModel& model, const Dataset& data, const PruneRunConfig& config) {
  config.validate();
  if (data.empty()) throw ContractError("prune: empty dataset");
  const Index k = model.maskable_count();
  PruneResult result;
  result.trace.k = k;
  result.trace.k_prime = retained_target(k, config.target_fraction);
  if (result.trace.k_prime == k) {
    result.mask = all_ones_mask(k);
    result.trace.reached_target = true;
    return result;
  }

  std::vector<Index> subset(static_cast<std::size_t>(data.size()));
  std::iota(subset.begin(), subset.end(), Index{0});
  if (config.dual_subsample > 0 && config.dual_subsample < data.size()) {
    std::mt19937_64 rng(config.seed ^ 0x5eedULL);
    std::shuffle(subset.begin(), subset.end(), rng);
    subset.resize(static_cast<std::size_t>(config.dual_subsample));
    std::sort(subset.begin(), subset.end());
  }

  const TrainMode previous_mode = model.mode();
  model.set_mode(TrainMode::kPrune);
  std::vector<Tensor> params = model.trainable();
  AdamState adam;
  const AdamOptions options{config.lr};
  LagrangianState state;
  state.rho_schedule = config.rho_schedule;
  state.k_prime = result.trace.k_prime;

  try {
    for (Index epoch = 0; epoch < config.max_epochs; ++epoch) {
      for (const auto& batch : shuffled_batches(data.size(), config.batch_size, config.seed * 1000003ULL + epoch)) {
        const Tensor x = data.batch_inputs(batch);
        const std::vector<int> y = data.batch_labels(batch);
        const Tensor logits = forward(model, x);
        const Tensor accuracy = config.include_accuracy ? cross_entropy(logits, y) : Tensor::scalar(0.0);
        const Tensor adv = robustness_term(model, logits, x, y, config, epoch);
        const Tensor total =
            accuracy + state.lambda_a * abs(adv) + state.lambda_p * pruning_proxy(model.masks(), state.k_prime);
        model.zero_grad();
        backward(total);
        for (Tensor& p : params) {
          if (!p.has_grad()) p.zero_grad();
        }
        adam_step(params, options, adam);
        model.clamp_masks();
      }

      const EpochValues v = dataset_values(model, data, subset, config, epoch);
      const Scalar prune_value = pruning_proxy(model.masks(), state.k_prime).item();
      PruneEpoch rec;
      rec.epoch = epoch;
      rec.accuracy_loss = v.accuracy;
      rec.adv_proxy = v.adv;
      rec.prune_proxy = prune_value;
      rec.loss = (config.include_accuracy ? v.accuracy : 0.0) + state.lambda_a * std::abs(v.adv) +
                 state.lambda_p * prune_value;
      if (!std::isfinite(rec.loss)) throw NumericError("prune: non-finite epoch loss");
      state = dual_ascent_update(state, epoch, v.adv, prune_value);
      rec.lambda_a = state.lambda_a;
      rec.lambda_p = state.lambda_p;
      rec.sparsity = soft_sparsity(model, config.sparsity_threshold);
      result.trace.epochs.push_back(rec);
      if (rec.sparsity >= config.target_fraction) {
        result.trace.reached_target = true;
        break;
      }
    }
  } catch (const NumericError& e) {
    model.set_mode(previous_mode);
    throw PruneDivergence(std::string("pruning diverged: ") + e.what(), result.trace);
  }
  model.set_mode(previous_mode);
  result.mask = binarize_mask(model, result.trace.k_prime);
  return result;
}

PruneResult ablate_no_accuracy(MaskedModel& model, const Dataset& data, PruneRunConfig config) {
  config.include_accuracy = false;
  return prune(model, data, config);
}

Scalar magnitude_separation(const Array& b, const BinaryMask& mask) {
  if (b.size() != mask.size()) throw DimensionError("magnitude_separation: mask size differs");
  Scalar kept = 0.0, removed = 0.0;
  Index n_kept = 0, n_removed = 0;
  for (Index i = 0; i < b.size(); ++i) {
    if (mask.bits[static_cast<std::size_t>(i)]) {
      kept += std::abs(b[i]);
      ++n_kept;
    } else {
      removed += std::abs(b[i]);
      ++n_removed;
    }
  }
  if (n_removed == 0 || removed == 0.0) return std::numeric_limits<Scalar>::infinity();
  if (n_kept == 0) return 0.0;
  return (kept / static_cast<Scalar>(n_kept)) / (removed / static_cast<Scalar>(n_removed));
}

Scalar magnitude_separation(const MaskedModel& model, const BinaryMask& mask) {
  return magnitude_separation(model.flat_mask(), mask);
}

// ---------------------------------------------------------------------------

namespace {

// Retained-edge adjacency of one parameter layer between its input units and
// output units (channels for convolutions).
struct UnitGraph {
  Index in = 0;
  Index out = 0;
  std::vector<char> edge;  // in x out

  bool has(Index i, Index o) const { return edge[static_cast<std::size_t>(i * out + o)] != 0; }
};

std::vector<UnitGraph> unit_graphs(const MaskedModel& model, const BinaryMask& mask) {
  std::vector<UnitGraph> graphs;
  std::size_t offset = 0;
  for (const ParamLayer& p : model.param_layers()) {
    const LayerSpec& l = model.architecture().layers[p.layer];
    UnitGraph g{l.in, l.out, std::vector<char>(static_cast<std::size_t>(l.in * l.out), 0)};
    if (l.kind == LayerKind::kDense) {
      for (Index i = 0; i < l.in * l.out; ++i) g.edge[static_cast<std::size_t>(i)] = mask.bits[offset + i];
    } else {
      const Index kk = l.kernel * l.kernel;
      for (Index o = 0; o < l.out; ++o) {
        for (Index i = 0; i < l.in; ++i) {
          for (Index t = 0; t < kk; ++t) {
            if (mask.bits[offset + static_cast<std::size_t>((o * l.in + i) * kk + t)]) {
              g.edge[static_cast<std::size_t>(i * l.out + o)] = 1;
              break;
            }
          }
        }
      }
    }
    offset += static_cast<std::size_t>(p.weight.size());
    graphs.push_back(std::move(g));
  }
  return graphs;
}

}  // namespace

Connectivity connectivity_check(const MaskedModel& model, const BinaryMask& mask) {
  if (mask.size() != model.maskable_count()) throw DimensionError("connectivity_check: mask size differs");
  const Architecture& arch = model.architecture();
  const std::vector<Shape> shapes = arch.activation_shapes();
  const std::vector<UnitGraph> graphs = unit_graphs(model, mask);
  const std::size_t n_param = graphs.size();

  // Spatial factor of every flatten layer, keyed by the parameter layer it feeds.
  std::vector<Index> flatten_factor(n_param, 1);
  {
    std::size_t next_param = 0;
    Index pending = 1;
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
      const LayerSpec& l = arch.layers[i];
      if (l.kind == LayerKind::kFlatten && shapes[i].size() == 3) pending = shapes[i][1] * shapes[i][2];
      if (l.has_parameters()) {
        flatten_factor[next_param++] = pending;
        pending = 1;
      }
    }
  }

  // Forward reachability at every parameter layer's inputs.
  std::vector<std::vector<char>> fwd_in(n_param);
  std::vector<char> reach(static_cast<std::size_t>(n_param ? graphs[0].in / flatten_factor[0] : 0), 1);
  for (std::size_t l = 0; l < n_param; ++l) {
    const UnitGraph& g = graphs[l];
    std::vector<char> in(static_cast<std::size_t>(g.in), 0);
    for (Index i = 0; i < g.in; ++i) in[static_cast<std::size_t>(i)] = reach[static_cast<std::size_t>(i / flatten_factor[l])];
    std::vector<char> out(static_cast<std::size_t>(g.out), 0);
    for (Index i = 0; i < g.in; ++i) {
      if (!in[static_cast<std::size_t>(i)]) continue;
      for (Index o = 0; o < g.out; ++o) {
        if (g.has(i, o)) out[static_cast<std::size_t>(o)] = 1;
      }
    }
    fwd_in[l] = std::move(in);
    reach = std::move(out);
  }

  // Backward reachability at every parameter layer's outputs.
  std::vector<std::vector<char>> bwd_out(n_param);
  std::vector<char> back(static_cast<std::size_t>(n_param ? graphs.back().out : 0), 1);
  for (std::size_t l = n_param; l-- > 0;) {
    const UnitGraph& g = graphs[l];
    bwd_out[l] = back;
    std::vector<char> in(static_cast<std::size_t>(g.in), 0);
    for (Index i = 0; i < g.in; ++i) {
      for (Index o = 0; o < g.out; ++o) {
        if (g.has(i, o) && back[static_cast<std::size_t>(o)]) {
          in[static_cast<std::size_t>(i)] = 1;
          break;
        }
      }
    }
    const Index factor = flatten_factor[l];
    std::vector<char> prev(static_cast<std::size_t>(g.in / factor), 0);
    for (Index i = 0; i < g.in; ++i) {
      if (in[static_cast<std::size_t>(i)]) prev[static_cast<std::size_t>(i / factor)] = 1;
    }
    back = std::move(prev);
  }

  Connectivity c;
  for (std::size_t l = 0; l < n_param; ++l) {
    const UnitGraph& g = graphs[l];
    bool live = false;
    for (Index i = 0; i < g.in && !live; ++i) {
      if (!fwd_in[l][static_cast<std::size_t>(i)]) continue;
      for (Index o = 0; o < g.out; ++o) {
        if (g.has(i, o) && bwd_out[l][static_cast<std::size_t>(o)]) {
          live = true;
          break;
        }
      }
    }
    if (!live) c.broken_layers.push_back(static_cast<Index>(l));
  }
  c.connected = c.broken_layers.empty();
  return c;
}

std::vector<LayerSparsity> per_layer_sparsity(const BinaryMask& mask, const MaskedModel& model) {
  if (mask.size() != model.maskable_count()) throw DimensionError("per_layer_sparsity: mask size differs");
  std::vector<LayerSparsity> out;
  std::size_t offset = 0;
  Index position = 0;
  for (const ParamLayer& p : model.param_layers()) {
    LayerSparsity s;
    s.layer = position++;
    s.kind = to_string(model.architecture().layers[p.layer].kind);
    s.total = p.weight.size();
    for (Index i = 0; i < s.total; ++i) s.pruned += mask.bits[offset + static_cast<std::size_t>(i)] ? 0 : 1;
    s.pruned_fraction = static_cast<Scalar>(s.pruned) / static_cast<Scalar>(s.total);
    offset += static_cast<std::size_t>(s.total);
    out.push_back(s);
  }
  return out;
}

BinaryMask prune_lwm_baseline(const MaskedModel& model, Scalar target_fraction) {
  const Index k = model.maskable_count();
  return mask_from_scores(model.flat_weights(), retained_target(k, target_fraction));
}

}  // namespace dwd
