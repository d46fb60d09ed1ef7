// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace dwd {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kSoftmaxOutput: return "softmax-output";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::kDense, LayerKind::kConv2d, LayerKind::kRelu, LayerKind::kMaxPool,
                      LayerKind::kFlatten, LayerKind::kSoftmaxOutput}) {
    if (to_string(k) == name) return k;
  }
  throw ContractError("unknown layer kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// Architecture

std::vector<Shape> Architecture::activation_shapes() const {
  if (input_shape.empty() || input_shape.size() == 2 || input_shape.size() > 3) {
    throw DimensionError("input shape must be {features} or {channels,height,width}, got " +
                         shape_string(input_shape));
  }
  std::vector<Shape> shapes{input_shape};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const Shape& cur = shapes.back();
    const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + "): ";
    Shape next = cur;
    switch (l.kind) {
      case LayerKind::kDense:
        if (cur.size() != 1 || cur[0] != l.in || l.out < 1) {
          throw DimensionError(where + "expects " + std::to_string(l.in) + " features, got " + shape_string(cur));
        }
        next = {l.out};
        break;
      case LayerKind::kConv2d:
        if (cur.size() != 3 || cur[0] != l.in || l.out < 1 || l.kernel < 1 || l.kernel > cur[1] ||
            l.kernel > cur[2]) {
          throw DimensionError(where + "kernel does not fit input " + shape_string(cur));
        }
        next = {l.out, cur[1] - l.kernel + 1, cur[2] - l.kernel + 1};
        break;
      case LayerKind::kMaxPool:
        if (cur.size() != 3 || l.kernel < 1 || cur[1] / l.kernel == 0 || cur[2] / l.kernel == 0) {
          throw DimensionError(where + "window does not fit input " + shape_string(cur));
        }
        next = {cur[0], cur[1] / l.kernel, cur[2] / l.kernel};
        break;
      case LayerKind::kFlatten:
        next = {shape_size(cur)};
        break;
      case LayerKind::kRelu:
        break;
      case LayerKind::kSoftmaxOutput:
        if (i + 1 != layers.size() || cur.size() != 1) {
          throw DimensionError(where + "must be the final layer over class scores");
        }
        break;
    }
    shapes.push_back(std::move(next));
  }
  if (shapes.back().size() != 1) throw DimensionError("final layer must produce a class-score vector");
  return shapes;
}

Index Architecture::class_count() const { return activation_shapes().back()[0]; }

Architecture Architecture::mlp(const std::vector<Index>& widths) {
  if (widths.size() < 2) throw ContractError("mlp needs at least input and output widths");
  Architecture a;
  a.name = "mlp";
  a.input_shape = {widths.front()};
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    if (i > 0) a.layers.push_back(LayerSpec::relu());
    a.layers.push_back(LayerSpec::dense(widths[i], widths[i + 1]));
  }
  a.validate();
  return a;
}

Architecture Architecture::desk_mlp() { return mlp({784, 256, 128, 10}); }

Architecture Architecture::desk_cnn() {
  Architecture a;
  a.name = "cnn";
  a.input_shape = {1, 28, 28};
  a.layers = {LayerSpec::conv2d(1, 8, 3), LayerSpec::relu(),  LayerSpec::maxpool(2),
              LayerSpec::conv2d(8, 16, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
              LayerSpec::flatten(),        LayerSpec::dense(16 * 5 * 5, 10)};
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// MaskedModel

MaskedModel::MaskedModel(Architecture architecture, std::uint64_t seed) : architecture_(std::move(architecture)) {
  architecture_.validate();
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < architecture_.layers.size(); ++i) {
    const LayerSpec& l = architecture_.layers[i];
    if (!l.has_parameters()) continue;
    Shape wshape = l.kind == LayerKind::kDense ? Shape{l.in, l.out} : Shape{l.out, l.in, l.kernel, l.kernel};
    const Index fan_in = l.kind == LayerKind::kDense ? l.in : l.in * l.kernel * l.kernel;
    std::normal_distribution<Scalar> dist(0.0, std::sqrt(2.0 / static_cast<Scalar>(fan_in)));
    Array w(shape_size(wshape));
    for (Index j = 0; j < w.size(); ++j) w[j] = dist(rng);
    ParamLayer p;
    p.layer = i;
    p.weight = Tensor(wshape, std::move(w));
    p.bias = Tensor::zeros({l.out});
    p.mask = Tensor::full(std::move(wshape), 1.0);
    params_.push_back(std::move(p));
  }
}

MaskedModel MaskedModel::clone() const {
  MaskedModel copy = *this;
  for (ParamLayer& p : copy.params_) {
    p.weight = p.weight.detach();
    p.bias = p.bias.detach();
    p.mask = p.mask.detach();
  }
  copy.set_mode(mode_);
  return copy;
}

Index MaskedModel::maskable_count() const {
  Index k = 0;
  for (const ParamLayer& p : params_) k += p.weight.size();
  return k;
}

void MaskedModel::set_mode(TrainMode mode) {
  mode_ = mode;
  const bool weights = mode == TrainMode::kPretrain || mode == TrainMode::kFineTune;
  const bool masks = mode == TrainMode::kPrune;
  const bool biases = mode != TrainMode::kFrozen;
  for (ParamLayer& p : params_) {
    p.weight.set_requires_grad(weights);
    p.bias.set_requires_grad(biases);
    p.mask.set_requires_grad(masks);
  }
}

std::vector<Tensor> MaskedModel::trainable() const {
  std::vector<Tensor> out;
  for (const ParamLayer& p : params_) {
    for (const Tensor* t : {&p.weight, &p.bias, &p.mask}) {
      if (t->requires_grad()) out.push_back(*t);
    }
  }
  return out;
}

std::vector<Tensor> MaskedModel::masks() const {
  std::vector<Tensor> out;
  for (const ParamLayer& p : params_) out.push_back(p.mask);
  return out;
}

void MaskedModel::zero_grad() {
  for (ParamLayer& p : params_) {
    p.weight.zero_grad();
    p.bias.zero_grad();
    p.mask.zero_grad();
  }
}

Array MaskedModel::flat_mask() const {
  Array out(maskable_count());
  Index offset = 0;
  for (const ParamLayer& p : params_) {
    out.segment(offset, p.mask.size()) = p.mask.values();
    offset += p.mask.size();
  }
  return out;
}

Array MaskedModel::flat_weights() const {
  Array out(maskable_count());
  Index offset = 0;
  for (const ParamLayer& p : params_) {
    out.segment(offset, p.weight.size()) = p.weight.values();
    offset += p.weight.size();
  }
  return out;
}

void MaskedModel::set_flat_mask(const Array& values) {
  if (values.size() != maskable_count()) {
    throw DimensionError("mask has " + std::to_string(values.size()) + " entries, model has " +
                         std::to_string(maskable_count()));
  }
  Index offset = 0;
  for (ParamLayer& p : params_) {
    p.mask.mutable_values() = values.segment(offset, p.mask.size());
    offset += p.mask.size();
  }
}

void MaskedModel::clamp_masks() {
  for (ParamLayer& p : params_) {
    Array& b = p.mask.mutable_values();
    b = b.max(0.0).min(1.0);
  }
}

// ---------------------------------------------------------------------------
// Forward

Tensor forward(const MaskedModel& model, const Tensor& x, bool apply_mask) {
  const Architecture& arch = model.architecture();
  const Index n = x.rank() >= 1 ? x.dim(0) : 0;
  if (x.rank() < 2 || x.size() != n * arch.input_size()) {
    throw DimensionError("forward: input " + shape_string(x.shape()) + " does not match per-sample shape " +
                         shape_string(arch.input_shape));
  }
  Shape batched{n};
  batched.insert(batched.end(), arch.input_shape.begin(), arch.input_shape.end());
  Tensor h = x.shape() == batched ? x : reshape(x, batched);

  auto param = model.param_layers().begin();
  for (const LayerSpec& l : arch.layers) {
    switch (l.kind) {
      case LayerKind::kDense:
      case LayerKind::kConv2d: {
        const ParamLayer& p = *param++;
        const Tensor w = apply_mask ? mul(p.weight, p.mask) : p.weight;
        h = l.kind == LayerKind::kDense ? add_bias(matmul(h, w), p.bias) : add_bias(conv2d(h, w), p.bias);
        break;
      }
      case LayerKind::kRelu: h = relu(h); break;
      case LayerKind::kMaxPool: h = maxpool2d(h, l.kernel); break;
      case LayerKind::kFlatten: h = reshape(h, Shape{n, h.size() / std::max<Index>(n, 1)}); break;
      case LayerKind::kSoftmaxOutput: break;
    }
  }
  return h;
}

Tensor softmax_at_temperature(const Tensor& logits, Scalar temperature) {
  if (!(temperature > 0.0)) throw ContractError("softmax temperature must be positive");
  return temperature == 1.0 ? softmax(logits) : softmax(scale(logits, 1.0 / temperature));
}

// ---------------------------------------------------------------------------
// Binarization

std::vector<Index> top_k_by_magnitude(const Array& scores, Index k) {
  if (k < 0 || k > scores.size()) throw ContractError("top-k: k out of range");
  std::vector<Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), Index{0});
  auto before = [&scores](Index a, Index b) {
    const Scalar ma = std::abs(scores[a]);
    const Scalar mb = std::abs(scores[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), before);
  order.resize(static_cast<std::size_t>(k));
  return order;
}

BinaryMask mask_from_scores(const Array& scores, Index k) {
  BinaryMask mask;
  mask.bits.assign(static_cast<std::size_t>(scores.size()), 0);
  for (Index i : top_k_by_magnitude(scores, k)) mask.bits[static_cast<std::size_t>(i)] = 1;
  mask.retained_count = k;
  return mask;
}

BinaryMask binarize_mask(const MaskedModel& model, Index k_prime) {
  const Index k = model.maskable_count();
  if (k_prime <= 0 || k_prime > k) {
    throw ContractError("binarize_mask: k' = " + std::to_string(k_prime) + " outside (0, " + std::to_string(k) + "]");
  }
  return mask_from_scores(model.flat_mask(), k_prime);
}

BinaryMask all_ones_mask(Index k) {
  BinaryMask mask;
  mask.bits.assign(static_cast<std::size_t>(k), 1);
  mask.retained_count = k;
  return mask;
}

Index retained_target(Index k, Scalar pruning_fraction) {
  if (!(pruning_fraction >= 0.0 && pruning_fraction < 1.0)) {
    throw ContractError("pruning fraction must lie in [0, 1)");
  }
  const auto kept = static_cast<Index>(std::llround((1.0 - pruning_fraction) * static_cast<Scalar>(k)));
  return std::clamp<Index>(kept, 1, k);
}

void apply_binary_mask(MaskedModel& model, const BinaryMask& mask) {
  if (mask.size() != model.maskable_count()) {
    throw DimensionError("binary mask has " + std::to_string(mask.size()) + " bits, model has " +
                         std::to_string(model.maskable_count()) + " weights");
  }
  std::size_t offset = 0;
  for (ParamLayer& p : model.param_layers()) {
    Array& b = p.mask.mutable_values();
    Array& w = p.weight.mutable_values();
    for (Index i = 0; i < b.size(); ++i, ++offset) {
      const bool keep = mask.bits[offset] != 0;
      b[i] = keep ? 1.0 : 0.0;
      if (!keep) w[i] = 0.0;
    }
  }
}

}  // namespace dwd
