// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layered classifiers whose weights are gated per connection by a relaxed
// mask b: every dense or convolutional layer computes with theta * b.

#pragma once

#include "deadwood/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dwd {

enum class LayerKind { kDense, kConv2d, kRelu, kMaxPool, kFlatten, kSoftmaxOutput };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  Index in = 0;      // dense: input features, conv: input channels
  Index out = 0;     // dense: output features, conv: output channels
  Index kernel = 0;  // conv: square kernel side, maxpool: window

  static LayerSpec dense(Index in, Index out) { return {LayerKind::kDense, in, out, 0}; }
  static LayerSpec conv2d(Index in, Index out, Index kernel) { return {LayerKind::kConv2d, in, out, kernel}; }
  static LayerSpec relu() { return {LayerKind::kRelu, 0, 0, 0}; }
  static LayerSpec maxpool(Index kernel) { return {LayerKind::kMaxPool, 0, 0, kernel}; }
  static LayerSpec flatten() { return {LayerKind::kFlatten, 0, 0, 0}; }
  static LayerSpec softmax_output() { return {LayerKind::kSoftmaxOutput, 0, 0, 0}; }

  bool has_parameters() const { return kind == LayerKind::kDense || kind == LayerKind::kConv2d; }
  bool operator==(const LayerSpec&) const = default;
};

struct Architecture {
  std::string name;
  Shape input_shape;  // per sample: {features} or {channels, height, width}
  std::vector<LayerSpec> layers;

  /// Per-sample activation shape before layer 0 and after every layer.
  /// Throws DimensionError when consecutive layers do not conform.
  std::vector<Shape> activation_shapes() const;
  void validate() const { (void)activation_shapes(); }
  Index input_size() const { return shape_size(input_shape); }
  Index class_count() const;

  static Architecture mlp(const std::vector<Index>& widths);
  /// 784-256-128-10.
  static Architecture desk_mlp();
  /// conv(1->8, 3x3)-pool-conv(8->16, 3x3)-pool-dense(400->10) on 1x28x28.
  static Architecture desk_cnn();

  bool operator==(const Architecture&) const = default;
};

/// Weight, bias and relaxed mask of one dense or convolutional layer.
/// Dense weights are laid out in x out; conv weights out x in x k x k.
struct ParamLayer {
  std::size_t layer = 0;  // index into Architecture::layers
  Tensor weight;
  Tensor bias;
  Tensor mask;
};

/// Which tensors receive gradients.
enum class TrainMode {
  kFrozen,    // nothing
  kPretrain,  // weights and biases, mask fixed
  kPrune,     // mask and biases, weights frozen
  kFineTune,  // weights and biases, binary mask fixed
};

class MaskedModel {
 public:
  /// He-normal weights, zero biases, all-ones mask.
  MaskedModel(Architecture architecture, std::uint64_t seed);

  MaskedModel clone() const;

  const Architecture& architecture() const { return architecture_; }
  std::vector<ParamLayer>& param_layers() { return params_; }
  const std::vector<ParamLayer>& param_layers() const { return params_; }

  /// Total number of maskable weights, k.
  Index maskable_count() const;
  Index class_count() const { return architecture_.class_count(); }

  void set_mode(TrainMode mode);
  TrainMode mode() const { return mode_; }
  std::vector<Tensor> trainable() const;
  std::vector<Tensor> masks() const;
  void zero_grad();

  Array flat_mask() const;
  Array flat_weights() const;
  void set_flat_mask(const Array& values);
  void clamp_masks();

 private:
  Architecture architecture_;
  std::vector<ParamLayer> params_;
  TrainMode mode_ = TrainMode::kFrozen;
};

/// Inputs are N x input_size (flattened) or N x input_shape. Returns N x K
/// logits. With apply_mask=false the raw weights are used directly.
Tensor forward(const MaskedModel& model, const Tensor& x, bool apply_mask = true);

/// Row-wise softmax(logits / T).
Tensor softmax_at_temperature(const Tensor& logits, Scalar temperature);

struct BinaryMask {
  std::vector<std::uint8_t> bits;
  Index retained_count = 0;

  Index size() const { return static_cast<Index>(bits.size()); }
  bool operator==(const BinaryMask&) const = default;
};

/// Indices of the k largest |scores|; equal magnitudes keep the lower index.
std::vector<Index> top_k_by_magnitude(const Array& scores, Index k);
BinaryMask mask_from_scores(const Array& scores, Index k);
BinaryMask binarize_mask(const MaskedModel& model, Index k_prime);
BinaryMask all_ones_mask(Index k);

/// Retained count for a pruning fraction: round((1 - fraction) * k), at least 1.
Index retained_target(Index k, Scalar pruning_fraction);

/// Sets mask := bits and zeroes the weights at pruned positions, producing a
/// student whose removed connections hold exactly 0.
void apply_binary_mask(MaskedModel& model, const BinaryMask& mask);

}  // namespace dwd
