// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "deadwood/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dwd {

/// normalized = raw * scale + offset, per feature.
struct Normalization {
  Array scale;
  Array offset;
};

struct Dataset {
  RowMatrix inputs;         // N x features, values in [0, 1]
  std::vector<int> labels;  // N class indices in [0, class_count)
  Shape sample_shape;       // {features} or {channels, height, width}
  Index class_count = 0;
  std::string split = "full";
  Normalization normalization;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index features() const { return inputs.cols(); }
  bool empty() const { return labels.empty(); }

  Tensor batch_inputs(std::span<const Index> indices) const;
  std::vector<int> batch_labels(std::span<const Index> indices) const;
  Tensor all_inputs() const;
  Dataset subset(std::span<const Index> indices, const std::string& tag) const;
};

/// Reads an IDX image file (magic 0x00000803) and label file (magic
/// 0x00000801). Gzip-compressed files are decompressed transparently.
/// Pixels are scaled from bytes to [0, 1] by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

enum class SyntheticKind { kTwoMoons, kGaussianBlobs };

/// Two interleaving half circles (2 classes) or isotropic Gaussian clusters
/// around `classes` centres spaced on a circle of radius 5. Features are
/// min-max normalized to [0, 1]. Deterministic per seed.
Dataset make_synthetic(SyntheticKind kind, Index n, Scalar noise, std::uint64_t seed, Index classes = 3);

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Stratified, seeded split; sizes are round(n*f_train), round(n*f_val) and
/// the remainder.
Splits split(const Dataset& data, std::array<Scalar, 3> fractions, std::uint64_t seed);

/// Stratified subset of `count` samples.
Dataset stratified_subset(const Dataset& data, Index count, std::uint64_t seed);

/// A seeded permutation of [0, n) cut into batches of at most batch_size.
std::vector<std::vector<Index>> shuffled_batches(Index n, Index batch_size, std::uint64_t seed);
/// [0, n) in order, cut into batches.
std::vector<std::vector<Index>> sequential_batches(Index n, Index batch_size);

/// Dataset cache in the DWD1 container.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace dwd
