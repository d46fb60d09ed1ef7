// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// "DWD1" container: little-endian, magic "DWD1", u64 metadata length, JSON
// metadata, u32 record count, then per tensor: u32 name length, name, u32
// rank, u64 dims, raw f64 values. A trailing CRC32 covers every preceding byte.

#pragma once

#include "deadwood/model.hpp"
#include "deadwood/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dwd {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  Array values;
};

struct Container {
  nlohmann::json metadata;
  std::vector<NamedTensor> tensors;

  const NamedTensor& at(const std::string& name) const;
  const NamedTensor* find(const std::string& name) const;
};

std::string encode_container(const Container& container);
Container decode_container(const std::string& bytes);
void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

std::uint32_t crc32(std::string_view bytes);

nlohmann::json architecture_to_json(const Architecture& architecture);
Architecture architecture_from_json(const nlohmann::json& j);

enum class Stage { kPretrained, kPruned, kFineTuned };
std::string to_string(Stage stage);
Stage stage_from_string(const std::string& name);

struct CheckpointMetadata {
  Stage stage = Stage::kPretrained;
  std::uint64_t seed = 0;
  Scalar pruning_target = 0.0;
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  MaskedModel model;
  std::optional<BinaryMask> mask;
  CheckpointMetadata metadata;
};

void save_checkpoint(const std::filesystem::path& path, const MaskedModel& model, const std::optional<BinaryMask>& mask,
                     const CheckpointMetadata& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dwd
