// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/data.hpp"

#include "deadwood/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>

namespace dwd {

namespace {

std::string read_maybe_gzipped(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::unique_ptr<gzFile_s, decltype(&gzclose)> guard(f, &gzclose);
  std::string out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  if (n < 0) throw FormatError("'" + path.string() + "' is corrupt");
  return out;
}

std::uint32_t big_endian_u32(const std::string& bytes, std::size_t offset, const std::string& what) {
  if (bytes.size() < offset + 4) throw FormatError(what + " truncated");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

void min_max_normalize(Dataset& d) {
  const Index f = d.features();
  d.normalization.scale.resize(f);
  d.normalization.offset.resize(f);
  for (Index j = 0; j < f; ++j) {
    const Scalar lo = d.inputs.col(j).minCoeff();
    const Scalar hi = d.inputs.col(j).maxCoeff();
    const Scalar s = hi > lo ? 1.0 / (hi - lo) : 1.0;
    d.normalization.scale[j] = s;
    d.normalization.offset[j] = -lo * s;
    d.inputs.col(j) = ((d.inputs.col(j).array() - lo) * s).min(1.0).max(0.0).matrix();
  }
}

// Per-class shuffled index lists, interleaved round robin so that every
// prefix keeps class proportions.
std::vector<Index> stratified_order(const Dataset& data, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(data.class_count));
  for (Index i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  for (auto& c : by_class) std::shuffle(c.begin(), c.end(), rng);

  // Assign each sample a fractional rank position within its class so the
  // merged order interleaves classes proportionally.
  std::vector<std::pair<Scalar, Index>> keyed;
  keyed.reserve(static_cast<std::size_t>(data.size()));
  for (const auto& c : by_class) {
    for (std::size_t r = 0; r < c.size(); ++r) {
      keyed.emplace_back((static_cast<Scalar>(r) + 0.5) / static_cast<Scalar>(c.size()), c[r]);
    }
  }
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Index> order;
  order.reserve(keyed.size());
  for (const auto& [key, idx] : keyed) order.push_back(idx);
  return order;
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor Dataset::batch_inputs(std::span<const Index> indices) const {
  const Index n = static_cast<Index>(indices.size());
  Array out(n * features());
  MatrixMap m(out.data(), n, features());
  for (Index i = 0; i < n; ++i) m.row(i) = inputs.row(indices[static_cast<std::size_t>(i)]);
  return Tensor(Shape{n, features()}, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const Index> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

Tensor Dataset::all_inputs() const {
  Array out = Eigen::Map<const Array>(inputs.data(), inputs.size());
  return Tensor(Shape{size(), features()}, std::move(out));
}

Dataset Dataset::subset(std::span<const Index> indices, const std::string& tag) const {
  Dataset d;
  d.inputs.resize(static_cast<Index>(indices.size()), features());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    d.inputs.row(static_cast<Index>(i)) = inputs.row(indices[i]);
    d.labels.push_back(labels[static_cast<std::size_t>(indices[i])]);
  }
  d.sample_shape = sample_shape;
  d.class_count = class_count;
  d.split = tag;
  d.normalization = normalization;
  return d;
}

// ---------------------------------------------------------------------------

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const std::string img = read_maybe_gzipped(images);
  const std::string lab = read_maybe_gzipped(labels);
  if (big_endian_u32(img, 0, "image file") != 0x00000803) throw FormatError("image file has wrong IDX magic");
  if (big_endian_u32(lab, 0, "label file") != 0x00000801) throw FormatError("label file has wrong IDX magic");
  const Index n = big_endian_u32(img, 4, "image file");
  const Index rows = big_endian_u32(img, 8, "image file");
  const Index cols = big_endian_u32(img, 12, "image file");
  const Index n_labels = big_endian_u32(lab, 4, "label file");
  if (n != n_labels) {
    throw FormatError("image count " + std::to_string(n) + " does not match label count " + std::to_string(n_labels));
  }
  if (n == 0) throw FormatError("IDX files hold no samples");
  const Index pixels = rows * cols;
  if (static_cast<Index>(img.size()) < 16 + n * pixels) throw FormatError("image file truncated");
  if (static_cast<Index>(lab.size()) < 8 + n) throw FormatError("label file truncated");

  Dataset d;
  d.inputs.resize(n, pixels);
  const auto* px = reinterpret_cast<const unsigned char*>(img.data() + 16);
  for (Index i = 0; i < n * pixels; ++i) d.inputs.data()[i] = static_cast<Scalar>(px[i]) / 255.0;
  int max_label = 0;
  for (Index i = 0; i < n; ++i) {
    const int y = static_cast<unsigned char>(lab[static_cast<std::size_t>(8 + i)]);
    d.labels.push_back(y);
    max_label = std::max(max_label, y);
  }
  d.sample_shape = {1, rows, cols};
  d.class_count = max_label + 1;
  d.normalization = {Array::Constant(pixels, 1.0 / 255.0), Array::Zero(pixels)};
  return d;
}

Dataset make_synthetic(SyntheticKind kind, Index n, Scalar noise, std::uint64_t seed, Index classes) {
  if (n < 2) throw ContractError("synthetic dataset needs n >= 2");
  if (noise < 0.0) throw ContractError("synthetic noise must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> gauss(0.0, 1.0);
  Dataset d;
  d.inputs.resize(n, 2);
  d.sample_shape = {2};
  if (kind == SyntheticKind::kTwoMoons) {
    d.class_count = 2;
    const Index upper = (n + 1) / 2;
    const Index lower = n - upper;
    for (Index i = 0; i < n; ++i) {
      const bool top = i < upper;
      const Index m = top ? upper : lower;
      const Index r = top ? i : i - upper;
      const Scalar t = m > 1 ? std::numbers::pi * static_cast<Scalar>(r) / static_cast<Scalar>(m - 1) : 0.0;
      const Scalar x = top ? std::cos(t) : 1.0 - std::cos(t);
      const Scalar y = top ? std::sin(t) : 0.5 - std::sin(t);
      d.inputs(i, 0) = x + noise * gauss(rng);
      d.inputs(i, 1) = y + noise * gauss(rng);
      d.labels.push_back(top ? 0 : 1);
    }
  } else {
    if (classes < 2) throw ContractError("blobs need at least 2 classes");
    d.class_count = classes;
    for (Index i = 0; i < n; ++i) {
      const int c = static_cast<int>(i % classes);
      const Scalar angle = 2.0 * std::numbers::pi * c / static_cast<Scalar>(classes);
      d.inputs(i, 0) = 5.0 * std::cos(angle) + noise * gauss(rng);
      d.inputs(i, 1) = 5.0 * std::sin(angle) + noise * gauss(rng);
      d.labels.push_back(c);
    }
  }
  min_max_normalize(d);
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Dataset shuffled = d.subset(perm, "full");
  return shuffled;
}

Splits split(const Dataset& data, std::array<Scalar, 3> fractions, std::uint64_t seed) {
  for (Scalar f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ContractError("split fractions must lie in [0, 1]");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
    throw ContractError("split fractions must sum to 1");
  }
  const std::vector<Index> order = stratified_order(data, seed);
  const Index n = data.size();
  const auto n_train = static_cast<Index>(std::llround(fractions[0] * static_cast<Scalar>(n)));
  const auto n_val = std::min(n - n_train, static_cast<Index>(std::llround(fractions[1] * static_cast<Scalar>(n))));
  const std::span<const Index> all(order);
  Splits s;
  s.train = data.subset(all.subspan(0, static_cast<std::size_t>(n_train)), "train");
  s.val = data.subset(all.subspan(static_cast<std::size_t>(n_train), static_cast<std::size_t>(n_val)), "val");
  s.test = data.subset(all.subspan(static_cast<std::size_t>(n_train + n_val)), "test");
  return s;
}

Dataset stratified_subset(const Dataset& data, Index count, std::uint64_t seed) {
  if (count < 1 || count > data.size()) throw ContractError("subset size out of range");
  const std::vector<Index> order = stratified_order(data, seed);
  return data.subset(std::span<const Index>(order).subspan(0, static_cast<std::size_t>(count)), data.split);
}

std::vector<std::vector<Index>> shuffled_batches(Index n, Index batch_size, std::uint64_t seed) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < n; start += batch_size) {
    out.emplace_back(perm.begin() + start, perm.begin() + std::min(n, start + batch_size));
  }
  return out;
}

std::vector<std::vector<Index>> sequential_batches(Index n, Index batch_size) {
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < n; start += batch_size) {
    std::vector<Index> b(static_cast<std::size_t>(std::min(n, start + batch_size) - start));
    std::iota(b.begin(), b.end(), start);
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  Container c;
  c.metadata = {{"format_version", 1},
                {"kind", "dataset"},
                {"split", data.split},
                {"sample_shape", data.sample_shape},
                {"class_count", data.class_count}};
  Array inputs = Eigen::Map<const Array>(data.inputs.data(), data.inputs.size());
  Array labels(data.size());
  for (Index i = 0; i < data.size(); ++i) labels[i] = data.labels[static_cast<std::size_t>(i)];
  c.tensors.push_back({"inputs", Shape{data.size(), data.features()}, std::move(inputs)});
  c.tensors.push_back({"labels", Shape{data.size()}, std::move(labels)});
  c.tensors.push_back({"norm.scale", Shape{data.normalization.scale.size()}, data.normalization.scale});
  c.tensors.push_back({"norm.offset", Shape{data.normalization.offset.size()}, data.normalization.offset});
  write_container(path, c);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.metadata.value("kind", std::string()) != "dataset") throw FormatError("container is not a dataset");
  Dataset d;
  const NamedTensor& inputs = c.at("inputs");
  if (inputs.shape.size() != 2) throw FormatError("dataset inputs must be rank 2");
  d.inputs = ConstMatrixMap(inputs.values.data(), inputs.shape[0], inputs.shape[1]);
  for (Index i = 0; i < c.at("labels").values.size(); ++i) {
    d.labels.push_back(static_cast<int>(c.at("labels").values[i]));
  }
  d.sample_shape = c.metadata.at("sample_shape").get<Shape>();
  d.class_count = c.metadata.at("class_count").get<Index>();
  d.split = c.metadata.at("split").get<std::string>();
  d.normalization = {c.at("norm.scale").values, c.at("norm.offset").values};
  return d;
}

}  // namespace dwd
