// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dwd {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'W', 'D', '1'};
constexpr int kFormatVersion = 1;

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
    return value;
  }

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("container truncated");
    std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(
      ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

const NamedTensor* Container::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const NamedTensor& Container::at(const std::string& name) const {
  const NamedTensor* t = find(name);
  if (t == nullptr) throw FormatError("container has no tensor '" + name + "'");
  return *t;
}

std::string encode_container(const Container& container) {
  std::string out(kMagic, sizeof(kMagic));
  const std::string meta = container.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(container.tensors.size()));
  for (const NamedTensor& t : container.tensors) {
    if (shape_size(t.shape) != t.values.size()) throw DimensionError("tensor '" + t.name + "' shape mismatch");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (Index d : t.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.values.data()), static_cast<std::size_t>(t.values.size()) * 8);
  }
  put<std::uint32_t>(out, crc32(out));
  return out;
}

Container decode_container(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 4) throw FormatError("container truncated");
  if (std::memcmp(bytes.data(), kMagic, 3) != 0) throw FormatError("not a DWD container (bad magic)");
  if (bytes[3] != kMagic[3]) {
    throw VersionError(std::string("unsupported container version '") + bytes[3] + "'");
  }
  const std::string_view body(bytes.data(), bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  if (stored != crc32(body)) throw ChecksumError("container checksum mismatch");

  Reader in(body);
  in.take(sizeof(kMagic));
  Container c;
  const auto meta_len = in.get<std::uint64_t>();
  if (meta_len > in.remaining()) throw FormatError("container truncated");
  try {
    c.metadata = nlohmann::json::parse(in.take(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container metadata is not valid JSON: ") + e.what());
  }
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = in.get<std::uint32_t>();
    t.name = std::string(in.take(name_len));
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw FormatError("tensor '" + t.name + "' has implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<Index>(in.get<std::uint64_t>()));
    const Index n = shape_size(t.shape);
    if (n < 0 || static_cast<std::size_t>(n) > in.remaining() / 8) throw FormatError("container truncated");
    t.values.resize(n);
    const std::string_view raw = in.take(static_cast<std::size_t>(n) * 8);
    std::memcpy(t.values.data(), raw.data(), raw.size());
    c.tensors.push_back(std::move(t));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes before checksum");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& container) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  const std::string bytes = encode_container(container);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_container(buf.str());
}

// ---------------------------------------------------------------------------

nlohmann::json architecture_to_json(const Architecture& architecture) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : architecture.layers) {
    nlohmann::json j{{"kind", to_string(l.kind)}};
    if (l.has_parameters()) {
      j["in"] = l.in;
      j["out"] = l.out;
    }
    if (l.kind == LayerKind::kConv2d || l.kind == LayerKind::kMaxPool) j["kernel"] = l.kernel;
    layers.push_back(std::move(j));
  }
  return {{"name", architecture.name}, {"input_shape", architecture.input_shape}, {"layers", std::move(layers)}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  a.name = j.value("name", std::string("custom"));
  a.input_shape = j.at("input_shape").get<Shape>();
  for (const auto& l : j.at("layers")) {
    LayerSpec spec;
    spec.kind = layer_kind_from_string(l.at("kind").get<std::string>());
    spec.in = l.value("in", Index{0});
    spec.out = l.value("out", Index{0});
    spec.kernel = l.value("kernel", Index{0});
    a.layers.push_back(spec);
  }
  a.validate();
  return a;
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kPretrained: return "pretrained";
    case Stage::kPruned: return "pruned";
    case Stage::kFineTuned: return "fine-tuned";
  }
  return "unknown";
}

Stage stage_from_string(const std::string& name) {
  for (Stage s : {Stage::kPretrained, Stage::kPruned, Stage::kFineTuned}) {
    if (to_string(s) == name) return s;
  }
  throw FormatError("unknown stage '" + name + "'");
}

void save_checkpoint(const std::filesystem::path& path, const MaskedModel& model, const std::optional<BinaryMask>& mask,
                     const CheckpointMetadata& metadata) {
  Container c;
  c.metadata = {{"format_version", kFormatVersion},
                {"kind", "checkpoint"},
                {"architecture", architecture_to_json(model.architecture())},
                {"stage", to_string(metadata.stage)},
                {"seed", metadata.seed},
                {"pruning_target", metadata.pruning_target},
                {"extra", metadata.extra}};
  const auto& params = model.param_layers();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(params[i].layer) + ".";
    for (auto [suffix, t] : {std::pair{"weight", &params[i].weight}, std::pair{"bias", &params[i].bias},
                             std::pair{"mask", &params[i].mask}}) {
      c.tensors.push_back({prefix + suffix, t->shape(), t->values()});
    }
  }
  if (mask) {
    Array bits(mask->size());
    for (Index i = 0; i < bits.size(); ++i) bits[i] = mask->bits[static_cast<std::size_t>(i)];
    c.tensors.push_back({"binary_mask", Shape{bits.size()}, std::move(bits)});
  }
  write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const nlohmann::json& m = c.metadata;
  if (m.value("kind", std::string()) != "checkpoint") throw FormatError("container is not a checkpoint");
  if (m.value("format_version", 0) != kFormatVersion) throw VersionError("unsupported checkpoint format version");

  Checkpoint ck{MaskedModel(architecture_from_json(m.at("architecture")), 0), std::nullopt, {}};
  for (ParamLayer& p : ck.model.param_layers()) {
    const std::string prefix = "layer" + std::to_string(p.layer) + ".";
    for (auto [suffix, t] : {std::pair{"weight", &p.weight}, std::pair{"bias", &p.bias}, std::pair{"mask", &p.mask}}) {
      const NamedTensor& stored = c.at(prefix + suffix);
      if (stored.shape != t->shape()) throw FormatError("tensor '" + stored.name + "' has the wrong shape");
      *t = Tensor(stored.shape, stored.values);
    }
  }
  if (const NamedTensor* bits = c.find("binary_mask")) {
    BinaryMask mask;
    mask.bits.resize(static_cast<std::size_t>(bits->values.size()));
    for (Index i = 0; i < bits->values.size(); ++i) {
      mask.bits[static_cast<std::size_t>(i)] = bits->values[i] != 0.0 ? 1 : 0;
      mask.retained_count += mask.bits[static_cast<std::size_t>(i)];
    }
    if (mask.size() != ck.model.maskable_count()) throw FormatError("binary mask size does not match the model");
    ck.mask = std::move(mask);
  }
  ck.metadata.stage = stage_from_string(m.at("stage").get<std::string>());
  ck.metadata.seed = m.at("seed").get<std::uint64_t>();
  ck.metadata.pruning_target = m.at("pruning_target").get<Scalar>();
  ck.metadata.extra = m.value("extra", nlohmann::json::object());
  return ck;
}

}  // namespace dwd
