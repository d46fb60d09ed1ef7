// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

namespace dwd {

using nlohmann::json;

ConfigError::ConfigError(std::string field_name, const std::string& message, int line_number)
    : std::runtime_error((line_number > 0 ? "line " + std::to_string(line_number) + ": " : std::string()) +
                         (field_name.empty() ? std::string() : "'" + field_name + "': ") + message),
      field(std::move(field_name)),
      line(line_number) {}

namespace {

// 1-based line of the dotted key in the source text, found by locating each
// component in turn; 0 when absent.
int line_of(const std::string& source, const std::string& dotted) {
  if (source.empty() || dotted.empty()) return 0;
  std::size_t pos = 0;
  std::stringstream parts(dotted);
  std::string part;
  while (std::getline(parts, part, '.')) {
    const std::size_t found = source.find('"' + part + '"', pos);
    if (found == std::string::npos) break;
    pos = found;
  }
  if (pos == 0 && source.find('"' + dotted.substr(0, dotted.find('.')) + '"') == std::string::npos) return 0;
  return 1 + static_cast<int>(std::count(source.begin(), source.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

int line_at_byte(const std::string& source, std::size_t byte) {
  byte = std::min(byte, source.size());
  return 1 + static_cast<int>(std::count(source.begin(), source.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

class Fields {
 public:
  Fields(const json& root, const std::string& source) : root_(root), source_(source) {}

  [[noreturn]] void fail(const std::string& path, const std::string& message) const {
    throw ConfigError(path, message, line_of(source_, path));
  }

  const json& at(const std::string& path) const {
    const json* node = &root_;
    std::stringstream parts(path);
    std::string part;
    while (std::getline(parts, part, '.')) {
      if (!node->is_object() || !node->contains(part)) fail(path, "missing required field");
      node = &(*node)[part];
    }
    return *node;
  }

  template <typename T>
  T get(const std::string& path) const {
    try {
      return at(path).get<T>();
    } catch (const json::exception& e) {
      fail(path, std::string("wrong type: ") + e.what());
    }
  }

  Scalar positive(const std::string& path) const {
    const auto v = get<Scalar>(path);
    if (!(v > 0.0)) fail(path, "must be positive");
    return v;
  }

  Index count(const std::string& path, Index min_value) const {
    const auto v = get<Index>(path);
    if (v < min_value) fail(path, "must be at least " + std::to_string(min_value));
    return v;
  }

  // Rejects keys absent from the defaults.
  void check_keys(const json& node, const json& defaults, const std::string& prefix) const {
    if (!node.is_object()) return;
    for (const auto& [key, value] : node.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      if (!defaults.contains(key)) fail(path, "unknown field");
      if (key == "architecture" || key == "epsilon_set" || key == "rho") continue;
      if (defaults[key].is_object()) check_keys(value, defaults[key], path);
    }
  }

 private:
  const json& root_;
  const std::string& source_;
};

AttackSpec parse_attack(const Fields& f, const std::string& path) {
  try {
    return attack_spec_from_json(f.at(path));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    f.fail(path, e.what());
  }
}

Architecture parse_architecture(const Fields& f) {
  const json& a = f.at("architecture");
  if (a.is_string()) {
    const std::string name = a.get<std::string>();
    if (name == "mlp") return Architecture::desk_mlp();
    if (name == "cnn") return Architecture::desk_cnn();
    f.fail("architecture", "unknown preset '" + name + "' (expected mlp, cnn or an object)");
  }
  try {
    return architecture_from_json(a);
  } catch (const std::exception& e) {
    f.fail("architecture", e.what());
  }
}

std::string arch_json_name(const Architecture& a) {
  if (a == Architecture::desk_mlp()) return "mlp";
  if (a == Architecture::desk_cnn()) return "cnn";
  return "";
}

}  // namespace

json default_config_json() {
  const ExperimentConfig c;
  return config_to_json(c);
}

json config_to_json(const ExperimentConfig& c) {
  const std::string arch_name = arch_json_name(c.architecture);
  const DatasetSpec& d = c.dataset;
  const KDCoefficients& k = c.finetune.coefficients;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()},
      {"dataset",
       {{"kind", d.kind}, {"images", d.images.string()}, {"labels", d.labels.string()}, {"cache", d.cache.string()},
        {"subset", d.subset}, {"n", d.n}, {"noise", d.noise}, {"classes", d.classes}, {"split", d.split},
        {"split_seed", d.split_seed}, {"val_fraction", d.val_fraction}}},
      {"architecture", arch_name.empty() ? architecture_to_json(c.architecture) : json(arch_name)},
      {"pretrain",
       {{"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr}, {"batch_size", c.pretrain.batch_size},
        {"robust", c.pretrain.robust}, {"attack", attack_spec_to_json(c.pretrain.attack)}}},
      {"prune",
       {{"target_fraction", c.prune.target_fraction}, {"max_epochs", c.prune.max_epochs}, {"lr", c.prune.lr},
        {"rho", c.prune.rho_schedule},
        {"mode", c.prune.mode == PruneMode::kIterative ? "iterative" : "single-shot"},
        {"iterative_step", c.prune.iterative_step}, {"batch_size", c.prune.batch_size},
        {"sparsity_threshold", c.prune.sparsity_threshold}, {"dual_subsample", c.prune.dual_subsample},
        {"include_accuracy", c.prune.include_accuracy},
        {"robustness", c.prune.robustness == RobustnessTerm::kProxy ? "proxy" : "attack-loss"},
        {"attack", attack_spec_to_json(c.prune.attack)}, {"from_scratch", c.prune.from_scratch},
        {"method", c.prune_method}}},
      {"finetune",
       {{"variant", to_string(c.finetune.variant)}, {"alpha", k.alpha}, {"beta", k.beta}, {"gamma", k.gamma},
        {"temperature", k.temperature}, {"epsilon_max", k.epsilon_max}, {"max_epochs", c.finetune.max_epochs},
        {"patience", c.finetune.early_stop_patience}, {"lr", c.finetune.lr}, {"batch_size", c.finetune.batch_size},
        {"epsilon_set", c.finetune.epsilon_set}, {"pgd_steps", c.finetune.pgd_steps},
        {"validation_attack", attack_spec_to_json(c.finetune.validation_attack)}}},
      {"evaluate",
       {{"attack", attack_spec_to_json(c.evaluate.attack)}, {"sweep_steps", c.evaluate.sweep_steps},
        {"throughput", c.evaluate.throughput}}},
  };
}

ExperimentConfig config_from_json(const json& input, const std::string& source) {
  if (!input.is_object()) throw ConfigError("", "config must be a JSON object", 1);
  json doc = default_config_json();
  Fields f(doc, source);
  f.check_keys(input, doc, "");
  doc.merge_patch(input);
  if (input.contains("architecture")) doc["architecture"] = input["architecture"];

  ExperimentConfig c;
  if (!input.contains("seed")) f.fail("seed", "seed is mandatory");
  c.seed = f.get<std::uint64_t>("seed");
  c.output_dir = f.get<std::string>("output_dir");

  DatasetSpec& d = c.dataset;
  d.kind = f.get<std::string>("dataset.kind");
  const std::vector<std::string> kinds{"idx", "two-moons", "gaussian-blobs", "cache"};
  if (std::find(kinds.begin(), kinds.end(), d.kind) == kinds.end()) f.fail("dataset.kind", "unknown dataset kind");
  d.images = f.get<std::string>("dataset.images");
  d.labels = f.get<std::string>("dataset.labels");
  d.cache = f.get<std::string>("dataset.cache");
  if (d.kind == "idx" && (d.images.empty() || d.labels.empty())) {
    f.fail(d.images.empty() ? "dataset.images" : "dataset.labels", "path required for idx datasets");
  }
  if (d.kind == "cache" && d.cache.empty()) f.fail("dataset.cache", "path required for cached datasets");
  d.subset = f.count("dataset.subset", 0);
  d.n = f.count("dataset.n", 2);
  d.noise = f.get<Scalar>("dataset.noise");
  if (d.noise < 0.0) f.fail("dataset.noise", "must be non-negative");
  d.classes = f.count("dataset.classes", 2);
  const auto split = f.get<std::vector<Scalar>>("dataset.split");
  if (split.size() != 3) f.fail("dataset.split", "needs three fractions (train, val, test)");
  for (Scalar s : split) {
    if (!(s >= 0.0 && s <= 1.0)) f.fail("dataset.split", "fractions must lie in [0, 1]");
  }
  if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9) f.fail("dataset.split", "fractions must sum to 1");
  d.split = {split[0], split[1], split[2]};
  d.split_seed = f.get<std::uint64_t>("dataset.split_seed");
  d.val_fraction = f.get<Scalar>("dataset.val_fraction");
  if (!(d.val_fraction > 0.0 && d.val_fraction < 1.0)) f.fail("dataset.val_fraction", "must lie in (0, 1)");

  c.architecture = parse_architecture(f);

  c.pretrain.epochs = f.count("pretrain.epochs", 0);
  c.pretrain.lr = f.positive("pretrain.lr");
  c.pretrain.batch_size = f.count("pretrain.batch_size", 1);
  c.pretrain.robust = f.get<bool>("pretrain.robust");
  c.pretrain.attack = parse_attack(f, "pretrain.attack");
  c.pretrain.seed = c.seed;

  PruneRunConfig& p = c.prune;
  p.target_fraction = f.get<Scalar>("prune.target_fraction");
  if (!(p.target_fraction >= 0.0 && p.target_fraction < 1.0)) f.fail("prune.target_fraction", "must lie in [0, 1)");
  p.max_epochs = f.count("prune.max_epochs", 0);
  p.lr = f.positive("prune.lr");
  p.rho_schedule = f.get<std::vector<Scalar>>("prune.rho");
  if (p.rho_schedule.empty()) f.fail("prune.rho", "must list at least one step size");
  for (Scalar r : p.rho_schedule) {
    if (r < 0.0) f.fail("prune.rho", "step sizes must be non-negative");
  }
  const auto mode = f.get<std::string>("prune.mode");
  if (mode != "single-shot" && mode != "iterative") f.fail("prune.mode", "expected single-shot or iterative");
  p.mode = mode == "iterative" ? PruneMode::kIterative : PruneMode::kSingleShot;
  p.iterative_step = f.get<Scalar>("prune.iterative_step");
  if (!(p.iterative_step > 0.0 && p.iterative_step <= 1.0)) f.fail("prune.iterative_step", "must lie in (0, 1]");
  p.batch_size = f.count("prune.batch_size", 1);
  p.sparsity_threshold = f.positive("prune.sparsity_threshold");
  p.dual_subsample = f.count("prune.dual_subsample", 0);
  p.include_accuracy = f.get<bool>("prune.include_accuracy");
  const auto robustness = f.get<std::string>("prune.robustness");
  if (robustness != "proxy" && robustness != "attack-loss") f.fail("prune.robustness", "expected proxy or attack-loss");
  p.robustness = robustness == "proxy" ? RobustnessTerm::kProxy : RobustnessTerm::kAttackLoss;
  p.attack = parse_attack(f, "prune.attack");
  p.from_scratch = f.get<bool>("prune.from_scratch");
  c.prune_method = f.get<std::string>("prune.method");
  if (c.prune_method != "lagrangian" && c.prune_method != "lwm") f.fail("prune.method", "expected lagrangian or lwm");
  p.seed = c.seed;

  FineTuneConfig& t = c.finetune;
  try {
    t.variant = finetune_variant_from_string(f.get<std::string>("finetune.variant"));
  } catch (const ContractError& e) {
    f.fail("finetune.variant", e.what());
  }
  t.coefficients.alpha = f.get<Scalar>("finetune.alpha");
  t.coefficients.beta = f.get<Scalar>("finetune.beta");
  t.coefficients.gamma = f.get<Scalar>("finetune.gamma");
  t.coefficients.temperature = f.positive("finetune.temperature");
  t.coefficients.epsilon_max = f.get<Scalar>("finetune.epsilon_max");
  t.max_epochs = f.count("finetune.max_epochs", 0);
  t.early_stop_patience = f.count("finetune.patience", 1);
  t.lr = f.positive("finetune.lr");
  t.batch_size = f.count("finetune.batch_size", 1);
  t.epsilon_set = f.get<std::vector<Scalar>>("finetune.epsilon_set");
  t.pgd_steps = f.count("finetune.pgd_steps", 1);
  t.validation_attack = parse_attack(f, "finetune.validation_attack");
  t.seed = c.seed;
  try {
    t.validate();
  } catch (const ContractError& e) {
    f.fail("finetune", e.what());
  }

  c.evaluate.attack = parse_attack(f, "evaluate.attack");
  c.evaluate.sweep_steps = f.get<std::vector<Index>>("evaluate.sweep_steps");
  for (Index s : c.evaluate.sweep_steps) {
    if (s < 1) f.fail("evaluate.sweep_steps", "step counts must be positive");
  }
  c.evaluate.throughput = f.get<bool>("evaluate.throughput");
  return c;
}

json load_config_document(const std::filesystem::path& path, std::string* source) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (source) *source = text;
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("invalid JSON: ") + e.what(), line_at_byte(text, e.byte > 0 ? e.byte - 1 : 0));
  }
}

void apply_override(json& document, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--override", "expected KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &document;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> keys;
  while (std::getline(parts, part, '.')) keys.push_back(part);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->is_object()) throw ConfigError(key, "cannot override inside a non-object");
    node = &(*node)[keys[i]];
  }
  (*node)[keys.back()] = value;
}

// ---------------------------------------------------------------------------

DataBundle load_data(const DatasetSpec& spec) {
  Dataset full;
  try {
    if (spec.kind == "idx") {
      full = load_idx(spec.images, spec.labels);
    } else if (spec.kind == "cache") {
      full = load_dataset(spec.cache);
    } else {
      const SyntheticKind kind = spec.kind == "two-moons" ? SyntheticKind::kTwoMoons : SyntheticKind::kGaussianBlobs;
      full = make_synthetic(kind, spec.n, spec.noise, spec.split_seed, spec.classes);
    }
  } catch (const std::runtime_error& e) {
    throw ConfigError(spec.kind == "cache" ? "dataset.cache" : "dataset.images", e.what());
  }
  if (spec.subset > 0 && spec.subset < full.size()) full = stratified_subset(full, spec.subset, spec.split_seed);
  Splits s = split(full, spec.split, spec.split_seed);
  DataBundle b;
  b.train = std::move(s.train);
  b.test = s.test.empty() ? s.val : std::move(s.test);
  Splits tv = split(b.train, {1.0 - spec.val_fraction, spec.val_fraction, 0.0}, spec.split_seed + 1);
  b.ft_train = std::move(tv.train);
  b.val = std::move(tv.val);
  b.val.split = "val";
  return b;
}

MaskedModel run_pretrain(const ExperimentConfig& config, const DataBundle& data, TrainTrace* trace) {
  MaskedModel model(config.architecture, config.seed);
  if (config.prune.from_scratch) return model;
  TrainTrace t = pretrain(model, data.train, config.pretrain);
  if (trace) *trace = std::move(t);
  return model;
}

PruneStage run_prune(const MaskedModel& dense, const ExperimentConfig& config, const DataBundle& data) {
  const PruneRunConfig& pc = config.prune;
  std::vector<Scalar> targets;
  if (pc.mode == PruneMode::kIterative) {
    for (int r = 1;; ++r) {
      const Scalar t = std::min(pc.target_fraction, pc.iterative_step * r);
      targets.push_back(t);
      if (t >= pc.target_fraction - 1e-12) break;
    }
  } else {
    targets.push_back(pc.target_fraction);
  }

  PruneStage stage{dense.clone(), {}, {}, {}};
  if (config.prune_method == "lwm") {
    stage.mask = prune_lwm_baseline(dense, pc.target_fraction);
    apply_binary_mask(stage.student, stage.mask);
    stage.trace.k = dense.maskable_count();
    stage.trace.k_prime = stage.mask.retained_count;
    stage.trace.reached_target = true;
    return stage;
  }
  for (std::size_t r = 0; r < targets.size(); ++r) {
    PruneRunConfig round = pc;
    round.target_fraction = targets[r];
    round.seed = pc.seed + 7919ULL * r;
    PruneResult res = prune(stage.student, data.train, round);
    apply_binary_mask(stage.student, res.mask);
    stage.mask = std::move(res.mask);
    stage.trace = std::move(res.trace);
    if (r + 1 < targets.size()) {
      FineTuneConfig ft = config.finetune;
      ft.seed = config.finetune.seed + 31ULL * (r + 1);
      stage.round_finetunes.push_back(fine_tune(stage.student, stage.mask, dense, data.ft_train, data.val, ft));
    }
  }
  return stage;
}

FineTuneTrace run_finetune(MaskedModel& student, const BinaryMask& mask, const MaskedModel& teacher,
                           const ExperimentConfig& config, const DataBundle& data) {
  return fine_tune(student, mask, teacher, data.ft_train, data.val, config.finetune);
}

PipelineOutcome run_pipeline(const ExperimentConfig& config, const DataBundle& data, const MaskedModel* dense,
                             const PruneStage* pruned) {
  TrainTrace pretrain_trace;
  MaskedModel model = dense ? dense->clone() : run_pretrain(config, data, &pretrain_trace);
  PipelineOutcome out{std::move(model), std::move(pretrain_trace), {MaskedModel(config.architecture, 0), {}, {}, {}}, {}};
  const AttackSpec& attack = config.evaluate.attack;
  out.dense_eba = evaluate_eba(out.dense, data.test);
  out.dense_era = evaluate_era(out.dense, data.test, attack);
  if (pruned) {
    out.pruned = PruneStage{pruned->student.clone(), pruned->mask, pruned->trace, pruned->round_finetunes};
  } else {
    out.pruned = run_prune(out.dense, config, data);
  }
  out.pruned_eba = evaluate_eba(out.pruned.student, data.test);
  out.pruned_era = evaluate_era(out.pruned.student, data.test, attack);
  out.finetune = run_finetune(out.pruned.student, out.pruned.mask, out.dense, config, data);
  out.final_eba = evaluate_eba(out.pruned.student, data.test);
  out.final_era = evaluate_era(out.pruned.student, data.test, attack);
  return out;
}

// ---------------------------------------------------------------------------
// On-disk stages

namespace {

void write_json(const std::filesystem::path& path, const json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

Checkpoint require_stage(const ExperimentConfig& config, Stage stage, const std::string& consumer) {
  const std::filesystem::path path = checkpoint_path(config, stage);
  if (!std::filesystem::exists(path)) {
    throw StageError(consumer + " needs the " + to_string(stage) + " checkpoint '" + path.string() +
                     "'; run the earlier stage first");
  }
  Checkpoint ck = load_checkpoint(path);
  if (ck.metadata.stage != stage) {
    throw StageError("'" + path.string() + "' holds a " + to_string(ck.metadata.stage) + " model, expected " +
                     to_string(stage));
  }
  if (!(ck.model.architecture() == config.architecture)) {
    throw StageError("'" + path.string() + "' was produced with a different architecture");
  }
  return ck;
}

void write_stage_report(const ExperimentConfig& config, const std::string& name, const MaskedModel& model,
                        const std::optional<BinaryMask>& mask, const DataBundle& data) {
  EvalReport r = evaluate_model(model, mask, data.test, config.evaluate.attack, config.seed);
  r.extra["stage"] = name;
  write_report(config.output_dir / "reports" / name, r);
}

}  // namespace

PipelineOutcome run_recorded(const ExperimentConfig& config, const DataBundle& data, const MaskedModel* dense,
                             const PruneStage* pruned) {
  const auto start = std::chrono::steady_clock::now();
  write_json(config.output_dir / "config.resolved.json", config_to_json(config));
  PipelineOutcome out = run_pipeline(config, data, dense, pruned);
  const Scalar seconds = std::chrono::duration<Scalar>(std::chrono::steady_clock::now() - start).count();
  out.pretrain.write_csv(config.output_dir / "pretrain_trace.csv");
  out.pruned.trace.write_csv(config.output_dir / "prune_trace.csv");
  for (std::size_t r = 0; r < out.pruned.round_finetunes.size(); ++r) {
    out.pruned.round_finetunes[r].write_csv(config.output_dir / ("round" + std::to_string(r) + "_finetune_trace.csv"));
  }
  out.finetune.write_csv(config.output_dir / "finetune_trace.csv");
  save_checkpoint(checkpoint_path(config, Stage::kPretrained), out.dense, std::nullopt,
                  {Stage::kPretrained, config.seed, 0.0, {{"from_scratch", config.prune.from_scratch}}});
  save_checkpoint(checkpoint_path(config, Stage::kFineTuned), out.pruned.student, out.pruned.mask,
                  {Stage::kFineTuned, config.seed, config.prune.target_fraction,
                   {{"variant", to_string(config.finetune.variant)}, {"best_epoch", out.finetune.best_epoch}}});
  write_stage_report(config, "pretrained", out.dense, std::nullopt, data);
  EvalReport final_report =
      evaluate_model(out.pruned.student, out.pruned.mask, data.test, config.evaluate.attack, config.seed);
  final_report.extra["stage"] = "fine-tuned";
  final_report.extra["pruned_eba"] = out.pruned_eba;
  final_report.extra["pruned_era"] = out.pruned_era;
  final_report.timings["pipeline_seconds"] = seconds;
  write_report(config.output_dir / "reports" / "fine-tuned", final_report);
  return out;
}

std::filesystem::path checkpoint_path(const ExperimentConfig& config, Stage stage) {
  switch (stage) {
    case Stage::kPretrained: return config.output_dir / "pretrained.dwd";
    case Stage::kPruned: return config.output_dir / "pruned.dwd";
    case Stage::kFineTuned: return config.output_dir / "finetuned.dwd";
  }
  return config.output_dir / "unknown.dwd";
}

void stage_pretrain(const ExperimentConfig& config) {
  write_json(config.output_dir / "config.resolved.json", config_to_json(config));
  const DataBundle data = load_data(config.dataset);
  TrainTrace trace;
  MaskedModel model = run_pretrain(config, data, &trace);
  trace.write_csv(config.output_dir / "pretrain_trace.csv");
  CheckpointMetadata meta{Stage::kPretrained, config.seed, 0.0, {{"robust", config.pretrain.robust},
                                                                 {"from_scratch", config.prune.from_scratch}}};
  save_checkpoint(checkpoint_path(config, Stage::kPretrained), model, std::nullopt, meta);
  write_stage_report(config, "pretrained", model, std::nullopt, data);
}

void stage_prune(const ExperimentConfig& config) {
  write_json(config.output_dir / "config.resolved.json", config_to_json(config));
  const DataBundle data = load_data(config.dataset);
  const MaskedModel dense = config.prune.from_scratch ? MaskedModel(config.architecture, config.seed)
                                                      : require_stage(config, Stage::kPretrained, "prune").model;
  if (config.prune.from_scratch) {
    save_checkpoint(checkpoint_path(config, Stage::kPretrained), dense, std::nullopt,
                    {Stage::kPretrained, config.seed, 0.0, {{"from_scratch", true}}});
  }
  PruneStage stage = run_prune(dense, config, data);
  stage.trace.write_csv(config.output_dir / "prune_trace.csv");
  for (std::size_t r = 0; r < stage.round_finetunes.size(); ++r) {
    stage.round_finetunes[r].write_csv(config.output_dir / ("round" + std::to_string(r) + "_finetune_trace.csv"));
  }
  const Connectivity conn = connectivity_check(stage.student, stage.mask);
  CheckpointMetadata meta{Stage::kPruned, config.seed, config.prune.target_fraction,
                          {{"k", stage.trace.k}, {"k_prime", stage.trace.k_prime},
                           {"reached_target", stage.trace.reached_target}, {"connected", conn.connected}}};
  save_checkpoint(checkpoint_path(config, Stage::kPruned), stage.student, stage.mask, meta);
  write_stage_report(config, "pruned", stage.student, stage.mask, data);
}

void stage_finetune(const ExperimentConfig& config) {
  write_json(config.output_dir / "config.resolved.json", config_to_json(config));
  const DataBundle data = load_data(config.dataset);
  const Checkpoint teacher = require_stage(config, Stage::kPretrained, "finetune");
  Checkpoint student = require_stage(config, Stage::kPruned, "finetune");
  if (!student.mask) throw StageError("pruned checkpoint carries no binary mask");
  const FineTuneTrace trace = run_finetune(student.model, *student.mask, teacher.model, config, data);
  trace.write_csv(config.output_dir / "finetune_trace.csv");
  CheckpointMetadata meta{Stage::kFineTuned, config.seed, student.metadata.pruning_target,
                          {{"variant", to_string(config.finetune.variant)}, {"best_epoch", trace.best_epoch}}};
  save_checkpoint(checkpoint_path(config, Stage::kFineTuned), student.model, student.mask, meta);
  write_stage_report(config, "fine-tuned", student.model, student.mask, data);
}

EvalReport stage_eval(const ExperimentConfig& config) {
  std::optional<Checkpoint> ck;
  for (Stage s : {Stage::kFineTuned, Stage::kPruned, Stage::kPretrained}) {
    if (std::filesystem::exists(checkpoint_path(config, s))) {
      ck = require_stage(config, s, "eval");
      break;
    }
  }
  if (!ck) throw StageError("eval found no checkpoint under '" + config.output_dir.string() + "'");
  const DataBundle data = load_data(config.dataset);
  EvalReport r = evaluate_model(ck->model, ck->mask, data.test, config.evaluate.attack, config.seed);
  r.extra["stage"] = to_string(ck->metadata.stage);
  if (!config.evaluate.sweep_steps.empty()) {
    r.sweep = pgd_strength_sweep(ck->model, data.test, config.evaluate.sweep_steps, config.evaluate.attack.epsilon_max);
  }
  if (config.evaluate.throughput) {
    const Scalar eps = config.evaluate.attack.epsilon_max;
    r.timings["pgd_seconds_per_1000"] = attack_throughput(ck->model, data.test, AttackSpec::pgd(eps, 10));
    r.timings["fgsm_seconds_per_1000"] = attack_throughput(ck->model, data.test, AttackSpec::fgsm(eps));
    r.timings["fgsm_looping_seconds_per_1000"] =
        attack_throughput(ck->model, data.test, AttackSpec::fgsm_looping(eps));
  }
  write_report(config.output_dir / "reports" / "eval", r);
  return r;
}

}  // namespace dwd
