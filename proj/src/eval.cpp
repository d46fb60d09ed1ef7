// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/eval.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <thread>

namespace dwd {

namespace {

// Applies fn to every batch, spreading batches over evaluation_threads()
// workers. Each call owns its own tape.
template <typename Result, typename Fn>
std::vector<Result> map_batches(const std::vector<std::vector<Index>>& batches, Fn fn) {
  std::vector<Result> out(batches.size());
  const auto workers = static_cast<std::size_t>(std::min<Index>(evaluation_threads(), static_cast<Index>(batches.size())));
  if (workers <= 1) {
    for (std::size_t i = 0; i < batches.size(); ++i) out[i] = fn(batches[i]);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < batches.size(); i += workers) out[i] = fn(batches[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

void require_nonempty(const Dataset& data, const char* what) {
  if (data.empty()) throw ContractError(std::string(what) + ": empty test set");
}

Index count_correct(const std::vector<int>& predicted, const std::vector<int>& labels) {
  Index c = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) c += predicted[i] == labels[i] ? 1 : 0;
  return c;
}

void add_to_group(DistanceGroup& g, Scalar proxy, Scalar score) {
  g.present = true;
  ++g.count;
  g.mean_proxy += proxy;
  g.mean_score += score;
}

void finish_group(DistanceGroup& g) {
  if (g.count > 0) {
    g.mean_proxy /= static_cast<Scalar>(g.count);
    g.mean_score /= static_cast<Scalar>(g.count);
  }
}

}  // namespace

Index evaluation_threads() {
  if (const char* env = std::getenv("DWD_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return v;
  }
  return 1;
}

std::vector<int> predict(const MaskedModel& model, const Tensor& x) {
  const Tensor logits = forward(model, x);
  const ConstMatrixMap m = logits.matrix_view();
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) {
    Index arg;
    m.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

Scalar evaluate_eba(const MaskedModel& model, const Dataset& data, Index batch_size) {
  require_nonempty(data, "evaluate_eba");
  const auto counts = map_batches<Index>(sequential_batches(data.size(), batch_size), [&](const std::vector<Index>& b) {
    return count_correct(predict(model, data.batch_inputs(b)), data.batch_labels(b));
  });
  const Index correct = std::accumulate(counts.begin(), counts.end(), Index{0});
  return 100.0 * static_cast<Scalar>(correct) / static_cast<Scalar>(data.size());
}

Scalar evaluate_era(const MaskedModel& model, const Dataset& data, const AttackSpec& spec, Index batch_size) {
  require_nonempty(data, "evaluate_era");
  spec.validate();
  const auto counts = map_batches<Index>(sequential_batches(data.size(), batch_size), [&](const std::vector<Index>& b) {
    const std::vector<int> y = data.batch_labels(b);
    const Tensor adv = run_attack(model, data.batch_inputs(b), y, spec, 0);
    return count_correct(predict(model, adv), y);
  });
  const Index correct = std::accumulate(counts.begin(), counts.end(), Index{0});
  return 100.0 * static_cast<Scalar>(correct) / static_cast<Scalar>(data.size());
}

PgdSweep pgd_strength_sweep(const MaskedModel& model, const Dataset& data, const std::vector<Index>& steps,
                            Scalar epsilon_max, Index batch_size) {
  PgdSweep sweep;
  sweep.epsilon_max = epsilon_max;
  std::vector<Scalar> values;
  for (Index s : steps) {
    const AttackSpec spec = AttackSpec::pgd(epsilon_max, s);
    SweepRow row{s, spec.effective_step_size(), evaluate_era(model, data, spec, batch_size)};
    values.push_back(row.era);
    sweep.rows.push_back(row);
  }
  if (!values.empty()) sweep.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<Scalar>(values.size());
  sweep.std_dev = sample_std(values);
  return sweep;
}

std::vector<const DistanceGroup*> DistanceStats::groups() const {
  return {&benign_correct, &benign_wrong, &adv_correct, &adv_wrong};
}

Array distance_scores(const Tensor& probabilities) {
  const ConstMatrixMap p = probabilities.matrix_view();
  const auto k = static_cast<Scalar>(p.cols());
  const Array sq = p.array().square().rowwise().sum();
  return ((sq - 1.0 / k) / (1.0 - 1.0 / k)).max(0.0).min(1.0);
}

DistanceStats boundary_distance_stats(const MaskedModel& model, const Dataset& data, const AttackSpec& spec,
                                      Index batch_size) {
  require_nonempty(data, "boundary_distance_stats");
  DistanceStats stats;
  for (const auto& b : sequential_batches(data.size(), batch_size)) {
    const std::vector<int> y = data.batch_labels(b);
    const Tensor x = data.batch_inputs(b);
    const Tensor adv = run_attack(model, x, y, spec, 0);
    for (int pass = 0; pass < 2; ++pass) {
      const Tensor probs = softmax(forward(model, pass == 0 ? x : adv).detach());
      const Array proxy = adversarial_proxy_rows(probs);
      const Array score = distance_scores(probs);
      const ConstMatrixMap p = probs.matrix_view();
      for (Index i = 0; i < p.rows(); ++i) {
        Index arg;
        p.row(i).maxCoeff(&arg);
        const bool correct = arg == y[static_cast<std::size_t>(i)];
        DistanceGroup& g = pass == 0 ? (correct ? stats.benign_correct : stats.benign_wrong)
                                     : (correct ? stats.adv_correct : stats.adv_wrong);
        add_to_group(g, proxy[i], score[i]);
      }
    }
  }
  for (DistanceGroup* g : {&stats.benign_correct, &stats.benign_wrong, &stats.adv_correct, &stats.adv_wrong}) {
    finish_group(*g);
  }
  return stats;
}

Scalar sample_std(const std::vector<Scalar>& values) {
  if (values.size() < 2) return 0.0;
  const Scalar mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<Scalar>(values.size());
  Scalar ss = 0.0;
  for (Scalar v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<Scalar>(values.size() - 1));
}

SeedSummary multi_seed_run(const std::function<SeedOutcome(std::uint64_t)>& experiment,
                           const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 2) throw ContractError("multi_seed_run needs at least two seeds");
  SeedSummary s;
  s.seeds = seeds;
  for (std::uint64_t seed : seeds) {
    const SeedOutcome o = experiment(seed);
    s.eba.push_back(o.eba);
    s.era.push_back(o.era);
  }
  const auto n = static_cast<Scalar>(seeds.size());
  s.eba_mean = std::accumulate(s.eba.begin(), s.eba.end(), 0.0) / n;
  s.era_mean = std::accumulate(s.era.begin(), s.era.end(), 0.0) / n;
  s.eba_std = sample_std(s.eba);
  s.era_std = sample_std(s.era);
  return s;
}

// ---------------------------------------------------------------------------
// Report

void EvalReport::validate() const {
  auto pct = [](Scalar v) { return v >= 0.0 && v <= 100.0; };
  if (!pct(eba) || !pct(era)) throw ContractError("report accuracies must lie in [0, 100]");
}

nlohmann::json attack_spec_to_json(const AttackSpec& spec) {
  return {{"family", to_string(spec.family)},   {"epsilon_max", spec.epsilon_max},
          {"epsilon_set", spec.epsilon_set},    {"num_steps", spec.num_steps},
          {"step_size", spec.step_size},        {"clip", {spec.clip.lo, spec.clip.hi}},
          {"random_start", spec.random_start},  {"seed", spec.seed}};
}

AttackSpec attack_spec_from_json(const nlohmann::json& j) {
  AttackSpec s;
  s.family = attack_family_from_string(j.value("family", std::string("pgd")));
  s.epsilon_max = j.value("epsilon_max", s.epsilon_max);
  s.epsilon_set = j.value("epsilon_set", s.epsilon_set);
  s.num_steps = j.value("num_steps", s.num_steps);
  s.step_size = j.value("step_size", s.step_size);
  if (j.contains("clip")) {
    const auto clip = j.at("clip").get<std::vector<Scalar>>();
    if (clip.size() != 2) throw ContractError("attack clip must have two entries");
    s.clip = {clip[0], clip[1]};
  }
  s.random_start = j.value("random_start", s.random_start);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

namespace {

nlohmann::json group_to_json(const DistanceGroup& g) {
  return {{"name", g.name}, {"count", g.count}, {"present", g.present}, {"mean_proxy", g.mean_proxy},
          {"mean_score", g.mean_score}};
}

DistanceGroup group_from_json(const nlohmann::json& j) {
  DistanceGroup g;
  g.name = j.at("name").get<std::string>();
  g.count = j.at("count").get<Index>();
  g.present = j.at("present").get<bool>();
  g.mean_proxy = j.at("mean_proxy").get<Scalar>();
  g.mean_score = j.at("mean_score").get<Scalar>();
  return g;
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j{{"schema", r.schema}, {"eba", r.eba}, {"era", r.era}, {"attack", attack_spec_to_json(r.attack)},
                   {"seed", r.seed},     {"timings", r.timings}, {"extra", r.extra}};
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSparsity& l : r.per_layer) {
    layers.push_back({{"layer", l.layer}, {"kind", l.kind}, {"total", l.total}, {"pruned", l.pruned},
                      {"pruned_fraction", l.pruned_fraction}});
  }
  j["per_layer"] = std::move(layers);
  if (r.sweep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const SweepRow& row : r.sweep->rows) {
      rows.push_back({{"steps", row.steps}, {"step_size", row.step_size}, {"era", row.era}});
    }
    j["sweep"] = {{"epsilon_max", r.sweep->epsilon_max}, {"rows", rows}, {"mean", r.sweep->mean},
                  {"std_dev", r.sweep->std_dev}};
  }
  if (r.distance) {
    nlohmann::json groups = nlohmann::json::array();
    for (const DistanceGroup* g : r.distance->groups()) groups.push_back(group_to_json(*g));
    j["distance"] = std::move(groups);
  }
  if (r.connectivity) {
    j["connectivity"] = {{"connected", r.connectivity->connected}, {"broken_layers", r.connectivity->broken_layers}};
  }
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.schema = j.at("schema").get<std::string>();
  if (r.schema != kReportSchema) throw ContractError("unsupported report schema '" + r.schema + "'");
  r.eba = j.at("eba").get<Scalar>();
  r.era = j.at("era").get<Scalar>();
  r.attack = attack_spec_from_json(j.at("attack"));
  r.seed = j.at("seed").get<std::uint64_t>();
  r.timings = j.value("timings", std::map<std::string, Scalar>{});
  r.extra = j.value("extra", nlohmann::json::object());
  for (const auto& l : j.at("per_layer")) {
    r.per_layer.push_back({l.at("layer").get<Index>(), l.at("kind").get<std::string>(), l.at("total").get<Index>(),
                           l.at("pruned").get<Index>(), l.at("pruned_fraction").get<Scalar>()});
  }
  if (j.contains("sweep")) {
    PgdSweep s;
    const auto& js = j.at("sweep");
    s.epsilon_max = js.at("epsilon_max").get<Scalar>();
    s.mean = js.at("mean").get<Scalar>();
    s.std_dev = js.at("std_dev").get<Scalar>();
    for (const auto& row : js.at("rows")) {
      s.rows.push_back({row.at("steps").get<Index>(), row.at("step_size").get<Scalar>(), row.at("era").get<Scalar>()});
    }
    r.sweep = std::move(s);
  }
  if (j.contains("distance")) {
    const auto& g = j.at("distance");
    if (g.size() != 4) throw ContractError("report distance table must have four groups");
    r.distance = DistanceStats{group_from_json(g[0]), group_from_json(g[1]), group_from_json(g[2]),
                               group_from_json(g[3])};
  }
  if (j.contains("connectivity")) {
    r.connectivity = Connectivity{j.at("connectivity").at("connected").get<bool>(),
                                  j.at("connectivity").at("broken_layers").get<std::vector<Index>>()};
  }
  r.validate();
  return r;
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
  report.validate();
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.json");
    if (!out) throw std::runtime_error("cannot write report to '" + dir.string() + "'");
    out << report_to_json(report).dump(2) << '\n';
  }
  std::ofstream layers(dir / "per_layer.csv");
  layers << std::setprecision(17) << "layer,kind,total,pruned,pruned_fraction\n";
  for (const LayerSparsity& l : report.per_layer) {
    layers << l.layer << ',' << l.kind << ',' << l.total << ',' << l.pruned << ',' << l.pruned_fraction << '\n';
  }
  std::ofstream sweep(dir / "sweep.csv");
  sweep << std::setprecision(17) << "steps,step_size,era\n";
  if (report.sweep) {
    for (const SweepRow& r : report.sweep->rows) sweep << r.steps << ',' << r.step_size << ',' << r.era << '\n';
  }
  std::ofstream dist(dir / "distance.csv");
  dist << std::setprecision(17) << "group,count,mean_proxy,mean_score\n";
  if (report.distance) {
    for (const DistanceGroup* g : report.distance->groups()) {
      if (g->present) dist << g->name << ',' << g->count << ',' << g->mean_proxy << ',' << g->mean_score << '\n';
    }
  }
}

EvalReport read_report(const std::filesystem::path& dir) {
  std::ifstream in(dir / "report.json");
  if (!in) throw std::runtime_error("cannot read '" + (dir / "report.json").string() + "'");
  return report_from_json(nlohmann::json::parse(in));
}

EvalReport evaluate_model(const MaskedModel& model, const std::optional<BinaryMask>& mask, const Dataset& test,
                          const AttackSpec& spec, std::uint64_t seed) {
  using Clock = std::chrono::steady_clock;
  EvalReport r;
  r.attack = spec;
  r.seed = seed;
  auto t0 = Clock::now();
  r.eba = evaluate_eba(model, test);
  auto t1 = Clock::now();
  r.era = evaluate_era(model, test, spec);
  auto t2 = Clock::now();
  r.distance = boundary_distance_stats(model, test, spec);
  r.timings["eba_seconds"] = std::chrono::duration<Scalar>(t1 - t0).count();
  r.timings["era_seconds"] = std::chrono::duration<Scalar>(t2 - t1).count();
  const BinaryMask bits = mask ? *mask : all_ones_mask(model.maskable_count());
  r.per_layer = per_layer_sparsity(bits, model);
  r.connectivity = connectivity_check(model, bits);
  return r;
}

}  // namespace dwd
