// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Pass criterion numbers to run a subset.
// Progress goes to stderr, verdicts to stdout.

#include "deadwood/pipeline.hpp"
#include "gradcheck.hpp"
#include "toy.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

namespace dwd {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

// Tolerances.
constexpr int kGradcheckCases = 100;
constexpr Scalar kGradcheckRtol = 1e-4;
constexpr double kGradcheckSeconds = 30.0;
constexpr int kMaskingInputs = 100;
constexpr int kToySeeds = 10;
constexpr Scalar kToySlack = 0.05;
constexpr double kToySeconds = 60.0;
constexpr int kConnectivitySeeds = 5;
constexpr Scalar kChance = 10.0;
constexpr Scalar kChanceSlack = 2.0;  // "at chance" means eba <= 12
constexpr Scalar kQualityGap = 3.0;
constexpr double kPipelineSeconds = 15.0 * 60.0;
constexpr Scalar kEraGap = 5.0;
constexpr Scalar kEbaGap = 2.0;
constexpr Scalar kSweepStd = 1.0;
constexpr Scalar kPgdOverLooping = 2.5;
constexpr Scalar kLoopingOverFgsm = 1.10;
constexpr int kTimingRepeats = 5;
constexpr int kStabilitySeeds = 5;
constexpr Scalar kEbaStd = 1.5;
constexpr Scalar kEraStd = 2.0;
constexpr Scalar kScratchSlack = 15.0;
constexpr Scalar kIterativeGap = 1.0;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void log(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

json desk_json(const char* name) {
  json j = load_config_document(std::filesystem::path(DWD_CONFIG_DIR) / name);
  j["dataset"]["images"] = std::string(DWD_DATA_DIR) + "/mnist5k/images-idx3-ubyte.gz";
  j["dataset"]["labels"] = std::string(DWD_DATA_DIR) + "/mnist5k/labels-idx1-ubyte.gz";
  j["output_dir"] = (std::filesystem::temp_directory_path() / "deadwood-acceptance").string();
  return j;
}

ExperimentConfig with(json j, const std::function<void(json&)>& edit) {
  edit(j);
  return config_from_json(j);
}

// Artifacts shared by several criteria, built on first use.
class Shared {
 public:
  const ExperimentConfig& mlp() {
    if (!mlp_) mlp_ = config_from_json(desk_json("desk_mlp.json"));
    return *mlp_;
  }
  const ExperimentConfig& cnn() {
    if (!cnn_) cnn_ = config_from_json(desk_json("desk_cnn.json"));
    return *cnn_;
  }
  const DataBundle& data() {
    if (!data_) data_ = load_data(mlp().dataset);
    return *data_;
  }
  const MaskedModel& mlp_dense() {
    if (!mlp_dense_) {
      const auto t0 = Clock::now();
      mlp_dense_ = run_pretrain(mlp(), data());
      mlp_pretrain_seconds_ = seconds_since(t0);
      log(fmt("mlp pretrained in %.1fs", mlp_pretrain_seconds_));
    }
    return *mlp_dense_;
  }
  const PruneStage& mlp_pruned() {
    if (!mlp_pruned_) {
      const MaskedModel& dense = mlp_dense();
      const auto t0 = Clock::now();
      mlp_pruned_ = run_prune(dense, mlp(), data());
      mlp_prune_seconds_ = seconds_since(t0);
      log(fmt("mlp pruned to 90%% in %.1fs", mlp_prune_seconds_));
    }
    return *mlp_pruned_;
  }
  const PipelineOutcome& variant(FineTuneVariant v) {
    auto it = variants_.find(v);
    if (it == variants_.end()) {
      const PruneStage& pruned = mlp_pruned();
      ExperimentConfig c = mlp();
      c.finetune.variant = v;
      const auto t0 = Clock::now();
      it = variants_.emplace(v, run_pipeline(c, data(), &mlp_dense(), &pruned)).first;
      finetune_seconds_[v] = seconds_since(t0);
      log(fmt("%s: eba %.1f era %.1f in %.1fs", to_string(v).c_str(), it->second.final_eba, it->second.final_era,
              finetune_seconds_[v]));
    }
    return it->second;
  }
  // The desk pipeline result: modified KD at 90%.
  const PipelineOutcome& desk() { return variant(FineTuneVariant::kModifiedKd); }
  const MaskedModel& desk_model() { return desk().pruned.student; }
  double desk_seconds() {
    desk();
    return mlp_pretrain_seconds_ + mlp_prune_seconds_ + finetune_seconds_[FineTuneVariant::kModifiedKd];
  }
  const MaskedModel& cnn_dense() {
    if (!cnn_dense_) {
      const auto t0 = Clock::now();
      cnn_dense_ = run_pretrain(cnn(), data());
      log(fmt("cnn pretrained in %.1fs, eba %.1f", seconds_since(t0), evaluate_eba(*cnn_dense_, data().test)));
    }
    return *cnn_dense_;
  }

 private:
  std::optional<ExperimentConfig> mlp_, cnn_;
  std::optional<DataBundle> data_;
  std::optional<MaskedModel> mlp_dense_, cnn_dense_;
  std::optional<PruneStage> mlp_pruned_;
  std::map<FineTuneVariant, PipelineOutcome> variants_;
  std::map<FineTuneVariant, double> finetune_seconds_;
  double mlp_pretrain_seconds_ = 0.0, mlp_prune_seconds_ = 0.0;
};

Verdict gradient_oracle(Shared&) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2026);
  testing::GradcheckTolerance tol;
  tol.relative = kGradcheckRtol;
  int ops = 0, failures = 0;
  std::string first;
  for (const auto& op : testing::all_op_cases()) {
    ++ops;
    for (int i = 0; i < kGradcheckCases; ++i) {
      auto [inputs, f] = op.make(rng);
      const auto r = testing::gradcheck(f, inputs, tol);
      if (!r.ok && failures++ == 0) first = op.name + ": " + r.detail;
    }
  }
  const double s = seconds_since(t0);
  return {failures == 0 && s < kGradcheckSeconds,
          fmt("%d ops x %d cases, %d failures, %.1fs%s", ops, kGradcheckCases, failures, s,
              first.empty() ? "" : ("; first: " + first).c_str())};
}

Verdict masking_identity(Shared&) {
  std::mt19937_64 rng(7);
  int mismatches = 0;
  for (const Architecture& arch : {Architecture::desk_mlp(), Architecture::desk_cnn()}) {
    MaskedModel m(arch, 3);
    apply_binary_mask(m, all_ones_mask(m.maskable_count()));
    Shape shape{kMaskingInputs};
    shape.insert(shape.end(), arch.input_shape.begin(), arch.input_shape.end());
    const Tensor x = testing::random_tensor(rng, shape, 0.0, 1.0);
    const Array masked = forward(m, x, true).values();
    const Array plain = forward(m, x, false).values();
    mismatches += static_cast<int>((masked != plain).count());
  }
  return {mismatches == 0, fmt("mlp and cnn, %d inputs each, %d differing logits", kMaskingInputs, mismatches)};
}

Verdict brute_force_oracle(Shared&) {
  const auto t0 = Clock::now();
  int within = 0;
  Scalar worst = 0.0;
  for (int seed = 0; seed < kToySeeds; ++seed) {
    testing::Toy toy = testing::blobs_toy(seed);
    const PruneResult r = prune(toy.model, toy.data, testing::toy_prune_config(seed));
    const Scalar la = r.trace.epochs.back().lambda_a;
    const Scalar lp = r.trace.epochs.back().lambda_p;
    const Scalar got = testing::mask_objective(toy.model, r.mask, toy.data, la, lp);
    const Scalar best = testing::exhaustive_optimum(toy.model, r.mask.retained_count, toy.data, la, lp);
    const Scalar excess = got / best - 1.0;
    worst = std::max(worst, excess);
    if (excess <= kToySlack) ++within;
  }
  const double s = seconds_since(t0);
  return {within == kToySeeds && s < kToySeconds,
          fmt("%d/%d seeds within %.0f%% of optimum (worst +%.2f%%), %.1fs", within, kToySeeds, 100 * kToySlack,
              100 * worst, s)};
}

Verdict sparsity_exactness(Shared& sh) {
  std::ostringstream detail;
  bool ok = true;
  for (Scalar target : {0.90, 0.95, 0.99}) {
    std::optional<PruneStage> own;
    const PruneStage* stage = &sh.mlp_pruned();
    if (target != 0.90) {
      ExperimentConfig c = sh.mlp();
      c.prune.target_fraction = target;
      own = run_prune(sh.mlp_dense(), c, sh.data());
      stage = &*own;
    }
    const Index k = stage->student.maskable_count();
    const Index k_prime = retained_target(k, target);
    const Index ones = std::count(stage->mask.bits.begin(), stage->mask.bits.end(), 1);
    const Index nonzero = (stage->student.flat_weights() != 0.0).count();
    bool monotone = true;
    const auto& ep = stage->trace.epochs;
    for (std::size_t i = 1; i < ep.size(); ++i) {
      monotone &= ep[i].lambda_a >= ep[i - 1].lambda_a && ep[i].lambda_p >= ep[i - 1].lambda_p;
    }
    const bool proxy_down = ep.back().prune_proxy <= ep.front().prune_proxy;
    const bool exact = ones == k_prime && stage->mask.retained_count == k_prime && nonzero <= k_prime;
    ok &= exact && monotone && proxy_down;
    detail << fmt("%.0f%%: k'=%lld kept=%lld %s, proxy %.3g->%.3g; ", 100 * target, static_cast<long long>(k_prime),
                  static_cast<long long>(ones), monotone ? "monotone" : "NON-MONOTONE", ep.front().prune_proxy,
                  ep.back().prune_proxy);
  }
  return {ok, detail.str()};
}

Verdict connectivity(Shared& sh) {
  const MaskedModel& dense = sh.cnn_dense();
  const DataBundle& data = sh.data();
  int full_failures = 0;
  for (int seed = 0; seed < kConnectivitySeeds; ++seed) {
    ExperimentConfig c = sh.cnn();
    c.prune.seed = seed;
    const PruneStage s = run_prune(dense, c, data);
    const bool connected = connectivity_check(s.student, s.mask).connected;
    log(fmt("cnn 99%% seed %d: connected %d eba %.1f", seed, connected, evaluate_eba(s.student, data.test)));
    full_failures += !connected;
  }
  auto degenerate = [&](const MaskedModel& m, const BinaryMask& mask, Scalar& eba) {
    eba = evaluate_eba(m, data.test);
    return !connectivity_check(m, mask).connected || eba <= kChance + kChanceSlack;
  };

  MaskedModel lwm = dense.clone();
  const BinaryMask lwm_mask = prune_lwm_baseline(dense, sh.cnn().prune.target_fraction);
  apply_binary_mask(lwm, lwm_mask);
  Scalar lwm_eba = 0.0;
  const bool lwm_degenerate = degenerate(lwm, lwm_mask, lwm_eba);

  bool noacc_degenerate = false;
  Scalar noacc_eba = 0.0;
  int noacc_runs = 0;
  for (int seed = 0; seed < kConnectivitySeeds && !noacc_degenerate; ++seed, ++noacc_runs) {
    ExperimentConfig c = sh.cnn();
    c.prune.seed = seed;
    c.prune.include_accuracy = false;
    const PruneStage s = run_prune(dense, c, data);
    noacc_degenerate = degenerate(s.student, s.mask, noacc_eba);
    log(fmt("no-accuracy seed %d: eba %.1f", seed, noacc_eba));
  }
  return {full_failures == 0 && lwm_degenerate && noacc_degenerate,
          fmt("full method %d/%d disconnected; lwm degenerate %d (eba %.1f); no-accuracy degenerate %d after %d "
              "run(s) (eba %.1f)",
              full_failures, kConnectivitySeeds, lwm_degenerate, lwm_eba, noacc_degenerate, noacc_runs, noacc_eba)};
}

Verdict pipeline_quality(Shared& sh) {
  const PipelineOutcome& o = sh.desk();
  const double s = sh.desk_seconds();
  return {o.final_eba >= o.dense_eba - kQualityGap && s < kPipelineSeconds,
          fmt("dense eba %.1f, pruned+fine-tuned eba %.1f (gap %.1f pp), pipeline %.0fs", o.dense_eba, o.final_eba,
              o.dense_eba - o.final_eba, s)};
}

Verdict robustness_ordering(Shared& sh) {
  const PipelineOutcome& mod = sh.variant(FineTuneVariant::kModifiedKd);
  const PipelineOutcome& van = sh.variant(FineTuneVariant::kVanillaKd);
  const PipelineOutcome& adv = sh.variant(FineTuneVariant::kAdversarialKd);
  const Scalar era_gap = mod.final_era - van.final_era;
  const Scalar eba_gap = mod.final_eba - adv.final_eba;
  return {era_gap >= kEraGap && eba_gap >= kEbaGap,
          fmt("era modified %.1f vs vanilla %.1f (%+.1f pp); eba modified %.1f vs adversarial %.1f (%+.1f pp)",
              mod.final_era, van.final_era, era_gap, mod.final_eba, adv.final_eba, eba_gap)};
}

Verdict attack_suite(Shared& sh) {
  const MaskedModel& m = sh.desk_model();
  const Dataset& test = sh.data().test;
  const Scalar eps = sh.mlp().evaluate.attack.epsilon_max;
  std::vector<Index> idx(500);
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor x = test.batch_inputs(idx);
  const std::vector<int> y = test.batch_labels(idx);

  const Array a = fgsm(m, x, y, eps).values();
  const Array b = pgd(m, x, y, eps, 1, eps).values();
  const bool pgd1 = (a == b).all();

  Scalar worst = 0.0;
  bool clipped = true;
  auto check = [&](const Tensor& adv) {
    worst = std::max(worst, (adv.values() - x.values()).abs().maxCoeff());
    clipped &= adv.values().minCoeff() >= 0.0 && adv.values().maxCoeff() <= 1.0;
  };
  check(fgsm(m, x, y, eps));
  const std::vector<Scalar> set = default_epsilon_set(eps);
  for (Index e = 0; e < 8; ++e) check(perturb_looping(m, x, y, set, e));
  check(pgd(m, x, y, eps, 10, AttackSpec::pgd(eps, 10).effective_step_size()));
  check(pgd(m, x, y, eps, 10, eps, {}, true, 5));
  const bool bounded = worst <= eps + 1e-12 && clipped;

  const Scalar eba = evaluate_eba(m, test);
  const Scalar era0 = evaluate_era(m, test, AttackSpec::pgd(0.0, 10));
  const PgdSweep sweep = pgd_strength_sweep(m, test, {10, 50, 100}, eps);
  return {pgd1 && bounded && era0 == eba && sweep.std_dev <= kSweepStd,
          fmt("pgd-1==fgsm %d; max |dx| %.6f <= %.3f and in [0,1] %d; era(0) %.1f eba %.1f; sweep %.1f/%.1f/%.1f "
              "std %.3f",
              pgd1, worst, eps, clipped, era0, eba, sweep.rows[0].era, sweep.rows[1].era, sweep.rows[2].era,
              sweep.std_dev)};
}

Verdict throughput(Shared& sh) {
  const MaskedModel& m = sh.desk_model();
  const Dataset& test = sh.data().test;
  const Scalar eps = sh.mlp().evaluate.attack.epsilon_max;
  auto median_cost = [&](const AttackSpec& spec) {
    std::vector<Scalar> t;
    for (int i = 0; i < kTimingRepeats; ++i) t.push_back(attack_throughput(m, test, spec));
    std::nth_element(t.begin(), t.begin() + kTimingRepeats / 2, t.end());
    return t[kTimingRepeats / 2];
  };
  const Scalar f = median_cost(AttackSpec::fgsm(eps));
  const Scalar l = median_cost(AttackSpec::fgsm_looping(eps));
  const Scalar p = median_cost(AttackSpec::pgd(eps, 10));
  return {p >= kPgdOverLooping * l && l <= kLoopingOverFgsm * f,
          fmt("s/1000 samples: fgsm %.4f, looping %.4f (x%.2f), pgd-10 %.4f (x%.1f over looping)", f, l, l / f, p,
              p / l)};
}

Verdict boundary_distance(Shared& sh) {
  const DistanceStats d = boundary_distance_stats(sh.desk_model(), sh.data().test, sh.mlp().evaluate.attack);
  const bool benign = d.benign_correct.present && d.benign_wrong.present &&
                      d.benign_correct.mean_score > d.benign_wrong.mean_score;
  const bool adv =
      d.adv_correct.present && d.adv_wrong.present && d.adv_correct.mean_score > d.adv_wrong.mean_score;
  return {benign && adv, fmt("benign correct %.3f vs wrong %.3f; pgd correct %.3f vs wrong %.3f",
                             d.benign_correct.mean_score, d.benign_wrong.mean_score, d.adv_correct.mean_score,
                             d.adv_wrong.mean_score)};
}

Verdict seed_stability(Shared& sh) {
  std::vector<std::uint64_t> seeds;
  for (int s = 0; s < kStabilitySeeds; ++s) seeds.push_back(s);
  const SeedSummary sum = multi_seed_run(
      [&](std::uint64_t seed) -> SeedOutcome {
        if (seed == sh.mlp().seed) return {sh.desk().final_eba, sh.desk().final_era};
        const ExperimentConfig c = with(desk_json("desk_mlp.json"), [&](json& j) { j["seed"] = seed; });
        const PipelineOutcome o = run_pipeline(c, sh.data());
        log(fmt("seed %llu: eba %.1f era %.1f", static_cast<unsigned long long>(seed), o.final_eba, o.final_era));
        return {o.final_eba, o.final_era};
      },
      seeds);
  return {sum.eba_std <= kEbaStd && sum.era_std <= kEraStd,
          fmt("%d seeds: eba %.1f +- %.2f, era %.1f +- %.2f", kStabilitySeeds, sum.eba_mean, sum.eba_std, sum.era_mean,
              sum.era_std)};
}

Verdict negative_results(Shared& sh) {
  const ExperimentConfig scratch = with(desk_json("desk_mlp.json"), [](json& j) {
    j["prune"]["from_scratch"] = true;
    j["prune"]["target_fraction"] = 0.99;
  });
  const PipelineOutcome s = run_pipeline(scratch, sh.data());
  log(fmt("from scratch 99%%: pruned eba %.1f, final eba %.1f", s.pruned_eba, s.final_eba));

  const ExperimentConfig iter = with(desk_json("desk_mlp.json"), [](json& j) {
    j["prune"]["mode"] = "iterative";
    j["prune"]["iterative_step"] = 0.2;
  });
  const PipelineOutcome it = run_pipeline(iter, sh.data(), &sh.mlp_dense());
  const PipelineOutcome& single = sh.desk();
  log(fmt("iterative 90%%: eba %.1f era %.1f", it.final_eba, it.final_era));
  const Scalar deba = std::abs(it.final_eba - single.final_eba);
  const Scalar dera = std::abs(it.final_era - single.final_era);
  return {s.final_eba <= kChance + kScratchSlack && deba <= kIterativeGap && dera <= kIterativeGap,
          fmt("from-scratch 99%% eba %.1f (limit %.0f); iterative vs single-shot eba %.1f/%.1f, era %.1f/%.1f", s.final_eba,
              kChance + kScratchSlack, it.final_eba, single.final_eba, it.final_era, single.final_era)};
}

}  // namespace
}  // namespace dwd

int main(int argc, char** argv) {
  using namespace dwd;
  const std::vector<std::pair<const char*, Verdict (*)(Shared&)>> criteria = {
      {"gradient oracle", gradient_oracle},
      {"masking identity", masking_identity},
      {"brute-force pruning oracle", brute_force_oracle},
      {"sparsity exactness", sparsity_exactness},
      {"connectivity at 99%", connectivity},
      {"desk pipeline quality", pipeline_quality},
      {"robustness ordering", robustness_ordering},
      {"attack suite", attack_suite},
      {"attack throughput", throughput},
      {"boundary distance", boundary_distance},
      {"seed stability", seed_stability},
      {"negative results", negative_results},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  Shared shared;
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    std::cerr << "[" << n << "] " << criteria[i].first << std::endl;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = criteria[i].second(shared);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << n << " " << criteria[i].first << ": " << v.detail
              << fmt(" [%.0fs]", seconds_since(t0)) << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
