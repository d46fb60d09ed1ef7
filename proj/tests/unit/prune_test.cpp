// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/prune.hpp"
#include "gradcheck.hpp"
#include "toy.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>

namespace dwd {
namespace {

TEST(Prune, ZeroTargetKeepsEverything) {
  testing::Toy toy = testing::blobs_toy(1);
  const Array before = toy.model.flat_weights();
  PruneRunConfig c = testing::toy_prune_config(1, 0.0);
  const PruneResult r = prune(toy.model, toy.data, c);
  EXPECT_EQ(r.mask, all_ones_mask(6));
  EXPECT_TRUE((toy.model.flat_weights() == before).all());
  EXPECT_TRUE((toy.model.flat_mask() == 1.0).all());
}

TEST(Prune, ToyMatchesExhaustiveSearch) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    testing::Toy toy = testing::blobs_toy(seed);
    const PruneResult r = prune(toy.model, toy.data, testing::toy_prune_config(seed));
    ASSERT_EQ(r.mask.retained_count, 3);
    const Scalar la = r.trace.epochs.back().lambda_a;
    const Scalar lp = r.trace.epochs.back().lambda_p;
    const Scalar got = testing::mask_objective(toy.model, r.mask, toy.data, la, lp);
    const Scalar best = testing::exhaustive_optimum(toy.model, 3, toy.data, la, lp);
    EXPECT_LE(got, 1.05 * best) << "seed " << seed;
  }
}

TEST(Prune, TraceInvariants) {
  testing::Toy toy = testing::blobs_toy(3);
  const PruneResult r = prune(toy.model, toy.data, testing::toy_prune_config(3));
  ASSERT_FALSE(r.trace.epochs.empty());
  for (std::size_t i = 1; i < r.trace.epochs.size(); ++i) {
    EXPECT_GE(r.trace.epochs[i].lambda_a, r.trace.epochs[i - 1].lambda_a);
    EXPECT_GE(r.trace.epochs[i].lambda_p, r.trace.epochs[i - 1].lambda_p);
  }
  EXPECT_EQ(r.trace.k, 6);
  EXPECT_EQ(r.trace.k_prime, 3);
  EXPECT_EQ(toy.model.mode(), TrainMode::kFrozen);
  const Array b = toy.model.flat_mask();
  EXPECT_GE(b.minCoeff(), 0.0);
  EXPECT_LE(b.maxCoeff(), 1.0);

  const auto path = std::filesystem::temp_directory_path() / "deadwood-unit" / "trace.csv";
  std::filesystem::create_directories(path.parent_path());
  r.trace.write_csv(path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,loss,adv_proxy,prune_proxy,lambda_a,lambda_p,sparsity");
}

TEST(Prune, WeightsStayFrozen) {
  testing::Toy toy = testing::blobs_toy(4);
  const Array w = toy.model.flat_weights();
  prune(toy.model, toy.data, testing::toy_prune_config(4));
  EXPECT_TRUE((toy.model.flat_weights() == w).all());
}

TEST(Prune, DeterministicPerSeed) {
  testing::Toy a = testing::blobs_toy(5);
  testing::Toy b = testing::blobs_toy(5);
  const PruneResult ra = prune(a.model, a.data, testing::toy_prune_config(5));
  const PruneResult rb = prune(b.model, b.data, testing::toy_prune_config(5));
  EXPECT_EQ(ra.mask, rb.mask);
  EXPECT_TRUE((a.model.flat_mask() == b.model.flat_mask()).all());
}

TEST(Prune, NoAccuracyWithZeroMultipliersIsStatic) {
  testing::Toy toy = testing::blobs_toy(6);
  PruneRunConfig c = testing::toy_prune_config(6);
  c.rho_schedule = {0.0};
  c.max_epochs = 1;
  ablate_no_accuracy(toy.model, toy.data, c);
  EXPECT_TRUE((toy.model.flat_mask() == 1.0).all());
}

TEST(Prune, RobustnessTermsCoincideWhenZeroed) {
  testing::Toy a = testing::blobs_toy(7);
  testing::Toy b = testing::blobs_toy(7);
  PruneRunConfig c = testing::toy_prune_config(7);
  c.rho_schedule = {0.0};
  c.max_epochs = 5;
  const PruneResult ra = prune(a.model, a.data, c);
  c.robustness = RobustnessTerm::kAttackLoss;
  const PruneResult rb = prune(b.model, b.data, c);
  EXPECT_EQ(ra.mask, rb.mask);
  EXPECT_TRUE((a.model.flat_mask() == b.model.flat_mask()).all());
}

TEST(Prune, ConfigValidation) {
  PruneRunConfig c;
  c.target_fraction = 1.0;
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.rho_schedule = {};
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ContractError);
  testing::Toy toy = testing::blobs_toy(0);
  EXPECT_THROW(prune(toy.model, Dataset{}, PruneRunConfig{}), ContractError);
}

TEST(Separation, Ratio) {
  BinaryMask m;
  m.bits = {1, 1, 0, 0};
  m.retained_count = 2;
  EXPECT_NEAR(magnitude_separation((Array(4) << 1, 1, 0.001, 0.001).finished(), m), 1000.0, 1e-9);
  EXPECT_TRUE(std::isinf(magnitude_separation(Array::Ones(3), all_ones_mask(3))));
}

// Layer-by-layer paths in a dense network, enumerated explicitly.
struct PathOracle {
  std::vector<Index> widths;
  std::vector<std::vector<std::uint8_t>> keep;  // per layer, in x out row-major

  void walk(std::size_t layer, Index unit, std::vector<Index>& path, std::vector<std::set<Index>>& used,
            bool& any) const {
    if (layer + 1 == widths.size()) {
      any = true;
      for (std::size_t l = 0; l + 1 < widths.size(); ++l) used[l].insert(path[l] * widths[l + 1] + path[l + 1]);
      return;
    }
    for (Index o = 0; o < widths[layer + 1]; ++o) {
      if (!keep[layer][static_cast<std::size_t>(unit * widths[layer + 1] + o)]) continue;
      path.push_back(o);
      walk(layer + 1, o, path, used, any);
      path.pop_back();
    }
  }

  std::pair<bool, std::vector<Index>> run() const {
    std::vector<std::set<Index>> used(widths.size() - 1);
    bool any = false;
    for (Index i = 0; i < widths[0]; ++i) {
      std::vector<Index> path{i};
      walk(0, i, path, used, any);
    }
    std::vector<Index> broken;
    for (std::size_t l = 0; l < used.size(); ++l) {
      if (used[l].empty()) broken.push_back(static_cast<Index>(l));
    }
    return {any, broken};
  }
};

TEST(Connectivity, MatchesPathEnumeration) {
  const std::vector<Index> widths{3, 3, 3, 2};
  MaskedModel m(Architecture::mlp(widths), 0);
  std::mt19937_64 rng(8);
  std::bernoulli_distribution keep(0.35);
  for (int trial = 0; trial < 200; ++trial) {
    BinaryMask mask;
    PathOracle oracle{widths, {}};
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      std::vector<std::uint8_t> bits(static_cast<std::size_t>(widths[l] * widths[l + 1]));
      for (auto& b : bits) b = keep(rng);
      if (trial % 10 == 0 && l == 1) std::fill(bits.begin(), bits.end(), 0);  // deliberate cut
      oracle.keep.push_back(bits);
      mask.bits.insert(mask.bits.end(), bits.begin(), bits.end());
    }
    mask.retained_count = std::count(mask.bits.begin(), mask.bits.end(), 1);
    const auto [connected, broken] = oracle.run();
    const Connectivity c = connectivity_check(m, mask);
    EXPECT_EQ(c.connected, connected) << "trial " << trial;
    EXPECT_EQ(c.broken_layers, broken) << "trial " << trial;
  }
}

TEST(Connectivity, BasicCases) {
  MaskedModel m(Architecture::desk_cnn(), 0);
  EXPECT_TRUE(connectivity_check(m, all_ones_mask(m.maskable_count())).connected);
  BinaryMask empty_layer = all_ones_mask(m.maskable_count());
  const Index first = m.param_layers()[0].weight.size();
  for (Index i = first; i < first + m.param_layers()[1].weight.size(); ++i) {
    empty_layer.bits[static_cast<std::size_t>(i)] = 0;
  }
  const Connectivity c = connectivity_check(m, empty_layer);
  EXPECT_FALSE(c.connected);
  EXPECT_NE(std::find(c.broken_layers.begin(), c.broken_layers.end(), 1), c.broken_layers.end());
  EXPECT_THROW(connectivity_check(m, all_ones_mask(3)), DimensionError);
}

TEST(LayerSparsity, UniformAndDense) {
  MaskedModel m(Architecture::desk_mlp(), 0);
  for (const LayerSparsity& l : per_layer_sparsity(all_ones_mask(m.maskable_count()), m)) {
    EXPECT_EQ(l.pruned, 0);
    EXPECT_EQ(l.pruned_fraction, 0.0);
  }
  std::mt19937_64 rng(9);
  std::bernoulli_distribution coin(0.5);
  BinaryMask half;
  for (Index i = 0; i < m.maskable_count(); ++i) half.bits.push_back(coin(rng));
  half.retained_count = std::count(half.bits.begin(), half.bits.end(), 1);
  for (const LayerSparsity& l : per_layer_sparsity(half, m)) {
    const Scalar sigma = std::sqrt(0.25 / static_cast<Scalar>(l.total));
    EXPECT_NEAR(l.pruned_fraction, 0.5, 5.0 * sigma) << "layer " << l.layer;
  }
}

TEST(Lwm, RemovesSmallestMagnitudes) {
  MaskedModel m(Architecture::mlp({5, 1}), 0);
  m.param_layers()[0].weight.mutable_values() << 5, 4, -3, 2, 1;
  EXPECT_EQ(prune_lwm_baseline(m, 0.4).bits, (std::vector<std::uint8_t>{1, 1, 1, 0, 0}));
}

TEST(Lwm, TiesKeepLowerIndex) {
  MaskedModel m(Architecture::mlp({3, 2}), 0);
  m.param_layers()[0].weight.mutable_values() << 1, 1, 1, 1, 1, 1;
  EXPECT_EQ(prune_lwm_baseline(m, 0.5).bits, (std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0}));
}

}  // namespace
}  // namespace dwd
