// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/attacks.hpp"
#include "deadwood/data.hpp"
#include "deadwood/losses.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>

namespace dwd {
namespace {

constexpr ClipRange kUnbounded{-1e9, 1e9};

Scalar linf(const Tensor& a, const Tensor& b) { return (a.values() - b.values()).abs().maxCoeff(); }

struct LinearScorer {
  Tensor w = Tensor::vector({0.5, -2.0, 0.0, 1.5});
  Scalar y = -1.0;
  // loss = -y (w . x), summed over rows
  Tensor operator()(const Tensor& x) const { return scale(sum(matmul(x, reshape(w, {4, 1}))), -y); }
};

TEST(Fgsm, ZeroBudgetIsIdentity) {
  MaskedModel m(Architecture::mlp({4, 6, 3}), 1);
  std::mt19937_64 rng(1);
  const Tensor x = testing::random_tensor(rng, {5, 4}, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 0, 1};
  EXPECT_TRUE((fgsm(m, x, y, 0.0).values() == x.values()).all());
  EXPECT_TRUE((pgd(m, x, y, 0.0, 5, 0.1).values() == x.values()).all());
}

TEST(Fgsm, LinearScorerClosedForm) {
  const LinearScorer f;
  const Tensor x = Tensor::matrix({{0.2, 0.4, 0.6, 0.8}});
  const Scalar eps = 0.05;
  const Tensor adv = fgsm(f, x, eps, kUnbounded);
  for (Index i = 0; i < 4; ++i) {
    const Scalar w = f.w[i];
    const Scalar sign = w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0);
    EXPECT_NEAR(adv[i] - x[i], -eps * f.y * sign, 1e-15);
  }
}

TEST(Fgsm, StaysInBallAndClipRange) {
  MaskedModel m(Architecture::mlp({4, 6, 3}), 2);
  std::mt19937_64 rng(2);
  for (Scalar eps : {0.01, 0.1, 0.5, 2.0}) {
    const Tensor x = testing::random_tensor(rng, {8, 4}, 0.0, 1.0);
    const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1};
    for (const Tensor& adv : {fgsm(m, x, y, eps), pgd(m, x, y, eps, 7, eps / 3, {}, true, 3)}) {
      EXPECT_LE(linf(adv, x), eps + 1e-12);
      EXPECT_GE(adv.values().minCoeff(), 0.0);
      EXPECT_LE(adv.values().maxCoeff(), 1.0);
    }
  }
}

TEST(Looping, SingletonAndCyclic) {
  const std::vector<Scalar> one{0.1};
  for (Index e = 0; e < 5; ++e) EXPECT_EQ(looping_epsilon(one, e), 0.1);
  const std::vector<Scalar> abc{0.01, 0.02, 0.03};
  std::vector<Scalar> seq;
  for (Index e = 0; e < 6; ++e) seq.push_back(looping_epsilon(abc, e));
  EXPECT_EQ(seq, (std::vector<Scalar>{0.01, 0.02, 0.03, 0.01, 0.02, 0.03}));
  EXPECT_THROW(looping_epsilon(std::vector<Scalar>{}, 0), ContractError);
}

TEST(Looping, AppliedBudgetsReplayTheSet) {
  // Perturbation size recorded per epoch from the outputs themselves.
  MaskedModel m(Architecture::mlp({4, 6, 3}), 3);
  std::mt19937_64 rng(4);
  const Tensor x = testing::random_tensor(rng, {6, 4}, 0.3, 0.7);
  const std::vector<int> y{0, 1, 2, 2, 1, 0};
  const std::vector<Scalar> set = default_epsilon_set(0.2);
  std::map<Scalar, int> applied;
  for (Index e = 0; e < 3 * static_cast<Index>(set.size()); ++e) {
    const Scalar d = linf(perturb_looping(m, x, y, set, e), x);
    ++applied[std::round(d * 1e9) / 1e9];
  }
  std::map<Scalar, int> expect;
  for (Scalar s : set) expect[std::round(s * 1e9) / 1e9] += 3;
  EXPECT_EQ(applied, expect);
}

TEST(Pgd, OneFullStepEqualsFgsmBitwise) {
  MaskedModel m(Architecture::desk_mlp(), 4);
  std::mt19937_64 rng(5);
  const Tensor x = testing::random_tensor(rng, {10, 784}, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  for (Scalar eps : {8.0 / 255.0, 0.1, 0.3}) {
    EXPECT_TRUE((pgd(m, x, y, eps, 1, eps).values() == fgsm(m, x, y, eps).values()).all());
  }
}

TEST(Pgd, LinearScorerReachesFgsmOptimum) {
  const LinearScorer f;
  const Tensor x = Tensor::matrix({{0.2, 0.4, 0.6, 0.8}, {0.1, 0.3, 0.5, 0.7}});
  const Scalar eps = 0.05;
  const Scalar a = f(pgd(f, x, eps, 10, 2.5 * eps / 10, kUnbounded)).item();
  const Scalar b = f(fgsm(f, x, eps, kUnbounded)).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(Pgd, DefaultStepSize) {
  const AttackSpec s = AttackSpec::pgd(0.1, 10);
  EXPECT_DOUBLE_EQ(s.effective_step_size(), 2.5 * 0.1 / 10);
  AttackSpec explicit_step = s;
  explicit_step.step_size = 0.02;
  EXPECT_EQ(explicit_step.effective_step_size(), 0.02);
}

TEST(Pgd, RandomStartIsSeeded) {
  MaskedModel m(Architecture::mlp({4, 6, 3}), 3);
  std::mt19937_64 rng(4);
  const Tensor x = testing::random_tensor(rng, {6, 4}, 0.3, 0.7);
  const std::vector<int> y{0, 1, 2, 2, 1, 0};
  const Tensor a = pgd(m, x, y, 0.1, 3, 0.02, {}, true, 9);
  const Tensor b = pgd(m, x, y, 0.1, 3, 0.02, {}, true, 9);
  EXPECT_TRUE((a.values() == b.values()).all());
}

TEST(AttackSpec, DefaultsAndValidation) {
  const std::vector<Scalar> e = default_epsilon_set(0.8);
  ASSERT_EQ(e.size(), 8u);
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(e[static_cast<std::size_t>(i)], 0.1 * (i + 1), 1e-15);
  EXPECT_EQ(e.back(), 0.8);
  AttackSpec s = AttackSpec::fgsm_looping(0.1);
  s.epsilon_set = {0.05, 0.2};
  EXPECT_THROW(s.validate(), ContractError);
  AttackSpec p = AttackSpec::pgd(0.1, 0);
  EXPECT_THROW(p.validate(), ContractError);
  AttackSpec clip = AttackSpec::fgsm(0.1);
  clip.clip = {1.0, 0.0};
  EXPECT_THROW(clip.validate(), ContractError);
  EXPECT_THROW(attack_family_from_string("cw"), ContractError);
  for (AttackFamily f : {AttackFamily::kFgsm, AttackFamily::kFgsmLooping, AttackFamily::kPgd}) {
    EXPECT_EQ(attack_family_from_string(to_string(f)), f);
  }
}

TEST(Throughput, PgdCostsSeveralFgsmPasses) {
  const Dataset d = make_synthetic(SyntheticKind::kGaussianBlobs, 400, 0.3, 0, 10);
  MaskedModel m(Architecture::mlp({2, 256, 256, 10}), 0);
  const Scalar t_pgd = attack_throughput(m, d, AttackSpec::pgd(0.1, 10));
  const Scalar t_fgsm = attack_throughput(m, d, AttackSpec::fgsm(0.1));
  EXPECT_GE(t_pgd, 5.0 * t_fgsm);
}

}  // namespace
}  // namespace dwd
