// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/eval.hpp"
#include "deadwood/train.hpp"

#include <gtest/gtest.h>

namespace dwd {
namespace {

class MnistPretrain : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const Dataset all = load_idx(std::filesystem::path(DWD_DATA_DIR) / "mnist5k/images-idx3-ubyte.gz",
                                 std::filesystem::path(DWD_DATA_DIR) / "mnist5k/labels-idx1-ubyte.gz");
    splits_ = new Splits(split(all, {0.8, 0.0, 0.2}, 1));
  }
  static void TearDownTestSuite() { delete splits_; }
  static Splits* splits_;
};
Splits* MnistPretrain::splits_ = nullptr;

TEST_F(MnistPretrain, GenericReachesNinetyFive) {
  MaskedModel m(Architecture::desk_mlp(), 0);
  PretrainConfig c;
  c.epochs = 10;
  const TrainTrace t = pretrain(m, splits_->train, c);
  EXPECT_EQ(t.epochs.size(), 10u);
  EXPECT_GE(evaluate_eba(m, splits_->test), 95.0);
}

TEST_F(MnistPretrain, RobustBeatsGenericUnderAttack) {
  const AttackSpec attack = AttackSpec::pgd(0.1, 10);
  PretrainConfig c;
  c.epochs = 10;
  MaskedModel generic(Architecture::desk_mlp(), 0);
  pretrain(generic, splits_->train, c);
  c.robust = true;
  c.attack = AttackSpec::fgsm_looping(0.1);
  MaskedModel robust(Architecture::desk_mlp(), 0);
  pretrain(robust, splits_->train, c);
  EXPECT_GT(evaluate_era(robust, splits_->test, attack), evaluate_era(generic, splits_->test, attack));
}

TEST(Pretrain, RejectsBadConfig) {
  MaskedModel m(Architecture::mlp({2, 2}), 0);
  PretrainConfig c;
  c.lr = 0.0;
  EXPECT_THROW(pretrain(m, make_synthetic(SyntheticKind::kTwoMoons, 10, 0.1, 0), c), ContractError);
  EXPECT_THROW(pretrain(m, Dataset{}, PretrainConfig{}), ContractError);
}

TEST(Pretrain, LeavesMaskUntouched) {
  const Dataset d = make_synthetic(SyntheticKind::kTwoMoons, 100, 0.1, 0);
  MaskedModel m(Architecture::mlp({2, 8, 2}), 0);
  apply_binary_mask(m, mask_from_scores(m.flat_weights(), 10));
  const Array b = m.flat_mask();
  PretrainConfig c;
  c.epochs = 3;
  pretrain(m, d, c);
  EXPECT_TRUE((m.flat_mask() == b).all());
}

}  // namespace
}  // namespace dwd
