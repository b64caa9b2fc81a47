#include <gtest/gtest.h>

#include "catw/nn/grad_check.hpp"

using namespace catw;

class GradFidelity : public ::testing::TestWithParam<std::string> {};

TEST_P(GradFidelity, CentralDifferencesAgree) {
  for (std::uint64_t seed : {0, 1, 2}) {
    const double err = grad_check(GetParam(), seed, 1e-5);
    EXPECT_LT(err, 1e-4) << GetParam() << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Registered, GradFidelity, ::testing::ValuesIn(registered_grad_checks()),
                         [](const auto& info) { return info.param; });

TEST(GradCheck, CoversEveryLayerKind) {
  auto names = registered_grad_checks();
  for (const char* n : {"conv2d", "conv2d_adapted", "attention", "adapted_matmul", "silu", "sigmoid", "upsample2x", "mse",
                        "residual_block", "embedding", "add_channel_bias"})
    EXPECT_NE(std::find(names.begin(), names.end(), n), names.end()) << n;
}

TEST(GradCheck, UnknownOpIsContractError) { EXPECT_THROW(grad_check("no_such_op", 0), ContractError); }
