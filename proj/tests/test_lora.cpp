#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "graphmoe/errors.hpp"
#include "graphmoe/lora.hpp"
#include "test_util.hpp"

using namespace graphmoe;
using namespace graphmoe::testing;

namespace {

TEST(LoRA, FreshAdapterIsIdentityOnBase) {
  Rng rng(1);
  const FrozenBase base = FrozenBase::random(6, 5, 0.5, rng);
  const LoRAAdapter ad(6, 5, 2, 4.0, rng);
  const Tensor x = random_tensor({4, 6}, rng);
  const auto h = values(lora_forward(ad, base, x));
  const auto wx = values(base_forward(base, x));
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(h[i], wx[i]);
  for (double v : values(expert_delta(ad, x))) EXPECT_EQ(v, 0.0);
}

TEST(LoRA, HandArithmetic) {
  Rng rng(2);
  const FrozenBase base(Tensor::zeros({1, 2}));
  LoRAAdapter ad(2, 1, 1, 1.0, rng);
  ad.down().mutable_data()[0] = 1.0;
  ad.down().mutable_data()[1] = 0.0;
  ad.up().mutable_data()[0] = 2.0;
  const Tensor h = lora_forward(ad, base, Tensor::matrix({{3, 5}}));
  EXPECT_EQ(h.item(), 6.0);
}

TEST(LoRA, DoublingAlphaDoublesDelta) {
  Rng r1(3), r2(3), rx(4);
  const FrozenBase base = FrozenBase::random(5, 4, 1.0, rx);
  LoRAAdapter a1(5, 4, 2, 4.0, r1), a2(5, 4, 2, 8.0, r2);
  for (std::size_t i = 0; i < a1.up().numel(); ++i) a1.up().mutable_data()[i] = a2.up().mutable_data()[i] = 0.1 * i;
  const Tensor x = random_tensor({3, 5}, rx);
  const auto h1 = values(lora_forward(a1, base, x)), h2 = values(lora_forward(a2, base, x));
  const auto wx = values(base_forward(base, x));
  for (std::size_t i = 0; i < h1.size(); ++i) EXPECT_NEAR(h2[i] - wx[i], 2.0 * (h1[i] - wx[i]), 1e-12);
}

TEST(LoRA, DeltaEqualsForwardMinusBase) {
  Rng rng(5);
  const FrozenBase base = FrozenBase::random(7, 3, 1.0, rng);
  LoRAAdapter ad(7, 3, 3, 4.0, rng);
  for (double& v : ad.up().mutable_data()) v = rng.uniform(-1, 1);
  const Tensor x = random_tensor({5, 7}, rng);
  const auto h = values(lora_forward(ad, base, x)), wx = values(base_forward(base, x));
  const auto d = values(expert_delta(ad, x));
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h[i] - wx[i], d[i], 1e-12);
}

TEST(LoRA, GradientsReachOnlyAdapter) {
  Rng rng(6);
  const FrozenBase base = FrozenBase::random(6, 4, 1.0, rng);
  LoRAAdapter ad(6, 4, 2, 4.0, rng);
  for (double& v : ad.up().mutable_data()) v = rng.uniform(-1, 1);
  const Tensor x = random_tensor({3, 6}, rng);
  const auto r = check_gradients({ad.down(), ad.up()}, [&] { return sum(exp(scale(lora_forward(ad, base, x), 0.2))); }, rng);
  EXPECT_EQ(r.failed, 0u) << r.first_failure;
  backward(sum(lora_forward(ad, base, x)));
  EXPECT_FALSE(base.weight.requires_grad());
  EXPECT_FALSE(base.weight.has_grad());
}

TEST(LoRA, DeltaGradientWrtAMatchesFiniteDifferences) {
  Rng rng(7);
  LoRAAdapter ad(5, 5, 2, 4.0, rng);
  for (double& v : ad.up().mutable_data()) v = rng.uniform(-1, 1);
  const Tensor x = random_tensor({4, 5}, rng);
  const auto r = check_gradients({ad.down()}, [&] { return sum(mul(expert_delta(ad, x), expert_delta(ad, x))); }, rng);
  EXPECT_EQ(r.failed, 0u) << r.first_failure;
}

TEST(LoRA, RealizedUpdateHasRankAtMostR) {
  Rng rng(8);
  for (std::size_t r : {1u, 2u, 3u}) {
    LoRAAdapter ad(8, 6, r, 4.0, rng);
    for (double& v : ad.up().mutable_data()) v = rng.uniform(-1, 1);
    // Delta W^T = delta on the identity input.
    Tensor eye = Tensor::zeros({8, 8});
    for (std::size_t i = 0; i < 8; ++i) eye.mutable_data()[i * 8 + i] = 1.0;
    const Tensor dw = expert_delta(ad, eye);
    Eigen::MatrixXd m(8, 6);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 6; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = dw.at(i, j);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
    lu.setThreshold(1e-10);
    EXPECT_LE(static_cast<std::size_t>(lu.rank()), r);
  }
}

TEST(LoRA, InitRangesAndValidation) {
  Rng rng(9);
  const LoRAAdapter ad(16, 8, 4, 4.0, rng);
  const double bound = 1.0 / std::sqrt(16.0);
  for (double v : ad.down().data()) EXPECT_LE(std::abs(v), bound);
  for (double v : ad.up().data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(ad.parameter_count(), 4u * 16u + 8u * 4u);
  EXPECT_DOUBLE_EQ(ad.scaling(), 1.0);
  EXPECT_THROW(LoRAAdapter(4, 3, 4, 4.0, rng), ConfigError);
  EXPECT_THROW(LoRAAdapter(4, 3, 0, 4.0, rng), ConfigError);
  EXPECT_THROW(LoRAAdapter(4, 3, 2, 0.0, rng), ConfigError);
  const FrozenBase base = FrozenBase::random(4, 3, 1.0, rng);
  EXPECT_THROW(base_forward(base, Tensor::zeros({2, 5})), ShapeError);
}

}  // namespace
