#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <thread>

#include "graphmoe/errors.hpp"
#include "graphmoe/ops.hpp"
#include "test_util.hpp"

using namespace graphmoe;
using namespace graphmoe::testing;

namespace {

void expect_values(const Tensor& t, std::vector<double> expect, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(t.at(i), expect[i], tol) << "index " << i;
}

void expect_grad_ok(const std::vector<Tensor>& params, const std::function<Tensor()>& f, std::uint64_t seed = 1) {
  Rng rng(seed);
  const auto r = check_gradients(params, f, rng);
  EXPECT_GT(r.checked, 0u);
  EXPECT_EQ(r.failed, 0u) << r.first_failure << " (worst rel " << r.worst_rel << ")";
}

// ---- matmul ----

TEST(Matmul, IdentityTimesVector) {
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor v = Tensor::matrix({{3}, {5}});
  expect_values(matmul(eye, v), {3, 5});
}

TEST(Matmul, HandArithmetic) {
  expect_values(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1}, {1}})), {3, 7});
}

TEST(Matmul, ZeroAnnihilates) {
  Rng rng(3);
  const Tensor r = matmul(Tensor::zeros({3, 4}), random_tensor({4, 5}, rng));
  for (double v : r.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, GradientsAndAdjointFormulas) {
  Rng rng(5);
  Tensor a = random_tensor({3, 4}, rng, -2, 2, true), b = random_tensor({4, 2}, rng, -2, 2, true);
  expect_grad_ok({a, b}, [&] { return sum(mul(matmul(a, b), matmul(a, b))); });
  Tensor c = random_tensor({2, 4}, rng, -2, 2, true);
  expect_grad_ok({a, c}, [&] { return sum(exp(scale(matmul_nt(a, c), 0.3))); });
  expect_grad_ok({a}, [&] { return sum(mul(transpose(a), transpose(a))); });
}

// ---- softmax ----

TEST(Softmax, UniformOnZeros) { expect_values(softmax(Tensor::vector({0, 0, 0, 0})), {0.25, 0.25, 0.25, 0.25}); }

TEST(Softmax, StableUnderLargeShift) { expect_values(softmax(Tensor::vector({1000, 1000})), {0.5, 0.5}); }

TEST(Softmax, ClosedForm) { expect_values(softmax(Tensor::vector({std::log(1.0), std::log(3.0)})), {0.25, 0.75}); }

TEST(Softmax, NaNIsNumericError) {
  EXPECT_THROW(softmax(Tensor::vector({0.0, std::nan("")})), NumericError);
  EXPECT_THROW(softmax(Tensor::vector({0.0, INFINITY})), NumericError);
}

TEST(Softmax, RowsAreProbabilityVectors) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    const Tensor s = softmax(random_tensor({4, 7}, rng, -20, 20));
    for (std::size_t r = 0; r < 4; ++r) {
      double sum_r = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(s.at(r, c), 0.0);
        sum_r += s.at(r, c);
      }
      EXPECT_NEAR(sum_r, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, Gradient) {
  Rng rng(11);
  Tensor x = random_tensor({3, 5}, rng, -2, 2, true);
  const Tensor w = random_tensor({3, 5}, rng);
  expect_grad_ok({x}, [&] { return sum(mul(softmax(x), w)); });
}

// ---- sort ----

TEST(Sort, DirectInspection) {
  const Sorted s = sort_descending_with_grad(Tensor::vector({0.1, 0.7, 0.2}));
  expect_values(s.values, {0.7, 0.2, 0.1});
  EXPECT_EQ(s.perm, (std::vector<std::size_t>{1, 2, 0}));
}

TEST(Sort, SortedInputGivesIdentity) {
  const Sorted s = sort_descending_with_grad(Tensor::vector({3, 2, 1, 0}));
  EXPECT_EQ(s.perm, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Sort, TiesStableByIndex) {
  EXPECT_EQ(sort_descending_with_grad(Tensor::vector({0.5, 0.5})).perm, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(sort_descending_with_grad(Tensor::vector({0.2, 0.5, 0.2, 0.5})).perm,
            (std::vector<std::size_t>{1, 3, 0, 2}));
}

TEST(Sort, SumGradientIsAllOnes) {
  Rng rng(13);
  Tensor v = random_tensor({2, 6}, rng, -2, 2, true);
  backward(sum(sort_descending_with_grad(v).values));
  for (double g : v.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Sort, GradientThroughInversePermutation) {
  Rng rng(17);
  Tensor v = random_tensor({7}, rng, -2, 2, true);
  const Tensor w = Tensor::vector({7, 6, 5, 4, 3, 2, 1});
  expect_grad_ok({v}, [&] { return sum(mul(sort_descending_with_grad(v).values, w)); });
}

// ---- KL ----

TEST(KL, IdentityIsZero) { EXPECT_EQ(kl_divergence(Tensor::vector({0.5, 0.5}), Tensor::vector({0.5, 0.5})).item(), 0.0); }

TEST(KL, PointMassAgainstUniform) {
  EXPECT_NEAR(kl_divergence(Tensor::vector({1, 0}), Tensor::vector({0.5, 0.5})).item(), std::log(2.0), 1e-12);
}

TEST(KL, ClosedForm) {
  const double expect = 0.25 * std::log(1.0 / 3.0) + 0.75 * std::log(3.0);
  EXPECT_NEAR(kl_divergence(Tensor::vector({0.25, 0.75}), Tensor::vector({0.75, 0.25})).item(), expect, 1e-12);
}

TEST(KL, UnnormalizedPIsContractViolation) {
  EXPECT_THROW(kl_divergence(Tensor::vector({0.5, 0.6}), Tensor::vector({0.5, 0.5})), ContractViolation);
  EXPECT_THROW(kl_divergence(Tensor::vector({1.5, -0.5}), Tensor::vector({0.5, 0.5})), ContractViolation);
}

TEST(KL, NonNegativeForProbabilityVectors) {
  Rng rng(19);
  for (int t = 0; t < 200; ++t) {
    const Tensor p = random_prob(6, rng), q = random_prob(6, rng);
    EXPECT_GE(kl_divergence(p, q).item(), -1e-12);
    EXPECT_NEAR(kl_divergence(p, p).item(), 0.0, 1e-15);
  }
}

TEST(KL, ZeroEntriesOfQAreClamped) {
  const double v = kl_divergence(Tensor::vector({0.5, 0.5}), Tensor::vector({1.0, 0.0})).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * std::log(0.5 / kProbEps), 1e-9);
}

TEST(KL, GradientBothArguments) {
  Rng rng(23);
  Tensor a = random_tensor({5}, rng, -2, 2, true), b = random_tensor({5}, rng, -2, 2, true);
  expect_grad_ok({a, b}, [&] { return kl_divergence(softmax(a), softmax(b)); });
  Tensor rows = random_tensor({3, 5}, rng, -2, 2, true);
  expect_grad_ok({a, rows}, [&] { return sum(kl_divergence_rows(softmax(a), softmax(rows))); });
}

// ---- backward ----

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::vector({1, 2, 3}, true);
  backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, ProductRule) {
  Tensor w = Tensor::scalar(2, true), x = Tensor::scalar(3, true);
  backward(mul(w, x));
  EXPECT_EQ(w.grad()[0], 3.0);
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, NonScalarIsContractViolation) {
  Tensor x = Tensor::vector({1, 2}, true);
  EXPECT_THROW(backward(x), ContractViolation);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = Tensor::vector({1, 2}, true);
  const Tensor loss = sum(scale(x, 3.0));
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  backward(loss);
  EXPECT_EQ(x.grad()[1], 3.0);
}

TEST(Backward, EveryReachableLeafGetsGrad) {
  Tensor a = Tensor::vector({1, 2}, true), b = Tensor::vector({3, 4}, true), c = Tensor::vector({5, 6});
  backward(sum(mul(add(a, c), b)));
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(c.has_grad());
}

TEST(GradTape, ReverseReplayMatchesBackward) {
  Tensor x = Tensor::vector({0.3, -0.2}, true);
  const Tensor loss = sum(exp(mul(x, x)));
  GradTape tape(loss);
  EXPECT_GE(tape.size(), 3u);
  EXPECT_EQ(tape.ops().back(), std::string("sum"));
  const double one = 1.0;
  tape.replay(std::span<const double>(&one, 1));
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(x.grad()[i], 2 * x.at(i) * std::exp(x.at(i) * x.at(i)), 1e-14);
}

// ---- remaining primitives: finite-difference oracle ----

TEST(Primitives, ElementwiseGradients) {
  Rng rng(29);
  Tensor a = random_tensor({3, 4}, rng, -2, 2, true), b = random_tensor({3, 4}, rng, -2, 2, true);
  Tensor pos = random_tensor({3, 4}, rng, 0.5, 2, true);
  expect_grad_ok({a, b}, [&] { return sum(mul(add(a, b), sub(a, b))); });
  expect_grad_ok({a, pos}, [&] { return sum(div(a, pos)); });
  expect_grad_ok({a}, [&] { return sum(exp(scale(a, 0.5))); });
  expect_grad_ok({pos}, [&] { return sum(log(pos)); });
  expect_grad_ok({a}, [&] { return sum(softplus(a)); });
  expect_grad_ok({a, b}, [&] { return sum(mul(relu(a), b)); });
  Tensor s = Tensor::scalar(0.7, true);
  expect_grad_ok({a, s}, [&] { return sum(mul(mul_scalar(a, s), a)); });
}

TEST(Primitives, BroadcastAndReductionGradients) {
  Rng rng(31);
  Tensor x = random_tensor({3, 4}, rng, -2, 2, true), bias = random_tensor({4}, rng, -2, 2, true);
  Tensor g = random_tensor({3}, rng, -2, 2, true);
  const Tensor w = random_tensor({3, 4}, rng);
  expect_grad_ok({x, bias}, [&] { return sum(mul(add_row_bias(x, bias), w)); });
  expect_grad_ok({x, g}, [&] { return sum(mul(scale_rows(x, g), w)); });
  expect_grad_ok({x}, [&] { return sum(mul(sum_axis(x, 0), sum_axis(x, 0))); });
  expect_grad_ok({x}, [&] { return sum(exp(sum_axis(x, 1))); });
  expect_grad_ok({x}, [&] { return mul(mean(x), mean(x)); });
}

TEST(Primitives, StructuralGradients) {
  Rng rng(37);
  Tensor x = random_tensor({4, 3}, rng, -2, 2, true), y = random_tensor({2, 3}, rng, -2, 2, true);
  Tensor z = random_tensor({4, 2}, rng, -2, 2, true);
  const Tensor w6 = random_tensor({6, 3}, rng), w45 = random_tensor({4, 5}, rng);
  expect_grad_ok({x, y}, [&] { return sum(mul(concat({x, y}, 0), w6)); });
  expect_grad_ok({x, z}, [&] { return sum(mul(concat({x, z}, 1), w45)); });
  expect_grad_ok({x}, [&] { return sum(exp(reshape(x, {2, 6}))); });
  expect_grad_ok({x}, [&] { return sum(mul(slice_rows(x, 1, 3), slice_rows(x, 2, 4))); });
  expect_grad_ok({x}, [&] { return sum(exp(slice_cols(x, 1, 3))); });
  expect_grad_ok({x}, [&] { return sum(exp(gather_rows(x, {3, 0, 3}))); });
  expect_grad_ok({x, y}, [&] { return sum(exp(scatter_add_rows(x, y, {2, 2}))); });
  expect_grad_ok({x}, [&] { return sum(exp(gather_flat(x, {0, 5, 5, 11}))); });
  expect_grad_ok({x}, [&] { return sum(exp(scatter_add_flat(x, {0, 1, 2, 0, 1, 2, 3, 3, 3, 4, 4, 4}, 5))); });
  expect_grad_ok({x}, [&] { return sum(mul(normalize(exp(x)), exp(x))); });
}

TEST(Primitives, LayerNormAndCrossEntropy) {
  Rng rng(41);
  Tensor x = random_tensor({3, 6}, rng, -2, 2, true);
  const Tensor w = random_tensor({3, 6}, rng);
  expect_grad_ok({x}, [&] { return sum(mul(layer_norm_rows(x), w)); });
  expect_grad_ok({x}, [&] { return cross_entropy(x, {2, -1, 5}); });
  const Tensor ln = layer_norm_rows(x.detach());
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < 6; ++c) m += ln.at(r, c);
    EXPECT_NEAR(m, 0.0, 1e-12);
  }
}

TEST(Primitives, CrossEntropyValue) {
  const Tensor logits = Tensor::matrix({{0, 0}, {std::log(3.0), 0}});
  EXPECT_NEAR(cross_entropy(logits, {0, 0}).item(), 0.5 * (std::log(2.0) + std::log(4.0 / 3.0)), 1e-12);
  EXPECT_NEAR(cross_entropy(logits, {-1, 1}).item(), std::log(4.0), 1e-12);
}

TEST(Primitives, ComposedExpressionOnRandomInputs) {
  Rng rng(43);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = random_tensor({4, 3}, rng, -2, 2, true), b = random_tensor({3, 5}, rng, -2, 2, true);
    Tensor bias = random_tensor({5}, rng, -2, 2, true);
    expect_grad_ok(
        {a, b, bias},
        [&] {
          const Tensor h = softmax(add_row_bias(matmul(a, b), bias));
          return mean(kl_divergence_rows(Tensor::vector({0.1, 0.2, 0.3, 0.25, 0.15}),
                                         sort_descending_with_grad(h).values));
        },
        static_cast<std::uint64_t>(trial));
  }
}

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor::from_data({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_EQ(shape_numel({2, 3, 4}), 24u);
  EXPECT_EQ(Tensor::scalar(2.0).rank(), 0u);
  Tensor x = Tensor::vector({1, 2}, true);
  const Tensor y = add(x, x);
  backward(sum(y));
  EXPECT_EQ(x.grad().size(), x.numel());
  Tensor yy = y;
  EXPECT_THROW(yy.mutable_data(), ContractViolation);
}

TEST(Tensor, IndependentGraphsAcrossThreads) {
  std::vector<double> results(4);
  std::vector<std::thread> ts;
  for (int t = 0; t < 4; ++t)
    ts.emplace_back([t, &results] {
      Tensor x = Tensor::vector({1.0 + t, 2.0}, true);
      backward(sum(mul(x, x)));
      results[static_cast<std::size_t>(t)] = x.grad()[0];
    });
  for (auto& th : ts) th.join();
  for (int t = 0; t < 4; ++t) EXPECT_EQ(results[static_cast<std::size_t>(t)], 2.0 * (1.0 + t));
}

}  // namespace
