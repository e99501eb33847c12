#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "graphmoe/errors.hpp"
#include "graphmoe/router.hpp"
#include "test_util.hpp"

using namespace graphmoe;
using namespace graphmoe::testing;

namespace {

// Per-token GCN written out directly: H0 = [E; P x], H1 = relu(A H0 W0),
// H2 = A H1 W1, s_i = H2[i] . proj for expert rows.
std::vector<double> naive_scores(const GraphRouterParams& p, const MoEGraph& g, const Tensor& x) {
  const std::size_t n = p.num_experts(), d = p.hidden(), in = p.in_features(), nodes = n + 1;
  const auto A = values(g.normalized_adjacency());
  const auto E = values(p.expert_embeddings), P = values(p.token_in_proj), W0 = values(p.gcn_weight0),
             W1 = values(p.gcn_weight1), pr = values(p.proj);
  std::vector<double> out;
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    std::vector<double> h0(nodes * d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) h0[i * d + c] = E[i * d + c];
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < in; ++j) s += P[c * in + j] * x.at(b, j);
      h0[n * d + c] = s;
    }
    auto layer = [&](const std::vector<double>& h, const double* w, bool act) {
      std::vector<double> ah(nodes * d, 0.0), out_h(nodes * d, 0.0);
      for (std::size_t i = 0; i < nodes; ++i)
        for (std::size_t j = 0; j < nodes; ++j)
          for (std::size_t c = 0; c < d; ++c) ah[i * d + c] += A[i * nodes + j] * h[j * d + c];
      for (std::size_t i = 0; i < nodes; ++i)
        for (std::size_t c = 0; c < d; ++c) {
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += ah[i * d + k] * w[k * d + c];
          out_h[i * d + c] = act ? std::max(s, 0.0) : s;
        }
      return out_h;
    };
    const auto h2 = layer(layer(h0, W0.data(), true), W1.data(), false);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += h2[i * d + c] * pr[c];
      out.push_back(s);
    }
  }
  return out;
}

void check_router_output(const RouterOutput& r) {
  const std::size_t n = r.num_experts();
  for (std::size_t b = 0; b < r.batch(); ++b) {
    double ws = 0.0, gs = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_GE(r.weights.at(b, j), 0.0);
      ws += r.weights.at(b, j);
    }
    std::vector<std::size_t> sel;
    for (std::size_t s = 0; s < r.k; ++s) {
      gs += r.topk_gates.at(b, s);
      sel.push_back(r.index(b, s));
    }
    EXPECT_NEAR(ws, 1.0, 1e-9);
    EXPECT_NEAR(gs, 1.0, 1e-9);
    std::sort(sel.begin(), sel.end());
    EXPECT_EQ(std::unique(sel.begin(), sel.end()), sel.end());
    double min_sel = 1.0;
    for (std::size_t j : sel) min_sel = std::min(min_sel, r.weights.at(b, j));
    for (std::size_t j = 0; j < n; ++j)
      if (!std::binary_search(sel.begin(), sel.end(), j)) EXPECT_LE(r.weights.at(b, j), min_sel);
  }
}

TEST(GraphRouter, MatchesPerTokenGcnOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto p = GraphRouterParams::init(6, 5, 8, rng);
    const MoEGraph g = MoEGraph::build(6, 0.4, seed);
    const Tensor x = random_tensor({4, 5}, rng);
    const auto fast = values(graph_scores(p, g, x));
    const auto slow = naive_scores(p, g, x);
    for (std::size_t i = 0; i < slow.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-10);
  }
}

TEST(GraphRouter, ZeroParametersGiveUniformRouting) {
  Rng rng(1);
  auto p = GraphRouterParams::init(5, 4, 8, rng);
  for (Tensor t : p.parameters())
    for (double& v : t.mutable_data()) v = 0.0;
  const RouterOutput r = route(p, MoEGraph::build(5, 0.3, 1), random_tensor({3, 4}, rng), 2);
  for (double w : r.weights.data()) EXPECT_NEAR(w, 0.2, 1e-15);
}

TEST(TopK, HandRenormalization) {
  const RouterOutput r = select_top_k(Tensor::matrix({{0.4, 0.3, 0.2, 0.1}}), 2);
  EXPECT_EQ(r.topk_indices, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(r.topk_gates.at(0), 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(r.topk_gates.at(1), 3.0 / 7.0, 1e-15);
}

TEST(TopK, TiesGoToLowerIndex) {
  const RouterOutput r = select_top_k(Tensor::matrix({{0.25, 0.25, 0.25, 0.25}}), 2);
  EXPECT_EQ(r.topk_indices, (std::vector<std::size_t>{0, 1}));
}

TEST(TopK, FullSelectionReturnsSortedWeights) {
  Rng rng(2);
  const auto p = GraphRouterParams::init(6, 4, 8, rng);
  const RouterOutput r = route(p, MoEGraph::build(6, 0.2, 2), random_tensor({5, 4}, rng), 6);
  for (std::size_t b = 0; b < 5; ++b) {
    std::vector<double> row(6);
    for (std::size_t j = 0; j < 6; ++j) row[j] = r.weights.at(b, j);
    std::sort(row.rbegin(), row.rend());
    for (std::size_t s = 0; s < 6; ++s) EXPECT_NEAR(r.topk_gates.at(b, s), row[s], 1e-12);
  }
}

TEST(GraphRouter, InvalidKIsConfigError) {
  Rng rng(3);
  const auto p = GraphRouterParams::init(4, 3, 8, rng);
  const MoEGraph g = MoEGraph::build(4, 0.5, 0);
  EXPECT_THROW(route(p, g, random_tensor({1, 3}, rng), 5), ConfigError);
  EXPECT_THROW(route(p, g, random_tensor({1, 3}, rng), 0), ConfigError);
  EXPECT_THROW(route_softmax_baseline(Tensor::zeros({4, 3}), random_tensor({1, 3}, rng), 5), ConfigError);
}

TEST(GraphRouter, NonFiniteScoresNameTheLayer) {
  Rng rng(4);
  auto p = GraphRouterParams::init(4, 3, 8, rng);
  for (double& v : p.expert_embeddings.mutable_data()) v = std::numeric_limits<double>::max();
  try {
    route(p, MoEGraph::build(4, 1.0, 0), random_tensor({2, 3}, rng), 2);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("gcn layer"), std::string::npos) << e.what();
  }
}

TEST(GraphRouter, ContractsOverRandomParameterizations) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.below(8), k = 1 + rng.below(n);
    const auto p = GraphRouterParams::init(n, 4, 8, rng);
    check_router_output(route(p, MoEGraph::build(n, 0.1 + 0.9 * rng.uniform(), rng.next_u64()),
                              random_tensor({3, 4}, rng), k));
    check_router_output(route_softmax_baseline(random_tensor({n, 4}, rng), random_tensor({3, 4}, rng), k));
  }
}

TEST(GraphRouter, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  const auto p = GraphRouterParams::init(5, 4, 6, rng);
  const MoEGraph g = MoEGraph::build(5, 0.5, 3);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor w = random_tensor({3, 5}, rng), wg = random_tensor({3, 2}, rng);
  const auto r = check_gradients(
      p.parameters(),
      [&] {
        const RouterOutput o = route(p, g, x, 2);
        return add(sum(mul(o.weights, w)), sum(mul(o.topk_gates, wg)));
      },
      rng, 60);
  EXPECT_EQ(r.failed, 0u) << r.first_failure;
}

TEST(GraphRouter, FullWeightLossReachesEveryRouterParameter) {
  Rng rng(7);
  const auto p = GraphRouterParams::init(5, 4, 6, rng);
  const RouterOutput o = route(p, MoEGraph::build(5, 1.0, 3), random_tensor({3, 4}, rng), 1);
  backward(sum(mul(o.weights, random_tensor({3, 5}, rng))));
  for (const Tensor& t : p.parameters()) {
    ASSERT_TRUE(t.has_grad());
    double mag = 0.0;
    for (double v : t.grad()) mag += std::abs(v);
    EXPECT_GT(mag, 0.0);
  }
}

TEST(GraphRouter, DeterministicOutput) {
  Rng rng(8);
  const auto p = GraphRouterParams::init(8, 4, 8, rng);
  const MoEGraph g = MoEGraph::build(8, 0.1, 0);
  const Tensor x = random_tensor({6, 4}, rng);
  const RouterOutput a = route(p, g, x, 2), b = route(p, g, x, 2);
  EXPECT_EQ(a.topk_indices, b.topk_indices);
  for (std::size_t i = 0; i < a.weights.numel(); ++i) EXPECT_EQ(a.weights.at(i), b.weights.at(i));
}

TEST(GraphRouter, PositiveScalingPreservesSelection) {
  Rng rng(9);
  auto p = GraphRouterParams::init(8, 4, 8, rng);
  const MoEGraph g = MoEGraph::build(8, 0.5, 0);
  const Tensor x = random_tensor({10, 4}, rng);
  const auto before = route(p, g, x, 3).topk_indices;
  for (double& v : p.proj.mutable_data()) v *= 3.5;  // scores scale by 3.5
  EXPECT_EQ(route(p, g, x, 3).topk_indices, before);
}

TEST(GraphRouter, PermutationCovariance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const std::size_t n = 6;
    const auto p = GraphRouterParams::init(n, 4, 8, rng);
    const MoEGraph g = MoEGraph::build(n, 0.4, seed);
    std::vector<std::size_t> pi(n);  // new expert j is old expert pi[j]
    std::iota(pi.begin(), pi.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(pi[i], pi[rng.below(i + 1)]);
    std::vector<std::size_t> inv(n + 1);
    for (std::size_t j = 0; j < n; ++j) inv[pi[j]] = j;
    inv[n] = n;

    GraphRouterParams q = p;
    q.expert_embeddings = gather_rows(p.expert_embeddings, pi).detach();
    std::vector<Edge> edges;
    for (const Edge& e : g.edges()) {
      const std::size_t a = inv[e.u], b = inv[e.v];
      edges.push_back({std::min(a, b), std::max(a, b)});
    }
    const MoEGraph h = MoEGraph::from_edges(n, g.beta(), g.seed(), edges, g.sampled_edge_count());
    const Tensor x = random_tensor({3, 4}, rng);
    const RouterOutput a = route(p, g, x, 2), b = route(q, h, x, 2);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(b.weights.at(r, j), a.weights.at(r, pi[j]), 1e-12);
  }
}

TEST(SoftmaxRouter, ZeroLinearIsUniform) {
  Rng rng(10);
  const RouterOutput r = route_softmax_baseline(Tensor::zeros({4, 3}), random_tensor({2, 3}, rng), 2);
  for (double w : r.weights.data()) EXPECT_DOUBLE_EQ(w, 0.25);
}

TEST(SoftmaxRouter, SingleSelectionIsOneHot) {
  Rng rng(11);
  const RouterOutput r = route_softmax_baseline(random_tensor({2, 3}, rng), random_tensor({5, 3}, rng), 1);
  for (double g : r.topk_gates.data()) EXPECT_EQ(g, 1.0);
}

TEST(SoftmaxRouter, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  const Tensor lin = random_tensor({4, 3}, rng, -2, 2, true);
  const Tensor x = random_tensor({5, 3}, rng), w = random_tensor({5, 4}, rng), wg = random_tensor({5, 2}, rng);
  const auto r = check_gradients(
      {lin},
      [&] {
        const RouterOutput o = route_softmax_baseline(lin, x, 2);
        return add(sum(mul(o.weights, w)), sum(mul(o.topk_gates, wg)));
      },
      rng);
  EXPECT_EQ(r.failed, 0u) << r.first_failure;
}

}  // namespace
