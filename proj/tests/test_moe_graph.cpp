#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <set>

#include "graphmoe/errors.hpp"
#include "graphmoe/moe_graph.hpp"
#include "test_util.hpp"

using namespace graphmoe;
using graphmoe::testing::values;

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
  const auto n = static_cast<Eigen::Index>(t.dim(0));
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  return m;
}

TEST(MoEGraph, DefaultSettingsSampleFourEdges) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const MoEGraph g = MoEGraph::build(8, 0.1, seed);
    EXPECT_EQ(g.num_nodes(), 9u);
    EXPECT_EQ(g.sampled_edge_count(), 4u);
    EXPECT_EQ(g.edges().size(), 4u + g.repair_edge_count());
    EXPECT_LE(g.repair_edge_count(), 9u);
  }
}

TEST(MoEGraph, SingleExpertFullDensity) {
  const MoEGraph g = MoEGraph::build(1, 1.0, 3);
  ASSERT_EQ(g.edges().size(), 1u);
  EXPECT_EQ(g.edges()[0], (Edge{0, 1}));
}

TEST(MoEGraph, FullDensityIsCompleteWithoutRepair) {
  for (std::size_t n : {1u, 4u, 8u, 16u}) {
    const MoEGraph g = MoEGraph::build(n, 1.0, 11);
    EXPECT_EQ(g.edges().size(), MoEGraph::candidate_pairs(n));
    EXPECT_EQ(g.repair_edge_count(), 0u);
    EXPECT_DOUBLE_EQ(density_of(g), 1.0);
  }
}

TEST(MoEGraph, DensityCountsRepairs) {
  const MoEGraph g = MoEGraph::from_edges(8, 0.1, 0, {{0, 1}, {2, 3}, {4, 5}, {6, 8}}, 4);
  EXPECT_NEAR(density_of(g), 4.0 / 36.0, 1e-15);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const MoEGraph b = MoEGraph::build(8, 0.1, seed);
    EXPECT_GE(density_of(b), static_cast<double>(b.sampled_edge_count()) / 36.0);
  }
}

TEST(MoEGraph, NoSelfPairsNoDuplicatesNoIsolatedNodes) {
  for (std::size_t n : {1u, 2u, 5u, 8u, 16u, 32u})
    for (double beta : {0.01, 0.05, 0.1, 0.5, 1.0})
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const MoEGraph g = MoEGraph::build(n, beta, seed);
        std::set<std::pair<std::size_t, std::size_t>> seen;
        for (const Edge& e : g.edges()) {
          EXPECT_LT(e.u, e.v);
          EXPECT_LE(e.v, n);
          EXPECT_TRUE(seen.insert({e.u, e.v}).second);
        }
        for (std::size_t d : g.degrees()) EXPECT_GE(d, 1u);
      }
}

TEST(MoEGraph, ZeroSampledEdgesStillConnectsEveryNode) {
  const MoEGraph g = MoEGraph::build(4, 0.01, 5);  // round(0.1) = 0
  EXPECT_EQ(g.sampled_edge_count(), 0u);
  for (std::size_t d : g.degrees()) EXPECT_GE(d, 1u);
}

TEST(MoEGraph, BitIdenticalForSameInputs) {
  const MoEGraph a = MoEGraph::build(8, 0.1, 42), b = MoEGraph::build(8, 0.1, 42);
  EXPECT_EQ(a.edges(), b.edges());
  const auto va = values(a.normalized_adjacency()), vb = values(b.normalized_adjacency());
  EXPECT_EQ(va, vb);
  EXPECT_NE(MoEGraph::build(16, 0.5, 1).edges(), MoEGraph::build(16, 0.5, 2).edges());
}

TEST(MoEGraph, InvalidDensityIsConfigError) {
  EXPECT_THROW(MoEGraph::build(8, 0.0, 0), ConfigError);
  EXPECT_THROW(MoEGraph::build(8, 1.5, 0), ConfigError);
  EXPECT_THROW(MoEGraph::build(8, -0.1, 0), ConfigError);
  EXPECT_THROW(MoEGraph::build(0, 0.5, 0), ConfigError);
}

TEST(MoEGraph, NormalizedAdjacencyMatchesIndependentFormula) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MoEGraph g = MoEGraph::build(8, 0.3, seed);
    const Eigen::Index n = 9;
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
    for (const Edge& e : g.edges()) {
      a(static_cast<Eigen::Index>(e.u), static_cast<Eigen::Index>(e.v)) = 1.0;
      a(static_cast<Eigen::Index>(e.v), static_cast<Eigen::Index>(e.u)) = 1.0;
    }
    const Eigen::VectorXd d = a.rowwise().sum().cwiseSqrt().cwiseInverse();
    const Eigen::MatrixXd expect = d.asDiagonal() * a * d.asDiagonal();
    EXPECT_LT((to_eigen(g.normalized_adjacency()) - expect).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(MoEGraph, SymmetricAndSpectrallyBounded) {
  for (std::size_t n = 1; n <= 16; ++n)
    for (double beta : {0.05, 0.1, 0.5, 1.0})
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const MoEGraph g = MoEGraph::build(n, beta, seed);
        const Eigen::MatrixXd m = to_eigen(g.normalized_adjacency());
        EXPECT_LE((m - m.transpose()).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_TRUE(m.allFinite());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
        EXPECT_GE(es.eigenvalues().minCoeff(), -1.0 - 1e-9);
        EXPECT_LE(es.eigenvalues().maxCoeff(), 1.0 + 1e-9);
      }
}

TEST(MoEGraph, FromEdgesRejectsMalformedLists) {
  EXPECT_THROW(MoEGraph::from_edges(4, 0.1, 0, {{2, 2}}, 1), FormatError);
  EXPECT_THROW(MoEGraph::from_edges(4, 0.1, 0, {{0, 9}}, 1), FormatError);
  EXPECT_THROW(MoEGraph::from_edges(4, 0.1, 0, {{0, 1}}, 2), FormatError);
}

TEST(MoEGraph, TokenNeighborsListsExpertsAdjacentToTokenNode) {
  const MoEGraph g = MoEGraph::from_edges(4, 0.5, 0, {{0, 4}, {1, 2}, {3, 4}}, 3);
  EXPECT_EQ(g.token_neighbors(), (std::vector<std::size_t>{0, 3}));
}

}  // namespace
