#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "graphmoe/tensor.hpp"

namespace graphmoe {

struct Edge {
  std::size_t u = 0;  // u < v
  std::size_t v = 0;
  bool operator==(const Edge&) const = default;
};

// Undirected graph over N expert nodes (0..N-1) and one token node (index N).
// Immutable after construction.
class MoEGraph {
 public:
  // Samples round(beta * C) of the C = (N+1)N/2 node pairs uniformly without
  // replacement, then links every still-isolated node (in index order) to a
  // uniformly chosen other node.
  static MoEGraph build(std::size_t num_experts, double beta, std::uint64_t seed);
  // Rebuilds from a persisted edge list; sampled_count marks where repairs begin.
  static MoEGraph from_edges(std::size_t num_experts, double beta, std::uint64_t seed,
                             std::vector<Edge> edges, std::size_t sampled_count);

  std::size_t num_experts() const { return num_experts_; }
  std::size_t num_nodes() const { return num_experts_ + 1; }
  std::size_t token_node() const { return num_experts_; }
  double beta() const { return beta_; }
  std::uint64_t seed() const { return seed_; }

  const std::vector<Edge>& edges() const { return edges_; }
  std::size_t sampled_edge_count() const { return sampled_count_; }
  std::size_t repair_edge_count() const { return edges_.size() - sampled_count_; }
  std::vector<std::size_t> degrees() const;
  // Expert nodes adjacent to the token node.
  std::vector<std::size_t> token_neighbors() const;

  // D^-1/2 (adjacency + I) D^-1/2, [(N+1) x (N+1)], constant.
  const Tensor& normalized_adjacency() const { return norm_adj_; }

  static std::size_t candidate_pairs(std::size_t num_experts) { return (num_experts + 1) * num_experts / 2; }

 private:
  MoEGraph() = default;
  void finalize();

  std::size_t num_experts_ = 0;
  double beta_ = 0.0;
  std::uint64_t seed_ = 0;
  std::vector<Edge> edges_;
  std::size_t sampled_count_ = 0;
  Tensor norm_adj_;
};

// |E| / C including repair edges.
double density_of(const MoEGraph& graph);

}  // namespace graphmoe
