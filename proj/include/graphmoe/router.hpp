#pragma once

#include <cstddef>
#include <vector>

#include "graphmoe/moe_graph.hpp"
#include "graphmoe/rng.hpp"
#include "graphmoe/tensor.hpp"

namespace graphmoe {

// Learnable parameters of the GCN router.
struct GraphRouterParams {
  Tensor expert_embeddings;  // [N x d]
  Tensor token_in_proj;      // [d x I]
  Tensor gcn_weight0;        // [d x d]
  Tensor gcn_weight1;        // [d x d]
  Tensor proj;               // [d x 1], shared across expert nodes

  static GraphRouterParams init(std::size_t num_experts, std::size_t in_features, std::size_t hidden, Rng& rng);

  std::size_t num_experts() const { return expert_embeddings.dim(0); }
  std::size_t hidden() const { return expert_embeddings.dim(1); }
  std::size_t in_features() const { return token_in_proj.dim(1); }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
};

struct RouterOutput {
  Tensor weights;                         // o_r, [batch x N]
  std::vector<std::size_t> topk_indices;  // [batch x K] row-major, by descending weight
  Tensor topk_gates;                      // [batch x K], rows renormalized to 1
  std::size_t k = 0;

  std::size_t batch() const { return weights.dim(0); }
  std::size_t num_experts() const { return weights.dim(1); }
  std::size_t index(std::size_t row, std::size_t slot) const { return topk_indices[row * k + slot]; }
};

// Per-expert routing scores before the softmax: two GCN layers over the graph
// with the token row fed from x, projected to one scalar per expert node.
// Throws NumericError naming the stage when a non-finite value appears.
Tensor graph_scores(const GraphRouterParams& params, const MoEGraph& graph, const Tensor& x);

// Top-K selection over each row of o_r (ties go to the lower expert index) and
// renormalization of the selected weights.
RouterOutput select_top_k(Tensor weights, std::size_t k);

RouterOutput route(const GraphRouterParams& params, const MoEGraph& graph, const Tensor& x, std::size_t k);

// Softmax(linear x) router; with K = N it is the dense mixture.
RouterOutput route_softmax_baseline(const Tensor& linear, const Tensor& x, std::size_t k);

}  // namespace graphmoe
