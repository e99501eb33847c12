#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "graphmoe/lora.hpp"
#include "graphmoe/losses.hpp"
#include "graphmoe/moe_graph.hpp"
#include "graphmoe/router.hpp"

namespace graphmoe {

enum class RouterKind { kGraph, kSoftmax, kDense };

std::string router_kind_name(RouterKind k);
RouterKind parse_router_kind(const std::string& s);

struct LayerOptions {
  std::size_t num_experts = 8;
  std::size_t top_k = 2;
  std::size_t rank = 2;
  double alpha = 4.0;
  RouterKind router = RouterKind::kGraph;
  double edge_density = 0.1;
  std::uint64_t graph_seed = 0;
  std::size_t gcn_hidden = 256;
  bool normal_sorted = true;
  bool poisson_batch_mean_first = false;
  HistoryWeighting normal_history = HistoryWeighting::kBatchScaled;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AuxLosses {
  Tensor poisson;
  Tensor normal;
};

struct LayerOutput {
  Tensor h;
  AuxLosses aux;
  RouterOutput routing;
};

// Frozen linear map + N LoRA experts mixed by a router with Top-K gating.
class GraphLoRALayer {
 public:
  GraphLoRALayer(FrozenBase base, const LayerOptions& opts, Rng& rng);

  // h = W x + sum over selected experts of gate * expert_delta(x). Only
  // selected experts run, in ascending expert order. With update_tracker the
  // tracker records this batch after the losses are formed; on a still-empty
  // tracker the normal loss is a constant 0.
  LayerOutput forward(const Tensor& x, bool update_tracker);

  RouterOutput route(const Tensor& x) const;

  // All N experts evaluated and mixed with the full router weights.
  Tensor dense_mixture(const Tensor& x) const;

  std::size_t trainable_parameter_count() const;
  std::vector<NamedTensor> parameters() const;
  std::vector<Tensor> trainable_tensors() const;

  const LayerOptions& options() const { return opts_; }
  std::size_t num_experts() const { return experts_.size(); }
  std::size_t top_k() const { return opts_.top_k; }
  RouterKind router_kind() const { return opts_.router; }
  const FrozenBase& base() const { return base_; }
  const std::vector<LoRAAdapter>& experts() const { return experts_; }
  std::vector<LoRAAdapter>& experts() { return experts_; }
  const std::optional<MoEGraph>& graph() const { return graph_; }
  void set_graph(MoEGraph g);
  const GraphRouterParams& graph_router() const { return graph_params_; }
  GraphRouterParams& graph_router() { return graph_params_; }
  const Tensor& softmax_router() const { return softmax_linear_; }
  Tensor& softmax_router() { return softmax_linear_; }
  const PoissonTarget& poisson_target() const { return poisson_; }
  const NormalTarget& normal_target() const { return normal_; }
  ActivationTracker& tracker() { return tracker_; }
  const ActivationTracker& tracker() const { return tracker_; }

 private:
  FrozenBase base_;
  LayerOptions opts_;
  std::vector<LoRAAdapter> experts_;
  std::optional<MoEGraph> graph_;
  GraphRouterParams graph_params_;
  Tensor softmax_linear_;
  PoissonTarget poisson_;
  NormalTarget normal_;
  ActivationTracker tracker_;
};

// Mean over tokens of the entropy of the router weight rows.
double gate_entropy(const RouterOutput& out);

}  // namespace graphmoe
