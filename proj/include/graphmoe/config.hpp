#pragma once

// Experiment configuration: a JSON key tree merged over defaults. Unknown keys
// and ill-typed values are hard errors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "graphmoe/layer.hpp"
#include "graphmoe/toy_model.hpp"

namespace graphmoe {

struct ExperimentConfig {
  ToyTransformerConfig model;
  std::vector<std::string> tasks{"copy", "reverse", "modadd7", "parity"};
  std::size_t n_per_task = 1000;
  DataOptions data;

  RouterKind router_kind = RouterKind::kGraph;
  std::size_t num_experts = 8;
  std::size_t top_k = 2;
  std::size_t rank = 2;
  double alpha = 4.0;
  double edge_density = 0.1;
  std::size_t gcn_hidden = 256;
  std::uint64_t graph_seed = 0;

  double c_p = 0.005;
  double c_n = 8.0;
  bool normal_sorted = true;
  HistoryWeighting normal_history = HistoryWeighting::kBatchScaled;
  bool poisson_batch_mean_first = false;

  double learning_rate = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t log_interval = 200;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "runs/default";

  static nlohmann::json default_tree();
  // Merges `tree` over the defaults and validates.
  static ExperimentConfig from_json(const nlohmann::json& tree);
  static ExperimentConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

  // Fully resolved tree. Graph-only keys are omitted for non-graph routers and
  // dense routing reports top_k = num_experts.
  nlohmann::json to_json() const;
  // Every key, including graph-only ones.
  nlohmann::json to_json_full() const;
  std::string hash() const;

  void validate() const;
  LayerOptions layer_options() const;
  std::vector<SyntheticTaskSpec> task_specs() const;
};

// Applies "a.b.c=value" to a key tree. The value is parsed as JSON when
// possible and as a bare string otherwise. The key must already exist.
void apply_override(nlohmann::json& tree, const std::string& assignment);

}  // namespace graphmoe
