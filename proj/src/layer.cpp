#include "graphmoe/layer.hpp"

#include <cmath>

#include "graphmoe/errors.hpp"
#include "graphmoe/ops.hpp"

namespace graphmoe {

std::string router_kind_name(RouterKind k) {
  switch (k) {
    case RouterKind::kGraph: return "graph";
    case RouterKind::kSoftmax: return "softmax";
    case RouterKind::kDense: return "dense";
  }
  return "unknown";
}

RouterKind parse_router_kind(const std::string& s) {
  if (s == "graph") return RouterKind::kGraph;
  if (s == "softmax") return RouterKind::kSoftmax;
  if (s == "dense") return RouterKind::kDense;
  throw ConfigError("router_kind must be one of graph|softmax|dense, got '" + s + "'");
}

GraphLoRALayer::GraphLoRALayer(FrozenBase base, const LayerOptions& opts, Rng& rng)
    : base_(std::move(base)), opts_(opts), poisson_(opts.num_experts), normal_(opts.num_experts),
      tracker_(opts.num_experts) {
  const std::size_t n = opts_.num_experts;
  if (n < 1) throw ConfigError("num_experts must be >= 1");
  if (opts_.router == RouterKind::kDense) opts_.top_k = n;
  if (opts_.top_k < 1 || opts_.top_k > n)
    throw ConfigError("top_k " + std::to_string(opts_.top_k) + " must lie in [1, " + std::to_string(n) + "]");
  const std::size_t in = base_.in_features(), out = base_.out_features();
  experts_.reserve(n);
  for (std::size_t j = 0; j < n; ++j) experts_.emplace_back(in, out, opts_.rank, opts_.alpha, rng);
  if (opts_.router == RouterKind::kGraph) {
    if (opts_.gcn_hidden < 1) throw ConfigError("gcn_hidden must be >= 1");
    graph_ = MoEGraph::build(n, opts_.edge_density, opts_.graph_seed);
    graph_params_ = GraphRouterParams::init(n, in, opts_.gcn_hidden, rng);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(n * in);
    for (double& v : w) v = rng.uniform(-bound, bound);
    softmax_linear_ = Tensor::from_data({n, in}, std::move(w), true);
  }
}

void GraphLoRALayer::set_graph(MoEGraph g) {
  if (opts_.router != RouterKind::kGraph) throw ConfigError("set_graph on a non-graph router");
  if (g.num_experts() != num_experts()) throw FormatError("graph expert count does not match layer");
  graph_ = std::move(g);
}

RouterOutput GraphLoRALayer::route(const Tensor& x) const {
  if (opts_.router == RouterKind::kGraph) return graphmoe::route(graph_params_, *graph_, x, opts_.top_k);
  return route_softmax_baseline(softmax_linear_, x, opts_.top_k);
}

LayerOutput GraphLoRALayer::forward(const Tensor& x, bool update_tracker) {
  LayerOutput out;
  out.routing = route(x);
  const RouterOutput& r = out.routing;
  if (r.num_experts() != experts_.size()) throw ConfigError("router width does not match expert count");

  const std::size_t batch = x.dim(0), k = r.k;
  std::vector<std::vector<std::size_t>> rows(experts_.size()), slots(experts_.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t j = r.index(b, s);
      rows[j].push_back(b);
      slots[j].push_back(b * k + s);
    }

  Tensor h = base_forward(base_, x);
  for (std::size_t j = 0; j < experts_.size(); ++j) {
    if (rows[j].empty()) continue;
    const Tensor delta = expert_delta(experts_[j], gather_rows(x, rows[j]));
    h = scatter_add_rows(h, scale_rows(delta, gather_flat(r.topk_gates, slots[j])), rows[j]);
  }
  out.h = std::move(h);

  out.aux.poisson = loss_poisson(poisson_, r.weights, opts_.poisson_batch_mean_first);
  out.aux.normal = tracker_.empty() ? Tensor::scalar(0.0) : loss_normal(normal_, tracker_, r, opts_.normal_sorted, opts_.normal_history);
  if (update_tracker) tracker_.update(r);
  return out;
}

Tensor GraphLoRALayer::dense_mixture(const Tensor& x) const {
  const RouterOutput r = route(x);
  const std::size_t batch = x.dim(0), n = experts_.size();
  Tensor h = base_forward(base_, x);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<std::size_t> col(batch);
    for (std::size_t b = 0; b < batch; ++b) col[b] = b * n + j;
    h = add(h, scale_rows(expert_delta(experts_[j], x), gather_flat(r.weights, col)));
  }
  return h;
}

std::vector<NamedTensor> GraphLoRALayer::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t j = 0; j < experts_.size(); ++j) {
    out.push_back({"expert" + std::to_string(j) + ".A", experts_[j].down()});
    out.push_back({"expert" + std::to_string(j) + ".B", experts_[j].up()});
  }
  if (opts_.router == RouterKind::kGraph) {
    out.push_back({"router.expert_embeddings", graph_params_.expert_embeddings});
    out.push_back({"router.token_in_proj", graph_params_.token_in_proj});
    out.push_back({"router.gcn_weight0", graph_params_.gcn_weight0});
    out.push_back({"router.gcn_weight1", graph_params_.gcn_weight1});
    out.push_back({"router.proj", graph_params_.proj});
  } else {
    out.push_back({"router.linear", softmax_linear_});
  }
  out.push_back({"poisson.lambda_raw", poisson_.lambda_raw});
  out.push_back({"normal.sigma_raw", normal_.sigma_raw});
  return out;
}

std::vector<Tensor> GraphLoRALayer::trainable_tensors() const {
  std::vector<Tensor> out;
  for (auto& p : parameters()) out.push_back(p.tensor);
  return out;
}

std::size_t GraphLoRALayer::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

double gate_entropy(const RouterOutput& out) {
  const std::size_t batch = out.batch(), n = out.num_experts();
  const auto w = out.weights.data();
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < n; ++j) {
      const double p = w[b * n + j];
      if (p > 0.0) total -= p * std::log(p);
    }
  return batch ? total / static_cast<double>(batch) : 0.0;
}

}  // namespace graphmoe
