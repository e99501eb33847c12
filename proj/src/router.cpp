#include "graphmoe/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "graphmoe/errors.hpp"
#include "graphmoe/kernels.hpp"
#include "graphmoe/ops.hpp"

namespace graphmoe {
namespace {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

void check_finite(const Tensor& t, const char* stage) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericError(std::string("graph router: non-finite value after ") + stage);
}

// Z[b, i, :] = shared[i, :] + coeff[i] * token[b, :], laid out as [(B * nodes) x d].
// Only the token row differs between batch entries, so the first propagation
// step is the shared expert part plus a rank-one token term per node.
Tensor token_mix(const Tensor& shared, const Tensor& token, std::vector<double> coeff) {
  const std::size_t nodes = shared.dim(0), d = shared.dim(1), batch = token.dim(0);
  const auto& kt = kernels::active();
  std::vector<double> out(batch * nodes * d);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < nodes; ++i) {
      double* dst = out.data() + (b * nodes + i) * d;
      std::copy_n(shared.data().data() + i * d, d, dst);
      if (coeff[i] != 0.0) kt.axpy(coeff[i], token.data().data() + b * d, dst, d);
    }
  return make_result({batch * nodes, d}, std::move(out), {shared, token}, "gcn_token_mix",
                     [nodes, d, batch, coeff = std::move(coeff)](detail::Node& self) {
                       const auto& kt = kernels::active();
                       detail::Node& ps = *self.parents[0];
                       detail::Node& pt = *self.parents[1];
                       if (ps.requires_grad) {
                         auto& g = ps.ensure_grad();
                         for (std::size_t b = 0; b < batch; ++b)
                           kt.axpy(1.0, self.grad.data() + b * nodes * d, g.data(), nodes * d);
                       }
                       if (pt.requires_grad) {
                         auto& g = pt.ensure_grad();
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t i = 0; i < nodes; ++i)
                             if (coeff[i] != 0.0)
                               kt.axpy(coeff[i], self.grad.data() + (b * nodes + i) * d, g.data() + b * d, d);
                       }
                     });
}

void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n)
    throw ConfigError("top-k " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
}

}  // namespace

GraphRouterParams GraphRouterParams::init(std::size_t num_experts, std::size_t in_features, std::size_t hidden,
                                          Rng& rng) {
  GraphRouterParams p;
  std::vector<double> emb(num_experts * hidden);
  for (double& v : emb) v = rng.normal();
  p.expert_embeddings = Tensor::from_data({num_experts, hidden}, std::move(emb), true);
  p.token_in_proj = uniform_param({hidden, in_features}, 1.0 / std::sqrt(static_cast<double>(in_features)), rng);
  const double glorot = std::sqrt(6.0 / (2.0 * static_cast<double>(hidden)));
  p.gcn_weight0 = uniform_param({hidden, hidden}, glorot, rng);
  p.gcn_weight1 = uniform_param({hidden, hidden}, glorot, rng);
  p.proj = uniform_param({hidden, 1}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  return p;
}

std::vector<Tensor> GraphRouterParams::parameters() const {
  return {expert_embeddings, token_in_proj, gcn_weight0, gcn_weight1, proj};
}

std::size_t GraphRouterParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

Tensor graph_scores(const GraphRouterParams& params, const MoEGraph& graph, const Tensor& x) {
  const std::size_t n = params.num_experts();
  if (graph.num_experts() != n)
    throw ConfigError("graph router: graph has " + std::to_string(graph.num_experts()) + " experts, params have " +
                      std::to_string(n));
  if (x.rank() != 2 || x.dim(1) != params.in_features())
    throw ShapeError("graph router: input " + shape_str(x.shape()) + " does not have " +
                     std::to_string(params.in_features()) + " features");
  const std::size_t nodes = n + 1, batch = x.dim(0);
  const auto adj = graph.normalized_adjacency().data();

  // Columns of the normalized adjacency that face expert nodes, and the token column.
  std::vector<double> expert_cols(nodes * n);
  std::vector<double> token_col(nodes);
  for (std::size_t i = 0; i < nodes; ++i) {
    std::copy_n(adj.data() + i * nodes, n, expert_cols.data() + i * n);
    token_col[i] = adj[i * nodes + n];
  }
  const Tensor adj_experts = Tensor::from_data({nodes, n}, std::move(expert_cols));

  // Layer 1: relu(A_hat H0 W0), H0 = [expert embeddings; x P^T].
  const Tensor expert_part = matmul(adj_experts, matmul(params.expert_embeddings, params.gcn_weight0));
  const Tensor token_map = matmul(transpose(params.token_in_proj), params.gcn_weight0);  // [I x d]
  const Tensor token_part = matmul(x, token_map);                                       // [B x d]
  const Tensor h1 = relu(token_mix(expert_part, token_part, std::move(token_col)));
  check_finite(h1, "gcn layer 1");

  // Layer 2 (no relu) and the shared projection: s = A_hat (H1 (W1 p)), expert rows.
  const Tensor readout = matmul(params.gcn_weight1, params.proj);             // [d x 1]
  const Tensor node_scores = reshape(matmul(h1, readout), {batch, nodes});     // [B x nodes]
  Tensor scores = matmul(node_scores, adj_experts);                           // [B x N]
  check_finite(scores, "gcn layer 2 projection");
  return scores;
}

RouterOutput select_top_k(Tensor weights, std::size_t k) {
  if (weights.rank() != 2) throw ShapeError("select_top_k: weights must be [batch x N]");
  const std::size_t batch = weights.dim(0), n = weights.dim(1);
  check_k(k, n);
  RouterOutput out;
  out.k = k;
  out.topk_indices.resize(batch * k);
  std::vector<std::size_t> flat(batch * k);
  std::vector<std::size_t> order(n);
  const auto w = weights.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = w.data() + b * n;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t a, std::size_t c) { return row[a] > row[c] || (row[a] == row[c] && a < c); });
    for (std::size_t s = 0; s < k; ++s) {
      out.topk_indices[b * k + s] = order[s];
      flat[b * k + s] = b * n + order[s];
    }
  }
  out.topk_gates = normalize(reshape(gather_flat(weights, flat), {batch, k}));
  out.weights = std::move(weights);
  return out;
}

RouterOutput route(const GraphRouterParams& params, const MoEGraph& graph, const Tensor& x, std::size_t k) {
  check_k(k, params.num_experts());
  return select_top_k(softmax(graph_scores(params, graph, x)), k);
}

RouterOutput route_softmax_baseline(const Tensor& linear, const Tensor& x, std::size_t k) {
  if (linear.rank() != 2) throw ShapeError("softmax router: weight must be [N x I]");
  check_k(k, linear.dim(0));
  const Tensor scores = matmul_nt(x, linear);
  for (double v : scores.data())
    if (!std::isfinite(v)) throw NumericError("softmax router: non-finite score");
  return select_top_k(softmax(scores), k);
}

}  // namespace graphmoe
