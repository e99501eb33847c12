#include "graphmoe/moe_graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "graphmoe/errors.hpp"
#include "graphmoe/rng.hpp"

namespace graphmoe {

MoEGraph MoEGraph::build(std::size_t num_experts, double beta, std::uint64_t seed) {
  if (num_experts < 1) throw ConfigError("MoE graph needs at least one expert");
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("edge density must lie in (0, 1], got " + std::to_string(beta));

  const std::size_t nodes = num_experts + 1;
  std::vector<Edge> pairs;
  pairs.reserve(candidate_pairs(num_experts));
  for (std::size_t u = 0; u < nodes; ++u)
    for (std::size_t v = u + 1; v < nodes; ++v) pairs.push_back({u, v});

  const auto want = static_cast<std::size_t>(std::llround(beta * static_cast<double>(pairs.size())));
  Rng rng(seed);
  // Partial Fisher-Yates: the first `want` slots are a uniform sample.
  for (std::size_t i = 0; i < want; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pairs.size() - i));
    std::swap(pairs[i], pairs[j]);
  }

  MoEGraph g;
  g.num_experts_ = num_experts;
  g.beta_ = beta;
  g.seed_ = seed;
  g.edges_.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(want));
  g.sampled_count_ = want;

  std::vector<std::size_t> deg(nodes, 0);
  for (const Edge& e : g.edges_) ++deg[e.u], ++deg[e.v];
  for (std::size_t n = 0; n < nodes; ++n) {
    if (deg[n] != 0) continue;
    std::size_t other = static_cast<std::size_t>(rng.below(nodes - 1));
    if (other >= n) ++other;
    g.edges_.push_back({std::min(n, other), std::max(n, other)});
    ++deg[n], ++deg[other];
  }
  g.finalize();
  return g;
}

MoEGraph MoEGraph::from_edges(std::size_t num_experts, double beta, std::uint64_t seed, std::vector<Edge> edges,
                              std::size_t sampled_count) {
  if (num_experts < 1) throw FormatError("MoE graph needs at least one expert");
  if (sampled_count > edges.size()) throw FormatError("sampled edge count exceeds edge list");
  for (const Edge& e : edges)
    if (e.u >= e.v || e.v > num_experts) throw FormatError("invalid MoE graph edge");
  MoEGraph g;
  g.num_experts_ = num_experts;
  g.beta_ = beta;
  g.seed_ = seed;
  g.edges_ = std::move(edges);
  g.sampled_count_ = sampled_count;
  g.finalize();
  return g;
}

void MoEGraph::finalize() {
  const std::size_t n = num_nodes();
  std::vector<double> a(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] = 1.0;
  for (const Edge& e : edges_) {
    a[e.u * n + e.v] = 1.0;
    a[e.v * n + e.u] = 1.0;
  }
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += a[i * n + j];
    inv_sqrt[i] = 1.0 / std::sqrt(d);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] *= (inv_sqrt[i] * inv_sqrt[j]);
  norm_adj_ = Tensor::from_data({n, n}, std::move(a));
}

std::vector<std::size_t> MoEGraph::degrees() const {
  std::vector<std::size_t> deg(num_nodes(), 0);
  for (const Edge& e : edges_) ++deg[e.u], ++deg[e.v];
  return deg;
}

std::vector<std::size_t> MoEGraph::token_neighbors() const {
  std::vector<std::size_t> out;
  for (const Edge& e : edges_)
    if (e.v == token_node()) out.push_back(e.u);
  std::sort(out.begin(), out.end());
  return out;
}

double density_of(const MoEGraph& graph) {
  return static_cast<double>(graph.edges().size()) /
         static_cast<double>(MoEGraph::candidate_pairs(graph.num_experts()));
}

}  // namespace graphmoe
