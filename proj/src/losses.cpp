#include "graphmoe/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <numbers>
#include <string>

#include "graphmoe/errors.hpp"
#include "graphmoe/ops.hpp"

namespace graphmoe {
namespace {

// Poisson pmf at i = 1..n up to a positive factor (callers normalize). Terms
// are shifted by their max log value so large or tiny lambda cannot underflow
// the whole vector; the shift only rescales, and normalize's Jacobian discards
// components along the vector itself, so the backward ignores it.
Tensor poisson_pmf(const Tensor& lambda, std::size_t n) {
  const double lam = lambda.item();
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double i = static_cast<double>(k + 1);
    v[k] = i * std::log(lam) - std::lgamma(i + 1.0) - lam;
  }
  const double top = *std::max_element(v.begin(), v.end());
  for (double& x : v) x = std::exp(x - top);
  return make_result({n}, std::move(v), {lambda}, "poisson_pmf", [lam, n](detail::Node& self) {
    double g = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      g += self.grad[k] * self.value[k] * (static_cast<double>(k + 1) / lam - 1.0);
    self.parents[0]->ensure_grad()[0] += g;
  });
}

// Normal density at i = 1..n up to a positive factor, shifted the same way.
Tensor normal_pdf(const Tensor& sigma, double mu, std::size_t n) {
  const double s = sigma.item();
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double z = static_cast<double>(k + 1) - mu;
    v[k] = -z * z / (2.0 * s * s) - 0.5 * std::log(2.0 * std::numbers::pi * s);
  }
  const double top = *std::max_element(v.begin(), v.end());
  for (double& x : v) x = std::exp(x - top);
  return make_result({n}, std::move(v), {sigma}, "normal_pdf", [s, mu, n](detail::Node& self) {
    double g = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double z = static_cast<double>(k + 1) - mu;
      g += self.grad[k] * self.value[k] * (z * z / (s * s * s) - 0.5 / s);
    }
    self.parents[0]->ensure_grad()[0] += g;
  });
}

void check_rows_are_probabilities(const Tensor& w, const char* who) {
  if (w.rank() != 2) throw ShapeError(std::string(who) + ": expected [batch x N], got " + shape_str(w.shape()));
  const std::size_t n = w.dim(1);
  const auto d = w.data();
  for (std::size_t r = 0; r < w.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!(d[r * n + j] >= 0.0)) throw ContractViolation(std::string(who) + ": negative or NaN weight");
      s += d[r * n + j];
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw ContractViolation(std::string(who) + ": row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}

Tensor as_scalar(const Tensor& t) { return t.rank() == 0 ? t : reshape(t, {}); }

}  // namespace

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw ConfigError("softplus_inverse: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

PoissonTarget::PoissonTarget(std::size_t n, double lambda0)
    : lambda_raw(Tensor::scalar(softplus_inverse(lambda0), true)), num_experts(n) {
  if (n < 1) throw ConfigError("Poisson target needs N >= 1");
}

double PoissonTarget::lambda() const { return softplus(lambda_raw.detach()).item(); }

NormalTarget::NormalTarget(std::size_t n) : NormalTarget(n, static_cast<double>(n) / 4.0) {}

NormalTarget::NormalTarget(std::size_t n, double sigma0)
    : sigma_raw(Tensor::scalar(softplus_inverse(sigma0), true)), num_experts(n) {
  if (n < 1) throw ConfigError("Normal target needs N >= 1");
}

double NormalTarget::sigma() const { return softplus(sigma_raw.detach()).item(); }

Tensor poisson_target_vector(const PoissonTarget& t) {
  return normalize(poisson_pmf(softplus(t.lambda_raw), t.num_experts));
}

Tensor normal_target_vector(const NormalTarget& t) {
  return normalize(normal_pdf(softplus(t.sigma_raw), t.mu(), t.num_experts));
}

void ActivationTracker::update(const RouterOutput& out) {
  if (out.num_experts() != cumulative_.size())
    throw ShapeError("tracker: router width " + std::to_string(out.num_experts()) + " vs tracker " +
                     std::to_string(cumulative_.size()));
  const auto gates = out.topk_gates.data();
  for (std::size_t i = 0; i < out.topk_indices.size(); ++i) cumulative_[out.topk_indices[i]] += gates[i];
  ++step_count_;
}

void ActivationTracker::reset() {
  std::fill(cumulative_.begin(), cumulative_.end(), 0.0);
  step_count_ = 0;
}

std::vector<double> ActivationTracker::frequency() const {
  if (empty()) throw ContractViolation("activation tracker has no recorded updates");
  double s = 0.0;
  for (double v : cumulative_) s += v;
  std::vector<double> f(cumulative_.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = cumulative_[i] / s;
  return f;
}

void ActivationTracker::restore(std::vector<double> cumulative, std::uint64_t steps) {
  if (cumulative.size() != cumulative_.size()) throw FormatError("tracker size mismatch on restore");
  cumulative_ = std::move(cumulative);
  step_count_ = steps;
}

Tensor loss_poisson(const PoissonTarget& t, const Tensor& weights, bool batch_mean_first) {
  check_rows_are_probabilities(weights, "loss_poisson");
  if (weights.dim(1) != t.num_experts)
    throw ShapeError("loss_poisson: " + std::to_string(weights.dim(1)) + " experts vs target of " +
                     std::to_string(t.num_experts));
  const Tensor target = sort_descending_with_grad(poisson_target_vector(t)).values;
  if (batch_mean_first) {
    const Tensor avg = scale(sum_axis(weights, 0), 1.0 / static_cast<double>(weights.dim(0)));
    return kl_divergence(target, sort_descending_with_grad(avg).values);
  }
  return mean(kl_divergence_rows(target, sort_descending_with_grad(weights).values));
}

Tensor loss_normal(const NormalTarget& t, const ActivationTracker& tr, const RouterOutput& out, bool sorted,
                   HistoryWeighting weighting) {
  if (tr.empty()) throw ContractViolation("loss_normal: activation tracker has no recorded updates");
  const std::size_t n = t.num_experts;
  if (tr.num_experts() != n || out.num_experts() != n) throw ShapeError("loss_normal: expert count mismatch");
  const Tensor batch_mass = scatter_add_flat(out.topk_gates, out.topk_indices, n);
  std::vector<double> hist = tr.cumulative();
  if (weighting == HistoryWeighting::kBatchScaled) {
    const double batch_total = std::accumulate(out.topk_gates.data().begin(), out.topk_gates.data().end(), 0.0);
    const std::vector<double> freq = tr.frequency();
    for (std::size_t i = 0; i < n; ++i) hist[i] = freq[i] * batch_total;
  }
  const Tensor history = Tensor::from_data({n}, std::move(hist));
  Tensor freq = normalize(add(history, batch_mass));
  Tensor target = normal_target_vector(t);
  if (sorted) {
    freq = sort_descending_with_grad(freq).values;
    target = sort_descending_with_grad(target).values;
  }
  return kl_divergence(target, freq);
}

Tensor total_loss(const Tensor& task, const Tensor& lp, const Tensor& ln, double c_p, double c_n) {
  for (const Tensor* t : {&task, &lp, &ln}) {
    if (t->numel() != 1) throw ShapeError("total_loss: operands must be scalars");
    if (!std::isfinite(t->item())) throw NumericError("total_loss: non-finite operand");
  }
  return add(as_scalar(task), add(scale(as_scalar(lp), c_p), scale(as_scalar(ln), c_n)));
}

}  // namespace graphmoe
