#pragma once

// Expert-distinction (Poisson) and load-balance (Normal) coordination losses.
//
// Both compare a canonically ordered model distribution with a truncated pmf
// over i = 1..N, renormalized to a probability vector, via KL(target || model).

#include <cstddef>
#include <cstdint>
#include <vector>

#include "graphmoe/router.hpp"
#include "graphmoe/tensor.hpp"

namespace graphmoe {

inline constexpr double kDefaultPoissonCoeff = 0.005;
inline constexpr double kDefaultNormalCoeff = 8.0;

// lambda = softplus(lambda_raw), initialized to 1.
struct PoissonTarget {
  Tensor lambda_raw;
  std::size_t num_experts = 0;

  explicit PoissonTarget(std::size_t n, double lambda0 = 1.0);
  double lambda() const;
};

// sigma = softplus(sigma_raw), initialized to N/4; mu = N/2 is fixed.
struct NormalTarget {
  Tensor sigma_raw;
  std::size_t num_experts = 0;

  explicit NormalTarget(std::size_t n);
  NormalTarget(std::size_t n, double sigma0);
  double sigma() const;
  double mu() const { return static_cast<double>(num_experts) / 2.0; }
};

// Inverse of softplus, for initializing raw parameters.
double softplus_inverse(double y);

// Renormalized lambda^i e^-lambda / i! for i = 1..N; differentiable in lambda_raw.
Tensor poisson_target_vector(const PoissonTarget& t);
// Renormalized exp(-(i - mu)^2 / (2 sigma^2)) / sqrt(2 pi sigma) for i = 1..N.
Tensor normal_target_vector(const NormalTarget& t);

// Running per-expert sums of assigned Top-K gate weights. Updated outside the tape.
class ActivationTracker {
 public:
  explicit ActivationTracker(std::size_t n = 0) : cumulative_(n, 0.0) {}

  void update(const RouterOutput& out);
  void reset();
  bool empty() const { return step_count_ == 0; }
  std::size_t num_experts() const { return cumulative_.size(); }
  const std::vector<double>& cumulative() const { return cumulative_; }
  std::uint64_t step_count() const { return step_count_; }
  // v_a: cumulative / sum(cumulative). Requires a recorded update.
  std::vector<double> frequency() const;

  // Checkpoint restore.
  void restore(std::vector<double> cumulative, std::uint64_t steps);

 private:
  std::vector<double> cumulative_;
  std::uint64_t step_count_ = 0;
};

inline void tracker_update(ActivationTracker& tr, const RouterOutput& out) { tr.update(out); }

// Mean over rows of KL(sorted target || sort_desc(o_r row)). With
// batch_mean_first the rows are averaged before sorting instead.
Tensor loss_poisson(const PoissonTarget& t, const Tensor& weights, bool batch_mean_first = false);

// How the detached tracker history is weighted against the live batch.
enum class HistoryWeighting {
  kCumulative,   // raw running sums: the batch share shrinks as history grows
  kBatchScaled,  // v_a rescaled to the batch's total gate mass
};

// KL(target || v_hat) where v_hat = normalize(detached history + this batch's
// gate mass per expert). With sorted, both sides are sorted descending first.
Tensor loss_normal(const NormalTarget& t, const ActivationTracker& tr, const RouterOutput& out, bool sorted = true,
                   HistoryWeighting weighting = HistoryWeighting::kBatchScaled);

Tensor total_loss(const Tensor& task, const Tensor& lp, const Tensor& ln, double c_p = kDefaultPoissonCoeff,
                  double c_n = kDefaultNormalCoeff);

}  // namespace graphmoe
