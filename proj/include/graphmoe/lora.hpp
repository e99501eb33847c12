#pragma once

#include <cstddef>

#include "graphmoe/rng.hpp"
#include "graphmoe/tensor.hpp"

namespace graphmoe {

// Pre-trained linear map W [out x in]; never receives gradient.
struct FrozenBase {
  Tensor weight;

  FrozenBase() = default;
  explicit FrozenBase(Tensor w);
  static FrozenBase random(std::size_t in, std::size_t out, double stddev, Rng& rng);

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

// Low-rank update (alpha / r) * B * A with A [r x in] and B [out x r].
class LoRAAdapter {
 public:
  LoRAAdapter() = default;
  // A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0.
  LoRAAdapter(std::size_t in, std::size_t out, std::size_t rank, double alpha, Rng& rng);

  Tensor& down() { return a_; }
  Tensor& up() { return b_; }
  const Tensor& down() const { return a_; }
  const Tensor& up() const { return b_; }
  std::size_t rank() const { return a_.dim(0); }
  std::size_t in_features() const { return a_.dim(1); }
  std::size_t out_features() const { return b_.dim(0); }
  double alpha() const { return alpha_; }
  double scaling() const { return alpha_ / static_cast<double>(rank()); }
  std::size_t parameter_count() const { return a_.numel() + b_.numel(); }

 private:
  Tensor a_;
  Tensor b_;
  double alpha_ = 4.0;
};

// x [batch x in] -> x W^T.
Tensor base_forward(const FrozenBase& base, const Tensor& x);
// x [batch x in] -> (alpha / r) * x A^T B^T.
Tensor expert_delta(const LoRAAdapter& adapter, const Tensor& x);
// x W^T + expert_delta(x).
Tensor lora_forward(const LoRAAdapter& adapter, const FrozenBase& base, const Tensor& x);

}  // namespace graphmoe
