#include "graphmoe/lora.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "graphmoe/errors.hpp"
#include "graphmoe/ops.hpp"

namespace graphmoe {
namespace {

void check_input(const Tensor& x, std::size_t in, const char* who) {
  if (x.rank() != 2 || x.dim(1) != in)
    throw ShapeError(std::string(who) + ": input " + shape_str(x.shape()) + " does not have " +
                     std::to_string(in) + " features");
}

}  // namespace

FrozenBase::FrozenBase(Tensor w) : weight(std::move(w)) {
  if (weight.rank() != 2) throw ShapeError("FrozenBase: weight must be a matrix, got " + shape_str(weight.shape()));
  weight.set_requires_grad(false);
}

FrozenBase FrozenBase::random(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.normal(0.0, stddev);
  return FrozenBase(Tensor::from_data({out, in}, std::move(w)));
}

LoRAAdapter::LoRAAdapter(std::size_t in, std::size_t out, std::size_t rank, double alpha, Rng& rng)
    : alpha_(alpha) {
  if (rank == 0 || rank > std::min(in, out))
    throw ConfigError("LoRA rank " + std::to_string(rank) + " must lie in [1, min(" + std::to_string(in) + ", " +
                      std::to_string(out) + ")]");
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> a(rank * in);
  for (double& v : a) v = rng.uniform(-bound, bound);
  a_ = Tensor::from_data({rank, in}, std::move(a), true);
  b_ = Tensor::zeros({out, rank}, true);
}

Tensor base_forward(const FrozenBase& base, const Tensor& x) {
  check_input(x, base.in_features(), "base_forward");
  return matmul_nt(x, base.weight);
}

Tensor expert_delta(const LoRAAdapter& adapter, const Tensor& x) {
  check_input(x, adapter.in_features(), "expert_delta");
  return scale(matmul_nt(matmul_nt(x, adapter.down()), adapter.up()), adapter.scaling());
}

Tensor lora_forward(const LoRAAdapter& adapter, const FrozenBase& base, const Tensor& x) {
  if (adapter.in_features() != base.in_features() || adapter.out_features() != base.out_features())
    throw ShapeError("lora_forward: adapter " + std::to_string(adapter.out_features()) + "x" +
                     std::to_string(adapter.in_features()) + " does not fit base " +
                     shape_str(base.weight.shape()));
  return add(base_forward(base, x), expert_delta(adapter, x));
}

}  // namespace graphmoe
