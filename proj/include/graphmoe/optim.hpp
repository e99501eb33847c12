#pragma once

#include <cstdint>
#include <vector>

#include "graphmoe/tensor.hpp"

namespace graphmoe {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed list of leaf tensors. Parameters without a gradient this
// step are left untouched.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions opts = {});

  void step();
  void zero_grad();
  std::uint64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamOptions opts_;
  std::uint64_t t_ = 0;
};

}  // namespace graphmoe
