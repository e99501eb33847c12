#include "graphmoe/optim.hpp"

#include <cmath>

#include "graphmoe/errors.hpp"

namespace graphmoe {

Adam::Adam(std::vector<Tensor> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  if (!(opts_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw ContractViolation("Adam: parameter does not require grad");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g[j];
      v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g[j] * g[j];
      w[j] -= opts_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opts_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace graphmoe
