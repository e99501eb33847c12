#include "graphmoe/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "graphmoe/errors.hpp"

namespace graphmoe {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("tensor shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from_data({}, {v}, requires_grad); }

Tensor Tensor::vector(std::initializer_list<double> v, bool requires_grad) {
  return from_data({v.size()}, std::vector<double>(v), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return from_data({r, c}, std::move(data), requires_grad);
}

std::span<double> Tensor::mutable_data() {
  if (!node_->parents.empty()) throw ContractViolation("mutable_data() on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw ShapeError("at(r, c) on tensor of shape " + shape_str(shape()));
  return node_->value.at(r * node_->shape[1] + c);
}

void Tensor::set_requires_grad(bool rg) {
  if (!node_->parents.empty()) throw ContractViolation("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = rg;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from_data(node_->shape, node_->value, false); }

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   const char* op, std::function<void(detail::Node& self)> backward) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

GradTape::GradTape(const Tensor& root) {
  if (!root.defined() || !root.requires_grad()) return;
  // Iterative post-order DFS; order_ ends up topologically sorted (inputs first).
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
      continue;
    }
    order_.push_back(node);
    stack.pop_back();
  }
}

std::vector<std::string> GradTape::ops() const {
  std::vector<std::string> out;
  out.reserve(order_.size());
  for (const auto& n : order_) out.emplace_back(n->op);
  return out;
}

void GradTape::replay(std::span<const double> root_adjoint) {
  if (order_.empty()) return;
  for (auto& n : order_)
    if (!n->parents.empty()) n->grad.assign(n->value.size(), 0.0);
  auto& root = order_.back();
  if (root_adjoint.size() != root->value.size())
    throw ShapeError("root adjoint size mismatch in GradTape::replay");
  auto& g = root->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += root_adjoint[i];
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward) n.backward(n);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractViolation("backward() requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  GradTape tape(loss);
  const double one = 1.0;
  tape.replay(std::span<const double>(&one, 1));
}

}  // namespace graphmoe
