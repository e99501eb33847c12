#pragma once

// Dense row-major f64 tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations in ops.hpp create
// result nodes that remember their inputs and an adjoint rule whenever any
// input requires a gradient. backward() orders the reachable nodes into a
// GradTape and replays the adjoints in reverse. There is no global state: two
// threads may build and differentiate independent graphs concurrently.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace graphmoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  // Empty until the node first receives an adjoint.
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into parents that require grad.
  std::function<void(Node& self)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> v, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Only valid on leaves; interior values are owned by the graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  // Value copy with no history and no gradient requirement.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Creates a result node. When no input requires grad the adjoint is dropped and
// the result is a constant.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   const char* op, std::function<void(detail::Node& self)> backward);

// Reverse topological record of the requires-grad subgraph under a root.
class GradTape {
 public:
  explicit GradTape(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  // Ops in recorded (forward) order.
  std::vector<std::string> ops() const;
  // Seeds the root adjoint and runs each adjoint in reverse recorded order.
  // Leaf gradients accumulate; interior gradients are reset first.
  void replay(std::span<const double> root_adjoint);

 private:
  std::vector<std::shared_ptr<detail::Node>> order_;
};

// d(loss)/d(every requires-grad ancestor). loss must hold exactly one element.
void backward(const Tensor& loss);

}  // namespace graphmoe
