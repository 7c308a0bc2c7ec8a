#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pivit/tensor.hpp"

namespace pivit::nn {

/// A node of the dynamic computation graph. Leaves are parameters or
/// constants; interior nodes carry the closure that pushes their gradient
/// into their parents.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// Parameters only: the optimizer and checkpoint loader write through this.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient accumulated by backward(); zero-sized until the first pass.
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Gradients accumulate into every
  /// reachable node that requires them, parameters included.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, new results record no parents and no backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();

 private:
  bool previous_;
};

/// Builds an interior node. `fn` receives the result node; its grad is
/// populated and it must accumulate into `node.parents[i]->ensure_grad()`
/// for parents that require gradients.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn);

}  // namespace pivit::nn
