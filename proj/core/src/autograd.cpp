#include "pivit/autograd.hpp"

#include <unordered_set>

#include "pivit/error.hpp"

namespace pivit::nn {

namespace {
thread_local bool g_no_grad = false;
}

Tensor& Node::ensure_grad() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

void Var::zero_grad() {
  if (node_->grad.shape() == node_->value.shape())
    node_->grad.fill(0.0);
  else
    node_->grad = Tensor(node_->value.shape(), 0.0);
}

void Var::backward() const {
  if (node_->value.size() != 1) throw ContractError("backward() requires a scalar root");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; `order` ends up topologically sorted.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.shape() == n->value.shape()) n->backward_fn(*n);
  }
  // Interior grads are scratch; drop them so a second backward through a
  // retained graph does not double count.
  for (Node* n : order)
    if (n->backward_fn) n->grad = Tensor();
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_no_grad) return Var(std::move(n));
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return Var(std::move(n));
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.node());
  n->backward_fn = std::move(fn);
  return Var(std::move(n));
}

}  // namespace pivit::nn
