#include "changedet/autograd.hpp"

#include <unordered_set>

#include "changedet/errors.hpp"

namespace changedet::ag {

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.requires_grad()) {
      needs = true;
      break;
    }
  }
  n->requires_grad = needs;
  if (needs) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) {
      if (in.defined()) n->inputs.push_back(in.node());
    }
    n->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (!loss.defined()) throw ShapeError("backward on undefined Var");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + loss.value().shape_str());
  }

  // Iterative post-order DFS over input edges.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  Node* root = loss.node().get();
  if (!root->requires_grad) return;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* next = node->inputs[idx++].get();
      if (next->requires_grad && !seen.count(next)) {
        seen.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace changedet::ag
