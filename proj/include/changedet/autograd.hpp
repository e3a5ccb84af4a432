#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "changedet/tensor.hpp"

namespace changedet::ag {

/// One node of the dynamic computation graph. Nodes point backwards at their
/// inputs, so dropping the output Var releases the whole graph. Parameter
/// leaves outlive the graphs built on them and accumulate gradients across
/// uses within one backward pass.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;  // scatters node.grad into inputs

  Tensor& ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

/// Value-semantic handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  /// Gradient accumulated by the last backward(); zeros if never touched.
  const Tensor& grad() const {
    return const_cast<Node*>(node_.get())->ensure_grad();
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() {
    if (node_ && !node_->grad.empty()) node_->grad.fill(0.0f);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  const std::vector<int64_t>& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  int64_t numel() const { return node_->value.numel(); }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and runs
/// every backward_fn in reverse topological order.
void backward(const Var& loss);

/// Creates an output node wired to its inputs. The backward_fn may be empty
/// when no input requires grad (constant folding for frozen subgraphs).
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

}  // namespace changedet::ag
