#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "ien/tensor.hpp"

namespace ien {

// Handle to a node in a Graph.
struct Var {
  std::uint32_t id = 0;
};

// Tape for reverse-mode differentiation. Nodes are appended in evaluation
// order, so reverse insertion order is a reverse topological order.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var)>;

  // With record=false no backward closures are kept (inference mode).
  explicit Graph(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }
  Var parameter(Tensor<T> value) { return push(std::move(value), record_, nullptr); }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient accumulated for v by the last backward(); zeros if none reached it.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  // Mutable gradient buffer, allocated on first use. For op implementations.
  Tensor<T>& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  // Gradient flowing into v during backward(); only valid inside a closure.
  const Tensor<T>& upstream(Var v) const { return nodes_[v.id].grad; }

  // Appends an op result. The backward closure is dropped when no input
  // needs a gradient.
  Var emit(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (record_) {
      for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  // Seeds d(loss)/d(loss) = seed and propagates to every reachable node.
  // Returns the number of nodes whose backward closure ran.
  std::size_t backward(Var loss, T seed = T{1}) {
    if (value(loss).size() != 1) throw ShapeMismatch("backward() needs a scalar loss");
    for (Node& n : nodes_) n.grad = Tensor<T>();
    if (!nodes_[loss.id].requires_grad) return 0;
    grad_buffer(loss)[0] = seed;
    std::size_t visited = 0;
    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, Var{id});
      ++visited;
    }
    return visited;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    if (!value.all_finite()) throw NonFinite("non-finite value produced at node " + std::to_string(nodes_.size()));
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(fn)});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  bool record_;
};

}  // namespace ien
