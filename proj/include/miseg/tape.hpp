#pragma once

#include <functional>
#include <vector>

#include "miseg/ndarray.hpp"

namespace miseg {

class Tape;

// Value participating in a recorded computation. `node == -1` marks a
// constant that does not receive gradients.
struct DiffArray {
  NDArray value;
  Tape* tape = nullptr;
  int node = -1;

  DiffArray() = default;
  DiffArray(NDArray v, Tape* t, int n) : value(std::move(v)), tape(t), node(n) {}

  const Shape& shape() const { return value.shape(); }
  int64_t size() const { return value.size(); }
  double scalar_value() const { return value.scalar_value(); }
  bool tracked() const { return node >= 0; }
};

DiffArray constant(NDArray v);

// Reverse-mode computation record. Nodes are appended in execution order,
// so inputs always precede their consumers. One record per training step.
class Tape {
 public:
  using BackwardFn = std::function<void(const NDArray& upstream, Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a gradient-receiving input (parameter or watched value).
  DiffArray leaf(NDArray v);

  // Appends an operation node. Called by the op layer.
  int emit(Shape out_shape, BackwardFn backward);

  // Propagates gradients from a scalar loss to every ancestor node.
  void backward(const DiffArray& loss);

  // Gradient of the last backward() w.r.t. `x`; nullptr if x is untracked
  // or unreachable from the loss.
  const NDArray* gradient(const DiffArray& x) const;
  const NDArray* gradient(int node) const;

  // Adds a contribution to a node's gradient. Called by backward closures.
  void accumulate(int node, const NDArray& g);

  size_t node_count() const { return nodes_.size(); }
  const Shape& node_shape(int node) const { return nodes_[static_cast<size_t>(node)].shape; }

 private:
  struct Node {
    Shape shape;
    BackwardFn backward;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::vector<NDArray> grads_;
  std::vector<char> grad_set_;
};

}  // namespace miseg
