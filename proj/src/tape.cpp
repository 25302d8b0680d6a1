#include "miseg/tape.hpp"

#include <stdexcept>

namespace miseg {

DiffArray constant(NDArray v) { return DiffArray(std::move(v), nullptr, -1); }

DiffArray Tape::leaf(NDArray v) {
  Shape s = v.shape();
  const int id = emit(std::move(s), BackwardFn{});
  return DiffArray(std::move(v), this, id);
}

int Tape::emit(Shape out_shape, BackwardFn backward) {
  nodes_.push_back(Node{std::move(out_shape), std::move(backward)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(const DiffArray& loss) {
  if (!loss.tracked() || loss.tape != this) {
    throw std::invalid_argument("backward: loss is not a tracked node of this record");
  }
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  }
  grads_.assign(nodes_.size(), NDArray{});
  grad_set_.assign(nodes_.size(), 0);

  const size_t root = static_cast<size_t>(loss.node);
  grads_[root] = NDArray::full(nodes_[root].shape, 1.0);
  grad_set_[root] = 1;

  for (int i = loss.node; i >= 0; --i) {
    const size_t idx = static_cast<size_t>(i);
    if (!grad_set_[idx] || !nodes_[idx].backward) continue;
    nodes_[idx].backward(grads_[idx], *this);
  }
}

const NDArray* Tape::gradient(const DiffArray& x) const {
  if (!x.tracked() || x.tape != this) return nullptr;
  return gradient(x.node);
}

const NDArray* Tape::gradient(int node) const {
  const size_t idx = static_cast<size_t>(node);
  if (idx >= grad_set_.size() || !grad_set_[idx]) return nullptr;
  return &grads_[idx];
}

void Tape::accumulate(int node, const NDArray& g) {
  const size_t idx = static_cast<size_t>(node);
  if (nodes_[idx].shape != g.shape()) {
    throw std::logic_error("gradient shape " + shape_str(g.shape()) +
                           " does not match node shape " + shape_str(nodes_[idx].shape));
  }
  if (grad_set_.size() < nodes_.size()) {
    grads_.resize(nodes_.size());
    grad_set_.resize(nodes_.size(), 0);
  }
  if (!grad_set_[idx]) {
    grads_[idx] = g.clone();
    grad_set_[idx] = 1;
    return;
  }
  double* dst = grads_[idx].mutable_data();
  const double* src = g.data();
  const int64_t n = g.size();
  for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace miseg
