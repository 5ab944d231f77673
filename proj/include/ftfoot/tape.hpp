#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ftfoot/tensor.hpp"

namespace ftfoot::diff {

// Value plus its gradient buffer. The gradient has the same shape as the
// value and stays all-zero until a backward pass deposits into it.
struct DualTensor {
  Tensor value;
  Tensor grad;
};

class Tape;

// Lightweight handle to a tape node.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Tensor& grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in forward order; backward() visits
// them in reverse, so the tape must describe a DAG built front to back.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var leaf(Tensor value) { return push(std::move(value), true, nullptr); }
  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  Var make(Tensor value, bool requires_grad, BackwardFn backward) {
    return push(std::move(value), requires_grad, std::move(backward));
  }

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].dual.value; }
  const Tensor& grad(int id) const { return nodes_[static_cast<size_t>(id)].dual.grad; }
  Tensor& grad_mut(int id) { return nodes_[static_cast<size_t>(id)].dual.grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable node.
  // root must be scalar (size 1).
  void backward(Var root) {
    if (root.tape() != this) throw std::invalid_argument("backward: var from another tape");
    if (value(root.id()).size() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(value(root.id())));
    }
    grad_mut(root.id())[0] = 1.0;
    for (int id = root.id(); id >= 0; --id) {
      auto& node = nodes_[static_cast<size_t>(id)];
      if (node.requires_grad && node.backward) node.backward(*this, id);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.dual.grad.fill(0.0);
  }

 private:
  struct Node {
    DualTensor dual;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    Node n;
    n.dual.grad = Tensor::zeros_like(value);
    n.dual.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("ops: vars from different tapes");
  return *a.tape();
}

}  // namespace ftfoot::diff
