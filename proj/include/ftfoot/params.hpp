#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "ftfoot/tape.hpp"

namespace ftfoot {

// Named parameter tensors, ordered by name for deterministic iteration.
class ParamSet {
 public:
  Tensor& create(const std::string& name, Tensor init) {
    auto [it, inserted] = tensors_.emplace(name, std::move(init));
    if (!inserted) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  Tensor& get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const { return const_cast<ParamSet*>(this)->get(name); }

  std::map<std::string, Tensor>& tensors() { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

 private:
  std::map<std::string, Tensor> tensors_;
};

// Binds parameters onto a tape as leaves, one Var per parameter per tape, so
// that a parameter used in several places accumulates a single gradient.
class Binding {
 public:
  Binding(diff::Tape& tape, ParamSet& params, bool trainable = true)
      : tape_(&tape), params_(&params), trainable_(trainable) {}

  diff::Var get(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    diff::Var v = trainable_ ? tape_->leaf(params_->get(name)) : tape_->constant(params_->get(name));
    bound_.emplace(name, v);
    return v;
  }

  diff::Tape& tape() { return *tape_; }
  ParamSet& params() { return *params_; }
  const std::map<std::string, diff::Var>& bound() const { return bound_; }

 private:
  diff::Tape* tape_;
  ParamSet* params_;
  bool trainable_;
  std::map<std::string, diff::Var> bound_;
};

}  // namespace ftfoot
