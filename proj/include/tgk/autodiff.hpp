#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tgk/tensor.hpp"

namespace tgk {

// A trainable tensor living outside any tape. Gradients from a tape sweep are
// added into `grad`; the optimizer reads and clears them.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Tensor(value.shape());
    grad.fill(0.0);
  }
};

class Tape;

// Handle to a node recorded on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  inline const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  inline bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Records primitive operations in creation order, which is a topological order:
// every node's inputs were created before it. backward() walks the record in
// reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}, nullptr); }

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, {}, nullptr);
  }

  // Repeated calls with the same parameter return the same node.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Var v = push(p.value, true, {}, nullptr);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool rg = false;
    for (auto i : inputs) rg = rg || nodes_.at(i).requires_grad;
    return push(std::move(value), rg, std::move(inputs), rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  // Gradient buffer of a node, allocated (zeroed) on first touch.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  void backward(Var loss) {
    if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
    if (value(loss.id()).numel() != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_str(value(loss.id()).shape()));
    grad(loss.id()).fill(1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
    }
    for (auto& [p, id] : param_nodes_) {
      if (!has_grad(id)) continue;
      if (!p->grad.same_shape(p->value)) p->grad = Tensor(p->value.shape());
      p->grad += nodes_[id].grad;
    }
  }

  // Gradient of every requires-grad leaf after backward(); zero for leaves the
  // loss never reached.
  std::map<std::size_t, Tensor> leaf_gradients() const {
    std::map<std::size_t, Tensor> out;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (!n.inputs.empty() || !n.requires_grad) continue;
      out.emplace(id, n.grad.empty() ? Tensor(n.value.shape()) : n.grad);
    }
    return out;
  }

  // Scopes tag every node created while active; used to audit which parts of a
  // model consume a given node.
  void push_scope(std::string name) { scope_stack_.push_back(intern(std::move(name))); }
  void pop_scope() { scope_stack_.pop_back(); }
  const std::string& scope_of(std::size_t id) const { return scope_names_[nodes_[id].scope]; }

  std::vector<std::size_t> consumers(std::size_t id) const {
    std::vector<std::size_t> out;
    for (std::size_t j = id + 1; j < nodes_.size(); ++j)
      for (auto i : nodes_[j].inputs)
        if (i == id) {
          out.push_back(j);
          break;
        }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    std::uint32_t scope = 0;
  };

  Var push(Tensor value, bool rg, std::vector<std::size_t> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.scope = scope_stack_.empty() ? 0 : scope_stack_.back();
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::uint32_t intern(std::string name) {
    for (std::uint32_t i = 0; i < scope_names_.size(); ++i)
      if (scope_names_[i] == name) return i;
    scope_names_.push_back(std::move(name));
    return static_cast<std::uint32_t>(scope_names_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
  std::vector<std::uint32_t> scope_stack_;
  std::vector<std::string> scope_names_{""};
};

class ScopeGuard {
 public:
  ScopeGuard(Tape& t, std::string name) : tape_(t) { tape_.push_scope(std::move(name)); }
  ~ScopeGuard() { tape_.pop_scope(); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Tape& tape_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace tgk
