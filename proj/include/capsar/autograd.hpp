#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "capsar/tensor.hpp"

namespace capsar {

// Named parameter registry. Iteration order (std::map) is the canonical
// sorted-name order used for initialization draws and checkpoints.
template <typename T>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    auto [it, inserted] = params_.insert_or_assign(name, std::move(value));
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return params_.size(); }

  std::size_t coordinate_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, t] : params_) out.add(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.params_ == b.params_; }

 private:
  Map params_;
};

// Accumulated gradients keyed by parameter name.
template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

// Reverse-mode gradient tape over a closed op vocabulary. Each op records its
// output and an adjoint closure; backward() replays the closures in exact
// reverse recording order. Parameter leaves reference caller-owned tensors,
// which must stay alive and unmodified for the lifetime of the tape.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, false, nullptr, {}, nullptr, "constant"});
    return {this, nodes_.size() - 1};
  }

  Var<T> parameter(const std::string& name, const Tensor<T>& value) {
    nodes_.push_back(Node{{}, &value, name, true, nullptr, {}, nullptr, "parameter"});
    return {this, nodes_.size() - 1};
  }

  // Records an op output. The output needs a gradient iff any input does.
  // Non-finite outputs are rejected here.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }
  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, Backward fn);

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient buffer of a node, allocated on first use; nullptr when the node
  // does not need a gradient. Only valid inside backward().
  Tensor<T>* grad(std::size_t id);
  Tensor<T>* grad(const Var<T>& v) { return grad(v.id); }

  // Seeds d(root)/d(root) = 1 and accumulates parameter gradients into sink
  // (missing entries are created as zeros; existing entries are added to).
  void backward(Var<T> root, GradMap<T>& sink);

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref;
    std::string param;
    bool needs_grad;
    Backward backward;
    Tensor<T> grad_storage;
    Tensor<T>* grad_target;
    const char* op;
  };

  std::vector<Node> nodes_;
  bool in_backward_ = false;
};

namespace debug {
// Test fixture: when set, the squash adjoint is deliberately perturbed so that
// gradient checks must fail.
void set_corrupt_squash_adjoint(bool on);
bool corrupt_squash_adjoint();
}  // namespace debug

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace capsar
