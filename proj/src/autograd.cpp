#include "capsar/autograd.hpp"

#include <atomic>

namespace capsar {

namespace debug {
namespace {
std::atomic<bool> g_corrupt_squash{false};
}
void set_corrupt_squash_adjoint(bool on) { g_corrupt_squash.store(on); }
bool corrupt_squash_adjoint() { return g_corrupt_squash.load(); }
}  // namespace debug

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                       Backward fn) {
  if (in_backward_) throw ContractViolation("cannot record on a tape during backward");
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from op '") + op + "'");
  }
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape != this) throw ContractViolation(std::string("op '") + op + "' mixes tapes");
    needs = needs || nodes_[in.id].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), nullptr, {}, needs, needs ? std::move(fn) : nullptr, {},
                        nullptr, op});
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T>* Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return nullptr;
  if (n.ref) return n.grad_target;
  if (n.grad_storage.empty()) n.grad_storage = Tensor<T>::zeros(n.value.shape());
  return &n.grad_storage;
}

template <typename T>
void Tape<T>::backward(Var<T> root, GradMap<T>& sink) {
  if (root.tape != this) throw ContractViolation("backward root belongs to another tape");
  if (value(root.id).size() != 1) {
    throw DimensionError("backward root must be a scalar, got " + shape_string(value(root.id).shape()));
  }
  for (Node& n : nodes_) {
    if (!n.ref) continue;
    Tensor<T>& g = sink[n.param];
    if (g.empty()) g = Tensor<T>::zeros(n.ref->shape());
    if (g.shape() != n.ref->shape()) {
      throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match parameter '" +
                           n.param + "' " + shape_string(n.ref->shape()));
    }
    n.grad_target = &g;
  }
  if (!nodes_[root.id].needs_grad) return;

  struct Guard {
    bool& flag;
    ~Guard() { flag = false; }
  } guard{in_backward_ = true};
  grad(root.id)->fill(T(1));
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad_storage.empty()) continue;
    n.backward(*this, n.grad_storage);
    n.grad_storage = Tensor<T>();
  }

  for (Node& n : nodes_) {
    if (n.ref && !n.grad_target->all_finite()) {
      throw NumericError("non-finite gradient for parameter '" + n.param + "'");
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace capsar
