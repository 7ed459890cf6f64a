#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "vfd/tensor.hpp"

namespace vfd {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t rank() const { return value().rank(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
// the node list is already topologically sorted; backward walks it once in
// reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Records an op output. `fn` is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<std::size_t> inputs,
                BackwardFn fn) {
    return record(std::move(value), std::span<const std::size_t>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var<T> record(Tensor<T> value, std::span<const std::size_t> inputs, BackwardFn fn) {
    bool any = false;
    for (auto id : inputs) any = any || nodes_.at(id).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, any, any ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient flowing into node `id` during backward (read side).
  std::span<const T> grad_in(std::size_t id) const { return nodes_[id].grad; }

  // Accumulation target for an input's gradient; empty span when the input
  // does not require a gradient.
  std::span<T> grad_out(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T{0});
    return n.grad;
  }

  void backward(const Var<T>& loss) {
    if (loss.value().numel() != 1) {
      throw NonScalarLoss("loss has shape " + to_string(loss.shape()));
    }
    for (auto& n : nodes_) n.grad.clear();
    auto g = grad_out(loss.id());
    if (g.empty()) return;
    g[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  // Gradient of the last backward() w.r.t. `v`; zeros when unreachable.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return Tensor<T>(n.value.shape(), n.grad);
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // deque: values stay put as the tape grows
};

}  // namespace vfd
