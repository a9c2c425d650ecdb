#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "hps/tensor.hpp"

namespace hps {

// A value in the computation graph. Gradients are allocated lazily.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

// Reverse-mode tape over the closed op set in ops.hpp. A graph created with
// record=false evaluates values only (inference).
template <typename T>
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value) const {
    return make_var(std::move(value), false);
  }

  // True when `out` needs a backward entry, i.e. we record and some input
  // requires a gradient. Marks `out` accordingly.
  bool tracks(const Var<T>& out, std::initializer_list<const Var<T>*> inputs) {
    if (!record_) return false;
    for (const Var<T>* in : inputs) {
      if (*in && (*in)->requires_grad) {
        out->requires_grad = true;
        return true;
      }
    }
    return false;
  }
  bool tracks(const Var<T>& out, const std::vector<Var<T>>& inputs) {
    if (!record_) return false;
    for (const Var<T>& in : inputs) {
      if (in && in->requires_grad) {
        out->requires_grad = true;
        return true;
      }
    }
    return false;
  }

  void push(Var<T> out, std::function<void()> backward) {
    tape_.emplace_back(std::move(out), std::move(backward));
  }

  // Seeds d(loss)/d(loss) = 1 and runs the tape in reverse. Gradients of
  // leaves (parameters) accumulate into their nodes.
  void backward(const Var<T>& loss) {
    if (loss->value.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " +
                       shape_str(loss->value.shape()));
    }
    if (!loss->requires_grad) return;
    loss->grad_buffer()[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      if (!it->first->grad.empty()) it->second();
    }
  }

  std::size_t tape_size() const { return tape_.size(); }

 private:
  bool record_;
  std::vector<std::pair<Var<T>, std::function<void()>>> tape_;
};

}  // namespace hps
