#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "blockprune/errors.hpp"
#include "blockprune/tensor.hpp"

namespace blockprune {

// Handle to a node on a tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in execution order, so the list is
// topologically sorted by construction; backward() walks it once in reverse.
// A tape covers a single forward pass and can be differentiated once.
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var leaf(Tensor<S> value) { return emit(std::move(value), {}, nullptr); }

  Var emit(Tensor<S> value, std::vector<int> parents, BackwardFn backward) {
    nodes_.push_back(Node{std::move(parents), std::move(backward), std::move(value)});
    grads_.emplace_back();
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<S>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

  // Accumulates g into the gradient buffer of node v.
  void add_grad(Var v, const Tensor<S>& g) {
    Tensor<S>& buf = grads_[static_cast<std::size_t>(v.id)];
    if (buf.empty()) buf = Tensor<S>::zeros(value(v).shape());
    require_same_shape(buf, g, "add_grad");
    S* d = buf.data();
    const S* s = g.data();
    const std::int64_t n = buf.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
  }

  // Gradient of the loss w.r.t. node v; null before backward or when the node
  // does not influence the loss.
  const Tensor<S>* grad(Var v) const {
    const Tensor<S>& buf = grads_[static_cast<std::size_t>(v.id)];
    return buf.empty() ? nullptr : &buf;
  }

  void backward(Var loss) {
    if (consumed_) throw ContractError("tape already differentiated; run a fresh forward pass");
    if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size()))
      throw ContractError("backward: loss is not a node of this tape");
    if (value(loss).numel() != 1) throw ContractError("backward: loss must be scalar");
    consumed_ = true;
    grads_[static_cast<std::size_t>(loss.id)] = Tensor<S>::full(value(loss).shape(), S{1});
    for (int i = loss.id; i >= 0; --i) {
      Node& node = nodes_[static_cast<std::size_t>(i)];
      if (node.backward && !grads_[static_cast<std::size_t>(i)].empty()) node.backward(*this, i);
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn backward;
    Tensor<S> value;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor<S>> grads_;
  bool consumed_ = false;
};

}  // namespace blockprune
