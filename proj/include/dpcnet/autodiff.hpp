#pragma once

// Reverse-mode differentiation tape. A Graph owns an append-only list of
// nodes; each op appends one node holding its value, its input ids and a
// backward rule. Values are shared with the Var handles so that a graph in
// inference mode (grad disabled) keeps nothing alive on its own.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dpcnet/errors.hpp"
#include "dpcnet/tensor.hpp"

namespace dpcnet {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

// Named parameters in registration order. Pointers stay valid for the
// lifetime of the store.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name) != 0) {
      throw ContractError("duplicate parameter name '" + name + "'");
    }
    params_.push_back(std::make_unique<Parameter<T>>(name, std::move(init)));
    index_.emplace(name, params_.size() - 1);
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw ContractError("unknown parameter '" + name + "'");
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  // Total number of scalars across trainable parameters.
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (!p->frozen) n += p->value.size();
    }
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

using NodeId = std::size_t;

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, NodeId id, std::shared_ptr<const Tensor<T>> value)
      : graph_(g), id_(id), value_(std::move(value)) {}

  const Tensor<T>& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  NodeId id() const { return id_; }
  Graph<T>& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  NodeId id_ = 0;
  std::shared_ptr<const Tensor<T>> value_;
};

namespace testing {
// Name of an op whose backward rule is deliberately corrupted (gradients
// doubled). Empty means no sabotage. Verification tooling only.
inline std::string& sabotaged_op() {
  static std::string name;
  return name;
}
}  // namespace testing

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, NodeId)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Branch tracing: piecewise ops (relu, abs, max) fold the branch each
  // element takes into a running hash, so two evaluations can be compared for
  // lying on the same smooth piece.
  void enable_branch_trace() { tracing_ = true; }
  bool tracing_branches() const { return tracing_; }
  void trace_branch(std::uint64_t bits) { trace_ = (trace_ ^ bits) * 1099511628211ull; }
  std::uint64_t branch_trace() const { return trace_; }

  Var<T> constant(Tensor<T> value) { return push("constant", {}, std::move(value), {}, false); }

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    return push("leaf", {}, std::move(value), {}, requires_grad);
  }

  Var<T> param(Parameter<T>& p) {
    Var<T> v = push("param", {}, p.value, {}, !p.frozen);
    if (grad_enabled_) nodes_[v.id()].param = &p;
    return v;
  }

  // Appends an op node. The backward rule is dropped when no input needs a
  // gradient.
  Var<T> record(std::string_view op, std::vector<NodeId> inputs, Tensor<T> value, Backward fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (NodeId in : inputs) needs = needs || nodes_[in].requires_grad;
    }
    return push(op, std::move(inputs), std::move(value), needs ? std::move(fn) : Backward{},
                needs);
  }

  std::size_t size() const { return nodes_.size(); }
  std::string_view op(NodeId id) const { return nodes_[id].op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_[id].inputs; }

  const Tensor<T>& value(NodeId id) const {
    if (!nodes_[id].value) throw ContractError("node value not retained (grad disabled)");
    return *nodes_[id].value;
  }

  bool needs_grad(NodeId id) const { return nodes_[id].requires_grad; }
  bool has_grad(NodeId id) const { return nodes_[id].grad.has_value(); }

  const Tensor<T>& grad(NodeId id) const {
    if (!nodes_[id].grad) throw ContractError("node has no gradient");
    return *nodes_[id].grad;
  }

  // Adds `g` into the gradient accumulator of node `id`.
  void accumulate(NodeId id, const Tensor<T>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.value && g.shape() != n.value->shape()) {
      throw DimensionError("gradient shape " + g.shape().str() + " for node '" +
                           std::string(n.op) + "' of shape " + n.value->shape().str());
    }
    if (!n.grad) {
      n.grad = g;
    } else {
      *n.grad += g;
    }
  }
  void accumulate(NodeId id, Tensor<T>&& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.grad) {
      if (n.value && g.shape() != n.value->shape()) {
        throw DimensionError("gradient shape " + g.shape().str() + " for node '" +
                             std::string(n.op) + "' of shape " + n.value->shape().str());
      }
      n.grad = std::move(g);
    } else {
      accumulate(id, static_cast<const Tensor<T>&>(g));
    }
  }

  // Propagates d(loss)/d(node) to every node reachable from `loss`, then adds
  // parameter gradients into Parameter::grad. Parameter accumulators are not
  // reset, so repeated calls accumulate.
  void backward(const Var<T>& loss) {
    if (!grad_enabled_) throw ContractError("backward on a graph with gradients disabled");
    if (loss.value().size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + loss.shape().str());
    }
    for (auto& n : nodes_) n.grad.reset();
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Tensor<T>(loss.shape(), T{1});
    const std::string& sabotage = testing::sabotaged_op();
    for (NodeId id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.grad) continue;
      if (n.param) {
        n.param->grad += *n.grad;
        continue;
      }
      if (!n.backward) continue;
      if (!sabotage.empty() && n.op == sabotage) *n.grad *= T{2};
      n.backward(*this, id);
    }
  }

 private:
  struct Node {
    std::string_view op;
    std::vector<NodeId> inputs;
    std::shared_ptr<const Tensor<T>> value;
    std::optional<Tensor<T>> grad;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(std::string_view op, std::vector<NodeId> inputs, Tensor<T> value, Backward fn,
              bool requires_grad) {
    auto shared = std::make_shared<const Tensor<T>>(std::move(value));
    Node n;
    n.op = op;
    n.requires_grad = grad_enabled_ && requires_grad;
    if (grad_enabled_) {
      n.inputs = std::move(inputs);
      n.value = shared;
      n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1, std::move(shared));
  }

  bool grad_enabled_;
  bool tracing_ = false;
  std::uint64_t trace_ = 1469598103934665603ull;
  std::vector<Node> nodes_;
};

}  // namespace dpcnet
