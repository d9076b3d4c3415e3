#include "avrl/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>

#include "avrl/errors.hpp"

namespace avrl {

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) {
    grad = Tensor(value.shape(), 0.0);
  }
  return grad;
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "constant";
  return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = "parameter";
  return Var(std::move(n));
}

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward,
                const char* op) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op);
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& root, double seed) {
  if (!root) throw std::invalid_argument("backward on empty Var");
  if (root.value().size() != 1) {
    throw std::invalid_argument("backward root must be a scalar, got " +
                                root.value().shape_string());
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; reversed it is a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Var& ParameterSet::add(const std::string& path, Tensor init, bool trainable) {
  auto [it, inserted] = entries_.try_emplace(path);
  if (!inserted) throw std::invalid_argument("duplicate parameter path: " + path);
  it->second.var = trainable ? Var::parameter(std::move(init)) : Var::constant(std::move(init));
  it->second.trainable = trainable;
  return it->second.var;
}

const Var& ParameterSet::get(std::string_view path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + std::string(path));
  return it->second.var;
}

Var& ParameterSet::get(std::string_view path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + std::string(path));
  return it->second.var;
}

bool ParameterSet::contains(std::string_view path) const { return entries_.contains(path); }

void ParameterSet::zero_grad() {
  for (auto& [_, e] : entries_) e.var.node()->grad = Tensor();
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.var.value().size();
  return n;
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& [path, e] : entries_) out.add(path, e.var.value(), e.trainable);
  return out;
}

std::size_t ParameterSet::assign_from(const ParameterSet& other) {
  std::size_t n = 0;
  for (auto& [path, e] : entries_) {
    if (!other.contains(path)) continue;
    const auto& src = other.get(path).value();
    if (!src.same_shape(e.var.value())) {
      throw std::invalid_argument("shape mismatch assigning parameter " + path + ": " +
                                  src.shape_string() + " vs " + e.var.value().shape_string());
    }
    e.var.mutable_value() = src;
    ++n;
  }
  return n;
}

}  // namespace avrl
