#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "avrl/tensor.hpp"

namespace avrl {

/// One value in the computation graph.
///
/// Intermediate nodes keep their parents alive, so a graph lives exactly as
/// long as the root Var that owns it. Leaf parameter nodes accumulate grad
/// across backward passes until ParameterSet::zero_grad().
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grad buffers.
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op result node. Throws NumericError when `value` is not finite.
/// `backward` is dropped when no parent requires grad.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward,
                const char* op);

/// Reverse-mode sweep from a 1x1 root, seeded with `seed`.
void backward(const Var& root, double seed = 1.0);

/// Named learnable tensors, iterated in sorted path order.
class ParameterSet {
 public:
  struct Entry {
    Var var;
    bool trainable = true;
  };

  Var& add(const std::string& path, Tensor init, bool trainable = true);
  const Var& get(std::string_view path) const;
  Var& get(std::string_view path);
  bool contains(std::string_view path) const;

  void zero_grad();
  std::size_t total_elements() const;
  std::size_t size() const { return entries_.size(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Deep copy of all values (fresh graph leaves).
  ParameterSet clone() const;
  /// Copies values from `other` for every path present in both; returns count.
  std::size_t assign_from(const ParameterSet& other);

 private:
  std::map<std::string, Entry, std::less<>> entries_;
};

}  // namespace avrl
