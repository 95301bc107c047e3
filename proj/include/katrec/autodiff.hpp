#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "katrec/tensor.hpp"

namespace katrec::ad {

/// One vertex of the computation graph. Interior nodes are created by the op
/// functions below and own their forward value; leaves are constants or
/// parameters.
struct Node {
  using BackwardFn = std::function<void(const Tensor& grad, std::span<Tensor*> input_grads)>;

  Tensor value;
  std::vector<std::shared_ptr<Node>> inputs;
  // Adds d(loss)/d(input) into input_grads[i]; slots are null for inputs that
  // need no gradient.
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";
  std::string name;
};

/// Handle to a graph node. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value, std::string name);

  const Tensor& value() const { return node_->value; }
  // Only valid for leaves, and only while no graph built from them is in use.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  const char* op() const { return node_->op; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Gradients of a scalar loss with respect to every reachable leaf that
/// requires grad.
class Gradients {
 public:
  const Tensor* find(const Var& v) const;
  const Tensor& at(const Var& v) const;
  bool contains(const Var& v) const { return find(v) != nullptr; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(const Var& loss);
  std::unordered_map<const Node*, Tensor> grads_;
};

Gradients backward(const Var& loss);

// ---- op set ---------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// Elementwise a + b. `b` may also be a rank-1 row vector broadcast over the
/// rows of `a`.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var concat(const std::vector<Var>& parts);  // last axis
Var concat_rows(const std::vector<Var>& parts);

/// Softmax over the last axis. When `key_mask` is non-empty it has length
/// cols(); zero entries are excluded and receive probability exactly 0.
Var softmax(const Var& x, std::span<const std::uint8_t> key_mask = {});
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var log_sigmoid(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var gelu(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-12);
Var dropout(const Var& x, double rate, std::mt19937_64& rng, bool train);

Var sum(const Var& x);
Var mean(const Var& x);
Var row_sum(const Var& x);        // reduce last axis: (r, c) -> (r)
Var squared_norm(const Var& x);   // sum of squares -> scalar
/// Natural log of max(x, floor); gradient is zero where the floor is active.
Var log(const Var& x, double floor = 0.0);

// ---- indexing ops ---------------------------------------------------------

Var gather_rows(const Var& table, std::span<const std::size_t> rows);
/// out[i] = x[i, cols[i]]
Var pick(const Var& x, std::span<const std::size_t> cols);
/// Batched relation-specific projection: w has shape (R, out, in), x has
/// shape (n, in); out[i] = w[rel[i]] * x[i].
Var relation_project(const Var& w, std::span<const std::size_t> rel, const Var& x);
/// Softmax within each CSR segment [offsets[s], offsets[s+1]) of a rank-1
/// score vector.
Var segment_softmax(const Var& scores, std::span<const std::size_t> offsets);
/// out[s] = sum_{e in segment s} weights[e] * x[cols[e]].
Var segment_weighted_sum(const Var& weights, const Var& x, std::span<const std::size_t> offsets,
                         std::span<const std::size_t> cols);

}  // namespace katrec::ad
