#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "culab/tensor.h"

namespace culab::ad {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape that produced it is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Linear record of primitive operations. Backward replays nodes in strict
// reverse order of recording; nodes that do not lie on a path from an input
// to the output leave that input's gradient at exactly zero.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor value);
  Var constant(Tensor value);

  // Records an op output. Throws NumericError if `value` is not finite.
  Var record(Tensor value, std::vector<std::size_t> parents, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Adds `delta` into the gradient slot of node `id` during backward.
  void accumulate(std::size_t id, const Tensor& delta);

  // d(output)/d(input) for each input. `output` must be a one-element tensor.
  std::vector<Tensor> grad(Var output, std::span<const Var> inputs);

  // Ids of nodes whose backward ran during the last grad() call, in the order
  // they ran.
  const std::vector<std::size_t>& last_backward_order() const { return backward_order_; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
  std::vector<std::size_t> backward_order_;
};

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double k);
// a[m x n] + bias[1 x n] (or [n]) broadcast over rows.
Var add_row_bias(Var a, Var bias);
Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var sum(Var a);
// Sum of weights (x) a with a constant weight tensor of the same shape.
Var weighted_sum(Var a, const Tensor& weights);
// Per-row log-sum-exp over the entries where mask != 0. Returns [rows x 1].
// Rows with an empty mask produce 0 and receive no gradient.
Var row_logsumexp(Var a, const Tensor& mask);
Var row_logsumexp(Var a);

// Unit-normalizes a rank-1 tensor, or each row of a rank-2 tensor. Throws
// DegenerateEmbeddingError when a norm is <= eps.
inline constexpr double kNormEpsilon = 1e-12;
Var l2_normalize(Var v, double eps = kNormEpsilon);
Var l2_normalize_rows(Var a, double eps = kNormEpsilon);

}  // namespace culab::ad

namespace culab {

// Non-differentiable helpers over plain tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& v, double eps = ad::kNormEpsilon);

}  // namespace culab
