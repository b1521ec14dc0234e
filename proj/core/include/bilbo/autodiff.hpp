#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

#include "bilbo/tensor.hpp"

namespace bilbo {

class Tape;

/// Handle to a node recorded on a Tape.
///
/// Vars are cheap to copy. They stay valid until the owning tape is cleared
/// or destroyed.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// reverse topological order and backward() visits every node once.
/// A tape is single-threaded; independent tapes may run concurrently.
class Tape {
 public:
  /// Receives the node's accumulated gradient and pushes into its parents.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked.
  Var parameter(Tensor value);
  /// Leaf treated as a constant.
  Var constant(Tensor value);

  /// Records an interior node. The node tracks gradients iff a parent does;
  /// otherwise `fn` is dropped.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);

  /// Seeds d loss / d loss = 1 and propagates. Throws ContractError unless the
  /// loss holds exactly one element.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adds g into the gradient buffer of v (no-op for constants).
  void accumulate(Var v, const Tensor& g);
  /// Mutable zero-initialised gradient buffer of v; v must require grad.
  Tensor& grad_buffer(Var v);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  Tensor empty_grad_;
};

// Differentiable operations. Operands must live on the same tape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var shift(Var a, double c);

/// a[i, j] + row[j]; row is a d-vector or 1 x d.
Var add_rowwise(Var a, Var row);
/// a[i, j] * row[j].
Var mul_rowwise(Var a, Var row);
/// a[i, j] / row[j].
Var div_rowwise(Var a, Var row);
/// a[i, j] * col[i]; col is a B-vector or B x 1.
Var mul_colwise(Var a, Var col);
/// a[i, j] / col[i].
Var div_colwise(Var a, Var col);

Var relu(Var a);
/// log(1 + exp(x)), evaluated as x + log1p(exp(-x)) above 30.
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sqrt(Var a);

/// Elementwise max(a, floor) with zero gradient where the floor binds.
/// Each clamped element increments *events when events is non-null.
Var clamp_min(Var a, double floor, std::size_t* events = nullptr);

/// Same value, no gradient path.
Var stop_gradient(Var a);

/// Sum of all elements, as a scalar.
Var sum(Var a);
/// Mean of all elements, as a scalar.
Var mean(Var a);
/// Per-row sums, B x 1.
Var row_sums(Var a);
/// Per-column means over rows, 1 x d.
Var column_means(Var a);

// Plain elementwise helpers shared with non-tape code.
double softplus(double x);
double log_sigmoid(double x);

}  // namespace bilbo
