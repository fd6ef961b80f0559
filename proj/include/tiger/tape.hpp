#pragma once

/// @file tape.hpp
/// @brief Reverse-mode automatic differentiation over 2-D tensors.
///
/// A Tape records every primitive in creation order, which is already a
/// topological order, so backward() walks the nodes once in reverse. A node
/// only stores a backward rule when at least one of its inputs needs a
/// gradient; graphs built purely from constants cost no closures.
///
/// One tape belongs to one thread. Independent tapes may run concurrently.

#include <cstddef>
#include <functional>
#include <vector>

#include "tiger/tensor.hpp"

namespace tiger::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf that accumulates a gradient.
  Var parameter(Tensor value);

  /// Records an interior node. `fn` may be empty when no input needs a gradient.
  Var record(Tensor value, bool requires_grad, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every node. Throws
  /// ContractError when `loss` is not a single element.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adds `g` into the gradient buffer of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor& g);
  /// Mutable gradient buffer for node `id`, allocated on first use.
  Tensor& grad_buffer(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Primitives. Every binary primitive requires both operands on the same tape.
// Shape mismatches throw DimensionError naming both shapes.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Adds a 1xC row to every row of a.
Var add_row(Var a, Var row);
/// Multiplies every row of a element-wise by a 1xC row.
Var mul_row(Var a, Var row);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);
Var exp(Var a);
/// log(max(a, floor)); the gradient is zero where the floor is active.
Var log(Var a, double floor = 1e-12);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Per-row standardization without affine, epsilon inside the square root.
Var layer_norm_rows(Var a, double eps = 1e-5);
Var l2_normalize_rows(Var a);
Var concat_rows(Var a, Var b);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
/// Mean over all rows, giving a 1xC row.
Var mean_rows(Var a);
/// Rows are grouped into consecutive blocks of `group`; returns one mean row per block.
Var mean_groups(Var a, std::size_t group);
/// Interleaves two grouped matrices: for each sample i, rows of a's group i
/// followed by rows of b's group i.
Var concat_groups(Var a, std::size_t group_a, Var b, std::size_t group_b);
/// For each consecutive block of `group` rows, keeps rows [offset, offset+count).
Var slice_groups(Var a, std::size_t group, std::size_t offset, std::size_t count);
Var reshape(Var a, std::size_t rows, std::size_t cols);
/// Diagonal of a square matrix as an Nx1 column.
Var diag(Var a);
Var sum_all(Var a);
Var mean_all(Var a);
/// Sum over columns, giving an Nx1 column.
Var sum_cols(Var a);

/// Scaled dot-product attention inside consecutive row blocks of size
/// `group`, split into `heads` column slices. q, k, v are (G*group) x d.
Var grouped_attention(Var q, Var k, Var v, std::size_t group, std::size_t heads);

// Plain tensor kernels shared with code that does not need a tape.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace tiger::ad
