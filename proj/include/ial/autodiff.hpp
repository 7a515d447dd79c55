// SPDX-License-Identifier: Apache-2.0
//
// Matrix-valued reverse-mode differentiation.
//
// A Tape records every operation applied to its Vars together with a closure
// that propagates the output adjoint back to the inputs. Nodes are matrices,
// not scalars, so a recurrent step over a whole minibatch costs a handful of
// nodes. A Tape is single-threaded; build one per thread.
//
//   ad::Tape tape;
//   auto w = tape.variable(weights);
//   auto loss = ad::mean(ad::square(ad::matmul(tape.constant(x), w)));
//   tape.backward(loss);
//   const ad::Matrix& dw = tape.grad(w);

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace ial::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its Tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the adjoint of a node into its parents.
  using BackwardFn = std::function<void(Tape&, const Matrix&)>;

  /// With record = false no backward closures are kept (inference only).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Seeds d(root)/d(root) = 1 and runs the reverse sweep. root must be 1x1.
  void backward(Var root);

  /// Adjoint of v after backward(); a zero matrix if nothing reached v.
  Matrix grad(Var v) const;

  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Used by operation implementations.
  Var push(Matrix value, bool requires_grad, BackwardFn fn);
  void accumulate(std::size_t id, const Matrix& delta);
  const Matrix& value_of(std::size_t id) const { return nodes_[id].value; }
  bool node_requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool record_ = true;
};

// Arithmetic. Binary elementwise ops require identical shapes.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);  // elementwise
Var operator*(double s, Var a);
Var operator+(Var a, double s);
Var operator-(double s, Var a);
Var operator-(Var a);

Var matmul(Var a, Var b);
/// a[B x m] + row[1 x m] broadcast over rows.
Var add_row(Var a, Var row);
/// a[B x m] scaled row-wise by col[B x 1].
Var scale_rows(Var a, Var col);
/// row[1 x m] repeated to [n x m].
Var broadcast_rows(Var row, Eigen::Index n);

Var sigmoid(Var a);
Var tanh(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
/// Clamps into [lo, hi]; gradient is zero where clamping is active.
Var clamp(Var a, double lo, double hi);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);

Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);

Var sum(Var a);        // -> 1x1
Var mean(Var a);       // -> 1x1
Var mean_rows(Var a);  // [K x m] -> [1 x m]
Var sum_cols(Var a);   // [B x m] -> [B x 1]

}  // namespace ial::ad
