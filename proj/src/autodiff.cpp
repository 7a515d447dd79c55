// SPDX-License-Identifier: Apache-2.0
#include "ial/autodiff.hpp"

#include "ial/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ial::ad {

const Matrix& Var::value() const { return tape_->value_of(id_); }

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Matrix value, bool requires_grad, BackwardFn fn) {
  const bool keep = record_ && requires_grad;
  nodes_.push_back(Node{std::move(value), Matrix(), keep ? std::move(fn) : BackwardFn{}, keep});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Matrix& delta) {
  Node& n = nodes_[id];
  if (!n.requires_grad) {
    return;
  }
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

void Tape::backward(Var root) {
  if (root.tape() != this) {
    throw ShapeError("backward: root belongs to another tape");
  }
  if (root.rows() != 1 || root.cols() != 1) {
    throw ShapeError("backward: root must be 1x1, got " + std::to_string(root.rows()) + "x" +
                     std::to_string(root.cols()));
  }
  for (auto& n : nodes_) {
    n.grad.resize(0, 0);
  }
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) {
      n.backward(*this, n.grad);
    }
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) {
    return Matrix::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw ShapeError(std::string(op) + ": operands on different tapes");
  }
  return *a.tape();
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

bool any_grad(Var a) { return a.tape()->requires_grad(a); }
bool any_grad(Var a, Var b) { return any_grad(a) || any_grad(b); }

// Elementwise unary op given the forward value and a derivative expressed
// through the input x and output y.
template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Tape& t = *a.tape();
  Matrix y = a.value().unaryExpr(fwd);
  const std::size_t ia = a.id();
  const std::size_t out = t.size();
  return t.push(std::move(y), any_grad(a), [ia, out, deriv](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value_of(ia);
    const Matrix& yv = tp.value_of(out);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      d.data()[i] = g.data()[i] * deriv(x.data()[i], yv.data()[i]);
    }
    tp.accumulate(ia, d);
  });
}

double stable_softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

double stable_sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var operator+(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), any_grad(a, b), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var operator-(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a, b, "sub");
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), any_grad(a, b), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

Var operator*(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(a, b, "mul");
  const auto ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), any_grad(a, b),
                [ia, ib](Tape& tp, const Matrix& g) {
                  tp.accumulate(ia, g.cwiseProduct(tp.value_of(ib)));
                  tp.accumulate(ib, g.cwiseProduct(tp.value_of(ia)));
                });
}

Var operator*(double s, Var a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.push(s * a.value(), any_grad(a),
                [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, s * g); });
}

Var operator+(Var a, double s) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  return t.push(a.value().array() + s, any_grad(a),
                [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g); });
}

Var operator-(double s, Var a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  Matrix y = (-a.value()).array() + s;
  return t.push(std::move(y), any_grad(a),
                [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, -g); });
}

Var operator-(Var a) { return -1.0 * a; }

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " differ");
  }
  const auto ia = a.id(), ib = b.id();
  Matrix y = a.value() * b.value();
  return t.push(std::move(y), any_grad(a, b), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.node_requires_grad(ia)) {
      tp.accumulate(ia, g * tp.value_of(ib).transpose());
    }
    if (tp.node_requires_grad(ib)) {
      tp.accumulate(ib, tp.value_of(ia).transpose() * g);
    }
  });
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: bias must be 1x" + std::to_string(a.cols()));
  }
  const auto ia = a.id(), ir = row.id();
  Matrix y = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(y), any_grad(a, row), [ia, ir](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ir, g.colwise().sum());
  });
}

Var scale_rows(Var a, Var col) {
  Tape& t = same_tape(a, col, "scale_rows");
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw ShapeError("scale_rows: scale must be " + std::to_string(a.rows()) + "x1");
  }
  const auto ia = a.id(), ic = col.id();
  Matrix y = a.value().array().colwise() * col.value().col(0).array();
  return t.push(std::move(y), any_grad(a, col), [ia, ic](Tape& tp, const Matrix& g) {
    const Matrix& av = tp.value_of(ia);
    const Matrix& cv = tp.value_of(ic);
    Matrix ga = g.array().colwise() * cv.col(0).array();
    tp.accumulate(ia, ga);
    tp.accumulate(ic, g.cwiseProduct(av).rowwise().sum());
  });
}

Var broadcast_rows(Var row, Eigen::Index n) {
  Tape& t = *row.tape();
  if (row.rows() != 1) {
    throw ShapeError("broadcast_rows: input must have one row");
  }
  const auto ir = row.id();
  Matrix y = row.value().replicate(n, 1);
  return t.push(std::move(y), any_grad(row),
                [ir](Tape& tp, const Matrix& g) { tp.accumulate(ir, g.colwise().sum()); });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var softplus(Var a) {
  return unary(a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  Matrix y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  const auto ia = a.id();
  const auto out = t.size();
  return t.push(std::move(y), any_grad(a), [ia, out](Tape& tp, const Matrix& g) {
    const Matrix& s = tp.value_of(out);
    Matrix d = s.cwiseProduct(g);
    const Eigen::VectorXd inner = d.rowwise().sum();
    d -= (s.array().colwise() * inner.array()).matrix();
    tp.accumulate(ia, d);
  });
}

Var log_softmax_rows(Var a) {
  Tape& t = *a.tape();
  Matrix y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    const double lse = m + std::log((y.row(r).array() - m).exp().sum());
    y.row(r).array() -= lse;
  }
  const auto ia = a.id();
  const auto out = t.size();
  return t.push(std::move(y), any_grad(a), [ia, out](Tape& tp, const Matrix& g) {
    const Matrix s = tp.value_of(out).array().exp();
    const Eigen::VectorXd gs = g.rowwise().sum();
    Matrix d = g - (s.array().colwise() * gs.array()).matrix();
    tp.accumulate(ia, d);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_cols: no operands");
  }
  Tape& t = *parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool grad = false;
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) {
    same_tape(parts.front(), p, "concat_cols");
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row counts differ");
    }
    cols += p.cols();
    grad = grad || any_grad(p);
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.push(std::move(y), grad, [ids, widths](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      tp.accumulate(ids[i], g.middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  Tape& t = *a.tape();
  const auto ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix y = a.value().middleCols(start, count);
  return t.push(std::move(y), any_grad(a),
                [ia, start, count, rows, cols](Tape& tp, const Matrix& g) {
                  Matrix d = Matrix::Zero(rows, cols);
                  d.middleCols(start, count) = g;
                  tp.accumulate(ia, d);
                });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix y(1, 1);
  y(0, 0) = a.value().sum();
  return t.push(std::move(y), any_grad(a), [ia, rows, cols](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Matrix::Constant(rows, cols, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return (1.0 / n) * sum(a);
}

Var mean_rows(Var a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  const Eigen::Index rows = a.rows();
  Matrix y = a.value().colwise().mean();
  return t.push(std::move(y), any_grad(a), [ia, rows](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.replicate(rows, 1) / static_cast<double>(rows));
  });
}

Var sum_cols(Var a) {
  Tape& t = *a.tape();
  const auto ia = a.id();
  const Eigen::Index cols = a.cols();
  Matrix y = a.value().rowwise().sum();
  return t.push(std::move(y), any_grad(a),
                [ia, cols](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.replicate(1, cols)); });
}

}  // namespace ial::ad
