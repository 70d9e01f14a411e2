#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Graph records every intermediate value together with a closure that
// propagates the output gradient to its inputs. Vars are cheap handles into
// the graph. Nodes built only from constants carry no closure, so the same
// code path serves both training (variables) and inference (constants).

#include <aahr/types.hpp>

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <vector>

namespace aahr::ad {

template <typename Scalar>
class Graph;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Mat<Scalar>& value() const { return graph_->node(id_).value; }
  const Mat<Scalar>& grad() const { return graph_->node(id_).grad; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar scalar() const { return value()(0, 0); }
  bool needs_grad() const { return graph_->node(id_).needs_grad; }

  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Graph {
 public:
  using Matrix = Mat<Scalar>;
  using Backward = std::function<void(const Matrix&)>;

  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> variable(Matrix value) { return push(std::move(value), true, {}); }
  Var<Scalar> constant(Matrix value) { return push(std::move(value), false, {}); }

  /// Records an op result. `backward` is dropped when no input needs a
  /// gradient.
  Var<Scalar> record(Matrix value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || v.needs_grad();
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  Var<Scalar> record(Matrix value, const std::vector<Var<Scalar>>& inputs, Backward backward) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || v.needs_grad();
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  /// Adds `delta` into the gradient of `v` when it participates.
  template <typename Derived>
  void accumulate(const Var<Scalar>& v, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[v.id()];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.grad += delta;
  }

  /// Seeds d(root)/d(root) = 1 and runs every recorded closure in reverse.
  void backward(const Var<Scalar>& root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw ShapeError("backward: root must be 1x1, got " + shape_of(root.value()));
    }
    accumulate(root, Matrix::Ones(1, 1));
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(n.grad);
    }
  }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

 private:
  Var<Scalar> push(Matrix value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix{}, needs_grad, std::move(backward)});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_of(a.value()) + " vs " + shape_of(b.value()));
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_of(a.value()) + " * " + shape_of(b.value()));
  }
  auto& g = a.graph();
  return g.record(a.value() * b.value(), {a, b}, [&g, a, b](const Mat<Scalar>& gout) {
    if (a.needs_grad()) g.accumulate(a, gout * b.value().transpose());
    if (b.needs_grad()) g.accumulate(b, a.value().transpose() * gout);
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  auto& g = a.graph();
  return g.record(a.value().transpose(), {a},
                  [&g, a](const Mat<Scalar>& gout) { g.accumulate(a, gout.transpose()); });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  auto& g = a.graph();
  return g.record(a.value() + b.value(), {a, b}, [&g, a, b](const Mat<Scalar>& gout) {
    g.accumulate(a, gout);
    g.accumulate(b, gout);
  });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  auto& g = a.graph();
  return g.record(a.value() - b.value(), {a, b}, [&g, a, b](const Mat<Scalar>& gout) {
    g.accumulate(a, gout);
    g.accumulate(b, -gout);
  });
}

template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) {
  auto& g = a.graph();
  return g.record(s * a.value(), {a}, [&g, a, s](const Mat<Scalar>& gout) { g.accumulate(a, s * gout); });
}

/// a + c for a constant matrix of the same shape.
template <typename Scalar>
Var<Scalar> add_const(const Var<Scalar>& a, const Mat<Scalar>& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    throw ShapeError("add_const: " + shape_of(a.value()) + " vs " + shape_of(c));
  }
  auto& g = a.graph();
  return g.record(a.value() + c, {a}, [&g, a](const Mat<Scalar>& gout) { g.accumulate(a, gout); });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar c) {
  auto& g = a.graph();
  Mat<Scalar> out = a.value().array() + c;
  return g.record(std::move(out), {a}, [&g, a](const Mat<Scalar>& gout) { g.accumulate(a, gout); });
}

/// a (n x d) plus the 1 x d row `b` added to every row.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ShapeError("add_row: " + shape_of(a.value()) + " + row " + shape_of(b.value()));
  }
  auto& g = a.graph();
  Mat<Scalar> out = a.value().rowwise() + b.value().row(0);
  return g.record(std::move(out), {a, b}, [&g, a, b](const Mat<Scalar>& gout) {
    g.accumulate(a, gout);
    if (b.needs_grad()) g.accumulate(b, gout.colwise().sum());
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> cmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "cmul");
  auto& g = a.graph();
  Mat<Scalar> out = a.value().cwiseProduct(b.value());
  return g.record(std::move(out), {a, b}, [&g, a, b](const Mat<Scalar>& gout) {
    if (a.needs_grad()) g.accumulate(a, gout.cwiseProduct(b.value()));
    if (b.needs_grad()) g.accumulate(b, gout.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> cmul_const(const Var<Scalar>& a, const Mat<Scalar>& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    throw ShapeError("cmul_const: " + shape_of(a.value()) + " vs " + shape_of(c));
  }
  auto& g = a.graph();
  Mat<Scalar> out = a.value().cwiseProduct(c);
  return g.record(std::move(out), {a}, [&g, a, c](const Mat<Scalar>& gout) { g.accumulate(a, gout.cwiseProduct(c)); });
}

/// a scaled by the 1x1 Var `s`.
template <typename Scalar>
Var<Scalar> scale_by(const Var<Scalar>& a, const Var<Scalar>& s) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("scale_by: scale must be 1x1");
  auto& g = a.graph();
  Mat<Scalar> out = a.value() * s.scalar();
  return g.record(std::move(out), {a, s}, [&g, a, s](const Mat<Scalar>& gout) {
    if (a.needs_grad()) g.accumulate(a, gout * s.scalar());
    if (s.needs_grad()) g.accumulate(s, Mat<Scalar>::Constant(1, 1, gout.cwiseProduct(a.value()).sum()));
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  auto& g = a.graph();
  Mat<Scalar> out = a.value().array().exp().matrix();
  auto y = out;
  return g.record(std::move(out), {a}, [&g, a, y](const Mat<Scalar>& gout) { g.accumulate(a, gout.cwiseProduct(y)); });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  auto& g = a.graph();
  Mat<Scalar> out = a.value().array().log().matrix();
  return g.record(std::move(out), {a}, [&g, a](const Mat<Scalar>& gout) {
    g.accumulate(a, gout.cwiseQuotient(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  auto& g = a.graph();
  Mat<Scalar> out = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  auto y = out;
  return g.record(std::move(out), {a}, [&g, a, y](const Mat<Scalar>& gout) {
    g.accumulate(a, (gout.array() * y.array() * (Scalar(1) - y.array())).matrix());
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope) {
  auto& g = a.graph();
  Mat<Scalar> out = a.value().unaryExpr([slope](Scalar x) { return x > Scalar(0) ? x : slope * x; });
  return g.record(std::move(out), {a}, [&g, a, slope](const Mat<Scalar>& gout) {
    Mat<Scalar> d = a.value().unaryExpr([slope](Scalar x) { return x > Scalar(0) ? Scalar(1) : slope; });
    g.accumulate(a, gout.cwiseProduct(d));
  });
}

/// max(a, 0) elementwise; the hinge of margin losses.
template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return leaky_relu(a, Scalar(0));
}

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  auto& g = a.graph();
  Mat<Scalar> shifted = a.value().colwise() - a.value().rowwise().maxCoeff();
  Mat<Scalar> e = shifted.array().exp().matrix();
  Mat<Scalar> out = e.array().colwise() / e.rowwise().sum().array();
  auto y = out;
  return g.record(std::move(out), {a}, [&g, a, y](const Mat<Scalar>& gout) {
    ColVec<Scalar> dot = gout.cwiseProduct(y).rowwise().sum();
    g.accumulate(a, (y.array() * (gout.colwise() - dot).array()).matrix());
  });
}

template <typename Scalar>
Var<Scalar> log_softmax_rows(const Var<Scalar>& a) {
  auto& g = a.graph();
  ColVec<Scalar> mx = a.value().rowwise().maxCoeff();
  Mat<Scalar> shifted = a.value().colwise() - mx;
  ColVec<Scalar> lse = shifted.array().exp().rowwise().sum().log().matrix();
  Mat<Scalar> out = shifted.colwise() - lse;
  auto y = out;
  return g.record(std::move(out), {a}, [&g, a, y](const Mat<Scalar>& gout) {
    Mat<Scalar> p = y.array().exp().matrix();
    ColVec<Scalar> total = gout.rowwise().sum();
    g.accumulate(a, gout - Mat<Scalar>(p.array().colwise() * total.array()));
  });
}

/// Each row divided by its L2 norm; norms below `floor` are clamped to it.
template <typename Scalar>
Var<Scalar> normalize_rows(const Var<Scalar>& a, Scalar floor = Scalar(1e-12)) {
  auto& g = a.graph();
  ColVec<Scalar> norms = a.value().rowwise().norm().cwiseMax(floor);
  Mat<Scalar> out = a.value().array().colwise() / norms.array();
  auto y = out;
  return g.record(std::move(out), {a}, [&g, a, y, norms, floor](const Mat<Scalar>& gout) {
    Mat<Scalar> d(gout.rows(), gout.cols());
    for (Eigen::Index i = 0; i < gout.rows(); ++i) {
      if (a.value().row(i).norm() < floor) {
        d.row(i) = gout.row(i) / floor;
      } else {
        const Scalar proj = y.row(i).dot(gout.row(i));
        d.row(i) = (gout.row(i) - proj * y.row(i)) / norms(i);
      }
    }
    g.accumulate(a, d);
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  auto& g = a.graph();
  return g.record(Mat<Scalar>::Constant(1, 1, a.value().sum()), {a}, [&g, a](const Mat<Scalar>& gout) {
    g.accumulate(a, Mat<Scalar>::Constant(a.rows(), a.cols(), gout(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return (Scalar(1) / static_cast<Scalar>(a.value().size())) * sum(a);
}

/// n x 1 column of row sums.
template <typename Scalar>
Var<Scalar> row_sums(const Var<Scalar>& a) {
  auto& g = a.graph();
  Mat<Scalar> out = a.value().rowwise().sum();
  return g.record(std::move(out), {a}, [&g, a](const Mat<Scalar>& gout) {
    g.accumulate(a, gout.col(0).replicate(1, a.cols()));
  });
}

/// n x 1 column of row maxima; the gradient routes to the first argmax.
template <typename Scalar>
Var<Scalar> row_max(const Var<Scalar>& a) {
  auto& g = a.graph();
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(a.rows()));
  Mat<Scalar> out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) out(i, 0) = a.value().row(i).maxCoeff(&arg[static_cast<std::size_t>(i)]);
  return g.record(std::move(out), {a}, [&g, a, arg](const Mat<Scalar>& gout) {
    Mat<Scalar> d = Mat<Scalar>::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) d(i, arg[static_cast<std::size_t>(i)]) = gout(i, 0);
    g.accumulate(a, d);
  });
}

/// 1 x n row of column maxima.
template <typename Scalar>
Var<Scalar> col_max(const Var<Scalar>& a) {
  return transpose(row_max(transpose(a)));
}

/// n x 1 column holding the diagonal of a square matrix.
template <typename Scalar>
Var<Scalar> diagonal(const Var<Scalar>& a) {
  if (a.rows() != a.cols()) throw ShapeError("diagonal: non-square " + shape_of(a.value()));
  auto& g = a.graph();
  Mat<Scalar> out = a.value().diagonal();
  return g.record(std::move(out), {a}, [&g, a](const Mat<Scalar>& gout) {
    Mat<Scalar> d = Mat<Scalar>::Zero(a.rows(), a.cols());
    d.diagonal() = gout.col(0);
    g.accumulate(a, d);
  });
}

/// n x 1 column times each row: out(i, :) = a(i, :) * s(i).
template <typename Scalar>
Var<Scalar> scale_rows(const Var<Scalar>& a, const Var<Scalar>& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) throw ShapeError("scale_rows: scale must be n x 1");
  auto& g = a.graph();
  Mat<Scalar> out = a.value().array().colwise() * s.value().col(0).array();
  return g.record(std::move(out), {a, s}, [&g, a, s](const Mat<Scalar>& gout) {
    if (a.needs_grad()) g.accumulate(a, Mat<Scalar>(gout.array().colwise() * s.value().col(0).array()));
    if (s.needs_grad()) g.accumulate(s, Mat<Scalar>(gout.cwiseProduct(a.value()).rowwise().sum()));
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  auto& g = a.graph();
  Mat<Scalar> out = a.value().middleRows(start, count);
  return g.record(std::move(out), {a}, [&g, a, start, count](const Mat<Scalar>& gout) {
    Mat<Scalar> d = Mat<Scalar>::Zero(a.rows(), a.cols());
    d.middleRows(start, count) = gout;
    g.accumulate(a, d);
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  auto& g = a.graph();
  Mat<Scalar> out = a.value().middleCols(start, count);
  return g.record(std::move(out), {a}, [&g, a, start, count](const Mat<Scalar>& gout) {
    Mat<Scalar> d = Mat<Scalar>::Zero(a.rows(), a.cols());
    d.middleCols(start, count) = gout;
    g.accumulate(a, d);
  });
}

/// Stacks the parts along the row axis.
template <typename Scalar>
Var<Scalar> vstack(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("vstack: no parts");
  auto& g = parts.front().graph();
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("vstack: column mismatch");
    rows += p.rows();
  }
  Mat<Scalar> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return g.record(std::move(out), parts, [&g, parts](const Mat<Scalar>& gout) {
    Eigen::Index offset = 0;
    for (const auto& p : parts) {
      g.accumulate(p, gout.middleRows(offset, p.rows()));
      offset += p.rows();
    }
  });
}

/// Concatenates the parts along the column axis.
template <typename Scalar>
Var<Scalar> hstack(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("hstack: no parts");
  auto& g = parts.front().graph();
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("hstack: row mismatch");
    cols += p.cols();
  }
  Mat<Scalar> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return g.record(std::move(out), parts, [&g, parts](const Mat<Scalar>& gout) {
    Eigen::Index offset = 0;
    for (const auto& p : parts) {
      g.accumulate(p, gout.middleCols(offset, p.cols()));
      offset += p.cols();
    }
  });
}

}  // namespace aahr::ad
