#pragma once

// Define-by-run reverse-mode differentiation over dense row-major Eigen
// matrices. Every quantity is a rank-2 tensor; vectors are [1, n] or [n, 1].

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ma2cl {

using Index = Eigen::Index;

template <typename Scalar>
using Tensor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
std::string shape_str(const Tensor<Scalar>& t) {
  std::ostringstream os;
  os << "[" << t.rows() << "x" << t.cols() << "]";
  return os.str();
}

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  bool has_grad() const { return grad.size() != 0; }
};

template <typename Scalar>
class Var {
 public:
  using scalar_type = Scalar;

  Var() = default;
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<Scalar> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }

  const Tensor<Scalar>& value() const { return node_->value; }

  /// Only leaves may be mutated in place (optimizer steps, EMA, perturbation).
  Tensor<Scalar>& mutable_value() {
    if (!node_->parents.empty()) throw std::logic_error("mutable_value: not a leaf");
    return node_->value;
  }

  const Tensor<Scalar>& grad() const { return node_->grad; }
  Tensor<Scalar>& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  Tensor<Scalar> grad_or_zero() const {
    if (node_->has_grad()) return node_->grad;
    return Tensor<Scalar>::Zero(rows(), cols());
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  const char* op() const { return node_->op; }

  Scalar item() const {
    if (value().size() != 1) throw std::invalid_argument("item: tensor is " + shape_str(value()));
    return value()(0, 0);
  }

  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

namespace detail {

// Sums in ascending order, so the result does not depend on term order.
template <typename Scalar>
Scalar ordered_sum(std::vector<Scalar>& terms) {
  std::sort(terms.begin(), terms.end());
  Scalar s(0);
  for (Scalar t : terms) s += t;
  return s;
}

// Scalar libm calls. Eigen's packet versions round differently from the
// scalar tail, which would tie an element's value to its storage position.
struct ExpFn {
  template <typename S>
  S operator()(S x) const { return std::exp(x); }
};
struct TanhFn {
  template <typename S>
  S operator()(S x) const { return std::tanh(x); }
};
struct LogFn {
  template <typename S>
  S operator()(S x) const { return std::log(x); }
};

// a * b with each output row accumulated over k in a fixed order, so a row's
// value never depends on where it sits in the matrix.
template <typename Scalar>
Tensor<Scalar> row_stable_product(const Eigen::Ref<const Tensor<Scalar>>& a, const Eigen::Ref<const Tensor<Scalar>>& b) {
  const Index m = a.rows(), depth = a.cols(), n = b.cols();
  Tensor<Scalar> out = Tensor<Scalar>::Zero(m, n);
  for (Index i = 0; i < m; ++i) {
    Scalar* o = out.data() + i * n;
    for (Index k = 0; k < depth; ++k) {
      const Scalar s = a(i, k);
      const Scalar* bk = b.data() + k * b.outerStride();
      for (Index j = 0; j < n; ++j) o[j] += s * bk[j];
    }
  }
  return out;
}

template <typename Scalar, typename Backprop>
Var<Scalar> make_op(const char* op, Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                    Backprop&& backprop) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  if (rg) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->parents.push_back(in.ptr());
    n->backprop = std::forward<Backprop>(backprop);
  }
  return Var<Scalar>(std::move(n));
}

template <typename Scalar, typename Derived>
void accumulate(Node<Scalar>& n, const Eigen::MatrixBase<Derived>& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

[[noreturn]] inline void shape_error(const char* op, const std::string& a, const std::string& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a + " vs " + b);
}

template <typename Scalar>
void check_broadcast(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const bool rows_ok = b.rows() == a.rows() || b.rows() == 1;
  const bool cols_ok = b.cols() == a.cols() || b.cols() == 1;
  if (!rows_ok || !cols_ok) shape_error(op, shape_str(a), shape_str(b));
}

template <typename Scalar>
Tensor<Scalar> broadcast(const Tensor<Scalar>& b, Index rows, Index cols) {
  if (b.rows() == rows && b.cols() == cols) return b;
  return b.replicate(rows / b.rows(), cols / b.cols());
}

template <typename Scalar>
Tensor<Scalar> reduce_to(const Tensor<Scalar>& g, Index rows, Index cols) {
  Tensor<Scalar> r = g;
  if (rows == 1 && r.rows() != 1) r = r.colwise().sum().eval();
  if (cols == 1 && r.cols() != 1) r = r.rowwise().sum().eval();
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The second operand broadcasts over rows and/or
// columns when it has extent 1 along that axis.

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_broadcast("add", a.value(), b.value());
  Tensor<Scalar> v = a.value() + detail::broadcast(b.value(), a.rows(), a.cols());
  const Index br = b.rows(), bc = b.cols();
  return detail::make_op<Scalar>("add", std::move(v), {a, b}, [br, bc](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], detail::reduce_to(self.grad, br, bc));
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_broadcast("sub", a.value(), b.value());
  Tensor<Scalar> v = a.value() - detail::broadcast(b.value(), a.rows(), a.cols());
  const Index br = b.rows(), bc = b.cols();
  return detail::make_op<Scalar>("sub", std::move(v), {a, b}, [br, bc](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], (-detail::reduce_to(self.grad, br, bc)).eval());
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_broadcast("mul", a.value(), b.value());
  Tensor<Scalar> bb = detail::broadcast(b.value(), a.rows(), a.cols());
  Tensor<Scalar> v = a.value().cwiseProduct(bb);
  const Index br = b.rows(), bc = b.cols();
  return detail::make_op<Scalar>("mul", std::move(v), {a, b}, [bb = std::move(bb), br, bc](Node<Scalar>& self) {
    const auto& av = self.parents[0]->value;
    if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad.cwiseProduct(bb));
    if (self.parents[1]->requires_grad) {
      Tensor<Scalar> gb = self.grad.cwiseProduct(av);
      detail::accumulate(*self.parents[1], detail::reduce_to(gb, br, bc));
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return detail::make_op<Scalar>("scale", (a.value() * s).eval(), {a}, [s](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], (self.grad * s).eval());
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  return detail::make_op<Scalar>("add_scalar", (a.value().array() + s).matrix().eval(), {a},
                                 [](Node<Scalar>& self) { detail::accumulate(*self.parents[0], self.grad); });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a) {
  return scale(a, Scalar(-1));
}
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) {
  return scale(a, s);
}
template <typename Scalar>
Var<Scalar> operator*(const Var<Scalar>& a, Scalar s) {
  return scale(a, s);
}

// ---------------------------------------------------------------------------
// Linear algebra and layout.

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) detail::shape_error("matmul", shape_str(a.value()), shape_str(b.value()));
  Tensor<Scalar> v = detail::row_stable_product<Scalar>(a.value(), b.value());
  return detail::make_op<Scalar>("matmul", std::move(v), {a, b}, [](Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::accumulate(pa, (self.grad * pb.value.transpose()).eval());
    if (pb.requires_grad) detail::accumulate(pb, (pa.value.transpose() * self.grad).eval());
  });
}

/// For each consecutive group of `group` rows g: out_g = a_g * b_g^T.
/// Shapes: a [G*group, d], b [G*group, d] -> [G*group, group].
template <typename Scalar>
Var<Scalar> grouped_matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b, Index group) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || group <= 0 || a.rows() % group != 0) {
    detail::shape_error("grouped_matmul_nt", shape_str(a.value()), shape_str(b.value()));
  }
  const Index groups = a.rows() / group;
  Tensor<Scalar> v(a.rows(), group);
  for (Index g = 0; g < groups; ++g) {
    const Tensor<Scalar> bt = b.value().middleRows(g * group, group).transpose();
    v.middleRows(g * group, group) = detail::row_stable_product<Scalar>(a.value().middleRows(g * group, group), bt);
  }
  return detail::make_op<Scalar>("grouped_matmul_nt", std::move(v), {a, b}, [group, groups](Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    Tensor<Scalar> ga, gb;
    if (pa.requires_grad) ga.resize(pa.value.rows(), pa.value.cols());
    if (pb.requires_grad) gb.resize(pb.value.rows(), pb.value.cols());
    for (Index g = 0; g < groups; ++g) {
      const auto gg = self.grad.middleRows(g * group, group);
      if (pa.requires_grad) ga.middleRows(g * group, group).noalias() = gg * pb.value.middleRows(g * group, group);
      if (pb.requires_grad) {
        gb.middleRows(g * group, group).noalias() = gg.transpose() * pa.value.middleRows(g * group, group);
      }
    }
    if (pa.requires_grad) detail::accumulate(pa, ga);
    if (pb.requires_grad) detail::accumulate(pb, gb);
  });
}

/// For each consecutive group of `group` rows g: out_g = w_g * v_g.
/// Shapes: w [G*group, group], v [G*group, d] -> [G*group, d].
template <typename Scalar>
Var<Scalar> grouped_matmul(const Var<Scalar>& w, const Var<Scalar>& v, Index group) {
  if (w.rows() != v.rows() || w.cols() != group || group <= 0 || w.rows() % group != 0) {
    detail::shape_error("grouped_matmul", shape_str(w.value()), shape_str(v.value()));
  }
  const Index groups = w.rows() / group;
  Tensor<Scalar> out(v.rows(), v.cols());
  // Token-axis sums are order independent, which keeps attention exactly
  // permutation equivariant.
  std::vector<Scalar> terms(static_cast<std::size_t>(group));
  for (Index r = 0; r < w.rows(); ++r) {
    const Index base = (r / group) * group;
    for (Index c = 0; c < v.cols(); ++c) {
      for (Index j = 0; j < group; ++j) terms[static_cast<std::size_t>(j)] = w.value()(r, j) * v.value()(base + j, c);
      out(r, c) = detail::ordered_sum(terms);
    }
  }
  return detail::make_op<Scalar>("grouped_matmul", std::move(out), {w, v}, [group, groups](Node<Scalar>& self) {
    auto& pw = *self.parents[0];
    auto& pv = *self.parents[1];
    Tensor<Scalar> gw, gv;
    if (pw.requires_grad) gw.resize(pw.value.rows(), pw.value.cols());
    if (pv.requires_grad) gv.resize(pv.value.rows(), pv.value.cols());
    for (Index g = 0; g < groups; ++g) {
      const auto gg = self.grad.middleRows(g * group, group);
      if (pw.requires_grad) {
        gw.middleRows(g * group, group).noalias() = gg * pv.value.middleRows(g * group, group).transpose();
      }
      if (pv.requires_grad) {
        gv.middleRows(g * group, group).noalias() = pw.value.middleRows(g * group, group).transpose() * gg;
      }
    }
    if (pw.requires_grad) detail::accumulate(pw, gw);
    if (pv.requires_grad) detail::accumulate(pv, gv);
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  return detail::make_op<Scalar>("transpose", Tensor<Scalar>(a.value().transpose()), {a}, [](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], Tensor<Scalar>(self.grad.transpose()));
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) {
    detail::shape_error("reshape", shape_str(a.value()), "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  Tensor<Scalar> v = Eigen::Map<const Tensor<Scalar>>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return detail::make_op<Scalar>("reshape", std::move(v), {a}, [r0, c0](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], Tensor<Scalar>(Eigen::Map<const Tensor<Scalar>>(self.grad.data(), r0, c0)));
  });
}

/// Concatenate along the last axis.
template <typename Scalar>
Var<Scalar> concat(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows()) detail::shape_error("concat", shape_str(a.value()), shape_str(b.value()));
  Tensor<Scalar> v(a.rows(), a.cols() + b.cols());
  v.leftCols(a.cols()) = a.value();
  v.rightCols(b.cols()) = b.value();
  const Index ca = a.cols(), cb = b.cols();
  return detail::make_op<Scalar>("concat", std::move(v), {a, b}, [ca, cb](Node<Scalar>& self) {
    if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], Tensor<Scalar>(self.grad.leftCols(ca)));
    if (self.parents[1]->requires_grad) detail::accumulate(*self.parents[1], Tensor<Scalar>(self.grad.rightCols(cb)));
  });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Var<Scalar> out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat(out, parts[i]);
  return out;
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index start, Index len) {
  if (start < 0 || len < 0 || start + len > a.cols()) {
    detail::shape_error("slice_cols", shape_str(a.value()), "cols [" + std::to_string(start) + ", +" + std::to_string(len) + ")");
  }
  const Index r = a.rows(), c = a.cols();
  return detail::make_op<Scalar>("slice_cols", Tensor<Scalar>(a.value().middleCols(start, len)), {a},
                                 [r, c, start, len](Node<Scalar>& self) {
                                   Tensor<Scalar> g = Tensor<Scalar>::Zero(r, c);
                                   g.middleCols(start, len) = self.grad;
                                   detail::accumulate(*self.parents[0], g);
                                 });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Index start, Index len) {
  if (start < 0 || len < 0 || start + len > a.rows()) {
    detail::shape_error("slice_rows", shape_str(a.value()), "rows [" + std::to_string(start) + ", +" + std::to_string(len) + ")");
  }
  const Index r = a.rows(), c = a.cols();
  return detail::make_op<Scalar>("slice_rows", Tensor<Scalar>(a.value().middleRows(start, len)), {a},
                                 [r, c, start, len](Node<Scalar>& self) {
                                   Tensor<Scalar> g = Tensor<Scalar>::Zero(r, c);
                                   g.middleRows(start, len) = self.grad;
                                   detail::accumulate(*self.parents[0], g);
                                 });
}

/// out(i, 0) = a(i, index[i]).
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& a, std::vector<Index> index) {
  if (static_cast<Index>(index.size()) != a.rows()) {
    detail::shape_error("gather", shape_str(a.value()), "index of length " + std::to_string(index.size()));
  }
  Tensor<Scalar> v(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    if (index[i] < 0 || index[i] >= a.cols()) throw std::out_of_range("gather: index out of range");
    v(i, 0) = a.value()(i, index[i]);
  }
  const Index r = a.rows(), c = a.cols();
  return detail::make_op<Scalar>("gather", std::move(v), {a}, [r, c, index = std::move(index)](Node<Scalar>& self) {
    Tensor<Scalar> g = Tensor<Scalar>::Zero(r, c);
    for (Index i = 0; i < r; ++i) g(i, index[i]) += self.grad(i, 0);
    detail::accumulate(*self.parents[0], g);
  });
}

/// out.row(i) = a.row(index[i]); used as an embedding lookup.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::vector<Index> index) {
  Tensor<Scalar> v(static_cast<Index>(index.size()), a.cols());
  for (Index i = 0; i < v.rows(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
    v.row(i) = a.value().row(index[i]);
  }
  const Index r = a.rows(), c = a.cols();
  return detail::make_op<Scalar>("gather_rows", std::move(v), {a}, [r, c, index = std::move(index)](Node<Scalar>& self) {
    Tensor<Scalar> g = Tensor<Scalar>::Zero(r, c);
    for (Index i = 0; i < static_cast<Index>(index.size()); ++i) g.row(index[i]) += self.grad.row(i);
    detail::accumulate(*self.parents[0], g);
  });
}

template <typename Scalar>
Var<Scalar> stop_gradient(const Var<Scalar>& a) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = a.value();
  n->op = "stop_gradient";
  return Var<Scalar>(std::move(n));
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> v(1, 1);
  v(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return detail::make_op<Scalar>("sum", std::move(v), {a}, [r, c](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], Tensor<Scalar>::Constant(r, c, self.grad(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Sum over the last axis: [r, c] -> [r, 1].
template <typename Scalar>
Var<Scalar> sum_last(const Var<Scalar>& a) {
  const Index c = a.cols();
  return detail::make_op<Scalar>("sum_last", Tensor<Scalar>(a.value().rowwise().sum()), {a}, [c](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], Tensor<Scalar>(self.grad.replicate(1, c)));
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities.

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a) {
  const auto& x = a.value();
  Tensor<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).unaryExpr(detail::ExpFn{}).matrix();
    std::vector<Scalar> terms(static_cast<std::size_t>(y.cols()));
    for (Index j = 0; j < y.cols(); ++j) terms[static_cast<std::size_t>(j)] = y(i, j);
    y.row(i) /= detail::ordered_sum(terms);
  }
  return detail::make_op<Scalar>("softmax", y, {a}, [y](Node<Scalar>& self) {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = self.grad.cwiseProduct(y).rowwise().sum();
    Tensor<Scalar> g = y.cwiseProduct((self.grad.colwise() - dot));
    detail::accumulate(*self.parents[0], g);
  });
}

template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& a) {
  const auto& x = a.value();
  Tensor<Scalar> y(x.rows(), x.cols());
  Tensor<Scalar> p(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    const Scalar lse = m + std::log((x.row(i).array() - m).unaryExpr(detail::ExpFn{}).sum());
    y.row(i) = (x.row(i).array() - lse).matrix();
    p.row(i) = y.row(i).array().unaryExpr(detail::ExpFn{}).matrix();
  }
  return detail::make_op<Scalar>("log_softmax", std::move(y), {a}, [p = std::move(p)](Node<Scalar>& self) {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> total = self.grad.rowwise().sum();
    Tensor<Scalar> g = self.grad - Tensor<Scalar>(p.array().colwise() * total.array());
    detail::accumulate(*self.parents[0], g);
  });
}

/// Layer normalization over the last axis with learnable gain and bias [1, d].
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d) detail::shape_error("layer_norm", shape_str(x.value()), shape_str(gain.value()));
  if (bias.rows() != 1 || bias.cols() != d) detail::shape_error("layer_norm", shape_str(x.value()), shape_str(bias.value()));
  const auto& xv = x.value();
  Tensor<Scalar> xhat(xv.rows(), d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Index i = 0; i < xv.rows(); ++i) {
    // Plain loops: vectorized reductions peel differently per row alignment.
    Scalar mu(0), var(0);
    for (Index j = 0; j < d; ++j) mu += xv(i, j);
    mu /= static_cast<Scalar>(d);
    const auto centered = (xv.row(i).array() - mu).eval();
    for (Index j = 0; j < d; ++j) var += centered(j) * centered(j);
    var /= static_cast<Scalar>(d);
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (centered * inv_std(i)).matrix();
  }
  Tensor<Scalar> y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return detail::make_op<Scalar>(
      "layer_norm", std::move(y), {x, gain, bias}, [xhat = std::move(xhat), inv_std = std::move(inv_std), d](Node<Scalar>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) {
          Tensor<Scalar> gh = self.grad.array().rowwise() * pg.value.row(0).array();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m1 = gh.rowwise().mean();
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m2 = gh.cwiseProduct(xhat).rowwise().mean();
          Tensor<Scalar> gx(gh.rows(), d);
          for (Index i = 0; i < gh.rows(); ++i) {
            gx.row(i) = ((gh.row(i).array() - m1(i) - xhat.row(i).array() * m2(i)) * inv_std(i)).matrix();
          }
          detail::accumulate(px, gx);
        }
        if (pg.requires_grad) detail::accumulate(pg, Tensor<Scalar>(self.grad.cwiseProduct(xhat).colwise().sum()));
        if (pb.requires_grad) detail::accumulate(pb, Tensor<Scalar>(self.grad.colwise().sum()));
      });
}

/// GELU, tanh approximation.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  const Scalar c = std::sqrt(Scalar(2) / Scalar(M_PI));
  const Scalar k = Scalar(0.044715);
  const auto x = a.value().array();
  Tensor<Scalar> t = (c * (x + k * x.cube())).unaryExpr(detail::TanhFn{}).matrix();
  Tensor<Scalar> y = (Scalar(0.5) * x * (Scalar(1) + t.array())).matrix();
  return detail::make_op<Scalar>("gelu", std::move(y), {a}, [t = std::move(t), c, k](Node<Scalar>& self) {
    const auto x = self.parents[0]->value.array();
    const auto ta = t.array();
    Tensor<Scalar> d = (Scalar(0.5) * (Scalar(1) + ta) +
                        Scalar(0.5) * x * (Scalar(1) - ta.square()) * c * (Scalar(1) + Scalar(3) * k * x.square()))
                           .matrix();
    detail::accumulate(*self.parents[0], Tensor<Scalar>(self.grad.cwiseProduct(d)));
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  Tensor<Scalar> y = a.value().array().unaryExpr(detail::TanhFn{}).matrix();
  return detail::make_op<Scalar>("tanh", y, {a}, [y](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], Tensor<Scalar>(self.grad.array() * (Scalar(1) - y.array().square())));
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  Tensor<Scalar> y = a.value().array().unaryExpr(detail::ExpFn{}).matrix();
  return detail::make_op<Scalar>("exp", y, {a}, [y](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], Tensor<Scalar>(self.grad.cwiseProduct(y)));
  });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  return detail::make_op<Scalar>("log", Tensor<Scalar>(a.value().array().unaryExpr(detail::LogFn{}).matrix()), {a}, [](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], Tensor<Scalar>(self.grad.array() / self.parents[0]->value.array()));
  });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return detail::make_op<Scalar>("square", Tensor<Scalar>(a.value().array().square().matrix()), {a}, [](Node<Scalar>& self) {
    detail::accumulate(*self.parents[0], Tensor<Scalar>(Scalar(2) * self.grad.array() * self.parents[0]->value.array()));
  });
}

/// Elementwise clamp; gradient passes where lo <= a <= hi.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& a, Scalar lo, Scalar hi) {
  return detail::make_op<Scalar>("clamp", Tensor<Scalar>(a.value().cwiseMax(lo).cwiseMin(hi)), {a}, [lo, hi](Node<Scalar>& self) {
    const auto& x = self.parents[0]->value;
    Tensor<Scalar> g = (x.array() >= lo && x.array() <= hi).select(self.grad.array(), Scalar(0)).matrix();
    detail::accumulate(*self.parents[0], g);
  });
}

/// Elementwise minimum; ties route the gradient to the first operand.
template <typename Scalar>
Var<Scalar> minimum(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) detail::shape_error("minimum", shape_str(a.value()), shape_str(b.value()));
  return detail::make_op<Scalar>("minimum", Tensor<Scalar>(a.value().cwiseMin(b.value())), {a, b}, [](Node<Scalar>& self) {
    const auto first = (self.parents[0]->value.array() <= self.parents[1]->value.array()).eval();
    if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], Tensor<Scalar>(first.select(self.grad.array(), Scalar(0)).matrix()));
    if (self.parents[1]->requires_grad) detail::accumulate(*self.parents[1], Tensor<Scalar>(first.select(Scalar(0), self.grad.array()).matrix()));
  });
}

/// Elementwise Huber penalty: 0.5 x^2 inside |x| <= delta, delta (|x| - delta/2) outside.
template <typename Scalar>
Var<Scalar> huber(const Var<Scalar>& a, Scalar delta) {
  const auto x = a.value().array();
  Tensor<Scalar> y = (x.abs() <= delta).select(Scalar(0.5) * x.square(), delta * (x.abs() - Scalar(0.5) * delta)).matrix();
  return detail::make_op<Scalar>("huber", std::move(y), {a}, [delta](Node<Scalar>& self) {
    const auto x = self.parents[0]->value.array();
    Tensor<Scalar> d = (x.abs() <= delta).select(x, delta * x.sign()).matrix();
    detail::accumulate(*self.parents[0], Tensor<Scalar>(self.grad.cwiseProduct(d)));
  });
}

// ---------------------------------------------------------------------------
// Reverse pass.

template <typename Scalar>
void backward(const Var<Scalar>& output) {
  if (output.value().size() != 1) {
    throw std::invalid_argument("backward: output must be scalar, got " + shape_str(output.value()));
  }
  if (!output.requires_grad()) return;

  // Iterative post-order DFS; children precede parents in reverse order.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(output.node(), 0);
  seen.insert(output.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<Scalar>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->backprop) n->grad.resize(0, 0);
  }
  detail::accumulate(*output.node(), Tensor<Scalar>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backprop && n->has_grad()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

/// Max over coordinates of |analytic - numeric| / max(floor, |analytic| + |numeric|),
/// where `numeric` is the fourth-order central difference
///   (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h.
/// The floor keeps coordinates whose exact gradient is zero (for example a
/// key bias under softmax shift invariance) from dividing roundoff by
/// roundoff. The leaf is perturbed in place; `f` must rebuild its graph from
/// the leaf on every call.
template <typename Scalar>
Scalar grad_check(const std::function<Var<Scalar>()>& f, Var<Scalar>& leaf, Scalar h, Scalar floor = Scalar(1e-6)) {
  if (!(h > Scalar(0))) throw std::invalid_argument("grad_check: step must be positive");
  leaf.zero_grad();
  Var<Scalar> out = f();
  if (!std::isfinite(out.item())) throw std::domain_error("grad_check: non-finite function value");
  backward(out);
  const Tensor<Scalar> analytic = leaf.grad_or_zero();
  if (!analytic.allFinite()) throw std::domain_error("grad_check: non-finite analytic gradient");

  Tensor<Scalar>& x = leaf.mutable_value();
  auto at = [&](Index i, Scalar v) {
    x.data()[i] = v;
    const Scalar y = f().item();
    if (!std::isfinite(y)) throw std::domain_error("grad_check: non-finite function value");
    return y;
  };
  Scalar worst = 0;
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar orig = x.data()[i];
    const Scalar fp1 = at(i, orig + h), fm1 = at(i, orig - h);
    const Scalar fp2 = at(i, orig + 2 * h), fm2 = at(i, orig - 2 * h);
    x.data()[i] = orig;
    const Scalar numeric = (fm2 - Scalar(8) * fm1 + Scalar(8) * fp1 - fp2) / (Scalar(12) * h);
    const Scalar a = analytic.data()[i];
    const Scalar err = std::abs(a - numeric) / std::max(floor, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

template <typename Scalar>
Scalar grad_check(const std::function<Var<Scalar>(const Var<Scalar>&)>& f, const Tensor<Scalar>& x, Scalar h,
                  Scalar floor = Scalar(1e-6)) {
  Var<Scalar> leaf = Var<Scalar>::leaf(x, true);
  return grad_check<Scalar>(std::function<Var<Scalar>()>([&] { return f(leaf); }), leaf, h, floor);
}

}  // namespace ma2cl
