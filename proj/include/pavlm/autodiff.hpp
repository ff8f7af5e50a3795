#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every network in the library is written against this tape so the
// same code path runs in float (training) and double (gradient checks).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pavlm/errors.hpp"

namespace pavlm {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

template <class T>
struct Parameter {
  Matrix<T> value;
  Matrix<T> grad;
  // Running statistics and other buffers are stored as parameters but never
  // receive gradients.
  bool trainable = true;
  bool frozen = false;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ad {

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  // Convenience for 1x1 results.
  T scalar() const { return value()(0, 0); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, nullptr); }

  // Each parameter maps to a single leaf per tape, so repeated use across a
  // batch accumulates into one gradient.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var<T>(this, it->second);
    const bool rg = p.trainable && !p.frozen;
    Var<T> v = push(p.value, rg, nullptr);
    nodes_[v.id()].param = &p;
    param_ids_.emplace(&p, v.id());
    return v;
  }

  Var<T> push(Matrix<T> value, bool requires_grad, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(value), Matrix<T>(), requires_grad, false, std::move(backward), nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Matrix<T>& value(const Var<T>& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Matrix<T>& value(std::size_t id) const { return nodes_[id].value; }

  // Gradient buffer for a node, allocated on first use.
  Matrix<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad.setZero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

  // Backpropagates from a 1x1 node and accumulates into parameter gradients.
  void backward(const Var<T>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw InvalidArgument("backward: loss must be a 1x1 value");
    if (!nodes_[loss.id()].requires_grad) return;
    grad(loss.id())(0, 0) += T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.requires_grad) continue;
      if (n.backward) n.backward();
      if (n.param != nullptr) {
        if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols())
          n.param->grad.setZero(n.value.rows(), n.value.cols());
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad;
    bool has_grad;
    std::function<void()> backward;
    Parameter<T>* param;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
};

namespace detail {

template <class T>
void check_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw InvalidArgument("autodiff: operands recorded on different tapes");
}

template <class T>
void check_shape(const Matrix<T>& a, Index rows, Index cols, const char* op) {
  if (a.rows() != rows || a.cols() != cols)
    throw InvalidArgument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(rows) + "x" + std::to_string(cols) + ")");
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b);
  Tape<T>* t = a.tape();
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimensions differ");
  const std::size_t ia = a.id(), ib = b.id();
  const bool rg = t->requires_grad(ia) || t->requires_grad(ib);
  Matrix<T> out = a.value() * b.value();
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ia, ib, self] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ia)) t->grad(ia).noalias() += g * t->value(ib).transpose();
    if (t->requires_grad(ib)) t->grad(ib).noalias() += t->value(ia).transpose() * g;
  });
}

// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b);
  Tape<T>* t = a.tape();
  if (a.cols() != b.cols()) throw InvalidArgument("matmul_nt: inner dimensions differ");
  const std::size_t ia = a.id(), ib = b.id();
  const bool rg = t->requires_grad(ia) || t->requires_grad(ib);
  Matrix<T> out = a.value() * b.value().transpose();
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ia, ib, self] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ia)) t->grad(ia).noalias() += g * t->value(ib);
    if (t->requires_grad(ib)) t->grad(ib).noalias() += g.transpose() * t->value(ia);
  });
}

// x * W^T + b, with W shaped (out, in) and b shaped (1, out). Pass an invalid
// Var for no bias.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
  detail::check_same_tape(x, w);
  Tape<T>* t = x.tape();
  if (x.cols() != w.cols())
    throw InvalidArgument("linear: input width " + std::to_string(x.cols()) + " does not match weight width " +
                          std::to_string(w.cols()));
  const std::size_t ix = x.id(), iw = w.id();
  const bool has_bias = b.valid();
  const std::size_t ib = has_bias ? b.id() : 0;
  if (has_bias) detail::check_shape(b.value(), 1, w.rows(), "linear bias");
  Matrix<T> out = x.value() * w.value().transpose();
  if (has_bias) out.rowwise() += b.value().row(0);
  const bool rg = t->requires_grad(ix) || t->requires_grad(iw) || (has_bias && t->requires_grad(ib));
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ix, iw, ib, has_bias, self] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ix)) t->grad(ix).noalias() += g * t->value(iw);
    if (t->requires_grad(iw)) t->grad(iw).noalias() += g.transpose() * t->value(ix);
    if (has_bias && t->requires_grad(ib)) t->grad(ib).row(0) += g.colwise().sum();
  });
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b);
  detail::check_shape(b.value(), a.rows(), a.cols(), "add");
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  std::size_t self = t->size();
  return t->push(a.value() + b.value(), t->requires_grad(ia) || t->requires_grad(ib), [t, ia, ib, self] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ia)) t->grad(ia) += g;
    if (t->requires_grad(ib)) t->grad(ib) += g;
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_tape(a, b);
  detail::check_shape(b.value(), a.rows(), a.cols(), "sub");
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  std::size_t self = t->size();
  return t->push(a.value() - b.value(), t->requires_grad(ia) || t->requires_grad(ib), [t, ia, ib, self] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ia)) t->grad(ia) += g;
    if (t->requires_grad(ib)) t->grad(ib) -= g;
  });
}

// a (R x C) + r (1 x C) broadcast over rows.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& r) {
  detail::check_same_tape(a, r);
  detail::check_shape(r.value(), 1, a.cols(), "add_row");
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id(), ir = r.id();
  Matrix<T> out = a.value();
  out.rowwise() += r.value().row(0);
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ia) || t->requires_grad(ir), [t, ia, ir, self] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ia)) t->grad(ia) += g;
    if (t->requires_grad(ir)) t->grad(ir).row(0) += g.colwise().sum();
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = t->size();
  return t->push(a.value() * s, t->requires_grad(ia), [t, ia, s, self] { t->grad(ia) += t->grad(self) * s; });
}

// a scaled by a learnable 1x1 value.
template <class T>
Var<T> mul_scalar(const Var<T>& a, const Var<T>& s) {
  detail::check_same_tape(a, s);
  detail::check_shape(s.value(), 1, 1, "mul_scalar");
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id(), is = s.id();
  std::size_t self = t->size();
  return t->push(a.value() * s.scalar(), t->requires_grad(ia) || t->requires_grad(is), [t, ia, is, self] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ia)) t->grad(ia) += g * t->value(is)(0, 0);
    if (t->requires_grad(is)) t->grad(is)(0, 0) += g.cwiseProduct(t->value(ia)).sum();
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = t->size();
  return t->push(a.value().cwiseMax(T(0)), t->requires_grad(ia), [t, ia, self] {
    const Matrix<T>& g = t->grad(self);
    t->grad(ia).array() += (t->value(ia).array() > T(0)).select(g.array(), T(0));
  });
}

// tanh approximation of GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T k = T(0.044715);
  auto fwd = [c, k](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); };
  std::size_t self = t->size();
  return t->push(a.value().unaryExpr(fwd), t->requires_grad(ia), [t, ia, self, c, k] {
    const Matrix<T>& g = t->grad(self);
    const Matrix<T>& x = t->value(ia);
    Matrix<T>& gi = t->grad(ia);
    for (Index i = 0; i < x.size(); ++i) {
      const T v = x.data()[i];
      const T u = c * (v + k * v * v * v);
      const T th = std::tanh(u);
      const T du = c * (T(1) + T(3) * k * v * v);
      gi.data()[i] += g.data()[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du);
    }
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  Matrix<T> out = a.value().unaryExpr([](T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  });
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ia), [t, ia, self] {
    const Matrix<T>& y = t->value(self);
    t->grad(ia).array() += t->grad(self).array() * y.array() * (T(1) - y.array());
  });
}

// Row-wise softmax.
template <class T>
Matrix<T> softmax_rows_value(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = t->size();
  return t->push(softmax_rows_value(a.value()), t->requires_grad(ia), [t, ia, self] {
    const Matrix<T>& y = t->value(self);
    const Matrix<T>& g = t->grad(self);
    Matrix<T>& gi = t->grad(ia);
    for (Index r = 0; r < y.rows(); ++r) {
      const T dot = g.row(r).dot(y.row(r));
      gi.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

// Row-wise layer normalization with learned gain (1xC) and shift (1xC).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps = T(1e-5)) {
  detail::check_same_tape(x, gain);
  detail::check_shape(gain.value(), 1, x.cols(), "layer_norm gain");
  detail::check_shape(shift.value(), 1, x.cols(), "layer_norm shift");
  Tape<T>* t = x.tape();
  const Index rows = x.rows(), cols = x.cols();
  Matrix<T> xhat(rows, cols);
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const T mean = x.value().row(r).mean();
    const auto centered = (x.value().row(r).array() - mean).eval();
    const T var = centered.square().mean();
    inv_std[static_cast<std::size_t>(r)] = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (centered * inv_std[static_cast<std::size_t>(r)]).matrix();
  }
  Matrix<T> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += shift.value().row(0);
  const std::size_t ix = x.id(), ig = gain.id(), ib = shift.id();
  const bool rg = t->requires_grad(ix) || t->requires_grad(ig) || t->requires_grad(ib);
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ix, ig, ib, self, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ig)) t->grad(ig).row(0) += g.cwiseProduct(xhat).colwise().sum();
    if (t->requires_grad(ib)) t->grad(ib).row(0) += g.colwise().sum();
    if (t->requires_grad(ix)) {
      const auto& gamma = t->value(ig);
      Matrix<T>& gx = t->grad(ix);
      const T n = T(xhat.cols());
      for (Index r = 0; r < xhat.rows(); ++r) {
        const auto dxhat = (g.row(r).array() * gamma.row(0).array()).eval();
        const T mean_d = dxhat.sum() / n;
        const T mean_dx = (dxhat * xhat.row(r).array()).sum() / n;
        gx.row(r).array() += inv_std[static_cast<std::size_t>(r)] * (dxhat - mean_d - xhat.row(r).array() * mean_dx);
      }
    }
  });
}

// ---------------------------------------------------------------- reshaping

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  Tape<T>* t = parts[0].tape();
  const Index rows = parts[0].rows();
  Index cols = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    if (p.tape() != t) throw InvalidArgument("concat_cols: operands recorded on different tapes");
    if (p.rows() != rows) throw InvalidArgument("concat_cols: row counts differ");
    offsets.push_back(cols);
    cols += p.cols();
    ids.push_back(p.id());
    rg = rg || t->requires_grad(p.id());
  }
  Matrix<T> out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) out.middleCols(offsets[k], parts[k].cols()) = parts[k].value();
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ids, offsets, self] {
    const Matrix<T>& g = t->grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t->requires_grad(ids[k])) continue;
      Matrix<T>& gk = t->grad(ids[k]);
      gk += g.middleCols(offsets[k], gk.cols());
    }
  });
}

template <class T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat_cols(std::span<const Var<T>>(v));
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  Tape<T>* t = parts[0].tape();
  const Index cols = parts[0].cols();
  Index rows = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    if (p.tape() != t) throw InvalidArgument("concat_rows: operands recorded on different tapes");
    if (p.cols() != cols) throw InvalidArgument("concat_rows: column counts differ");
    offsets.push_back(rows);
    rows += p.rows();
    ids.push_back(p.id());
    rg = rg || t->requires_grad(p.id());
  }
  Matrix<T> out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) out.middleRows(offsets[k], parts[k].rows()) = parts[k].value();
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ids, offsets, self] {
    const Matrix<T>& g = t->grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t->requires_grad(ids[k])) continue;
      Matrix<T>& gk = t->grad(ids[k]);
      gk += g.middleRows(offsets[k], gk.rows());
    }
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw InvalidArgument("slice_rows: out of range");
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = t->size();
  return t->push(a.value().middleRows(start, count), t->requires_grad(ia),
                 [t, ia, start, count, self] { t->grad(ia).middleRows(start, count) += t->grad(self); });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw InvalidArgument("slice_cols: out of range");
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  std::size_t self = t->size();
  return t->push(a.value().middleCols(start, count), t->requires_grad(ia),
                 [t, ia, start, count, self] { t->grad(ia).middleCols(start, count) += t->grad(self); });
}

// (1 x C) repeated n times.
template <class T>
Var<T> broadcast_rows(const Var<T>& a, Index n) {
  detail::check_shape(a.value(), 1, a.cols(), "broadcast_rows");
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  Matrix<T> out = a.value().replicate(n, 1);
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ia),
                 [t, ia, self] { t->grad(ia).row(0) += t->grad(self).colwise().sum(); });
}

template <class T>
Var<T> mean_rows(const Var<T>& a) {
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  const T n = T(a.rows());
  Matrix<T> out = a.value().colwise().sum() / n;
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ia), [t, ia, n, self] {
    t->grad(ia).rowwise() += t->grad(self).row(0) / n;
  });
}

namespace detail {

// Column-wise argmax over a row range; ties resolve to the earliest row.
template <class T>
void column_argmax(const Matrix<T>& x, Index begin, Index end, T* out_val, Index* out_row) {
  const Index cols = x.cols();
  for (Index c = 0; c < cols; ++c) {
    out_val[c] = x(begin, c);
    out_row[c] = begin;
  }
  for (Index r = begin + 1; r < end; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const T v = x(r, c);
      if (v > out_val[c]) {
        out_val[c] = v;
        out_row[c] = r;
      }
    }
  }
}

}  // namespace detail

// Max over all rows -> (1 x C).
template <class T>
Var<T> max_rows(const Var<T>& a) {
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  const Index cols = a.cols();
  if (a.rows() == 0) throw InvalidArgument("max_rows: empty input");
  Matrix<T> out(1, cols);
  std::vector<Index> arg(static_cast<std::size_t>(cols));
  detail::column_argmax(a.value(), 0, a.rows(), out.data(), arg.data());
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ia), [t, ia, self, arg = std::move(arg)] {
    const Matrix<T>& g = t->grad(self);
    Matrix<T>& gi = t->grad(ia);
    for (Index c = 0; c < g.cols(); ++c) gi(arg[static_cast<std::size_t>(c)], c) += g(0, c);
  });
}

// Rows grouped in consecutive blocks of `group_size`; max within each block.
template <class T>
Var<T> group_max(const Var<T>& a, Index group_size) {
  if (group_size <= 0 || a.rows() % group_size != 0) throw InvalidArgument("group_max: rows not divisible by group size");
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  const Index groups = a.rows() / group_size, cols = a.cols();
  Matrix<T> out(groups, cols);
  std::vector<Index> arg(static_cast<std::size_t>(groups * cols));
  for (Index k = 0; k < groups; ++k)
    detail::column_argmax(a.value(), k * group_size, (k + 1) * group_size, out.row(k).data(),
                          arg.data() + k * cols);
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ia), [t, ia, self, cols, arg = std::move(arg)] {
    const Matrix<T>& g = t->grad(self);
    Matrix<T>& gi = t->grad(ia);
    for (Index k = 0; k < g.rows(); ++k)
      for (Index c = 0; c < cols; ++c) gi(arg[static_cast<std::size_t>(k * cols + c)], c) += g(k, c);
  });
}

// Row lookup (embedding tables); gradients scatter-add back.
template <class T>
Var<T> gather_rows(const Var<T>& table, std::vector<Index> rows) {
  Tape<T>* t = table.tape();
  const std::size_t it = table.id();
  Matrix<T> out(static_cast<Index>(rows.size()), table.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= table.rows()) throw InvalidArgument("gather_rows: index out of range");
    out.row(static_cast<Index>(r)) = table.value().row(rows[r]);
  }
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(it), [t, it, self, rows = std::move(rows)] {
    const Matrix<T>& g = t->grad(self);
    Matrix<T>& gt = t->grad(it);
    for (std::size_t r = 0; r < rows.size(); ++r) gt.row(rows[r]) += g.row(static_cast<Index>(r));
  });
}

// out_i = sum_j weights(i,j) * source[index(i,j)], with constant weights.
template <class T>
Var<T> weighted_gather(const Var<T>& source, Matrix<Index> index, Matrix<T> weights) {
  if (index.rows() != weights.rows() || index.cols() != weights.cols())
    throw InvalidArgument("weighted_gather: index and weight shapes differ");
  Tape<T>* t = source.tape();
  const std::size_t is = source.id();
  const Matrix<T>& src = source.value();
  Matrix<T> out = Matrix<T>::Zero(index.rows(), src.cols());
  for (Index i = 0; i < index.rows(); ++i)
    for (Index j = 0; j < index.cols(); ++j) {
      if (index(i, j) < 0 || index(i, j) >= src.rows()) throw InvalidArgument("weighted_gather: index out of range");
      out.row(i) += weights(i, j) * src.row(index(i, j));
    }
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(is),
                 [t, is, self, index = std::move(index), weights = std::move(weights)] {
                   const Matrix<T>& g = t->grad(self);
                   Matrix<T>& gs = t->grad(is);
                   for (Index i = 0; i < index.rows(); ++i)
                     for (Index j = 0; j < index.cols(); ++j) gs.row(index(i, j)) += weights(i, j) * g.row(i);
                 });
}

// out(i,c) = max_j (self_term(i,c) + neighbor_term(nbr(i,j), c)).
// Realizes an edge convolution whose shared map is linear in
// [x_i ; x_j - x_i], factored into per-point terms.
template <class T>
Var<T> neighbor_max(const Var<T>& self_term, const Var<T>& neighbor_term, Matrix<Index> neighbors) {
  detail::check_same_tape(self_term, neighbor_term);
  detail::check_shape(neighbor_term.value(), self_term.rows(), self_term.cols(), "neighbor_max");
  if (neighbors.rows() != self_term.rows() || neighbors.cols() < 1)
    throw InvalidArgument("neighbor_max: neighbor table shape mismatch");
  Tape<T>* t = self_term.tape();
  const std::size_t iu = self_term.id(), iv = neighbor_term.id();
  const Matrix<T>& u = self_term.value();
  const Matrix<T>& v = neighbor_term.value();
  const Index n = u.rows(), cols = u.cols(), k = neighbors.cols();
  Matrix<T> best(n, cols);
  Matrix<Index> arg(n, cols);
  for (Index i = 0; i < n; ++i) {
    best.row(i) = v.row(neighbors(i, 0));
    arg.row(i).setConstant(neighbors(i, 0));
    for (Index j = 1; j < k; ++j) {
      const Index nb = neighbors(i, j);
      for (Index c = 0; c < cols; ++c)
        if (v(nb, c) > best(i, c)) {
          best(i, c) = v(nb, c);
          arg(i, c) = nb;
        }
    }
  }
  Matrix<T> out = u + best;
  const bool rg = t->requires_grad(iu) || t->requires_grad(iv);
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, iu, iv, self, arg = std::move(arg)] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(iu)) t->grad(iu) += g;
    if (t->requires_grad(iv)) {
      Matrix<T>& gv = t->grad(iv);
      for (Index i = 0; i < g.rows(); ++i)
        for (Index c = 0; c < g.cols(); ++c) gv(arg(i, c), c) += g(i, c);
    }
  });
}

// Row i*k + j of the result is self_term(i) + neighbor_term(nbr(i,j)): the
// first layer of an edge map, one row per directed edge.
template <class T>
Var<T> edge_rows(const Var<T>& self_term, const Var<T>& neighbor_term, Matrix<Index> neighbors) {
  detail::check_same_tape(self_term, neighbor_term);
  detail::check_shape(neighbor_term.value(), self_term.rows(), self_term.cols(), "edge_rows");
  if (neighbors.rows() != self_term.rows() || neighbors.cols() < 1)
    throw InvalidArgument("edge_rows: neighbor table shape mismatch");
  Tape<T>* t = self_term.tape();
  const std::size_t iu = self_term.id(), iv = neighbor_term.id();
  const Matrix<T>& u = self_term.value();
  const Matrix<T>& v = neighbor_term.value();
  const Index n = u.rows(), k = neighbors.cols();
  Matrix<T> out(n * k, u.cols());
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) out.row(i * k + j) = u.row(i) + v.row(neighbors(i, j));
  const bool rg = t->requires_grad(iu) || t->requires_grad(iv);
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, iu, iv, self, k, neighbors = std::move(neighbors)] {
    const Matrix<T>& g = t->grad(self);
    const Index n = neighbors.rows();
    if (t->requires_grad(iu)) {
      Matrix<T>& gu = t->grad(iu);
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < k; ++j) gu.row(i) += g.row(i * k + j);
    }
    if (t->requires_grad(iv)) {
      Matrix<T>& gv = t->grad(iv);
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < k; ++j) gv.row(neighbors(i, j)) += g.row(i * k + j);
    }
  });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum_all(const Var<T>& a) {
  Tape<T>* t = a.tape();
  const std::size_t ia = a.id();
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ia),
                 [t, ia, self] { t->grad(ia).array() += t->grad(self)(0, 0); });
}

// Sum of scalars with constant coefficients.
template <class T>
Var<T> weighted_sum(std::span<const Var<T>> terms, std::span<const T> coeffs) {
  if (terms.empty() || terms.size() != coeffs.size()) throw InvalidArgument("weighted_sum: bad arguments");
  Tape<T>* t = terms[0].tape();
  Matrix<T> out = Matrix<T>::Zero(1, 1);
  std::vector<std::size_t> ids;
  bool rg = false;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    detail::check_shape(terms[k].value(), 1, 1, "weighted_sum");
    out(0, 0) += coeffs[k] * terms[k].scalar();
    ids.push_back(terms[k].id());
    rg = rg || t->requires_grad(terms[k].id());
  }
  std::vector<T> c(coeffs.begin(), coeffs.end());
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ids, c, self] {
    const T g = t->grad(self)(0, 0);
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (t->requires_grad(ids[k])) t->grad(ids[k])(0, 0) += c[k] * g;
  });
}

// ---------------------------------------------------------------- normalization

template <class T>
struct BatchStats {
  RowVector<T> mean;
  RowVector<T> var;  // biased estimate used for normalization
};

// Batch normalization over rows (channels are columns) using the statistics of
// the current batch. Returns the normalized output; `stats` receives the batch
// mean and biased variance.
template <class T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps, BatchStats<T>* stats) {
  detail::check_same_tape(x, gain);
  detail::check_shape(gain.value(), 1, x.cols(), "batch_norm gain");
  detail::check_shape(shift.value(), 1, x.cols(), "batch_norm shift");
  Tape<T>* t = x.tape();
  const Matrix<T>& xv = x.value();
  const Index n = xv.rows();
  if (n < 1) throw InvalidArgument("batch_norm_train: empty batch");
  RowVector<T> mean = xv.colwise().mean();
  Matrix<T> centered = xv.rowwise() - mean;
  RowVector<T> var = centered.array().square().colwise().mean().matrix();
  RowVector<T> inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix<T> xhat = centered.array().rowwise() * inv_std.array();
  Matrix<T> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += shift.value().row(0);
  if (stats != nullptr) *stats = BatchStats<T>{mean, var};
  const std::size_t ix = x.id(), ig = gain.id(), ib = shift.id();
  const bool rg = t->requires_grad(ix) || t->requires_grad(ig) || t->requires_grad(ib);
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ix, ig, ib, self, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ig)) t->grad(ig).row(0) += g.cwiseProduct(xhat).colwise().sum();
    if (t->requires_grad(ib)) t->grad(ib).row(0) += g.colwise().sum();
    if (t->requires_grad(ix)) {
      const T n = T(xhat.rows());
      Matrix<T> dxhat = g.array().rowwise() * t->value(ig).row(0).array();
      RowVector<T> mean_d = dxhat.colwise().sum() / n;
      RowVector<T> mean_dx = dxhat.cwiseProduct(xhat).colwise().sum() / n;
      Matrix<T> dx = dxhat.rowwise() - mean_d;
      dx.array() -= xhat.array().rowwise() * mean_dx.array();
      dx.array().rowwise() *= inv_std.array();
      t->grad(ix) += dx;
    }
  });
}

// Batch normalization with fixed (running) statistics.
template <class T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, const RowVector<T>& mean,
                       const RowVector<T>& var, T eps) {
  detail::check_same_tape(x, gain);
  detail::check_shape(gain.value(), 1, x.cols(), "batch_norm gain");
  detail::check_shape(shift.value(), 1, x.cols(), "batch_norm shift");
  if (mean.size() != x.cols() || var.size() != x.cols()) throw InvalidArgument("batch_norm_eval: statistics width");
  Tape<T>* t = x.tape();
  RowVector<T> inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix<T> xhat = (x.value().rowwise() - mean).array().rowwise() * inv_std.array();
  Matrix<T> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += shift.value().row(0);
  const std::size_t ix = x.id(), ig = gain.id(), ib = shift.id();
  const bool rg = t->requires_grad(ix) || t->requires_grad(ig) || t->requires_grad(ib);
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ix, ig, ib, self, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
    const Matrix<T>& g = t->grad(self);
    if (t->requires_grad(ig)) t->grad(ig).row(0) += g.cwiseProduct(xhat).colwise().sum();
    if (t->requires_grad(ib)) t->grad(ib).row(0) += g.colwise().sum();
    if (t->requires_grad(ix))
      t->grad(ix).array() += g.array().rowwise() * (inv_std.array() * t->value(ig).row(0).array());
  });
}

// ---------------------------------------------------------------- discrete

// Row-wise one-hot of the argmax (ties to the smallest column). The backward
// pass uses the softmax Jacobian of the logits in place of the zero derivative
// of argmax.
template <class T>
Var<T> straight_through_one_hot(const Var<T>& logits) {
  Tape<T>* t = logits.tape();
  const std::size_t il = logits.id();
  const Matrix<T>& l = logits.value();
  Matrix<T> out = Matrix<T>::Zero(l.rows(), l.cols());
  for (Index r = 0; r < l.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < l.cols(); ++c)
      if (l(r, c) > l(r, best)) best = c;
    out(r, best) = T(1);
  }
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(il), [t, il, self] {
    const Matrix<T> s = softmax_rows_value(t->value(il));
    const Matrix<T>& g = t->grad(self);
    const Matrix<T> dot = (s.array() * g.array()).rowwise().sum().matrix();
    t->grad(il).array() += s.array() * (g.array().colwise() - dot.col(0).array());
  });
}

}  // namespace ad
}  // namespace pavlm
