#pragma once

// Training objectives: contrastive batch-average alignment, pointwise binary
// cross-entropy, Dice, the combined affordance loss, and the mask-label query
// loss. Each is a tape op with a hand-written backward pass.

#include <cmath>
#include <span>
#include <vector>

#include "pavlm/autodiff.hpp"

namespace pavlm::loss {

struct ContrastiveOptions {
  double eps = 1e-8;    // added to every coordinate difference
  double p = 2.0;       // norm order
  double margin = 1.0;  // hinge margin for mismatched pairs
};

namespace detail {

template <class T>
T p_norm(const RowVector<T>& x, double p) {
  if (p == 2.0) return x.norm();
  if (p == 1.0) return x.cwiseAbs().sum();
  T s = T(0);
  for (Index i = 0; i < x.size(); ++i) s += std::pow(std::abs(x(i)), T(p));
  return std::pow(s, T(1.0 / p));
}

// d||x||_p / dx = sign(x) |x|^(p-1) / ||x||_p^(p-1)
template <class T>
RowVector<T> p_norm_grad(const RowVector<T>& x, T norm, double p) {
  RowVector<T> g = RowVector<T>::Zero(x.size());
  if (norm == T(0)) return g;
  if (p == 2.0) return x / norm;
  if (p == 1.0) {
    for (Index i = 0; i < x.size(); ++i) g(i) = x(i) > T(0) ? T(1) : (x(i) < T(0) ? T(-1) : T(0));
    return g;
  }
  const T denom = std::pow(norm, T(p - 1.0));
  for (Index i = 0; i < x.size(); ++i) {
    const T a = std::abs(x(i));
    const T s = x(i) > T(0) ? T(1) : (x(i) < T(0) ? T(-1) : T(0));
    g(i) = s * std::pow(a, T(p - 1.0)) / denom;
  }
  return g;
}

}  // namespace detail

// L_ca = mean_i ||P_i - T_i + eps*1||_p
//      + mean_{i != j} max(0, margin - ||P_i - T_j + eps*1||_p)
// The mismatched term is 0 for a batch of one.
template <class T>
ad::Var<T> contrastive_batch_average(const ad::Var<T>& point, const ad::Var<T>& text, const ContrastiveOptions& opt = {}) {
  if (point.tape() != text.tape()) throw InvalidArgument("contrastive_batch_average: different tapes");
  if (point.cols() != text.cols())
    throw InvalidArgument("contrastive_batch_average: width mismatch (" + std::to_string(point.cols()) + " vs " +
                          std::to_string(text.cols()) + ")");
  if (point.rows() != text.rows() || point.rows() < 1)
    throw InvalidArgument("contrastive_batch_average: row counts differ or batch is empty");
  if (!(opt.eps > 0.0) || opt.p < 1.0) throw InvalidArgument("contrastive_batch_average: need eps > 0 and p >= 1");
  ad::Tape<T>* t = point.tape();
  const Matrix<T>& pm = point.value();
  const Matrix<T>& tm = text.value();
  const Index b = pm.rows();
  const T eps = static_cast<T>(opt.eps);
  const T margin = static_cast<T>(opt.margin);

  Matrix<T> dp = Matrix<T>::Zero(pm.rows(), pm.cols());
  Matrix<T> dt = Matrix<T>::Zero(tm.rows(), tm.cols());
  T matched = T(0), mismatched = T(0);
  const T inv_b = T(1) / T(b);
  const T inv_pairs = b > 1 ? T(1) / T(b * (b - 1)) : T(0);
  for (Index i = 0; i < b; ++i) {
    for (Index j = 0; j < b; ++j) {
      if (i != j && b == 1) continue;
      RowVector<T> diff = pm.row(i) - tm.row(j);
      diff.array() += eps;
      const T n = detail::p_norm(diff, opt.p);
      if (i == j) {
        matched += n;
        const RowVector<T> g = detail::p_norm_grad(diff, n, opt.p) * inv_b;
        dp.row(i) += g;
        dt.row(j) -= g;
      } else if (margin - n > T(0)) {
        mismatched += margin - n;
        const RowVector<T> g = detail::p_norm_grad(diff, n, opt.p) * inv_pairs;
        dp.row(i) -= g;
        dt.row(j) += g;
      }
    }
  }
  Matrix<T> out(1, 1);
  out(0, 0) = matched * inv_b + mismatched * inv_pairs;
  const std::size_t ip = point.id(), it = text.id();
  const bool rg = t->requires_grad(ip) || t->requires_grad(it);
  std::size_t self = t->size();
  return t->push(std::move(out), rg, [t, ip, it, self, dp = std::move(dp), dt = std::move(dt)] {
    const T g = t->grad(self)(0, 0);
    if (t->requires_grad(ip)) t->grad(ip) += dp * g;
    if (t->requires_grad(it)) t->grad(it) += dt * g;
  });
}

inline constexpr double kProbabilityClamp = 1e-7;

// Mean binary cross-entropy with soft targets; predictions are clamped to
// [1e-7, 1 - 1e-7] and clamped entries pass no gradient.
template <class T>
ad::Var<T> bce_pointwise(const ad::Var<T>& pred, const Matrix<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw InvalidArgument("bce_pointwise: length mismatch");
  if (pred.value().size() == 0) throw InvalidArgument("bce_pointwise: empty input");
  ad::Tape<T>* t = pred.tape();
  const Matrix<T>& m = pred.value();
  const T lo = static_cast<T>(kProbabilityClamp), hi = T(1) - static_cast<T>(kProbabilityClamp);
  const T n = T(m.size());
  T total = T(0);
  Matrix<T> grad(m.rows(), m.cols());
  for (Index i = 0; i < m.size(); ++i) {
    const T raw = m.data()[i];
    const T mc = std::clamp(raw, lo, hi);
    const T g = target.data()[i];
    total -= g * std::log(mc) + (T(1) - g) * std::log(T(1) - mc);
    grad.data()[i] = (raw < lo || raw > hi) ? T(0) : (-g / mc + (T(1) - g) / (T(1) - mc)) / n;
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total / n;
  const std::size_t ip = pred.id();
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ip),
                 [t, ip, self, grad = std::move(grad)] { t->grad(ip) += grad * t->grad(self)(0, 0); });
}

// 1 - (2 sum m g + smooth) / (sum m + sum g + smooth)
template <class T>
ad::Var<T> dice_loss(const ad::Var<T>& pred, const Matrix<T>& target, double smooth = 1e-6) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw InvalidArgument("dice_loss: length mismatch");
  ad::Tape<T>* t = pred.tape();
  const Matrix<T>& m = pred.value();
  const T s = static_cast<T>(smooth);
  const T a = T(2) * m.cwiseProduct(target).sum() + s;
  const T b = m.sum() + target.sum() + s;
  Matrix<T> out(1, 1);
  out(0, 0) = T(1) - a / b;
  Matrix<T> grad = (-(T(2) * target.array() * b - a) / (b * b)).matrix();
  const std::size_t ip = pred.id();
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(ip),
                 [t, ip, self, grad = std::move(grad)] { t->grad(ip) += grad * t->grad(self)(0, 0); });
}

// L_aff = L_ce + lambda * L_dice
template <class T>
ad::Var<T> affordance_loss(const ad::Var<T>& pred, const Matrix<T>& target, double lambda = 1.0,
                           double smooth = 1e-6) {
  if (lambda < 0.0) throw InvalidArgument("affordance_loss: lambda must be >= 0");
  const ad::Var<T> terms[] = {bce_pointwise(pred, target), dice_loss(pred, target, smooth)};
  const T coeffs[] = {T(1), static_cast<T>(lambda)};
  return ad::weighted_sum<T>(terms, coeffs);
}

// Softmax cross-entropy of each logits row against its target class, averaged
// over rows.
template <class T>
ad::Var<T> query_loss(const ad::Var<T>& logits, std::span<const int> targets) {
  const Matrix<T>& l = logits.value();
  if (static_cast<Index>(targets.size()) != l.rows() || l.rows() < 1)
    throw InvalidArgument("query_loss: one target per logits row required");
  for (int tg : targets)
    if (tg < 0 || tg >= l.cols())
      throw InvalidArgument("query_loss: target " + std::to_string(tg) + " outside [0, " + std::to_string(l.cols()) +
                            ")");
  ad::Tape<T>* t = logits.tape();
  Matrix<T> prob = ad::softmax_rows_value(l);
  T total = T(0);
  const T inv = T(1) / T(l.rows());
  for (Index r = 0; r < l.rows(); ++r) {
    const Index tg = targets[static_cast<std::size_t>(r)];
    // log1p around the max keeps saturated logits exact
    Index top = 0;
    const T m = l.row(r).maxCoeff(&top);
    T rest = T(0);
    for (Index c = 0; c < l.cols(); ++c)
      if (c != top) rest += std::exp(l(r, c) - m);
    total += (m - l(r, tg)) + std::log1p(rest);
  }
  Matrix<T> grad = prob;
  for (Index r = 0; r < l.rows(); ++r) grad(r, targets[static_cast<std::size_t>(r)]) -= T(1);
  grad *= inv;
  Matrix<T> out(1, 1);
  out(0, 0) = total * inv;
  const std::size_t il = logits.id();
  std::size_t self = t->size();
  return t->push(std::move(out), t->requires_grad(il),
                 [t, il, self, grad = std::move(grad)] { t->grad(il) += grad * t->grad(self)(0, 0); });
}

}  // namespace pavlm::loss
