#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>

#include "pavlm/autodiff.hpp"
#include "pavlm/rng.hpp"

namespace pavlm {

// Named parameter arrays. Names are stable across runs and key the checkpoint
// format; std::map keeps element addresses stable so tapes can hold pointers.
template <class T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Matrix<T> value, bool trainable = true) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw InvalidArgument("duplicate parameter name: " + name);
    it->second.value = std::move(value);
    it->second.trainable = trainable;
    it->second.zero_grad();
    return it->second;
  }

  // Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
  Parameter<T>& add_xavier(const std::string& name, Index rows, Index cols, Rng& rng) {
    Matrix<T> w(rows, cols);
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(w));
  }

  Parameter<T>& add_constant(const std::string& name, Index rows, Index cols, T value, bool trainable = true) {
    return add(name, Matrix<T>::Constant(rows, cols, value), trainable);
  }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("unknown parameter: " + name);
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  // Freezes every parameter whose name starts with `prefix`.
  void set_frozen(std::string_view prefix, bool frozen) {
    for (auto& [name, p] : params_)
      if (std::string_view(name).starts_with(prefix)) p.frozen = frozen;
  }
  void unfreeze_all() {
    for (auto& [_, p] : params_) p.frozen = false;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Parameter<T>> params_;
};

// Adaptive moment estimation with global gradient-norm clipping.
template <class T>
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping
  };

  explicit Adam(Options options) : options_(options) {}

  // Returns the pre-clipping gradient norm.
  double step(ParamStore<T>& params) {
    double sq = 0.0;
    for (auto& [_, p] : params)
      if (p.trainable && !p.frozen) sq += p.grad.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    double scale = 1.0;
    if (options_.clip_norm > 0.0 && norm > options_.clip_norm) scale = options_.clip_norm / norm;
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      if (!p.trainable || p.frozen) continue;
      auto& s = state_[name];
      if (s.m.size() == 0) {
        s.m.setZero(p.value.rows(), p.value.cols());
        s.v.setZero(p.value.rows(), p.value.cols());
      }
      const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
      Matrix<T> g = p.grad * static_cast<T>(scale);
      s.m = b1 * s.m + (T(1) - b1) * g;
      s.v = b2 * s.v + (T(1) - b2) * g.cwiseProduct(g);
      const T lr = static_cast<T>(options_.learning_rate / bc1);
      const T c2 = static_cast<T>(1.0 / std::sqrt(bc2));
      p.value.array() -= lr * s.m.array() / (s.v.array().sqrt() * c2 + static_cast<T>(options_.eps));
    }
    return norm;
  }

  long long steps() const { return t_; }

 private:
  struct State {
    Matrix<T> m;
    Matrix<T> v;
  };
  Options options_;
  long long t_ = 0;
  std::map<std::string, State> state_;
};

}  // namespace pavlm
