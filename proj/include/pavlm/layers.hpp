#pragma once

#include <string>

#include "pavlm/autodiff.hpp"
#include "pavlm/params.hpp"

namespace pavlm {

// Pointwise (1x1 convolution) / fully-connected layer.
template <class T>
struct LinearLayer {
  Parameter<T>* weight = nullptr;  // out x in
  Parameter<T>* bias = nullptr;    // 1 x out

  static LinearLayer make(ParamStore<T>& store, const std::string& name, Index in, Index out, Rng& rng,
                          bool with_bias = true) {
    LinearLayer l;
    l.weight = &store.add_xavier(name + ".weight", out, in, rng);
    if (with_bias) l.bias = &store.add_constant(name + ".bias", 1, out, T(0));
    return l;
  }

  ad::Var<T> operator()(ad::Tape<T>& tape, const ad::Var<T>& x) const {
    return ad::linear(x, tape.param(*weight), bias ? tape.param(*bias) : ad::Var<T>());
  }

  Index in_features() const { return weight->value.cols(); }
  Index out_features() const { return weight->value.rows(); }
};

template <class T>
struct LayerNormLayer {
  Parameter<T>* gain = nullptr;
  Parameter<T>* shift = nullptr;

  static LayerNormLayer make(ParamStore<T>& store, const std::string& name, Index width) {
    LayerNormLayer l;
    l.gain = &store.add_constant(name + ".gain", 1, width, T(1));
    l.shift = &store.add_constant(name + ".shift", 1, width, T(0));
    return l;
  }

  ad::Var<T> operator()(ad::Tape<T>& tape, const ad::Var<T>& x) const {
    return ad::layer_norm(x, tape.param(*gain), tape.param(*shift));
  }
};

}  // namespace pavlm
