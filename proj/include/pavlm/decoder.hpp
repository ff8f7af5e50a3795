#pragma once

// Affordance decoder: per point, [P_em_i ; xyz_i ; q] -> conv -> batch norm ->
// ReLU -> conv -> sigmoid.

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "pavlm/autodiff.hpp"
#include "pavlm/layers.hpp"
#include "pavlm/params.hpp"

namespace pavlm {

enum class Mode { train, eval };

struct DecoderConfig {
  Index embed_dim = 64;   // D_out
  Index query_dim = 16;   // D_q
  Index hidden = 0;       // 0 selects max(16, embed_dim / 2)
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  Index hidden_width() const { return hidden > 0 ? hidden : std::max<Index>(16, embed_dim / 2); }
};

// One decoder input: per-point embeddings, coordinates and the query vector.
template <class T>
struct DecoderInput {
  ad::Var<T> embeddings;  // N x D_out
  Matrix<T> points;       // N x 3
  ad::Var<T> query;       // 1 x D_q
};

template <class T>
class AffordanceDecoder {
 public:
  AffordanceDecoder(ParamStore<T>& store, const DecoderConfig& cfg, Rng& rng, const std::string& prefix = "decoder")
      : cfg_(cfg) {
    const Index h = cfg_.hidden_width();
    conv1_ = LinearLayer<T>::make(store, prefix + ".conv1", cfg_.embed_dim + 3 + cfg_.query_dim, h, rng);
    bn_gain_ = &store.add_constant(prefix + ".bn.gain", 1, h, T(1));
    bn_shift_ = &store.add_constant(prefix + ".bn.shift", 1, h, T(0));
    running_mean_ = &store.add_constant(prefix + ".bn.running_mean", 1, h, T(0), false);
    running_var_ = &store.add_constant(prefix + ".bn.running_var", 1, h, T(1), false);
    batches_tracked_ = &store.add_constant(prefix + ".bn.batches_tracked", 1, 1, T(0), false);
    conv2_ = LinearLayer<T>::make(store, prefix + ".conv2", h, 1, rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  bool has_running_stats() const { return batches_tracked_->value(0, 0) > T(0); }

  // Decodes a batch of clouds. In train mode batch normalization uses the
  // statistics of all points in the batch and (optionally) updates the running
  // estimates; eval mode uses the running estimates so each point is decoded
  // independently of every other point.
  std::vector<ad::Var<T>> decode_batch(ad::Tape<T>& tape, std::span<const DecoderInput<T>> inputs, Mode mode,
                                       bool update_running_stats = true) const {
    if (inputs.empty()) throw InvalidArgument("decode: empty batch");
    if (mode == Mode::eval && !has_running_stats())
      throw InvalidArgument("decode: running statistics are uninitialized; train the decoder before eval mode");
    std::vector<ad::Var<T>> hidden;
    std::vector<Index> sizes;
    for (const auto& in : inputs) {
      const Index n = in.embeddings.rows();
      if (in.points.rows() != n || in.points.cols() != 3)
        throw InvalidArgument("decode: embeddings and coordinates disagree on point count");
      if (in.query.rows() != 1 || in.query.cols() != cfg_.query_dim)
        throw InvalidArgument("decode: query must be 1 x " + std::to_string(cfg_.query_dim));
      if (in.embeddings.cols() != cfg_.embed_dim)
        throw InvalidArgument("decode: embeddings must have width " + std::to_string(cfg_.embed_dim));
      auto x = ad::concat_cols<T>({in.embeddings, tape.constant(in.points), ad::broadcast_rows(in.query, n)});
      hidden.push_back(conv1_(tape, x));
      sizes.push_back(n);
    }
    auto h = hidden.size() == 1 ? hidden[0] : ad::concat_rows(std::span<const ad::Var<T>>(hidden));
    ad::Var<T> normed;
    auto gain = tape.param(*bn_gain_);
    auto shift = tape.param(*bn_shift_);
    const T eps = static_cast<T>(cfg_.bn_eps);
    if (mode == Mode::train) {
      ad::BatchStats<T> stats;
      normed = ad::batch_norm_train(h, gain, shift, eps, &stats);
      if (update_running_stats) update_running(stats, h.rows());
    } else {
      normed = ad::batch_norm_eval(h, gain, shift, RowVector<T>(running_mean_->value.row(0)),
                                   RowVector<T>(running_var_->value.row(0)), eps);
    }
    auto out = ad::sigmoid(conv2_(tape, ad::relu(normed)));
    std::vector<ad::Var<T>> maps;
    Index offset = 0;
    for (Index n : sizes) {
      maps.push_back(sizes.size() == 1 ? out : ad::slice_rows(out, offset, n));
      offset += n;
    }
    return maps;
  }

  ad::Var<T> decode(ad::Tape<T>& tape, const ad::Var<T>& embeddings, const Matrix<T>& points,
                    const ad::Var<T>& query, Mode mode, bool update_running_stats = true) const {
    const DecoderInput<T> in{embeddings, points, query};
    return decode_batch(tape, std::span<const DecoderInput<T>>(&in, 1), mode, update_running_stats)[0];
  }

 private:
  void update_running(const ad::BatchStats<T>& stats, Index n) const {
    const T m = static_cast<T>(cfg_.bn_momentum);
    const T unbias = n > 1 ? T(n) / T(n - 1) : T(1);
    running_mean_->value = (T(1) - m) * running_mean_->value + m * Matrix<T>(stats.mean);
    running_var_->value = (T(1) - m) * running_var_->value + m * Matrix<T>(stats.var * unbias);
    batches_tracked_->value(0, 0) += T(1);
  }

  DecoderConfig cfg_;
  LinearLayer<T> conv1_, conv2_;
  Parameter<T>* bn_gain_ = nullptr;
  Parameter<T>* bn_shift_ = nullptr;
  Parameter<T>* running_mean_ = nullptr;
  Parameter<T>* running_var_ = nullptr;
  Parameter<T>* batches_tracked_ = nullptr;
};

}  // namespace pavlm
