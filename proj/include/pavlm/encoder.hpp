#pragma once

// Geometric-guided point encoder: patch features, positional embeddings,
// transformer blocks with a gated geometric cross-attention residual, and
// feature propagation back to every input point.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "pavlm/autodiff.hpp"
#include "pavlm/layers.hpp"
#include "pavlm/params.hpp"
#include "pavlm/pointcloud.hpp"

namespace pavlm {

struct EncoderConfig {
  Index model_dim = 64;        // D; attention scores are scaled by 1/sqrt(D)
  Index n_layers = 3;
  Index n_heads = 4;           // self-attention heads; the geometric cross-attention is single-head
  Index n_groups = 8;          // K
  Index group_size = 64;       // G
  Index propagation_knn = 16;
  Index out_dim = 64;          // D_out
  Index patch_hidden = 32;     // width of the first pointwise convolution

  void validate() const {
    if (model_dim <= 0 || out_dim <= 0) throw InvalidArgument("encoder: model_dim and out_dim must be positive");
    if (n_layers < 1) throw InvalidArgument("encoder: n_layers must be >= 1");
    if (n_heads < 1 || model_dim % n_heads != 0) throw InvalidArgument("encoder: model_dim must divide into n_heads");
    if (n_groups < 1 || group_size < 1 || propagation_knn < 1 || patch_hidden < 1)
      throw InvalidArgument("encoder: group and neighbour counts must be positive");
  }
};

// Everything about a cloud that the encoder needs and that does not depend on
// parameters. Built once per cloud and reusable across steps.
template <class T>
struct EncoderGeometry {
  Index n_points = 0;
  PatchSet patches;
  Matrix<T> points;           // N x 3
  Matrix<T> relative;         // (K*G) x 3, member minus its center
  Matrix<T> centers;          // K x 3
  Matrix<Index> interp_index; // N x m nearest centers (m = min(3, K))
  Matrix<T> interp_weight;    // N x m, rows sum to 1
  Matrix<Index> neighbors;    // N x k nearest points (self first)
};

inline constexpr double kInterpolationEps = 1e-8;

// Inverse-distance weights over the (up to) three nearest centers of each point.
inline void interpolation_weights(const Matrix<double>& points, const Matrix<double>& centers, Matrix<Index>& index,
                                  Matrix<double>& weight) {
  const Index n = points.rows(), k = centers.rows();
  const Index m = std::min<Index>(3, k);
  index.resize(n, m);
  weight.resize(n, m);
  for (Index i = 0; i < n; ++i) {
    const auto nn = nearest_indices(centers, points.row(i), m);
    double total = 0.0;
    for (Index j = 0; j < m; ++j) {
      const Index c = nn[static_cast<std::size_t>(j)];
      const double w = 1.0 / ((points.row(i) - centers.row(c)).norm() + kInterpolationEps);
      index(i, j) = c;
      weight(i, j) = w;
      total += w;
    }
    weight.row(i) /= total;
  }
}

template <class T>
EncoderGeometry<T> build_geometry(const PointCloud& pc, const EncoderConfig& cfg) {
  cfg.validate();
  pc.validate();
  const Index n = pc.size();
  if (cfg.n_groups > n) throw InvalidArgument("encoder: more groups than points");
  EncoderGeometry<T> g;
  g.n_points = n;
  g.patches = knn_group(pc, farthest_point_sample(pc, cfg.n_groups), std::min(cfg.group_size, n));
  const Index k = g.patches.groups(), gs = g.patches.group_size();
  g.points = pc.points.template cast<T>();
  g.centers = g.patches.centers.template cast<T>();
  g.relative.resize(k * gs, 3);
  for (Index c = 0; c < k; ++c)
    for (Index j = 0; j < gs; ++j)
      g.relative.row(c * gs + j) = (pc.points.row(g.patches.members(c, j)) - g.patches.centers.row(c)).template cast<T>();
  Matrix<double> w;
  interpolation_weights(pc.points, g.patches.centers, g.interp_index, w);
  g.interp_weight = w.template cast<T>();
  const Index knn = std::min(cfg.propagation_knn, n);
  g.neighbors.resize(n, knn);
  for (Index i = 0; i < n; ++i) {
    const auto nn = nearest_indices(pc.points, pc.points.row(i), knn, i);
    for (Index j = 0; j < knn; ++j) g.neighbors(i, j) = nn[static_cast<std::size_t>(j)];
  }
  return g;
}

// Common interface for the geometric encoder and the baseline control arm.
template <class T>
class PointEncoder {
 public:
  virtual ~PointEncoder() = default;
  // Returns P_em, N x out_dim, row i aligned with point i.
  virtual ad::Var<T> forward(ad::Tape<T>& tape, const EncoderGeometry<T>& geom) const = 0;
  virtual Index out_dim() const = 0;
};

template <class T>
struct PatchFeatures {
  ad::Var<T> f;  // K x D pooled patch features
  ad::Var<T> p;  // K x D positional embeddings
};

template <class T>
struct EncoderTrace {
  std::vector<ad::Var<T>> block_out;      // F_j (before the geometric residual)
  std::vector<ad::Var<T>> fused;          // F^_j
  std::vector<Matrix<T>> cross_attention;  // K x K row-stochastic, one per layer
  ad::Var<T> geometric_tokens;            // g_f
};

template <class T>
class GeometricEncoder final : public PointEncoder<T> {
 public:
  GeometricEncoder(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng, const std::string& prefix = "encoder")
      : cfg_(cfg) {
    cfg_.validate();
    const Index d = cfg_.model_dim;
    patch1_ = LinearLayer<T>::make(store, prefix + ".patch.conv1", 3, cfg_.patch_hidden, rng);
    patch2_ = LinearLayer<T>::make(store, prefix + ".patch.conv2", cfg_.patch_hidden, d, rng);
    pos1_ = LinearLayer<T>::make(store, prefix + ".pos.fc1", 3, d, rng);
    pos2_ = LinearLayer<T>::make(store, prefix + ".pos.fc2", d, d, rng);
    geo1_ = LinearLayer<T>::make(store, prefix + ".geo.fc1", d, d, rng);
    geo2_ = LinearLayer<T>::make(store, prefix + ".geo.fc2", d, d, rng);
    for (Index j = 0; j < cfg_.n_layers; ++j) {
      const std::string b = prefix + ".block" + std::to_string(j);
      Block blk;
      blk.ln1 = LayerNormLayer<T>::make(store, b + ".ln1", d);
      blk.q = LinearLayer<T>::make(store, b + ".attn.q", d, d, rng);
      blk.k = LinearLayer<T>::make(store, b + ".attn.k", d, d, rng);
      blk.v = LinearLayer<T>::make(store, b + ".attn.v", d, d, rng);
      blk.o = LinearLayer<T>::make(store, b + ".attn.out", d, d, rng);
      blk.ln2 = LayerNormLayer<T>::make(store, b + ".ln2", d);
      blk.ff1 = LinearLayer<T>::make(store, b + ".ffn.fc1", d, 2 * d, rng);
      blk.ff2 = LinearLayer<T>::make(store, b + ".ffn.fc2", 2 * d, d, rng);
      blk.gate = &store.add_constant(b + ".gate", 1, 1, T(0));
      blocks_.push_back(blk);
    }
    const Index prop_in = 3 * d + 3;
    edge_weight_ = &store.add_xavier(prefix + ".prop.edge.weight", d, 2 * prop_in, rng);
    edge_bias_ = &store.add_constant(prefix + ".prop.edge.bias", 1, d, T(0));
    edge2_ = LinearLayer<T>::make(store, prefix + ".prop.edge2", d, d, rng);
    skip1_ = LinearLayer<T>::make(store, prefix + ".prop.skip1", 3, d, rng);
    skip2_ = LinearLayer<T>::make(store, prefix + ".prop.skip2", d, d, rng);
    out_ = LinearLayer<T>::make(store, prefix + ".prop.out", 5 * d, cfg_.out_dim, rng);
  }

  const EncoderConfig& config() const { return cfg_; }
  Index out_dim() const override { return cfg_.out_dim; }

  // f_i: max over group members of a shared two-layer pointwise map of
  // center-relative coordinates. p_i: two-layer map of the center coordinates.
  PatchFeatures<T> embed_patches(ad::Tape<T>& tape, const EncoderGeometry<T>& geom) const {
    if (geom.relative.cols() != 3 || geom.centers.cols() != 3)
      throw InvalidArgument("embed_patches: expected 3-D coordinates");
    const Index gs = geom.patches.group_size();
    auto rel = tape.constant(geom.relative);
    auto h = ad::relu(patch1_(tape, rel));
    auto f = ad::group_max(patch2_(tape, h), gs);
    auto centers = tape.constant(geom.centers);
    auto p = pos2_(tape, ad::gelu(pos1_(tape, centers)));
    return {f, p};
  }

  // g_f = G(f, p): token-wise two-layer network over f + p.
  ad::Var<T> geometric_extract(ad::Tape<T>& tape, const ad::Var<T>& f, const ad::Var<T>& p) const {
    if (f.rows() != p.rows() || f.cols() != p.cols())
      throw InvalidArgument("geometric_extract: f and p shapes differ");
    return geo2_(tape, ad::gelu(geo1_(tape, ad::add(f, p))));
  }

  // Runs the transformer stack. Each layer: pre-norm multi-head self-attention
  // and feed-forward give F_j, then
  //   F^_j = F_j + gate_j * softmax(F_j g_f^T / sqrt(D)) g_f.
  EncoderTrace<T> encoder_forward(ad::Tape<T>& tape, const ad::Var<T>& f, const ad::Var<T>& p,
                                  const ad::Var<T>& g_f) const {
    EncoderTrace<T> trace;
    trace.geometric_tokens = g_f;
    const Index d = cfg_.model_dim;
    const T inv_sqrt_d = T(1) / std::sqrt(T(d));
    auto x = ad::add(f, p);
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      const Block& blk = blocks_[j];
      x = ad::add(x, self_attention(tape, blk, blk.ln1(tape, x)));
      auto h = blk.ln2(tape, x);
      x = ad::add(x, blk.ff2(tape, ad::gelu(blk.ff1(tape, h))));
      trace.block_out.push_back(x);
      auto attn = ad::softmax_rows(ad::scale(ad::matmul_nt(x, g_f), inv_sqrt_d));
      trace.cross_attention.push_back(attn.value());
      auto fused = ad::add(x, ad::mul_scalar(ad::matmul(attn, g_f), tape.param(*blk.gate)));
      if (!fused.value().allFinite())
        throw NumericalError("encoder: non-finite activations at layer " + std::to_string(j + 1));
      trace.fused.push_back(fused);
      x = fused;
    }
    return trace;
  }

  // Upsamples F1, F2 and the final fused features from the K centers to all N
  // points by inverse-distance interpolation, refines with an edge
  // convolution over the k-NN graph, and projects the concatenation to D_out.
  ad::Var<T> propagate_features(ad::Tape<T>& tape, const ad::Var<T>& f1, const ad::Var<T>& f2,
                                const ad::Var<T>& f_final, const EncoderGeometry<T>& geom) const {
    auto i1 = ad::weighted_gather(f1, geom.interp_index, geom.interp_weight);
    auto i2 = ad::weighted_gather(f2, geom.interp_index, geom.interp_weight);
    auto i3 = ad::weighted_gather(f_final, geom.interp_index, geom.interp_weight);
    auto xyz = tape.constant(geom.points);
    auto x = ad::concat_cols<T>({i1, i2, i3, xyz});
    const Index c = x.cols();
    auto w = tape.param(*edge_weight_);
    auto w_self = ad::slice_cols(w, 0, c);
    auto w_diff = ad::slice_cols(w, c, c);
    // first layer: W [x_i ; x_j - x_i] = (W_self - W_diff) x_i + W_diff x_j
    auto u = ad::linear(x, ad::sub(w_self, w_diff));
    auto v = ad::linear(x, w_diff);
    auto h = ad::relu(ad::add_row(ad::edge_rows(u, v, geom.neighbors), tape.param(*edge_bias_)));
    auto edge = ad::group_max(ad::relu(edge2_(tape, h)), geom.neighbors.cols());
    auto skip = ad::relu(skip2_(tape, ad::relu(skip1_(tape, xyz))));
    return out_(tape, ad::concat_cols<T>({i1, i2, i3, edge, skip}));
  }

  ad::Var<T> forward(ad::Tape<T>& tape, const EncoderGeometry<T>& geom) const override {
    return forward_traced(tape, geom, nullptr);
  }

  ad::Var<T> forward_traced(ad::Tape<T>& tape, const EncoderGeometry<T>& geom, EncoderTrace<T>* out_trace) const {
    auto pf = embed_patches(tape, geom);
    auto g_f = geometric_extract(tape, pf.f, pf.p);
    auto trace = encoder_forward(tape, pf.f, pf.p, g_f);
    const auto& fused = trace.fused;
    auto f1 = fused[0];
    auto f2 = fused[std::min<std::size_t>(1, fused.size() - 1)];
    auto p_em = propagate_features(tape, f1, f2, fused.back(), geom);
    if (out_trace != nullptr) *out_trace = std::move(trace);
    return p_em;
  }

 private:
  struct Block {
    LayerNormLayer<T> ln1, ln2;
    LinearLayer<T> q, k, v, o, ff1, ff2;
    Parameter<T>* gate = nullptr;
  };

  ad::Var<T> self_attention(ad::Tape<T>& tape, const Block& blk, const ad::Var<T>& h) const {
    const Index d = cfg_.model_dim, heads = cfg_.n_heads, dh = d / heads;
    auto q = blk.q(tape, h), k = blk.k(tape, h), v = blk.v(tape, h);
    const T inv = T(1) / std::sqrt(T(dh));
    std::vector<ad::Var<T>> outs;
    for (Index hd = 0; hd < heads; ++hd) {
      auto qh = ad::slice_cols(q, hd * dh, dh);
      auto kh = ad::slice_cols(k, hd * dh, dh);
      auto vh = ad::slice_cols(v, hd * dh, dh);
      auto a = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv));
      outs.push_back(ad::matmul(a, vh));
    }
    auto merged = heads == 1 ? outs[0] : ad::concat_cols(std::span<const ad::Var<T>>(outs));
    return blk.o(tape, merged);
  }

  EncoderConfig cfg_;
  LinearLayer<T> patch1_, patch2_, pos1_, pos2_, geo1_, geo2_, edge2_, skip1_, skip2_, out_;
  std::vector<Block> blocks_;
  Parameter<T>* edge_weight_ = nullptr;
  Parameter<T>* edge_bias_ = nullptr;
};

// Control arm without patch grouping or propagation: shared per-point
// two-layer map, global max-pool, broadcast-concatenate, project.
template <class T>
class BaselineEncoder final : public PointEncoder<T> {
 public:
  BaselineEncoder(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng, const std::string& prefix = "encoder")
      : cfg_(cfg) {
    const Index d = cfg_.model_dim;
    fc1_ = LinearLayer<T>::make(store, prefix + ".point.fc1", 3, d, rng);
    fc2_ = LinearLayer<T>::make(store, prefix + ".point.fc2", d, d, rng);
    out_ = LinearLayer<T>::make(store, prefix + ".out", 2 * d, cfg_.out_dim, rng);
  }

  Index out_dim() const override { return cfg_.out_dim; }

  ad::Var<T> forward(ad::Tape<T>& tape, const EncoderGeometry<T>& geom) const override {
    auto xyz = tape.constant(geom.points);
    auto h = ad::relu(fc2_(tape, ad::relu(fc1_(tape, xyz))));
    auto global = ad::broadcast_rows(ad::max_rows(h), h.rows());
    return out_(tape, ad::concat_cols<T>({h, global}));
  }

 private:
  EncoderConfig cfg_;
  LinearLayer<T> fc1_, fc2_, out_;
};

}  // namespace pavlm
