#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "deformer/ops.hpp"
#include "deformer/rng.hpp"
#include "deformer/tensor.hpp"

namespace deformer {

struct TransformerConfig {
  int d_model = 512;
  int n_heads = 8;
  int d_ff = 2048;
  int n_layers = 6;
  double dropout_p = 0.0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_ff < 1 || n_layers < 0) {
      throw ConfigError("transformer: dimensions must be positive (layers may be 0)");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("transformer: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
      throw ConfigError("transformer: dropout must be in [0, 1), got " + std::to_string(dropout_p));
    }
  }
};

using ParamEntry = std::pair<std::string, int>;

template <typename S>
using ParamList = std::vector<std::pair<std::string, Tensor<S>>>;

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization for projections.
template <typename S>
Tensor<S> init_linear(Index fan_in, Index fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Mat<S> w(fan_in, fan_out);
  for (Index r = 0; r < fan_in; ++r) {
    for (Index c = 0; c < fan_out; ++c) w(r, c) = static_cast<S>(rng.uniform(-bound, bound));
  }
  return Tensor<S>(std::move(w), true);
}

// The key projection carries no bias: a key bias shifts every visible logit
// in a row equally, which the row softmax cancels, leaving a parameter with
// an identically zero gradient.
template <typename S>
struct LayerParameters {
  Tensor<S> wq, bq, wk, wv, bv, wo, bo;
  Tensor<S> w1, b1, w2, b2;
  Tensor<S> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  void init(const TransformerConfig& cfg, Rng& rng) {
    const Index d = cfg.d_model;
    const Index ff = cfg.d_ff;
    wq = init_linear<S>(d, d, rng);
    wk = init_linear<S>(d, d, rng);
    wv = init_linear<S>(d, d, rng);
    wo = init_linear<S>(d, d, rng);
    bq = Tensor<S>::zeros(1, d, true);
    bv = Tensor<S>::zeros(1, d, true);
    bo = Tensor<S>::zeros(1, d, true);
    w1 = init_linear<S>(d, ff, rng);
    b1 = Tensor<S>::zeros(1, ff, true);
    w2 = init_linear<S>(ff, d, rng);
    b2 = Tensor<S>::zeros(1, d, true);
    ln1_gain = Tensor<S>(Mat<S>::Ones(1, d), true);
    ln1_bias = Tensor<S>::zeros(1, d, true);
    ln2_gain = Tensor<S>(Mat<S>::Ones(1, d), true);
    ln2_bias = Tensor<S>::zeros(1, d, true);
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".bq", bq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".bv", bv);
    out.emplace_back(prefix + ".wo", wo);
    out.emplace_back(prefix + ".bo", bo);
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
    out.emplace_back(prefix + ".ln1_gain", ln1_gain);
    out.emplace_back(prefix + ".ln1_bias", ln1_bias);
    out.emplace_back(prefix + ".ln2_gain", ln2_gain);
    out.emplace_back(prefix + ".ln2_bias", ln2_bias);
  }
};

inline void validate_mask(const Mask& mask, Index length) {
  if (mask.rows() != length || mask.cols() != length) {
    throw ShapeError("attention: mask is " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + " for sequence length " + std::to_string(length));
  }
  for (Index r = 0; r < mask.rows(); ++r) {
    if (!mask.row(r).any()) {
      throw ShapeError("attention: mask row " + std::to_string(r) +
                       " has no visible column; softmax would renormalize garbage");
    }
  }
}

// Masked multi-head self-attention. mask(r, c) == true lets row r attend to
// column c; blocked logits are filled with -1e9 before the softmax, which
// drives their weights below 1e-30.
template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& x, const Mask& mask, const LayerParameters<S>& params,
                               int n_heads) {
  validate_mask(mask, x.rows());
  const Index d_model = x.cols();
  const Index head_dim = d_model / n_heads;
  const Mask blocked = !mask;
  const S inv_sqrt_dim = S(1) / std::sqrt(static_cast<S>(head_dim));

  auto q = add(matmul(x, params.wq), params.bq);
  auto k = matmul(x, params.wk);
  auto v = add(matmul(x, params.wv), params.bv);

  Tensor<S> heads;
  for (int h = 0; h < n_heads; ++h) {
    auto qh = slice_cols(q, h * head_dim, head_dim);
    auto kh = slice_cols(k, h * head_dim, head_dim);
    auto vh = slice_cols(v, h * head_dim, head_dim);
    auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dim);
    auto weights = softmax_rows(masked_fill(scores, blocked, mask_fill_value<S>()));
    auto attended = matmul(weights, vh);
    heads = h == 0 ? attended : concat_cols(heads, attended);
  }
  return add(matmul(heads, params.wo), params.bo);
}

// Post-norm encoder layer: sublayer -> dropout -> residual add -> layer norm,
// for attention then feed-forward. No positional encoding anywhere.
template <typename S>
Tensor<S> encoder_layer(const Tensor<S>& x, const Mask& mask, const TransformerConfig& cfg,
                        const LayerParameters<S>& params, Rng* dropout_rng) {
  const bool use_dropout = cfg.dropout_p > 0.0 && dropout_rng != nullptr;
  const double keep = 1.0 - cfg.dropout_p;

  auto attended = multi_head_attention(x, mask, params, cfg.n_heads);
  if (use_dropout) attended = dropout(attended, keep, *dropout_rng);
  auto normed = layer_norm_rows(add(x, attended), params.ln1_gain, params.ln1_bias);

  auto hidden = relu(add(matmul(normed, params.w1), params.b1));
  auto ff = add(matmul(hidden, params.w2), params.b2);
  if (use_dropout) ff = dropout(ff, keep, *dropout_rng);
  return layer_norm_rows(add(normed, ff), params.ln2_gain, params.ln2_bias);
}

template <typename S>
Tensor<S> encoder_stack(const Tensor<S>& x, const Mask& mask, const TransformerConfig& cfg,
                        const std::vector<LayerParameters<S>>& layers, Rng* dropout_rng = nullptr) {
  cfg.validate();
  if (static_cast<int>(layers.size()) != cfg.n_layers) {
    throw ConfigError("transformer: " + std::to_string(layers.size()) + " layer parameter sets for " +
                      std::to_string(cfg.n_layers) + " configured layers");
  }
  Tensor<S> out = x;
  for (const auto& layer : layers) out = encoder_layer(out, mask, cfg, layer, dropout_rng);
  return out;
}

}  // namespace deformer
