#pragma once

// Shared helpers for the unit and acceptance suites. Oracles here are kept
// independent of the library code paths they check.

#include <cmath>
#include <cstdint>
#include <vector>

#include "deformer/model.hpp"

namespace deformer::testing {

// Independent enumeration of the two visibility rules, written directly from
// their statement: when processing z_{k2} the model may look at z_{k1} for
// k1 <= k2 and u_{k1} for k1 < k2; when processing u_{k2} it may look at
// z_{k1} and u_{k1} for k1 <= k2. Rows are interleaved z_1, u_1, z_2, u_2...
inline bool rules_allow(Index row, Index col) {
  const bool row_is_z = row % 2 == 0;
  const Index k2 = row / 2 + 1;
  const bool col_is_z = col % 2 == 0;
  const Index k1 = col / 2 + 1;
  if (row_is_z) {
    return col_is_z ? k1 <= k2 : k1 < k2;
  }
  return k1 <= k2;
}

inline ModelConfig tiny_binary_config(int table_width, int d_model = 16, int n_layers = 1,
                                      int n_heads = 2, int d_ff = 32) {
  ModelConfig cfg;
  cfg.identity = IdentityMode::tabular;
  cfg.table_width = table_width;
  cfg.embed_dim = 4;
  cfg.mlp_hidden1 = 8;
  cfg.mlp_hidden2 = 16;
  cfg.head.kind = HeadKind::bernoulli;
  cfg.tf = TransformerConfig{.d_model = d_model, .n_heads = n_heads, .d_ff = d_ff, .n_layers = n_layers,
                             .dropout_p = 0.0};
  return cfg;
}

inline ModelConfig tiny_mixture_config(int table_width, int components, int d_model = 16,
                                       int n_layers = 1, int n_heads = 2, int d_ff = 32) {
  ModelConfig cfg = tiny_binary_config(table_width, d_model, n_layers, n_heads, d_ff);
  cfg.head.kind = HeadKind::mixture;
  cfg.head.components = components;
  return cfg;
}

// Scales the q/k projections so attention leaves its near-uniform init
// regime; finite-difference checks need gradients above the fd noise floor.
template <typename S>
void sharpen_attention(DeformerModel<S>& model, S factor = S(3)) {
  for (auto& layer : model.layers) {
    layer.wq.mutable_value() *= factor;
    layer.wk.mutable_value() *= factor;
  }
}

// Bit pattern for configuration index (lexicographic, x_0 most significant).
inline std::vector<std::uint8_t> bits_of(std::size_t index, int dim) {
  std::vector<std::uint8_t> bits(dim);
  for (int d = dim - 1; d >= 0; --d) {
    bits[d] = index & 1;
    index >>= 1;
  }
  return bits;
}

// The model's joint over all 2^D binary configurations under one fixed
// ordering, obtained by exponentiating the teacher-forced NLL.
template <typename S>
std::vector<double> model_joint_table(const DeformerModel<S>& model, const std::vector<int>& ordering) {
  const int dim = model.cfg.table_width;
  const std::size_t configs = std::size_t{1} << dim;
  std::vector<double> table(configs);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < configs; ++i) {
    const auto bits = bits_of(i, dim);
    const auto sample = order_features(binary_column_features(bits), ordering);
    table[i] = std::exp(-static_cast<double>(nll_discrete(model, sample).value()(0, 0)));
  }
  return table;
}

// Reference mixture density evaluated in plain double arithmetic.
inline double mixture_density(double v, const Vec<double>& pi, const Vec<double>& mu,
                              const Vec<double>& sigma) {
  double density = 0.0;
  for (Index j = 0; j < pi.size(); ++j) {
    const double z = (v - mu(j)) / sigma(j);
    density += pi(j) * std::exp(-0.5 * z * z) / (sigma(j) * std::sqrt(2.0 * M_PI));
  }
  return density;
}

// Trapezoid quadrature of the mixture density over [-50, 50] with step 1e-3.
inline double mixture_quadrature(const Vec<double>& pi, const Vec<double>& mu, const Vec<double>& sigma,
                                 double lo = -50.0, double hi = 50.0, double step = 1e-3) {
  const auto steps = static_cast<std::size_t>((hi - lo) / step);
  double integral = 0.5 * (mixture_density(lo, pi, mu, sigma) + mixture_density(hi, pi, mu, sigma));
  for (std::size_t i = 1; i < steps; ++i) {
    integral += mixture_density(lo + step * static_cast<double>(i), pi, mu, sigma);
  }
  return integral * step;
}

}  // namespace deformer::testing
