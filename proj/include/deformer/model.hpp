#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deformer/transformer.hpp"

namespace deformer {

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

// A feature is named by what it is, not where it sits in the input: a pixel
// coordinate for images, a column index for tabular data.
struct FeatureIdentity {
  enum class Kind { pixel, column };
  Kind kind = Kind::column;
  int row = 0;
  int col = 0;
  int index = 0;

  static FeatureIdentity pixel(int row, int col) {
    FeatureIdentity id;
    id.kind = Kind::pixel;
    id.row = row;
    id.col = col;
    return id;
  }
  static FeatureIdentity column(int index) {
    FeatureIdentity id;
    id.kind = Kind::column;
    id.index = index;
    return id;
  }
};

struct FeatureValue {
  enum class Kind { discrete, continuous };
  Kind kind = Kind::discrete;
  int label = 0;
  double value = 0.0;

  static FeatureValue discrete(int label) {
    FeatureValue v;
    v.kind = Kind::discrete;
    v.label = label;
    return v;
  }
  static FeatureValue continuous(double value) {
    FeatureValue v;
    v.kind = Kind::continuous;
    v.value = value;
    return v;
  }
};

using SampleFeatures = std::vector<std::pair<FeatureIdentity, FeatureValue>>;

// One data sample under one ordering: the permutation plus the sequence of
// (identity, value) pairs it induces.
struct OrderedSample {
  std::vector<int> ordering;
  SampleFeatures pairs;

  int dim() const { return static_cast<int>(pairs.size()); }
};

inline void validate_ordering(const std::vector<int>& ordering, std::size_t dim) {
  if (ordering.size() != dim) {
    throw DataError("ordering has " + std::to_string(ordering.size()) + " entries for " +
                    std::to_string(dim) + " features");
  }
  std::vector<bool> seen(dim, false);
  for (int index : ordering) {
    if (index < 0 || static_cast<std::size_t>(index) >= dim || seen[index]) {
      throw DataError("ordering is not a permutation of 0.." + std::to_string(dim - 1));
    }
    seen[index] = true;
  }
}

inline OrderedSample order_features(const SampleFeatures& canonical, std::vector<int> ordering) {
  if (canonical.empty()) throw DataError("zero-feature samples are rejected");
  validate_ordering(ordering, canonical.size());
  OrderedSample sample;
  sample.pairs.reserve(canonical.size());
  for (int index : ordering) sample.pairs.push_back(canonical[index]);
  sample.ordering = std::move(ordering);
  return sample;
}

// Uniform random permutation of 0..dim-1 (Fisher-Yates).
inline std::vector<int> shuffle_ordering(int dim, Rng& rng) {
  if (dim < 1) throw DataError("shuffle_ordering: dimension must be >= 1");
  std::vector<int> ordering(dim);
  for (int i = 0; i < dim; ++i) ordering[i] = i;
  for (int i = dim - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
    std::swap(ordering[i], ordering[j]);
  }
  return ordering;
}

inline std::vector<int> identity_ordering(int dim) {
  std::vector<int> ordering(dim);
  for (int i = 0; i < dim; ++i) ordering[i] = i;
  return ordering;
}

// Canonical feature builders.
inline SampleFeatures image_features(const std::vector<std::uint8_t>& image, int rows, int cols) {
  if (image.size() != static_cast<std::size_t>(rows) * cols) {
    throw DataError("image has " + std::to_string(image.size()) + " pixels, expected " +
                    std::to_string(rows * cols));
  }
  SampleFeatures features;
  features.reserve(image.size());
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      features.emplace_back(FeatureIdentity::pixel(r, c), FeatureValue::discrete(image[r * cols + c]));
    }
  }
  return features;
}

inline SampleFeatures row_features(const Vec<double>& row) {
  SampleFeatures features;
  features.reserve(row.size());
  for (Index c = 0; c < row.size(); ++c) {
    features.emplace_back(FeatureIdentity::column(static_cast<int>(c)), FeatureValue::continuous(row(c)));
  }
  return features;
}

inline SampleFeatures binary_column_features(std::span<const std::uint8_t> bits) {
  SampleFeatures features;
  features.reserve(bits.size());
  for (std::size_t c = 0; c < bits.size(); ++c) {
    features.emplace_back(FeatureIdentity::column(static_cast<int>(c)), FeatureValue::discrete(bits[c]));
  }
  return features;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class HeadKind { bernoulli, categorical, mixture };
enum class IdentityMode { pixel, tabular };

struct HeadConfig {
  HeadKind kind = HeadKind::bernoulli;
  int labels = 2;       // categorical
  int components = 150; // mixture

  int output_width() const {
    switch (kind) {
      case HeadKind::bernoulli:
        return 1;
      case HeadKind::categorical:
        return labels;
      case HeadKind::mixture:
        return 3 * components;
    }
    return 0;
  }
};

struct ModelConfig {
  IdentityMode identity = IdentityMode::pixel;
  int image_rows = 28;
  int image_cols = 28;
  int table_width = 0;  // tabular feature count D
  int embed_dim = 20;
  int mlp_hidden1 = 128;
  int mlp_hidden2 = 256;
  HeadConfig head;
  TransformerConfig tf;

  int dim() const { return identity == IdentityMode::pixel ? image_rows * image_cols : table_width; }

  int identity_width() const { return identity == IdentityMode::pixel ? 2 : embed_dim; }

  // Binary labels enter g_u as one scalar; categorical labels with C > 2 as
  // a one-hot block of width C.
  int value_width() const {
    return head.kind == HeadKind::categorical && head.labels > 2 ? head.labels : 1;
  }

  void validate() const {
    tf.validate();
    if (identity == IdentityMode::pixel) {
      if (image_rows < 1 || image_cols < 1) throw ConfigError("model: image dimensions must be positive");
    } else {
      if (table_width < 1) throw ConfigError("model: table_width must be positive for tabular identities");
      if (embed_dim < 1) throw ConfigError("model: embed_dim must be positive");
    }
    if (mlp_hidden1 < 1 || mlp_hidden2 < 1) throw ConfigError("model: MLP widths must be positive");
    if (head.kind == HeadKind::categorical && head.labels < 2) {
      throw ConfigError("model: categorical head needs at least 2 labels");
    }
    if (head.kind == HeadKind::mixture && head.components < 1) {
      throw ConfigError("model: mixture head needs at least 1 component");
    }
  }
};

// ---------------------------------------------------------------------------
// Mask
// ---------------------------------------------------------------------------

// Lower-triangular 2D x 2D visibility. With rows interleaved z_1, u_1, z_2,
// u_2, ... (0-based indices 2k-2 and 2k-1 for feature k), c <= r realizes
// both dependency rules: z_k2 sees z_k1 for k1 <= k2 and u_k1 for k1 < k2,
// while u_k2 additionally sees u_k2's own feature, i.e. z_k1 and u_k1 for
// k1 <= k2.
inline Mask build_mask(int dim) {
  if (dim < 1) throw ShapeError("build_mask: dimension must be >= 1, got " + std::to_string(dim));
  const Index n = 2 * static_cast<Index>(dim);
  Mask mask(n, n);
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < n; ++c) mask(r, c) = c <= r;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename S>
struct Mlp {
  Tensor<S> w1, b1, w2, b2, w3, b3;

  void init(int in, int hidden1, int hidden2, int out, Rng& rng) {
    w1 = init_linear<S>(in, hidden1, rng);
    b1 = Tensor<S>::zeros(1, hidden1, true);
    w2 = init_linear<S>(hidden1, hidden2, rng);
    b2 = Tensor<S>::zeros(1, hidden2, true);
    w3 = init_linear<S>(hidden2, out, rng);
    b3 = Tensor<S>::zeros(1, out, true);
  }

  // Three layers with ReLU after the first two.
  Tensor<S> forward(const Tensor<S>& x) const {
    auto h1 = relu(add(matmul(x, w1), b1));
    auto h2 = relu(add(matmul(h1, w2), b2));
    return add(matmul(h2, w3), b3);
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
    out.emplace_back(prefix + ".w3", w3);
    out.emplace_back(prefix + ".b3", b3);
  }
};

template <typename S>
struct HeadOutput {
  HeadKind kind;
  S bernoulli_p = S(0);
  Vec<S> probs;  // categorical
  Vec<S> pi, mu, sigma;  // mixture
};

template <typename S>
class DeformerModel {
 public:
  ModelConfig cfg;
  Tensor<S> embedding;  // tabular identities only
  Mlp<S> g_z;
  Mlp<S> g_u;
  std::vector<LayerParameters<S>> layers;
  Tensor<S> head_w, head_b;

  DeformerModel(ModelConfig config, Rng& init_rng) : cfg(std::move(config)) {
    cfg.validate();
    if (cfg.identity == IdentityMode::tabular) {
      Mat<S> table(cfg.table_width, cfg.embed_dim);
      for (Index r = 0; r < table.rows(); ++r) {
        for (Index c = 0; c < table.cols(); ++c) table(r, c) = static_cast<S>(init_rng.normal());
      }
      embedding = Tensor<S>(std::move(table), true);
    }
    const int d_model = cfg.tf.d_model;
    g_z.init(cfg.identity_width(), cfg.mlp_hidden1, cfg.mlp_hidden2, d_model, init_rng);
    g_u.init(cfg.identity_width() + cfg.value_width(), cfg.mlp_hidden1, cfg.mlp_hidden2, d_model, init_rng);
    layers.resize(cfg.tf.n_layers);
    for (auto& layer : layers) layer.init(cfg.tf, init_rng);
    head_w = init_linear<S>(d_model, cfg.head.output_width(), init_rng);
    head_b = Tensor<S>::zeros(1, cfg.head.output_width(), true);
  }

  ParamList<S> parameters() {
    ParamList<S> params;
    if (cfg.identity == IdentityMode::tabular) params.emplace_back("embedding", embedding);
    g_z.collect("g_z", params);
    g_u.collect("g_u", params);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].collect("layers." + std::to_string(i), params);
    }
    params.emplace_back("head.w", head_w);
    params.emplace_back("head.b", head_b);
    return params;
  }

  void zero_grad() {
    for (auto& [name, tensor] : parameters()) tensor.zero_grad();
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, tensor] : parameters()) n += static_cast<std::size_t>(tensor.size());
    return n;
  }

  void check_identity(const FeatureIdentity& id) const {
    if (cfg.identity == IdentityMode::pixel) {
      if (id.kind != FeatureIdentity::Kind::pixel) {
        throw DataError("model expects pixel identities");
      }
      if (id.row < 0 || id.row >= cfg.image_rows || id.col < 0 || id.col >= cfg.image_cols) {
        throw DataError("pixel (" + std::to_string(id.row) + ", " + std::to_string(id.col) +
                        ") outside the " + std::to_string(cfg.image_rows) + "x" +
                        std::to_string(cfg.image_cols) + " grid");
      }
    } else {
      if (id.kind != FeatureIdentity::Kind::column) {
        throw DataError("model expects column identities");
      }
      if (id.index < 0 || id.index >= cfg.table_width) {
        throw DataError("column " + std::to_string(id.index) + " outside table width " +
                        std::to_string(cfg.table_width));
      }
    }
  }

  // Pixel coordinates are scaled to [0, 1] so g_z inputs match the unit
  // scale of the initialization; tabular identities use the embedding table.
  Tensor<S> encode_identities(std::span<const FeatureIdentity> ids) const {
    if (cfg.identity == IdentityMode::pixel) {
      Mat<S> encoded(static_cast<Index>(ids.size()), 2);
      const S row_denominator = static_cast<S>(std::max(cfg.image_rows - 1, 1));
      const S col_denominator = static_cast<S>(std::max(cfg.image_cols - 1, 1));
      for (std::size_t k = 0; k < ids.size(); ++k) {
        check_identity(ids[k]);
        encoded(static_cast<Index>(k), 0) = static_cast<S>(ids[k].row) / row_denominator;
        encoded(static_cast<Index>(k), 1) = static_cast<S>(ids[k].col) / col_denominator;
      }
      return Tensor<S>(std::move(encoded));
    }
    std::vector<int> indices(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      check_identity(ids[k]);
      indices[k] = ids[k].index;
    }
    return embedding_lookup(embedding, indices);
  }

  Vec<S> encode_identity(const FeatureIdentity& id) const {
    const FeatureIdentity ids[1] = {id};
    NoGradGuard no_grad;
    return encode_identities(ids).value().row(0).transpose();
  }

  void check_value(const FeatureValue& value) const {
    switch (cfg.head.kind) {
      case HeadKind::bernoulli:
        if (value.kind != FeatureValue::Kind::discrete || value.label < 0 || value.label > 1) {
          throw DataError("bernoulli head expects discrete values in {0, 1}");
        }
        break;
      case HeadKind::categorical:
        if (value.kind != FeatureValue::Kind::discrete || value.label < 0 ||
            value.label >= cfg.head.labels) {
          throw DataError("categorical head expects discrete labels in [0, " +
                          std::to_string(cfg.head.labels) + ")");
        }
        break;
      case HeadKind::mixture:
        if (value.kind != FeatureValue::Kind::continuous) {
          throw DataError("mixture head expects continuous values");
        }
        break;
    }
  }

  // Row 2k-2 (0-based) is g_z(e(i_k)), row 2k-1 is g_u([e(i_k), v_k]).
  Tensor<S> interleaved_input(const OrderedSample& sample) const {
    const int dim = sample.dim();
    if (dim < 1) throw DataError("zero-feature samples are rejected");
    std::vector<FeatureIdentity> ids(dim);
    Mat<S> values(dim, cfg.value_width());
    values.setZero();
    for (int k = 0; k < dim; ++k) {
      ids[k] = sample.pairs[k].first;
      const FeatureValue& v = sample.pairs[k].second;
      check_value(v);
      if (v.kind == FeatureValue::Kind::discrete) {
        if (cfg.value_width() == 1) {
          values(k, 0) = static_cast<S>(v.label);
        } else {
          values(k, v.label) = S(1);
        }
      } else {
        values(k, 0) = static_cast<S>(v.value);
      }
    }
    auto encoded = encode_identities(ids);
    auto z_rows = g_z.forward(encoded);
    auto u_rows = g_u.forward(concat_cols(encoded, Tensor<S>(std::move(values))));
    return interleave_rows(z_rows, u_rows);
  }

  // Full forward pass: D x output_width, read at the z rows of the stack.
  Tensor<S> head_matrix(const OrderedSample& sample, Rng* dropout_rng = nullptr) const {
    auto stacked = encoder_stack(interleaved_input(sample), build_mask(sample.dim()), cfg.tf, layers,
                                 dropout_rng);
    return add(matmul(even_rows(stacked), head_w), head_b);
  }
};

// ---------------------------------------------------------------------------
// Heads and losses
// ---------------------------------------------------------------------------

template <typename S>
std::vector<HeadOutput<S>> forward_heads(const DeformerModel<S>& model, const OrderedSample& sample) {
  NoGradGuard no_grad;
  const Mat<S> out = model.head_matrix(sample).value();
  const int dim = sample.dim();
  std::vector<HeadOutput<S>> heads(dim);
  const int components = model.cfg.head.components;
  for (int k = 0; k < dim; ++k) {
    HeadOutput<S>& head = heads[k];
    head.kind = model.cfg.head.kind;
    switch (model.cfg.head.kind) {
      case HeadKind::bernoulli: {
        const S logit = out(k, 0);
        head.bernoulli_p = logit >= S(0) ? S(1) / (S(1) + std::exp(-logit))
                                         : std::exp(logit) / (S(1) + std::exp(logit));
        break;
      }
      case HeadKind::categorical: {
        Vec<S> row = out.row(k).transpose();
        row.array() -= row.maxCoeff();
        head.probs = row.array().exp();
        head.probs /= head.probs.sum();
        break;
      }
      case HeadKind::mixture: {
        Vec<S> pi_logits = out.row(k).segment(0, components).transpose();
        pi_logits.array() -= pi_logits.maxCoeff();
        head.pi = pi_logits.array().exp();
        head.pi /= head.pi.sum();
        head.sigma = out.row(k)
                         .segment(components, components)
                         .transpose()
                         .array()
                         .min(exp_arg_cap<S>())
                         .exp()
                         .max(S(1e-4))
                         .min(S(1e4));
        head.mu = out.row(k).segment(2 * components, components).transpose();
        break;
      }
    }
  }
  return heads;
}

// Sum over features of -ln p_k(v_k), in nats, computed by teacher forcing in
// one forward pass.
template <typename S>
Tensor<S> nll_discrete(const DeformerModel<S>& model, const OrderedSample& sample,
                       Rng* dropout_rng = nullptr) {
  if (model.cfg.head.kind == HeadKind::mixture) {
    throw DataError("nll_discrete requires a bernoulli or categorical head");
  }
  auto out = model.head_matrix(sample, dropout_rng);
  const int dim = sample.dim();
  Tensor<S> picked;
  if (model.cfg.head.kind == HeadKind::bernoulli) {
    Mat<S> labels(dim, 1);
    for (int k = 0; k < dim; ++k) labels(k, 0) = static_cast<S>(sample.pairs[k].second.label);
    Tensor<S> v(labels);
    Tensor<S> one_minus_v(Mat<S>(Mat<S>::Ones(dim, 1) - labels));
    auto p = sigmoid(out);
    auto one_minus_p = add_scalar(scale(p, S(-1)), S(1));
    picked = add(mul(v, p), mul(one_minus_v, one_minus_p));
  } else {
    std::vector<int> labels(dim);
    for (int k = 0; k < dim; ++k) labels[k] = sample.pairs[k].second.label;
    picked = gather_per_row(softmax_rows(out), labels);
  }
  return scale(sum_all(log(picked)), S(-1));
}

// Mixture-of-Gaussians NLL, computed in log space via log-sum-exp over the
// (ln pi + ln density) terms so large component counts cannot underflow.
template <typename S>
Tensor<S> nll_continuous(const DeformerModel<S>& model, const OrderedSample& sample,
                         Rng* dropout_rng = nullptr) {
  if (model.cfg.head.kind != HeadKind::mixture) {
    throw DataError("nll_continuous requires a mixture head");
  }
  const int components = model.cfg.head.components;
  const int dim = sample.dim();
  auto out = model.head_matrix(sample, dropout_rng);

  auto pi_logits = slice_cols(out, 0, components);
  auto sigma = clamp(deformer::exp(slice_cols(out, components, components)), S(1e-4), S(1e4));
  auto mu = slice_cols(out, 2 * components, components);

  auto log_pi = sub(pi_logits, matmul(logsumexp_rows(pi_logits), Tensor<S>::ones(1, components)));

  Mat<S> values(dim, 1);
  for (int k = 0; k < dim; ++k) values(k, 0) = static_cast<S>(sample.pairs[k].second.value);
  Tensor<S> value_block(Mat<S>(values * Mat<S>::Ones(1, components)));

  auto standardized = div(sub(value_block, mu), sigma);
  const S half_log_two_pi = S(0.5) * std::log(S(2) * static_cast<S>(M_PI));
  auto log_density = sub(add_scalar(scale(mul(standardized, standardized), S(-0.5)), -half_log_two_pi),
                         deformer::log(sigma));
  auto log_likelihood = logsumexp_rows(add(log_pi, log_density));
  return scale(sum_all(log_likelihood), S(-1));
}

template <typename S>
Tensor<S> nll(const DeformerModel<S>& model, const OrderedSample& sample, Rng* dropout_rng = nullptr) {
  return model.cfg.head.kind == HeadKind::mixture ? nll_continuous(model, sample, dropout_rng)
                                                  : nll_discrete(model, sample, dropout_rng);
}

}  // namespace deformer
