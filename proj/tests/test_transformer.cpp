#include <doctest.h>

#include <cmath>
#include <vector>

#include "deformer/gradcheck.hpp"
#include "deformer/transformer.hpp"

using namespace deformer;

namespace {

Mask lower_triangular(Index n) {
  Mask mask(n, n);
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < n; ++c) mask(r, c) = c <= r;
  }
  return mask;
}

Mat<double> random_matrix(Index rows, Index cols, Rng& rng) {
  Mat<double> m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-1.0, 1.0);
  }
  return m;
}

std::vector<LayerParameters<double>> make_layers(const TransformerConfig& cfg, Rng& rng) {
  std::vector<LayerParameters<double>> layers(cfg.n_layers);
  for (auto& layer : layers) layer.init(cfg, rng);
  return layers;
}

}  // namespace

TEST_CASE("single-row attention weight is exactly one") {
  TransformerConfig cfg{.d_model = 4, .n_heads = 2, .d_ff = 8, .n_layers = 1};
  Rng rng(1);
  LayerParameters<double> params;
  params.init(cfg, rng);
  Mask mask = lower_triangular(1);
  Tensor<double> x(random_matrix(1, 4, rng));
  auto out = multi_head_attention(x, mask, params, cfg.n_heads);
  // With one row, attention reduces to the value/output projections.
  auto v = add(matmul(x, params.wv), params.bv);
  auto expected = add(matmul(v, params.wo), params.bo);
  CHECK(out.value().isApprox(expected.value(), 1e-12));
}

TEST_CASE("row visibility alone determines each attention output row") {
  TransformerConfig cfg{.d_model = 6, .n_heads = 3, .d_ff = 12, .n_layers = 1};
  Rng rng(2);
  LayerParameters<double> params;
  params.init(cfg, rng);
  Tensor<double> x(random_matrix(3, 6, rng));

  const Mask causal = lower_triangular(3);
  Mask diagonal = Mask::Constant(3, 3, false);
  for (Index r = 0; r < 3; ++r) diagonal(r, r) = true;
  const Mask full = Mask::Constant(3, 3, true);

  auto causal_out = multi_head_attention(x, causal, params, cfg.n_heads);
  auto diagonal_out = multi_head_attention(x, diagonal, params, cfg.n_heads);
  auto full_out = multi_head_attention(x, full, params, cfg.n_heads);

  // Row 0 sees only itself under both the causal and the diagonal mask.
  CHECK(causal_out.value().row(0) == diagonal_out.value().row(0));
  // The last row sees every row under both the causal and the full mask.
  CHECK(causal_out.value().row(2) == full_out.value().row(2));
  // Rows whose visibility differs must differ.
  CHECK(causal_out.value().row(1) != full_out.value().row(1));
}

TEST_CASE("single-head attention with identity projections matches the hand formula") {
  TransformerConfig cfg{.d_model = 2, .n_heads = 1, .d_ff = 4, .n_layers = 1};
  Rng rng(3);
  LayerParameters<double> params;
  params.init(cfg, rng);
  params.wq = Tensor<double>(Mat<double>::Identity(2, 2), true);
  params.wk = Tensor<double>(Mat<double>::Identity(2, 2), true);
  params.wv = Tensor<double>(Mat<double>::Identity(2, 2), true);
  params.wo = Tensor<double>(Mat<double>::Identity(2, 2), true);
  params.bq = Tensor<double>::zeros(1, 2, true);
  params.bv = Tensor<double>::zeros(1, 2, true);
  params.bo = Tensor<double>::zeros(1, 2, true);

  Mat<double> x(3, 2);
  x << 0.5, -1.0, 1.5, 0.25, -0.75, 2.0;
  const Mask mask = lower_triangular(3);

  auto out = multi_head_attention(Tensor<double>(x), mask, params, 1);

  // Hand computation: weights = row-softmax of masked x x^T / sqrt(2).
  Mat<double> scores = x * x.transpose() / std::sqrt(2.0);
  Mat<double> expected(3, 2);
  for (Index r = 0; r < 3; ++r) {
    double norm = 0.0;
    Vec<double> w = Vec<double>::Zero(3);
    for (Index c = 0; c <= r; ++c) {
      w(c) = std::exp(scores(r, c));
      norm += w(c);
    }
    expected.row(r).setZero();
    for (Index c = 0; c <= r; ++c) expected.row(r) += (w(c) / norm) * x.row(c);
  }
  CHECK(out.value().isApprox(expected, 1e-10));
}

TEST_CASE("attention rejects a mask row with no visible column") {
  TransformerConfig cfg{.d_model = 4, .n_heads = 2, .d_ff = 8, .n_layers = 1};
  Rng rng(4);
  LayerParameters<double> params;
  params.init(cfg, rng);
  Mask mask = lower_triangular(3);
  mask.row(1).setConstant(false);
  Tensor<double> x(random_matrix(3, 4, rng));
  CHECK_THROWS_AS(multi_head_attention(x, mask, params, cfg.n_heads), ShapeError);
}

TEST_CASE("empty encoder stack is the identity") {
  TransformerConfig cfg{.d_model = 4, .n_heads = 2, .d_ff = 8, .n_layers = 0};
  Rng rng(5);
  Tensor<double> x(random_matrix(3, 4, rng));
  auto out = encoder_stack(x, lower_triangular(3), cfg, {});
  CHECK(out.value() == x.value());
}

TEST_CASE("stack is permutation equivariant (no positional encoding)") {
  TransformerConfig cfg{.d_model = 8, .n_heads = 2, .d_ff = 16, .n_layers = 2};
  Rng rng(6);
  auto layers = make_layers(cfg, rng);

  const Index n = 5;
  Mat<double> x = random_matrix(n, 8, rng);
  Mask mask(n, n);
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < n; ++c) mask(r, c) = c <= r || rng.uniform() < 0.4;
  }

  std::vector<Index> perm = {3, 0, 4, 1, 2};
  Mat<double> px(n, 8);
  Mask pmask(n, n);
  for (Index r = 0; r < n; ++r) {
    px.row(r) = x.row(perm[r]);
    for (Index c = 0; c < n; ++c) pmask(r, c) = mask(perm[r], perm[c]);
  }

  auto out = encoder_stack(Tensor<double>(x), mask, cfg, layers);
  auto pout = encoder_stack(Tensor<double>(px), pmask, cfg, layers);
  for (Index r = 0; r < n; ++r) {
    CHECK((pout.value().row(r) - out.value().row(perm[r])).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("causal stack outputs are bitwise invariant to later-row changes") {
  TransformerConfig cfg{.d_model = 8, .n_heads = 4, .d_ff = 16, .n_layers = 3};
  Rng rng(7);
  auto layers = make_layers(cfg, rng);

  const Index n = 5;
  Mat<double> x = random_matrix(n, 8, rng);
  Mat<double> perturbed = x;
  perturbed.row(3).setConstant(123.0);
  perturbed.row(4).setConstant(-55.5);

  const Mask mask = lower_triangular(n);
  auto out = encoder_stack(Tensor<double>(x), mask, cfg, layers);
  auto pout = encoder_stack(Tensor<double>(perturbed), mask, cfg, layers);
  for (Index r = 0; r < 3; ++r) {
    CHECK(out.value().row(r) == pout.value().row(r));
  }
  CHECK(out.value().row(3) != pout.value().row(3));
}

TEST_CASE("two-layer stack gradient matches finite differences") {
  TransformerConfig cfg{.d_model = 8, .n_heads = 2, .d_ff = 12, .n_layers = 2};
  Rng rng(8);
  auto layers = make_layers(cfg, rng);
  const Index n = 4;
  const Mask mask = lower_triangular(n);

  std::vector<Tensor<double>> point;
  point.emplace_back(random_matrix(n, 8, rng), true);
  ParamList<double> params;
  layers[0].collect("l0", params);
  layers[1].collect("l1", params);
  for (auto& [name, tensor] : params) point.push_back(tensor);

  Tensor<double> weights(random_matrix(n, 8, rng));
  auto f = [&](const std::vector<Tensor<double>>& xs) {
    return sum_all(mul(encoder_stack(xs[0], mask, cfg, layers), weights));
  };
  CHECK(finite_difference_check<double>(f, point, 1e-5) < 1e-5);
}

TEST_CASE("dropout inside the stack consumes the stream deterministically") {
  TransformerConfig cfg{.d_model = 4, .n_heads = 2, .d_ff = 8, .n_layers = 1, .dropout_p = 0.2};
  Rng rng(9);
  auto layers = make_layers(cfg, rng);
  Tensor<double> x(random_matrix(3, 4, rng));
  const Mask mask = lower_triangular(3);

  Rng d1(77), d2(77), d3(78);
  auto a = encoder_stack(x, mask, cfg, layers, &d1);
  auto b = encoder_stack(x, mask, cfg, layers, &d2);
  auto c = encoder_stack(x, mask, cfg, layers, &d3);
  CHECK(a.value() == b.value());
  CHECK(a.value() != c.value());

  // Without a stream, dropout is off and the stack is deterministic.
  auto e1 = encoder_stack(x, mask, cfg, layers);
  auto e2 = encoder_stack(x, mask, cfg, layers);
  CHECK(e1.value() == e2.value());
}

TEST_CASE("config validation") {
  TransformerConfig bad{.d_model = 10, .n_heads = 3, .d_ff = 8, .n_layers = 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  TransformerConfig bad_dropout{.d_model = 8, .n_heads = 2, .d_ff = 8, .n_layers = 1, .dropout_p = 1.0};
  CHECK_THROWS_AS(bad_dropout.validate(), ConfigError);
}
