#include <doctest.h>

#include <cmath>
#include <vector>

#include "deformer/gradcheck.hpp"
#include "deformer/ops.hpp"
#include "deformer/rng.hpp"
#include "deformer/tensor.hpp"

using namespace deformer;

namespace {

Mat<double> random_matrix(Index rows, Index cols, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Mat<double> m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(lo, hi);
  }
  return m;
}

// Keeps random points away from the kinks of relu/clamp so central
// differences stay valid.
Mat<double> random_matrix_away_from(Index rows, Index cols, Rng& rng, double kink, double margin) {
  Mat<double> m = random_matrix(rows, cols, rng);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      if (std::abs(m(r, c) - kink) < margin) m(r, c) = kink + (m(r, c) >= kink ? margin : -margin);
    }
  }
  return m;
}

// Weights the op output by a fixed random matrix so the functional is never
// degenerate (e.g. sum of softmax rows is constant).
double check_unary(const std::function<Tensor<double>(const Tensor<double>&)>& op, Mat<double> at) {
  std::vector<Tensor<double>> point{Tensor<double>(std::move(at), true)};
  Rng weight_rng(101);
  Tensor<double> probe;
  {
    NoGradGuard no_grad;
    probe = op(point[0]);
  }
  Tensor<double> weights(random_matrix(probe.rows(), probe.cols(), weight_rng));
  auto f = [&](const std::vector<Tensor<double>>& xs) { return sum_all(mul(op(xs[0]), weights)); };
  return finite_difference_check<double>(f, point, 1e-5);
}

}  // namespace

TEST_CASE("matmul identity passthrough") {
  Mat<double> eye = Mat<double>::Identity(2, 2);
  Mat<double> a(2, 2);
  a << 1, 2, 3, 4;
  auto result = matmul(Tensor<double>(eye), Tensor<double>(a));
  CHECK(result.value().isApprox(a));
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
  Tensor<double> a(Mat<double>::Zero(2, 3));
  Tensor<double> b(Mat<double>::Zero(2, 3));
  CHECK_THROWS_WITH_AS(matmul(a, b), "matmul: shape mismatch 2x3 vs 2x3", ShapeError);
}

TEST_CASE("softmax of a symmetric row is uniform") {
  Mat<double> x(1, 2);
  x << 0, 0;
  auto y = softmax_rows(Tensor<double>(x));
  CHECK(y.value()(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.value()(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay strictly positive") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Mat<double> x = random_matrix(5, 9, rng, -60.0, 60.0);
    auto y = softmax_rows(Tensor<double>(x));
    for (Index r = 0; r < y.rows(); ++r) {
      CHECK(y.value().row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(y.value().row(r).minCoeff() > 0.0);
    }
  }
}

TEST_CASE("masked logits vanish after softmax") {
  Mat<double> x(1, 2);
  x << 5, 9;
  Mask blocked(1, 2);
  blocked << false, true;
  auto filled = masked_fill(Tensor<double>(x), blocked, mask_fill_value<double>());
  auto weights = softmax_rows(filled);
  CHECK(weights.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(weights.value()(0, 1) < 1e-30);
}

TEST_CASE("backward of x*x at x=3 gives 6") {
  Tensor<double> x(Mat<double>::Constant(1, 1, 3.0), true);
  auto loss = mul(x, x);
  backward(loss);
  CHECK(x.grad()(0, 0) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward of sum(sigmoid(x)) at x=0 gives 0.25 per element") {
  Tensor<double> x(Mat<double>::Zero(3, 2), true);
  auto loss = sum_all(sigmoid(x));
  backward(loss);
  for (Index r = 0; r < 3; ++r) {
    for (Index c = 0; c < 2; ++c) CHECK(x.grad()(r, c) == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("softmax cross-entropy gradient equals softmax minus onehot") {
  Mat<double> z(1, 3);
  z << 1, 2, 3;
  Tensor<double> logits(z, true);
  const int label = 2;

  auto nll = [&](const std::vector<Tensor<double>>& xs) {
    auto probs = softmax_rows(xs[0]);
    auto picked = gather_per_row(probs, {label});
    return scale(sum_all(log(picked)), -1.0);
  };
  std::vector<Tensor<double>> point{logits};
  CHECK(finite_difference_check<double>(nll, point, 1e-5) < 1e-6);

  logits.zero_grad();
  backward(nll({logits}));
  Mat<double> softmax = (z.array() - z.maxCoeff()).exp();
  softmax /= softmax.sum();
  for (Index c = 0; c < 3; ++c) {
    const double expected = softmax(0, c) - (c == label ? 1.0 : 0.0);
    CHECK(logits.grad()(0, c) == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("backward rejects non-scalar losses") {
  Tensor<double> x(Mat<double>::Zero(2, 2), true);
  auto y = relu(x);
  CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("diamond-shaped graph sums the path gradients") {
  // loss = x*x + 3x consumed through two paths; d/dx = 2x + 3 = 7 at x=2.
  Tensor<double> x(Mat<double>::Constant(1, 1, 2.0), true);
  auto loss = add(mul(x, x), scale(x, 3.0));
  backward(loss);
  CHECK(x.grad()(0, 0) == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("gradient accumulates across two backward passes") {
  Tensor<double> x(Mat<double>::Constant(1, 1, 3.0), true);
  backward(mul(x, x));
  backward(mul(x, x));
  CHECK(x.grad()(0, 0) == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("finite differences on x^2 at x=3") {
  std::vector<Tensor<double>> point{Tensor<double>(Mat<double>::Constant(1, 1, 3.0), true)};
  auto f = [](const std::vector<Tensor<double>>& xs) { return mul(xs[0], xs[0]); };
  CHECK(finite_difference_check<double>(f, point, 1e-5) < 1e-6);
}

TEST_CASE("finite differences on a constant function report zero error") {
  std::vector<Tensor<double>> point{Tensor<double>(Mat<double>::Constant(2, 2, 1.5), true)};
  auto f = [](const std::vector<Tensor<double>>&) { return Tensor<double>(Mat<double>::Zero(1, 1)); };
  CHECK(finite_difference_check<double>(f, point, 1e-5) == 0.0);
}

TEST_CASE("every primitive passes a finite-difference check at random points") {
  Rng rng(11);
  const double tol = 1e-5;

  CHECK(check_unary([](const Tensor<double>& x) { return relu(x); },
                    random_matrix_away_from(3, 4, rng, 0.0, 0.1)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return sigmoid(x); }, random_matrix(3, 4, rng)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return deformer::exp(x); }, random_matrix(3, 4, rng)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return deformer::log(x); },
                    random_matrix(3, 4, rng, 0.2, 3.0)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return clamp(x, -1.0, 1.0); },
                    random_matrix_away_from(3, 4, rng, 1.0, 0.1)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return softmax_rows(x); }, random_matrix(3, 4, rng)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return logsumexp_rows(x); }, random_matrix(3, 4, rng)) <
        tol);
  CHECK(check_unary([](const Tensor<double>& x) { return scale(x, -1.7); }, random_matrix(3, 4, rng)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return add_scalar(x, 2.5); }, random_matrix(3, 4, rng)) <
        tol);
  CHECK(check_unary([](const Tensor<double>& x) { return transpose(x); }, random_matrix(3, 4, rng)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return slice_cols(x, 1, 2); }, random_matrix(3, 4, rng)) <
        tol);
  CHECK(check_unary([](const Tensor<double>& x) { return even_rows(x); }, random_matrix(4, 3, rng)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return gather_per_row(x, {2, 0, 3}); },
                    random_matrix(3, 4, rng)) < tol);
  CHECK(check_unary([](const Tensor<double>& x) { return embedding_lookup(x, {1, 0, 1, 2}); },
                    random_matrix(3, 4, rng)) < tol);

  Mask mask(3, 4);
  for (Index r = 0; r < 3; ++r) {
    for (Index c = 0; c < 4; ++c) mask(r, c) = rng.uniform() < 0.3;
  }
  CHECK(check_unary([&](const Tensor<double>& x) { return masked_fill(x, mask, -5.0); },
                    random_matrix(3, 4, rng)) < tol);

  // Binary primitives.
  auto check_binary = [&](auto op, Mat<double> a, Mat<double> b) {
    std::vector<Tensor<double>> point{Tensor<double>(std::move(a), true), Tensor<double>(std::move(b), true)};
    auto f = [&](const std::vector<Tensor<double>>& xs) { return sum_all(op(xs[0], xs[1])); };
    return finite_difference_check<double>(f, point, 1e-5);
  };
  CHECK(check_binary([](auto& a, auto& b) { return matmul(a, b); }, random_matrix(3, 4, rng),
                     random_matrix(4, 2, rng)) < tol);
  CHECK(check_binary([](auto& a, auto& b) { return add(a, b); }, random_matrix(3, 4, rng),
                     random_matrix(3, 4, rng)) < tol);
  CHECK(check_binary([](auto& a, auto& b) { return add(a, b); }, random_matrix(3, 4, rng),
                     random_matrix(1, 4, rng)) < tol);  // bias broadcast
  CHECK(check_binary([](auto& a, auto& b) { return sub(a, b); }, random_matrix(3, 4, rng),
                     random_matrix(3, 4, rng)) < tol);
  CHECK(check_binary([](auto& a, auto& b) { return mul(a, b); }, random_matrix(3, 4, rng),
                     random_matrix(3, 4, rng)) < tol);
  CHECK(check_binary([](auto& a, auto& b) { return div(a, b); }, random_matrix(3, 4, rng),
                     random_matrix(3, 4, rng, 0.5, 2.0)) < tol);
  CHECK(check_binary([](auto& a, auto& b) { return concat_cols(a, b); }, random_matrix(3, 4, rng),
                     random_matrix(3, 2, rng)) < tol);
  CHECK(check_binary([](auto& a, auto& b) { return interleave_rows(a, b); }, random_matrix(3, 4, rng),
                     random_matrix(3, 4, rng)) < tol);

  // layer_norm_rows over (x, gain, bias).
  std::vector<Tensor<double>> point{Tensor<double>(random_matrix(3, 6, rng), true),
                                    Tensor<double>(random_matrix(1, 6, rng, 0.5, 1.5), true),
                                    Tensor<double>(random_matrix(1, 6, rng), true)};
  auto ln = [](const std::vector<Tensor<double>>& xs) {
    return sum_all(mul(layer_norm_rows(xs[0], xs[1], xs[2]), layer_norm_rows(xs[0], xs[1], xs[2])));
  };
  CHECK(finite_difference_check<double>(ln, point, 1e-5) < tol);
}

TEST_CASE("dropout validates the keep probability and applies inverted scaling") {
  Tensor<double> x(Mat<double>::Ones(30, 30));
  Rng rng(3);
  CHECK_THROWS_AS(dropout(x, 0.0, rng), ConfigError);
  CHECK_THROWS_AS(dropout(x, 1.5, rng), ConfigError);

  auto y = dropout(x, 0.8, rng);
  int kept = 0;
  for (Index r = 0; r < 30; ++r) {
    for (Index c = 0; c < 30; ++c) {
      const double v = y.value()(r, c);
      CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.8).epsilon(1e-12)));
      kept += v != 0.0;
    }
  }
  CHECK(kept > 600);  // ~720 expected from 900 draws
  CHECK(kept < 820);

  // Dropout with a fixed stream is deterministic.
  Rng rng_a(42), rng_b(42);
  auto ya = dropout(x, 0.5, rng_a);
  auto yb = dropout(x, 0.5, rng_b);
  CHECK(ya.value() == yb.value());
}

TEST_CASE("forward is bit-deterministic with dropout disabled") {
  Rng rng(5);
  Mat<double> a = random_matrix(4, 4, rng);
  Mat<double> b = random_matrix(4, 4, rng);
  auto run = [&] {
    auto x = matmul(Tensor<double>(a), Tensor<double>(b));
    auto y = softmax_rows(x);
    return Mat<double>(layer_norm_rows(y, Tensor<double>(Mat<double>::Ones(1, 4)),
                                       Tensor<double>(Mat<double>::Zero(1, 4)))
                           .value());
  };
  const Mat<double> first = run();
  const Mat<double> second = run();
  CHECK(first == second);
}

TEST_CASE("exp of huge finite inputs stays finite") {
  Mat<double> x(1, 3);
  x << 1000.0, 0.0, -1000.0;
  auto y = deformer::exp(Tensor<double>(x));
  CHECK(y.value().allFinite());
  auto z = deformer::log(Tensor<double>(Mat<double>::Zero(1, 2)));
  CHECK(z.value().allFinite());
}

TEST_CASE("slice and concat round-trip columns") {
  Rng rng(9);
  Mat<double> x = random_matrix(4, 6, rng);
  Tensor<double> t(x);
  auto left = slice_cols(t, 0, 2);
  auto right = slice_cols(t, 2, 4);
  auto glued = concat_cols(left, right);
  CHECK(glued.value() == x);
}

TEST_CASE("interleave and even_rows recover the z rows") {
  Rng rng(13);
  Mat<double> a = random_matrix(3, 4, rng);
  Mat<double> b = random_matrix(3, 4, rng);
  auto stacked = interleave_rows(Tensor<double>(a), Tensor<double>(b));
  CHECK(stacked.rows() == 6);
  CHECK(Mat<double>(even_rows(stacked).value()) == a);
  for (Index k = 0; k < 3; ++k) {
    CHECK(stacked.value().row(2 * k) == a.row(k));
    CHECK(stacked.value().row(2 * k + 1) == b.row(k));
  }
}

TEST_CASE("float primitives pass the loose 32-bit gradient check") {
  Rng rng(21);
  Mat<float> x(3, 3);
  for (Index r = 0; r < 3; ++r) {
    for (Index c = 0; c < 3; ++c) x(r, c) = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  std::vector<Tensor<float>> point{Tensor<float>(x, true)};
  auto f = [](const std::vector<Tensor<float>>& xs) { return sum_all(sigmoid(matmul(xs[0], xs[0]))); };
  CHECK(finite_difference_check<float>(f, point, 1e-2) < 1e-2);
}
