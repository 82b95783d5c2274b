#pragma once

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "deformer/rng.hpp"
#include "deformer/tensor.hpp"

namespace deformer {

// ---------------------------------------------------------------------------
// Shape checks
// ---------------------------------------------------------------------------

template <typename S>
std::string shape_str(const Tensor<S>& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

template <typename S>
[[noreturn]] void throw_shape(const char* kind, const Tensor<S>& a, const Tensor<S>& b) {
  throw ShapeError(std::string(kind) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Masked attention logits below this survive softmax with weight < 1e-30.
template <typename S>
constexpr S mask_fill_value() {
  return S(-1e9);
}

// exp is capped so finite inputs cannot overflow to Inf.
template <typename S>
constexpr S exp_arg_cap() {
  return std::is_same_v<S, double> ? S(700) : S(80);
}

template <typename S>
constexpr S log_floor() {
  return S(1e-12);
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.rows()) throw_shape("matmul", a, b);
  Tensor<S> out(Mat<S>(a.value() * b.value()));
  if (tracked(a) || tracked(b)) {
    out.mark_on_tape();
    auto ad = a.data(), bd = b.data(), od = out.data();
    const bool ga = tracked(a), gb = tracked(b);
    GradTape<S>::instance().record([ad, bd, od, ga, gb] {
      if (od->grad.size() == 0) return;
      if (ga) {
        ad->ensure_grad();
        ad->grad.noalias() += od->grad * bd->value.transpose();
      }
      if (gb) {
        bd->ensure_grad();
        bd->grad.noalias() += ad->value.transpose() * od->grad;
      }
    });
  }
  return out;
}

// Elementwise addition; b may also be a 1 x cols row vector broadcast over
// the rows of a (bias add).
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const bool broadcast = b.rows() == 1 && a.cols() == b.cols() && a.rows() != 1;
  if (!broadcast && (a.rows() != b.rows() || a.cols() != b.cols())) throw_shape("add", a, b);
  Mat<S> y = broadcast ? Mat<S>(a.value().rowwise() + b.value().row(0)) : Mat<S>(a.value() + b.value());
  Tensor<S> out(std::move(y));
  if (tracked(a) || tracked(b)) {
    out.mark_on_tape();
    auto ad = a.data(), bd = b.data(), od = out.data();
    const bool ga = tracked(a), gb = tracked(b);
    GradTape<S>::instance().record([ad, bd, od, ga, gb, broadcast] {
      if (od->grad.size() == 0) return;
      if (ga) {
        ad->ensure_grad();
        ad->grad += od->grad;
      }
      if (gb) {
        bd->ensure_grad();
        if (broadcast) {
          bd->grad.row(0) += od->grad.colwise().sum();
        } else {
          bd->grad += od->grad;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw_shape("sub", a, b);
  Tensor<S> out(Mat<S>(a.value() - b.value()));
  if (tracked(a) || tracked(b)) {
    out.mark_on_tape();
    auto ad = a.data(), bd = b.data(), od = out.data();
    const bool ga = tracked(a), gb = tracked(b);
    GradTape<S>::instance().record([ad, bd, od, ga, gb] {
      if (od->grad.size() == 0) return;
      if (ga) {
        ad->ensure_grad();
        ad->grad += od->grad;
      }
      if (gb) {
        bd->ensure_grad();
        bd->grad -= od->grad;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw_shape("mul", a, b);
  Tensor<S> out(Mat<S>(a.value().cwiseProduct(b.value())));
  if (tracked(a) || tracked(b)) {
    out.mark_on_tape();
    auto ad = a.data(), bd = b.data(), od = out.data();
    const bool ga = tracked(a), gb = tracked(b);
    GradTape<S>::instance().record([ad, bd, od, ga, gb] {
      if (od->grad.size() == 0) return;
      if (ga) {
        ad->ensure_grad();
        ad->grad += od->grad.cwiseProduct(bd->value);
      }
      if (gb) {
        bd->ensure_grad();
        bd->grad += od->grad.cwiseProduct(ad->value);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw_shape("div", a, b);
  Tensor<S> out(Mat<S>(a.value().cwiseQuotient(b.value())));
  if (tracked(a) || tracked(b)) {
    out.mark_on_tape();
    auto ad = a.data(), bd = b.data(), od = out.data();
    const bool ga = tracked(a), gb = tracked(b);
    GradTape<S>::instance().record([ad, bd, od, ga, gb] {
      if (od->grad.size() == 0) return;
      if (ga) {
        ad->ensure_grad();
        ad->grad += od->grad.cwiseQuotient(bd->value);
      }
      if (gb) {
        bd->ensure_grad();
        bd->grad.array() -= od->grad.array() * od->value.array() / bd->value.array();
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Tensor<S> out(Mat<S>(a.value() * factor));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, factor] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad += od->grad * factor;
    });
  }
  return out;
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S constant) {
  Tensor<S> out(Mat<S>(a.value().array() + constant));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad += od->grad;
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> out(Mat<S>(a.value().cwiseMax(S(0))));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.array() += (ad->value.array() > S(0)).template cast<S>() * od->grad.array();
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Mat<S> y(a.rows(), a.cols());
  const auto& x = a.value();
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      const S v = x(r, c);
      if (v >= S(0)) {
        y(r, c) = S(1) / (S(1) + std::exp(-v));
      } else {
        const S e = std::exp(v);
        y(r, c) = e / (S(1) + e);
      }
    }
  }
  Tensor<S> out(std::move(y));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.array() += od->grad.array() * od->value.array() * (S(1) - od->value.array());
    });
  }
  return out;
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  const S cap = exp_arg_cap<S>();
  Tensor<S> out(Mat<S>(a.value().array().min(cap).exp()));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, cap] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.array() +=
          (ad->value.array() <= cap).template cast<S>() * od->grad.array() * od->value.array();
    });
  }
  return out;
}

// Guarded log: inputs are floored at log_floor() so near-zero probabilities
// cannot produce Inf; the gradient is exact for the guarded function.
template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  const S floor = log_floor<S>();
  Tensor<S> out(Mat<S>(a.value().array().max(floor).log()));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, floor] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.array() += (ad->value.array() > floor).template cast<S>() * od->grad.array() / ad->value.array();
    });
  }
  return out;
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  Tensor<S> out(Mat<S>(a.value().cwiseMax(lo).cwiseMin(hi)));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, lo, hi] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.array() += ((ad->value.array() >= lo) && (ad->value.array() <= hi)).template cast<S>() *
                          od->grad.array();
    });
  }
  return out;
}

// Row softmax with per-row max subtraction. Rows sum to 1 and are strictly
// positive for finite inputs.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  const auto& x = a.value();
  Vec<S> row_max = x.rowwise().maxCoeff();
  Mat<S> e = (x.colwise() - row_max).array().exp();
  Vec<S> row_sum = e.rowwise().sum();
  Mat<S> y = e.array().colwise() / row_sum.array();
  Tensor<S> out(std::move(y));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      Vec<S> dot = od->grad.cwiseProduct(od->value).rowwise().sum();
      ad->grad.array() += od->value.array() * (od->grad.colwise() - dot).array();
    });
  }
  return out;
}

// Row-wise log(sum(exp(x))) computed against the per-row max; result is L x 1.
template <typename S>
Tensor<S> logsumexp_rows(const Tensor<S>& a) {
  const auto& x = a.value();
  Vec<S> row_max = x.rowwise().maxCoeff();
  Mat<S> shifted_exp = (x.colwise() - row_max).array().exp();
  Vec<S> row_sum = shifted_exp.rowwise().sum();
  Mat<S> y = row_max.array() + row_sum.array().log();
  Mat<S> softmax = shifted_exp.array().colwise() / row_sum.array();
  Tensor<S> out(std::move(y));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, softmax = std::move(softmax)] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.array() += softmax.array().colwise() * od->grad.col(0).array();
    });
  }
  return out;
}

// Per-row normalization followed by a learned affine map; gain and bias are
// 1 x cols row vectors.
template <typename S>
Tensor<S> layer_norm_rows(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) throw_shape("layer_norm_rows(gain)", x, gain);
  if (bias.rows() != 1 || bias.cols() != x.cols()) throw_shape("layer_norm_rows(bias)", x, bias);
  constexpr S eps = S(1e-5);
  const auto& xv = x.value();
  const S inv_cols = S(1) / static_cast<S>(xv.cols());
  Vec<S> mean = xv.rowwise().mean();
  Mat<S> centered = xv.colwise() - mean;
  Vec<S> inv_std = (centered.array().square().rowwise().sum() * inv_cols + eps).rsqrt();
  Mat<S> normalized = centered.array().colwise() * inv_std.array();
  Mat<S> y = (normalized.array().rowwise() * gain.value().row(0).array()).rowwise() +
             bias.value().row(0).array();
  Tensor<S> out(std::move(y));
  if (tracked(x) || tracked(gain) || tracked(bias)) {
    out.mark_on_tape();
    auto xd = x.data(), gd = gain.data(), bd = bias.data(), od = out.data();
    const bool gx = tracked(x), gg = tracked(gain), gb = tracked(bias);
    GradTape<S>::instance().record([xd, gd, bd, od, gx, gg, gb, normalized = std::move(normalized),
                                    inv_std = std::move(inv_std), inv_cols] {
      if (od->grad.size() == 0) return;
      if (gg) {
        gd->ensure_grad();
        gd->grad.row(0) += od->grad.cwiseProduct(normalized).colwise().sum();
      }
      if (gb) {
        bd->ensure_grad();
        bd->grad.row(0) += od->grad.colwise().sum();
      }
      if (gx) {
        xd->ensure_grad();
        Mat<S> d_normalized = od->grad.array().rowwise() * gd->value.row(0).array();
        Vec<S> mean_dn = d_normalized.rowwise().sum() * inv_cols;
        Vec<S> mean_dn_n = d_normalized.cwiseProduct(normalized).rowwise().sum() * inv_cols;
        xd->grad.array() += (((d_normalized.colwise() - mean_dn).array() -
                              normalized.array().colwise() * mean_dn_n.array())
                                 .colwise() *
                             inv_std.array());
      }
    });
  }
  return out;
}

// Inverted dropout: kept entries are scaled by 1/keep_prob at train time so
// the eval path needs no rescaling.
template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double keep_prob, Rng& rng) {
  if (!(keep_prob > 0.0) || keep_prob > 1.0) {
    throw ConfigError("dropout: keep-probability must be in (0, 1], got " + std::to_string(keep_prob));
  }
  Mat<S> mask(a.rows(), a.cols());
  const S kept = S(1.0 / keep_prob);
  for (Index r = 0; r < mask.rows(); ++r) {
    for (Index c = 0; c < mask.cols(); ++c) {
      mask(r, c) = rng.uniform() < keep_prob ? kept : S(0);
    }
  }
  Tensor<S> out(Mat<S>(a.value().cwiseProduct(mask)));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, mask = std::move(mask)] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad += od->grad.cwiseProduct(mask);
    });
  }
  return out;
}

// Fills entries where mask is true with a constant; gradients flow only to
// the untouched entries.
template <typename S>
Tensor<S> masked_fill(const Tensor<S>& a, const Mask& mask, S fill) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) {
    throw ShapeError("masked_fill: shape mismatch " + shape_str(a) + " vs mask " +
                     std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  }
  Tensor<S> out(Mat<S>(mask.select(fill, a.value().array())));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, mask] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.array() += mask.select(Mat<S>::Zero(od->grad.rows(), od->grad.cols()), od->grad).array();
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& a, Index start, Index count) {
  if (start < 0 || count < 1 || start + count > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of bounds for " + shape_str(a));
  }
  Tensor<S> out(Mat<S>(a.value().middleCols(start, count)));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, start, count] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.middleCols(start, count) += od->grad;
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows()) throw_shape("concat_cols", a, b);
  Mat<S> y(a.rows(), a.cols() + b.cols());
  y.leftCols(a.cols()) = a.value();
  y.rightCols(b.cols()) = b.value();
  Tensor<S> out(std::move(y));
  if (tracked(a) || tracked(b)) {
    out.mark_on_tape();
    auto ad = a.data(), bd = b.data(), od = out.data();
    const bool ga = tracked(a), gb = tracked(b);
    GradTape<S>::instance().record([ad, bd, od, ga, gb] {
      if (od->grad.size() == 0) return;
      if (ga) {
        ad->ensure_grad();
        ad->grad += od->grad.leftCols(ad->value.cols());
      }
      if (gb) {
        bd->ensure_grad();
        bd->grad += od->grad.rightCols(bd->value.cols());
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  Tensor<S> out(Mat<S>(a.value().transpose()));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad += od->grad.transpose();
    });
  }
  return out;
}

// Row k of the result is table row indices[k]; the gradient scatter-adds
// back into the table rows.
template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<int>& indices) {
  Mat<S> y(static_cast<Index>(indices.size()), table.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= table.rows()) {
      throw DataError("embedding_lookup: index " + std::to_string(indices[k]) + " out of range [0, " +
                      std::to_string(table.rows()) + ")");
    }
    y.row(static_cast<Index>(k)) = table.value().row(indices[k]);
  }
  Tensor<S> out(std::move(y));
  if (tracked(table)) {
    out.mark_on_tape();
    auto td = table.data(), od = out.data();
    GradTape<S>::instance().record([td, od, indices] {
      if (od->grad.size() == 0) return;
      td->ensure_grad();
      for (std::size_t k = 0; k < indices.size(); ++k) {
        td->grad.row(indices[k]) += od->grad.row(static_cast<Index>(k));
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  Tensor<S> out(Mat<S>(Mat<S>::Constant(1, 1, a.value().sum())));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      ad->grad.array() += od->grad(0, 0);
    });
  }
  return out;
}

// Result is L x 1 with out[k] = a(k, indices[k]).
template <typename S>
Tensor<S> gather_per_row(const Tensor<S>& a, const std::vector<int>& indices) {
  if (static_cast<Index>(indices.size()) != a.rows()) {
    throw ShapeError("gather_per_row: " + std::to_string(indices.size()) + " indices for " + shape_str(a));
  }
  Mat<S> y(a.rows(), 1);
  for (Index k = 0; k < a.rows(); ++k) {
    if (indices[k] < 0 || indices[k] >= a.cols()) {
      throw DataError("gather_per_row: column " + std::to_string(indices[k]) + " out of range [0, " +
                      std::to_string(a.cols()) + ")");
    }
    y(k, 0) = a.value()(k, indices[k]);
  }
  Tensor<S> out(std::move(y));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od, indices] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      for (Index k = 0; k < ad->grad.rows(); ++k) {
        ad->grad(k, indices[k]) += od->grad(k, 0);
      }
    });
  }
  return out;
}

// Rows alternate a0, b0, a1, b1, ...; used to build the z/u interleaving.
template <typename S>
Tensor<S> interleave_rows(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw_shape("interleave_rows", a, b);
  Mat<S> y(2 * a.rows(), a.cols());
  for (Index k = 0; k < a.rows(); ++k) {
    y.row(2 * k) = a.value().row(k);
    y.row(2 * k + 1) = b.value().row(k);
  }
  Tensor<S> out(std::move(y));
  if (tracked(a) || tracked(b)) {
    out.mark_on_tape();
    auto ad = a.data(), bd = b.data(), od = out.data();
    const bool ga = tracked(a), gb = tracked(b);
    GradTape<S>::instance().record([ad, bd, od, ga, gb] {
      if (od->grad.size() == 0) return;
      const Index n = od->grad.rows() / 2;
      if (ga) {
        ad->ensure_grad();
        for (Index k = 0; k < n; ++k) ad->grad.row(k) += od->grad.row(2 * k);
      }
      if (gb) {
        bd->ensure_grad();
        for (Index k = 0; k < n; ++k) bd->grad.row(k) += od->grad.row(2 * k + 1);
      }
    });
  }
  return out;
}

// Keeps rows 0, 2, 4, ...; reads the z rows out of the interleaved stack.
template <typename S>
Tensor<S> even_rows(const Tensor<S>& a) {
  if (a.rows() % 2 != 0) {
    throw ShapeError("even_rows: row count must be even, got " + shape_str(a));
  }
  const Index n = a.rows() / 2;
  Mat<S> y(n, a.cols());
  for (Index k = 0; k < n; ++k) y.row(k) = a.value().row(2 * k);
  Tensor<S> out(std::move(y));
  if (tracked(a)) {
    out.mark_on_tape();
    auto ad = a.data(), od = out.data();
    GradTape<S>::instance().record([ad, od] {
      if (od->grad.size() == 0) return;
      ad->ensure_grad();
      for (Index k = 0; k < od->grad.rows(); ++k) ad->grad.row(2 * k) += od->grad.row(k);
    });
  }
  return out;
}

}  // namespace deformer
