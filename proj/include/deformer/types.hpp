#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace deformer {

using Eigen::Index;

// Dense row-major matrix templated on scalar. Rows are sequence positions
// (features, interleaved z/u rows), columns are channels.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Attention visibility: mask(r, c) == true means row r may attend to column c.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
struct Scalar;

template <>
struct Scalar<float> {
  static constexpr const char* name = "f32";
};
template <>
struct Scalar<double> {
  static constexpr const char* name = "f64";
};

}  // namespace deformer
