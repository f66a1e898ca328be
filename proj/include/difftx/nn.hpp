#pragma once

// Dense building blocks with hand-written backward passes. Activations are
// row-major, one row per sequence position; affine maps are y = x W + b.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

namespace difftx::nn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Fixed sinusoidal features of `value` (a position or a timestep):
/// [sin(v w_0) .. sin(v w_{h-1}), cos(v w_0) .. cos(v w_{h-1})], w_i = 10000^(-i/h).
template <typename Scalar>
inline void sinusoid_row(double value, Eigen::Index width, Scalar* out) {
  const Eigen::Index half = width / 2;
  for (Eigen::Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<Scalar>(std::sin(value * freq));
    out[i + half] = static_cast<Scalar>(std::cos(value * freq));
  }
  if (width % 2 != 0) out[width - 1] = Scalar(0);
}

template <typename Scalar>
inline Mat<Scalar> position_table(Eigen::Index rows, Eigen::Index width) {
  Mat<Scalar> table(rows, width);
  for (Eigen::Index r = 0; r < rows; ++r) sinusoid_row<Scalar>(static_cast<double>(r), width, table.row(r).data());
  return table;
}

template <typename Scalar>
inline Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
inline Mat<Scalar> silu(const Mat<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return v * sigmoid(v); });
}

/// dL/dx given dL/dy for y = silu(x).
template <typename Scalar>
inline Mat<Scalar> silu_backward(const Mat<Scalar>& x, const Mat<Scalar>& dy) {
  return dy.binaryExpr(x, [](Scalar g, Scalar v) {
    const Scalar s = sigmoid(v);
    return g * s * (Scalar(1) + v * (Scalar(1) - s));
  });
}

template <typename Scalar>
inline void affine(const Mat<Scalar>& x, const Mat<Scalar>& w, const Mat<Scalar>& b, Mat<Scalar>& y) {
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
}

/// Accumulates dW, db and returns dx.
template <typename Scalar>
inline Mat<Scalar> affine_backward(const Mat<Scalar>& x, const Mat<Scalar>& w, const Mat<Scalar>& dy,
                                   Mat<Scalar>& dw, Mat<Scalar>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> xhat;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
inline Mat<Scalar> layer_norm(const Mat<Scalar>& x, const Mat<Scalar>& gain, const Mat<Scalar>& bias,
                              LayerNormCache<Scalar>& cache) {
  const Eigen::Index n = x.rows();
  const Scalar inv_w = Scalar(1) / static_cast<Scalar>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mu = x.row(i).sum() * inv_w;
    const auto centered = (x.row(i).array() - mu);
    const Scalar var = centered.square().sum() * inv_w;
    const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLayerNormEps));
    cache.rstd(i) = rstd;
    cache.xhat.row(i) = centered * rstd;
  }
  Mat<Scalar> y = cache.xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

template <typename Scalar>
inline Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const Mat<Scalar>& gain,
                                       const LayerNormCache<Scalar>& cache, Mat<Scalar>& dgain,
                                       Mat<Scalar>& dbias) {
  dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const Scalar inv_w = Scalar(1) / static_cast<Scalar>(dy.cols());
  Mat<Scalar> dxhat = dy.array().rowwise() * gain.row(0).array();
  Mat<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const Scalar mean_d = dxhat.row(i).sum() * inv_w;
    const Scalar mean_dx = dxhat.row(i).dot(cache.xhat.row(i)) * inv_w;
    dx.row(i) = cache.rstd(i) * (dxhat.row(i).array() - mean_d - cache.xhat.row(i).array() * mean_dx);
  }
  return dx;
}

/// In-place row softmax.
template <typename Scalar>
inline void softmax_rows_inplace(Mat<Scalar>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Scalar m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
}

}  // namespace difftx::nn
