#pragma once

// Differentiable primitives: elementwise, shape manipulation, matrix
// products and normalizations. Every primitive checks its output for
// non-finite values and, if any input is on a tape, records its adjoint.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "hftrans/tensor.hpp"

namespace hft {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require(bool ok, const std::string& message) {
    if (!ok) throw ShapeError(message);
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    return detail::finish("relu", Tensor<T>(x.shape(), std::move(out)), detail::common_tape({&x}),
                          [x](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  auto xv = x.values();
                                  for (std::size_t i = 0; i < gx.size(); ++i)
                                      if (xv[i] > T(0)) gx[i] += g[i];
                              });
                          });
}

/// x·Φ(x) with the exact normal CDF.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    std::vector<T> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
    return detail::finish("gelu", Tensor<T>(x.shape(), std::move(out)), detail::common_tape({&x}),
                          [x](Tape<T>& tape, std::span<const T> g) {
                              constexpr T inv_sqrt2pi = T(0.39894228040143267794);
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  auto xv = x.values();
                                  for (std::size_t i = 0; i < gx.size(); ++i) {
                                      const T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
                                      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
                                      gx[i] += g[i] * (cdf + xv[i] * pdf);
                                  }
                              });
                          });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.size());
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::finish("add", Tensor<T>(a.shape(), std::move(out)), detail::common_tape({&a, &b}),
                          [a, b](Tape<T>& tape, std::span<const T> g) {
                              for (const auto* in : {&a, &b})
                                  detail::accumulate(tape, *in, [&](std::span<T> gx) {
                                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                                  });
                          });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.size());
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return detail::finish("mul", Tensor<T>(a.shape(), std::move(out)), detail::common_tape({&a, &b}),
                          [a, b](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, a, [&](std::span<T> ga) {
                                  auto bv = b.values();
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
                              });
                              detail::accumulate(tape, b, [&](std::span<T> gb) {
                                  auto av = a.values();
                                  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
                              });
                          });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
    return detail::finish("scale", Tensor<T>(x.shape(), std::move(out)), detail::common_tape({&x}),
                          [x, factor](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
                              });
                          });
}

/// Sum of all elements as a rank-0 tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = T(0);
    for (T v : x.values()) total += v;
    return detail::finish("sum", Tensor<T>::scalar(total), detail::common_tape({&x}),
                          [x](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  for (auto& v : gx) v += g[0];
                              });
                          });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    detail::require(shape_size(shape) == x.size(),
                    "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::vector<T> out(x.values().begin(), x.values().end());
    return detail::finish("reshape", Tensor<T>(std::move(shape), std::move(out)), detail::common_tape({&x}),
                          [x](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                              });
                          });
}

namespace detail {

/// Visits every element of the permuted tensor in output row-major order,
/// calling fn(output_index, source_index).
template <class F>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& axes, F&& fn) {
    const std::size_t rank = in_shape.size();
    const auto in_strides = row_major_strides(in_shape);
    Shape out_shape(rank);
    std::vector<std::size_t> src_stride(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in_shape[axes[i]];
        src_stride[i] = in_strides[axes[i]];
    }
    const std::size_t total = shape_size(in_shape);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < total; ++o) {
        fn(o, src);
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                src += src_stride[d];
                break;
            }
            src -= src_stride[d] * (out_shape[d] - 1);
            idx[d] = 0;
        }
    }
}

}  // namespace detail

/// Output axis i is input axis axes[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> axes) {
    const std::size_t rank = x.rank();
    detail::require(axes.size() == rank, "permute: axis list length differs from rank");
    {
        auto sorted = axes;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < rank; ++i)
            detail::require(sorted[i] == i, "permute: axes are not a permutation");
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.extent(axes[i]);
    std::vector<T> out(x.size());
    auto xv = x.values();
    detail::for_each_permuted(x.shape(), axes, [&](std::size_t o, std::size_t s) { out[o] = xv[s]; });
    return detail::finish("permute", Tensor<T>(std::move(out_shape), std::move(out)), detail::common_tape({&x}),
                          [x, axes](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  detail::for_each_permuted(x.shape(), axes,
                                                            [&](std::size_t o, std::size_t s) { gx[s] += g[o]; });
                              });
                          });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
    detail::require(x.rank() == 2, "transpose: expected a matrix, got " + shape_str(x.shape()));
    return permute(x, {1, 0});
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    detail::require(!parts.empty(), "concat: no operands");
    const Shape& first = parts.front().shape();
    detail::require(axis < first.size(), "concat: axis out of range");
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        detail::require(p.rank() == first.size(), "concat: rank mismatch");
        for (std::size_t d = 0; d < first.size(); ++d)
            if (d != axis)
                detail::require(p.extent(d) == first[d], "concat: extent mismatch " + shape_str(p.shape()) +
                                                             " vs " + shape_str(first) + " on axis " +
                                                             std::to_string(d));
        out_shape[axis] += p.extent(axis);
    }
    const std::size_t outer = shape_size(Shape(first.begin(), first.begin() + axis));
    const std::size_t inner = shape_size(Shape(first.begin() + axis + 1, first.end()));
    const std::size_t out_row = out_shape[axis] * inner;
    std::vector<T> out(shape_size(out_shape));
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t row = p.extent(axis) * inner;
        auto pv = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pv.data() + o * row, row, out.data() + o * out_row + offset);
        offset += row;
    }
    return detail::finish("concat", Tensor<T>(std::move(out_shape), std::move(out)),
                          detail::common_tape(std::span<const Tensor<T>>(parts)),
                          [parts, offsets, outer, inner, out_row, axis](Tape<T>& tape, std::span<const T> g) {
                              for (std::size_t i = 0; i < parts.size(); ++i)
                                  detail::accumulate(tape, parts[i], [&](std::span<T> gx) {
                                      const std::size_t row = parts[i].extent(axis) * inner;
                                      for (std::size_t o = 0; o < outer; ++o)
                                          for (std::size_t j = 0; j < row; ++j)
                                              gx[o * row + j] += g[o * out_row + offsets[i] + j];
                                  });
                          });
}

/// Elements [start, start + length) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    detail::require(axis < x.rank(), "slice: axis out of range");
    detail::require(length > 0 && start + length <= x.extent(axis),
                    "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                        ") exceeds extent " + std::to_string(x.extent(axis)));
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    const std::size_t outer = shape_size(Shape(x.shape().begin(), x.shape().begin() + axis));
    const std::size_t inner = shape_size(Shape(x.shape().begin() + axis + 1, x.shape().end()));
    const std::size_t in_row = x.extent(axis) * inner;
    const std::size_t out_row = length * inner;
    std::vector<T> out(outer * out_row);
    auto xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xv.data() + o * in_row + start * inner, out_row, out.data() + o * out_row);
    return detail::finish("slice", Tensor<T>(std::move(out_shape), std::move(out)), detail::common_tape({&x}),
                          [x, outer, inner, in_row, out_row, start](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t j = 0; j < out_row; ++j)
                                          gx[o * in_row + start * inner + j] += g[o * out_row + j];
                              });
                          });
}

/// a[m,k] · b[k,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(0),
                    "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const auto m = static_cast<Eigen::Index>(a.extent(0));
    const auto k = static_cast<Eigen::Index>(a.extent(1));
    const auto n = static_cast<Eigen::Index>(b.extent(1));
    Tensor<T> out({a.extent(0), b.extent(1)});
    detail::MatrixMap<T>(out.mutable_values().data(), m, n).noalias() =
        detail::ConstMatrixMap<T>(a.data(), m, k) * detail::ConstMatrixMap<T>(b.data(), k, n);
    return detail::finish("matmul", std::move(out), detail::common_tape({&a, &b}),
                          [a, b, m, k, n](Tape<T>& tape, std::span<const T> g) {
                              detail::ConstMatrixMap<T> gm(g.data(), m, n);
                              detail::accumulate(tape, a, [&](std::span<T> ga) {
                                  detail::MatrixMap<T>(ga.data(), m, k).noalias() +=
                                      gm * detail::ConstMatrixMap<T>(b.data(), k, n).transpose();
                              });
                              detail::accumulate(tape, b, [&](std::span<T> gb) {
                                  detail::MatrixMap<T>(gb.data(), k, n).noalias() +=
                                      detail::ConstMatrixMap<T>(a.data(), m, k).transpose() * gm;
                              });
                          });
}

/// Affine map over the last axis: y = x·Wᵀ + b, batched over leading axes.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require(weight.rank() == 2, "linear: weight must be a matrix");
    detail::require(x.rank() >= 1 && x.extent(x.rank() - 1) == weight.extent(1),
                    "linear: input " + shape_str(x.shape()) + " does not match weight " +
                        shape_str(weight.shape()));
    detail::require(bias.rank() == 1 && bias.extent(0) == weight.extent(0), "linear: bias extent mismatch");
    const auto din = static_cast<Eigen::Index>(weight.extent(1));
    const auto dout = static_cast<Eigen::Index>(weight.extent(0));
    const auto rows = static_cast<Eigen::Index>(x.size() / weight.extent(1));
    Shape out_shape = x.shape();
    out_shape.back() = weight.extent(0);
    Tensor<T> out(out_shape);
    {
        detail::MatrixMap<T> y(out.mutable_values().data(), rows, dout);
        y.noalias() = detail::ConstMatrixMap<T>(x.data(), rows, din) *
                      detail::ConstMatrixMap<T>(weight.data(), dout, din).transpose();
        y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), dout);
    }
    return detail::finish(
        "linear", std::move(out), detail::common_tape({&x, &weight, &bias}),
        [x, weight, bias, rows, din, dout](Tape<T>& tape, std::span<const T> g) {
            detail::ConstMatrixMap<T> gy(g.data(), rows, dout);
            detail::accumulate(tape, x, [&](std::span<T> gx) {
                detail::MatrixMap<T>(gx.data(), rows, din).noalias() +=
                    gy * detail::ConstMatrixMap<T>(weight.data(), dout, din);
            });
            detail::accumulate(tape, weight, [&](std::span<T> gw) {
                detail::MatrixMap<T>(gw.data(), dout, din).noalias() +=
                    gy.transpose() * detail::ConstMatrixMap<T>(x.data(), rows, din);
            });
            detail::accumulate(tape, bias, [&](std::span<T> gb) {
                for (Eigen::Index r = 0; r < rows; ++r)
                    for (Eigen::Index c = 0; c < dout; ++c) gb[c] += gy(r, c);
            });
        });
}

/// Standardizes each row over the last axis: (x − mean) / sqrt(var + eps),
/// with the biased variance.
template <class T>
Tensor<T> standardize(const Tensor<T>& x, T eps) {
    detail::require(x.rank() >= 1, "standardize: scalar input");
    const std::size_t cols = x.extent(x.rank() - 1);
    const std::size_t rows = x.size() / cols;
    std::vector<T> out(x.size());
    std::vector<T> inv_std(rows);
    auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * cols;
        T mu = T(0);
        for (std::size_t c = 0; c < cols; ++c) mu += row[c];
        mu /= static_cast<T>(cols);
        T var = T(0);
        for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<T>(cols);
        const T s = T(1) / std::sqrt(var + eps);
        inv_std[r] = s;
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (row[c] - mu) * s;
    }
    Tensor<T> y(x.shape(), std::move(out));
    auto yv = y.detach();
    return detail::finish("standardize", std::move(y), detail::common_tape({&x}),
                          [x, yv, inv_std, rows, cols](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  auto y = yv.values();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                      const std::size_t base = r * cols;
                                      T mean_g = T(0);
                                      T mean_gy = T(0);
                                      for (std::size_t c = 0; c < cols; ++c) {
                                          mean_g += g[base + c];
                                          mean_gy += g[base + c] * y[base + c];
                                      }
                                      mean_g /= static_cast<T>(cols);
                                      mean_gy /= static_cast<T>(cols);
                                      for (std::size_t c = 0; c < cols; ++c)
                                          gx[base + c] +=
                                              inv_std[r] * (g[base + c] - mean_g - y[base + c] * mean_gy);
                                  }
                              });
                          });
}

/// y = x·gamma + beta, broadcasting gamma and beta over the last axis.
template <class T>
Tensor<T> affine_last(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
    detail::require(x.rank() >= 1, "affine_last: scalar input");
    const std::size_t cols = x.extent(x.rank() - 1);
    detail::require(gamma.shape() == Shape{cols} && beta.shape() == Shape{cols},
                    "affine_last: gamma/beta must have shape (" + std::to_string(cols) + ")");
    const std::size_t rows = x.size() / cols;
    std::vector<T> out(x.size());
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * gv[c] + bv[c];
    return detail::finish("affine_last", Tensor<T>(x.shape(), std::move(out)),
                          detail::common_tape({&x, &gamma, &beta}),
                          [x, gamma, beta, rows, cols](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  auto gv = gamma.values();
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < cols; ++c)
                                          gx[r * cols + c] += g[r * cols + c] * gv[c];
                              });
                              detail::accumulate(tape, gamma, [&](std::span<T> gg) {
                                  auto xv = x.values();
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < cols; ++c)
                                          gg[c] += g[r * cols + c] * xv[r * cols + c];
                              });
                              detail::accumulate(tape, beta, [&](std::span<T> gb) {
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                              });
                          });
}

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(kLayerNormEps)) {
    return affine_last(standardize(x, eps), gamma, beta);
}

/// Per-channel normalization over the spatial axes of a [C, ...] volume,
/// without affine parameters.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = static_cast<T>(kLayerNormEps)) {
    detail::require(x.rank() >= 2, "instance_norm: expected [C, spatial...]");
    const Shape shape = x.shape();
    return reshape(standardize(reshape(x, {shape[0], x.size() / shape[0]}), eps), shape);
}

/// Softmax along `axis` (default: last), with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis = -1) {
    detail::require(x.rank() >= 1, "softmax: scalar input");
    const auto rank = static_cast<std::ptrdiff_t>(x.rank());
    if (axis < 0) axis += rank;
    detail::require(axis >= 0 && axis < rank, "softmax: axis out of range");
    const auto ax = static_cast<std::size_t>(axis);
    const std::size_t n = x.extent(ax);
    const std::size_t inner = shape_size(Shape(x.shape().begin() + axis + 1, x.shape().end()));
    const std::size_t outer = x.size() / (n * inner);
    std::vector<T> out(x.size());
    auto xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T mx = xv[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            T total = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                const T e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
        }
    Tensor<T> y(x.shape(), std::move(out));
    auto yv = y.detach();
    return detail::finish("softmax", std::move(y), detail::common_tape({&x}),
                          [x, yv, n, inner, outer](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, x, [&](std::span<T> gx) {
                                  auto y = yv.values();
                                  for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t i = 0; i < inner; ++i) {
                                          const std::size_t base = o * n * inner + i;
                                          T dot = T(0);
                                          for (std::size_t j = 0; j < n; ++j)
                                              dot += g[base + j * inner] * y[base + j * inner];
                                          for (std::size_t j = 0; j < n; ++j)
                                              gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
                                      }
                              });
                          });
}

}  // namespace hft
