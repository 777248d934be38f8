#pragma once

// 3-D convolution and transposed convolution over [C, X, Y, Z] volumes.
//
// Both are lowered to im2col + GEMM over slabs of output planes. Each output
// element is reduced over (input channel, kz, ky, kx) inside a single GEMM, so
// the summation order depends only on the operand shapes.

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "hftrans/ops.hpp"

namespace hft {

namespace detail {

struct ConvGeometry {
    std::size_t channels = 0;
    std::array<std::size_t, 3> in{};
    std::array<std::size_t, 3> out{};
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t rows() const { return channels * kernel * kernel * kernel; }
    std::size_t in_voxels() const { return in[0] * in[1] * in[2]; }
    std::size_t out_plane() const { return out[1] * out[2]; }
    std::size_t out_voxels() const { return out[0] * out_plane(); }

    /// Output planes per slab, bounding the column buffer to ~4M elements.
    std::size_t planes_per_chunk() const {
        constexpr std::size_t budget = std::size_t{1} << 22;
        return std::clamp<std::size_t>(budget / std::max<std::size_t>(1, rows() * out_plane()), 1, out[0]);
    }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < kernel) return 0;
    return (in + 2 * pad - kernel) / stride + 1;
}

/// Visits col[row, column] ↔ input positions for output planes [z0, z1).
/// fn(col_index, input_index) is called for in-range taps, pad(col_index)
/// for taps that fall into the zero padding.
template <class Tap, class Pad>
void for_each_tap(const ConvGeometry& g, std::size_t z0, std::size_t z1, Tap&& tap, Pad&& pad) {
    const std::size_t k = g.kernel;
    const std::size_t cols = (z1 - z0) * g.out_plane();
    const auto in_x = static_cast<std::ptrdiff_t>(g.in[0]);
    const auto in_y = static_cast<std::ptrdiff_t>(g.in[1]);
    const auto in_z = static_cast<std::ptrdiff_t>(g.in[2]);
    const auto s = static_cast<std::ptrdiff_t>(g.stride);
    const auto p = static_cast<std::ptrdiff_t>(g.pad);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
        const std::size_t chan_base = c * g.in_voxels();
        for (std::size_t kx = 0; kx < k; ++kx)
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kz = 0; kz < k; ++kz, ++row) {
                    std::size_t col = row * cols;
                    for (std::size_t ox = z0; ox < z1; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s + static_cast<std::ptrdiff_t>(kx) - p;
                        if (ix < 0 || ix >= in_x) {
                            for (std::size_t j = 0; j < g.out_plane(); ++j) pad(col++);
                            continue;
                        }
                        for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy) * s + static_cast<std::ptrdiff_t>(ky) - p;
                            if (iy < 0 || iy >= in_y) {
                                for (std::size_t j = 0; j < g.out[2]; ++j) pad(col++);
                                continue;
                            }
                            const std::size_t line = chan_base + static_cast<std::size_t>((ix * in_y + iy) * in_z);
                            for (std::size_t oz = 0; oz < g.out[2]; ++oz) {
                                const std::ptrdiff_t iz =
                                    static_cast<std::ptrdiff_t>(oz) * s + static_cast<std::ptrdiff_t>(kz) - p;
                                if (iz < 0 || iz >= in_z)
                                    pad(col++);
                                else
                                    tap(col++, line + static_cast<std::size_t>(iz));
                            }
                        }
                    }
                }
    }
}

template <class T>
void im2col(const T* in, const ConvGeometry& g, std::size_t z0, std::size_t z1, T* col) {
    for_each_tap(
        g, z0, z1, [&](std::size_t c, std::size_t i) { col[c] = in[i]; }, [&](std::size_t c) { col[c] = T(0); });
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t z0, std::size_t z1, T* in) {
    for_each_tap(
        g, z0, z1, [&](std::size_t c, std::size_t i) { in[i] += col[c]; }, [](std::size_t) {});
}

template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

template <class T>
void add_channel_bias(std::span<T> out, std::span<const T> bias, std::size_t voxels) {
    for (std::size_t c = 0; c < bias.size(); ++c)
        for (std::size_t v = 0; v < voxels; ++v) out[c * voxels + v] += bias[c];
}

template <class T>
void accumulate_channel_bias(std::span<T> gb, std::span<const T> g, std::size_t voxels) {
    for (std::size_t c = 0; c < gb.size(); ++c) {
        T total = T(0);
        for (std::size_t v = 0; v < voxels; ++v) total += g[c * voxels + v];
        gb[c] += total;
    }
}

template <class T>
void check_volume(const char* op, const Tensor<T>& t, const char* what) {
    require(t.rank() == 4, std::string(op) + ": " + what + " must be [C,X,Y,Z], got " + shape_str(t.shape()));
}

}  // namespace detail

/// Cross-correlation with zero padding.
/// input [Cin,X,Y,Z], kernel [Cout,Cin,k,k,k], bias [Cout] → [Cout,X',Y',Z'].
template <class T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
    detail::check_volume("conv3d", input, "input");
    detail::require(kernel.rank() == 5, "conv3d: kernel must be [Cout,Cin,k,k,k]");
    const std::size_t k = kernel.extent(2);
    detail::require(kernel.extent(3) == k && kernel.extent(4) == k, "conv3d: kernel must be cubic");
    detail::require(kernel.extent(1) == input.extent(0),
                    "conv3d: input has " + std::to_string(input.extent(0)) + " channels, kernel expects " +
                        std::to_string(kernel.extent(1)));
    detail::require(stride >= 1, "conv3d: stride must be positive");
    const std::size_t cout = kernel.extent(0);
    detail::require(bias.shape() == Shape{cout}, "conv3d: bias must have shape (" + std::to_string(cout) + ")");

    detail::ConvGeometry g;
    g.channels = input.extent(0);
    g.kernel = k;
    g.stride = stride;
    g.pad = padding;
    for (std::size_t a = 0; a < 3; ++a) {
        g.in[a] = input.extent(a + 1);
        g.out[a] = detail::conv_out_extent(g.in[a], k, stride, padding);
        detail::require(g.out[a] >= 1, "conv3d: non-positive output extent on axis " + std::to_string(a));
    }

    const auto rows = static_cast<Eigen::Index>(g.rows());
    const auto co = static_cast<Eigen::Index>(cout);
    const std::size_t voxels = g.out_voxels();
    Tensor<T> out({cout, g.out[0], g.out[1], g.out[2]});
    {
        auto ov = out.mutable_values();
        std::vector<T> col;
        detail::ConstMatrixMap<T> w(kernel.data(), co, rows);
        for (std::size_t z0 = 0; z0 < g.out[0]; z0 += g.planes_per_chunk()) {
            const std::size_t z1 = std::min(g.out[0], z0 + g.planes_per_chunk());
            const auto cnt = static_cast<Eigen::Index>((z1 - z0) * g.out_plane());
            col.resize(g.rows() * static_cast<std::size_t>(cnt));
            detail::im2col(input.data(), g, z0, z1, col.data());
            detail::StridedMap<T>(ov.data() + z0 * g.out_plane(), co, cnt, Eigen::OuterStride<>(voxels)).noalias() =
                w * detail::ConstMatrixMap<T>(col.data(), rows, cnt);
        }
        detail::add_channel_bias<T>(ov, bias.values(), voxels);
    }

    return detail::finish(
        "conv3d", std::move(out), detail::common_tape({&input, &kernel, &bias}),
        [input, kernel, bias, g, rows, co, voxels](Tape<T>& tape, std::span<const T> gout) {
            const bool need_x = input.tracked();
            const bool need_w = kernel.tracked();
            if (need_x || need_w) {
                std::span<T> gx = need_x ? tape.grad_buffer(input.node()) : std::span<T>();
                std::span<T> gw = need_w ? tape.grad_buffer(kernel.node()) : std::span<T>();
                detail::ConstMatrixMap<T> w(kernel.data(), co, rows);
                std::vector<T> col;
                for (std::size_t z0 = 0; z0 < g.out[0]; z0 += g.planes_per_chunk()) {
                    const std::size_t z1 = std::min(g.out[0], z0 + g.planes_per_chunk());
                    const auto cnt = static_cast<Eigen::Index>((z1 - z0) * g.out_plane());
                    col.resize(g.rows() * static_cast<std::size_t>(cnt));
                    detail::ConstStridedMap<T> go(gout.data() + z0 * g.out_plane(), co, cnt,
                                                  Eigen::OuterStride<>(voxels));
                    if (need_w) {
                        detail::im2col(input.data(), g, z0, z1, col.data());
                        detail::MatrixMap<T>(gw.data(), co, rows).noalias() +=
                            go * detail::ConstMatrixMap<T>(col.data(), rows, cnt).transpose();
                    }
                    if (need_x) {
                        detail::MatrixMap<T>(col.data(), rows, cnt).noalias() = w.transpose() * go;
                        detail::col2im_add(col.data(), g, z0, z1, gx.data());
                    }
                }
            }
            detail::accumulate(tape, bias,
                               [&](std::span<T> gb) { detail::accumulate_channel_bias<T>(gb, gout, voxels); });
        });
}

/// Transposed convolution (fractionally strided), the adjoint of conv3d with
/// padding (k − stride)/2, so every spatial extent grows by exactly `stride`.
/// input [Cin,x,y,z], kernel [Cin,Cout,k,k,k], bias [Cout] → [Cout,x·s,y·s,z·s].
template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                           std::size_t stride = 2) {
    detail::check_volume("conv_transpose3d", input, "input");
    detail::require(kernel.rank() == 5, "conv_transpose3d: kernel must be [Cin,Cout,k,k,k]");
    const std::size_t k = kernel.extent(2);
    detail::require(kernel.extent(3) == k && kernel.extent(4) == k, "conv_transpose3d: kernel must be cubic");
    detail::require(kernel.extent(0) == input.extent(0),
                    "conv_transpose3d: input has " + std::to_string(input.extent(0)) + " channels, kernel expects " +
                        std::to_string(kernel.extent(0)));
    detail::require(stride >= 1 && k >= stride && (k - stride) % 2 == 0,
                    "conv_transpose3d: kernel size must be stride plus an even margin");
    const std::size_t cin = input.extent(0);
    const std::size_t cout = kernel.extent(1);
    detail::require(bias.shape() == Shape{cout},
                    "conv_transpose3d: bias must have shape (" + std::to_string(cout) + ")");

    // Geometry of the forward convolution this operation is the adjoint of.
    detail::ConvGeometry g;
    g.channels = cout;
    g.kernel = k;
    g.stride = stride;
    g.pad = (k - stride) / 2;
    for (std::size_t a = 0; a < 3; ++a) {
        g.out[a] = input.extent(a + 1);
        g.in[a] = g.out[a] * stride;
    }

    const auto rows = static_cast<Eigen::Index>(g.rows());
    const auto ci = static_cast<Eigen::Index>(cin);
    const std::size_t in_voxels = g.out_voxels();
    const std::size_t out_voxels = g.in_voxels();
    Tensor<T> out({cout, g.in[0], g.in[1], g.in[2]});
    {
        auto ov = out.mutable_values();
        std::vector<T> col;
        detail::ConstMatrixMap<T> w(kernel.data(), ci, rows);
        for (std::size_t z0 = 0; z0 < g.out[0]; z0 += g.planes_per_chunk()) {
            const std::size_t z1 = std::min(g.out[0], z0 + g.planes_per_chunk());
            const auto cnt = static_cast<Eigen::Index>((z1 - z0) * g.out_plane());
            col.resize(g.rows() * static_cast<std::size_t>(cnt));
            detail::MatrixMap<T>(col.data(), rows, cnt).noalias() =
                w.transpose() * detail::ConstStridedMap<T>(input.data() + z0 * g.out_plane(), ci, cnt,
                                                           Eigen::OuterStride<>(in_voxels));
            detail::col2im_add(col.data(), g, z0, z1, ov.data());
        }
        detail::add_channel_bias<T>(ov, bias.values(), out_voxels);
    }

    return detail::finish(
        "conv_transpose3d", std::move(out), detail::common_tape({&input, &kernel, &bias}),
        [input, kernel, bias, g, rows, ci, in_voxels, out_voxels](Tape<T>& tape, std::span<const T> gout) {
            const bool need_x = input.tracked();
            const bool need_w = kernel.tracked();
            if (need_x || need_w) {
                std::span<T> gx = need_x ? tape.grad_buffer(input.node()) : std::span<T>();
                std::span<T> gw = need_w ? tape.grad_buffer(kernel.node()) : std::span<T>();
                detail::ConstMatrixMap<T> w(kernel.data(), ci, rows);
                std::vector<T> col;
                for (std::size_t z0 = 0; z0 < g.out[0]; z0 += g.planes_per_chunk()) {
                    const std::size_t z1 = std::min(g.out[0], z0 + g.planes_per_chunk());
                    const auto cnt = static_cast<Eigen::Index>((z1 - z0) * g.out_plane());
                    col.resize(g.rows() * static_cast<std::size_t>(cnt));
                    detail::im2col(gout.data(), g, z0, z1, col.data());
                    detail::ConstMatrixMap<T> gcol(col.data(), rows, cnt);
                    if (need_x)
                        detail::StridedMap<T>(gx.data() + z0 * g.out_plane(), ci, cnt, Eigen::OuterStride<>(in_voxels))
                            .noalias() += w * gcol;
                    if (need_w)
                        detail::MatrixMap<T>(gw.data(), ci, rows).noalias() +=
                            detail::ConstStridedMap<T>(input.data() + z0 * g.out_plane(), ci, cnt,
                                                       Eigen::OuterStride<>(in_voxels)) *
                            gcol.transpose();
                }
            }
            detail::accumulate(tape, bias,
                               [&](std::span<T> gb) { detail::accumulate_channel_bias<T>(gb, gout, out_voxels); });
        });
}

}  // namespace hft
