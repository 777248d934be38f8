#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "hftrans/volume.hpp"

namespace hft {

/// Per-modality z-score over foreground voxels; background is set to 0.
inline VolumeSample zscore_normalize(const VolumeSample& sample) {
    const std::size_t V = voxel_count(sample.extents());
    const std::size_t N = sample.modality_count();
    const auto& fg = sample.foreground.values;
    std::size_t count = 0;
    for (auto f : fg) count += f != 0;
    if (count == 0) throw std::invalid_argument("zscore_normalize: empty foreground");

    VolumeSample out = sample;
    out.modalities = sample.modalities.clone();
    auto dst = out.modalities.mutable_values();
    auto src = sample.modalities.values();
    for (std::size_t m = 0; m < N; ++m) {
        const float* x = src.data() + m * V;
        double mu = 0.0;
        for (std::size_t v = 0; v < V; ++v)
            if (fg[v]) mu += x[v];
        mu /= static_cast<double>(count);
        double var = 0.0;
        for (std::size_t v = 0; v < V; ++v)
            if (fg[v]) var += (x[v] - mu) * (x[v] - mu);
        const double sd = std::sqrt(var / static_cast<double>(count));
        if (sd < 1e-8)
            throw std::invalid_argument("zscore_normalize: modality " + std::to_string(m) +
                                        " is constant over the foreground");
        for (std::size_t v = 0; v < V; ++v)
            dst[m * V + v] = fg[v] ? static_cast<float>((x[v] - mu) / sd) : 0.0f;
    }
    return out;
}

namespace detail {

template <class U>
std::vector<U> resize_volume(const std::vector<U>& src, const Extents& from, const Extents& to, std::size_t channels) {
    std::vector<U> dst(channels * voxel_count(to), U(0));
    const Extents common{std::min(from[0], to[0]), std::min(from[1], to[1]), std::min(from[2], to[2])};
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t x = 0; x < common[0]; ++x)
            for (std::size_t y = 0; y < common[1]; ++y) {
                const U* s = src.data() + c * voxel_count(from) + (x * from[1] + y) * from[2];
                U* d = dst.data() + c * voxel_count(to) + (x * to[1] + y) * to[2];
                std::copy_n(s, common[2], d);
            }
    return dst;
}

}  // namespace detail

/// Zero-pads every field on the high side of each axis to `extents` (or
/// crops, for smaller extents).
inline VolumeSample resize_sample(const VolumeSample& s, const Extents& extents) {
    const Extents from = s.extents();
    const std::size_t N = s.modality_count();
    VolumeSample out;
    std::vector<float> intens(s.modalities.values().begin(), s.modalities.values().end());
    out.modalities = Tensor<float>({N, extents[0], extents[1], extents[2]},
                                   detail::resize_volume(intens, from, extents, N));
    out.labels = {extents, s.labels.spacing, detail::resize_volume(s.labels.labels, from, extents, 1)};
    out.foreground = {extents, detail::resize_volume(s.foreground.values, from, extents, 1)};
    return out;
}

inline LabelVolume crop_labels(const LabelVolume& labels, const Extents& extents) {
    return {extents, labels.spacing, detail::resize_volume(labels.labels, labels.extents, extents, 1)};
}

/// Pads each axis up to the next multiple of `multiple`; returns the padded
/// sample and the original extents for cropping back.
inline std::pair<VolumeSample, Extents> pad_to_multiple(const VolumeSample& s, std::size_t multiple = 16) {
    if (multiple == 0) throw std::invalid_argument("pad_to_multiple: multiple must be positive");
    const Extents original = s.extents();
    Extents padded{};
    for (std::size_t a = 0; a < 3; ++a) padded[a] = (original[a] + multiple - 1) / multiple * multiple;
    if (padded == original) return {s, original};
    return {resize_sample(s, padded), original};
}

}  // namespace hft
