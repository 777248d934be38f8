#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "hftrans/tensor.hpp"

namespace hft {

using Extents = std::array<std::size_t, 3>;
/// Millimetres per voxel along each axis.
using Spacing = std::array<float, 3>;

inline std::size_t voxel_count(const Extents& e) { return e[0] * e[1] * e[2]; }

/// Per-voxel class indices.
struct LabelVolume {
    Extents extents{};
    Spacing spacing{1.0f, 1.0f, 1.0f};
    std::vector<std::uint8_t> labels;

    std::size_t voxels() const { return voxel_count(extents); }
    bool operator==(const LabelVolume&) const = default;
};

struct BinaryMask {
    Extents extents{};
    std::vector<std::uint8_t> values;  // 0 or 1

    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : values) n += v != 0;
        return n;
    }
    bool operator==(const BinaryMask&) const = default;
};

/// Aligned multimodal volume with its labels and foreground ("brain") mask.
struct VolumeSample {
    Tensor<float> modalities;  // [N, W, H, D]
    LabelVolume labels;
    BinaryMask foreground;

    std::size_t modality_count() const { return modalities.extent(0); }
    const Extents& extents() const { return labels.extents; }
    const Spacing& spacing() const { return labels.spacing; }
};

}  // namespace hft
