#pragma once

#include <cstdint>

#include "hftrans/model.hpp"

namespace hft {

/// Multiply-accumulate count of one forward pass, from per-layer formulas:
/// conv Cout·Cin·k³·out_voxels, deconv Cin·Cout·k³·in_voxels, linear
/// rows·Din·Dout, attention scores and weighting 2·M²·C per layer.
/// Normalization, activations and softmax are not counted.
inline std::uint64_t estimate_flops(const ModelConfig& cfg) {
    cfg.validate();
    const FusionSpec spec = cfg.fusion_spec();
    const std::uint64_t E = spec.encoder_count();
    const std::uint64_t bw = cfg.base_width;
    const std::uint64_t K = cfg.encoder_channels;
    const std::uint64_t C = cfg.embed_dim;
    const std::uint64_t V0 = std::uint64_t{cfg.extents[0]} * cfg.extents[1] * cfg.extents[2];
    const std::uint64_t voxels[4] = {V0, V0 / 8, V0 / 64, V0 / 512};
    const std::uint64_t width[3] = {bw, 2 * bw, 4 * bw};
    const std::uint64_t M = cfg.token_count();
    const std::uint64_t tokens = cfg.tokens_per_encoder();

    std::uint64_t macs = 0;
    for (const auto& subset : spec.encoder_inputs) {
        std::uint64_t cin = subset.size();
        for (int s = 0; s < 3; ++s) {
            macs += width[s] * cin * 27 * voxels[s];
            const std::uint64_t next = s < 2 ? width[s + 1] : K;
            macs += next * width[s] * 27 * voxels[s + 1];
            cin = next;
        }
    }
    macs += E * tokens * (8 * K) * C;

    const std::uint64_t hidden = cfg.mlp_ratio * C;
    macs += cfg.layers * (4 * M * C * C + 2 * M * M * C + 2 * M * C * hidden);

    macs += (E * C) * (E * C) * 8 * tokens;  // up0
    macs += K * (E * C) * 27 * voxels[3];    // fuse0
    std::uint64_t below = K;
    for (int s = 2; s >= 0; --s) {
        macs += below * width[s] * 8 * voxels[s + 1];
        macs += width[s] * ((E + 1) * width[s]) * 27 * voxels[s];
        below = width[s];
    }
    macs += cfg.num_classes * bw * voxels[0];
    return macs;
}

}  // namespace hft
