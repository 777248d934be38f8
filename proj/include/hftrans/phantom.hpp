#pragma once

// Synthetic multimodal phantoms: an ellipsoidal foreground ("brain") holding
// concentric lesion ellipsoids L1 ⊃ L2 ⊃ L3. Classes are
//   0 background, 1 tissue, 2 L1 \ L2, 3 L2 \ L3, 4 L3
// (fewer shells for smaller class counts). Each modality assigns a mean
// intensity per class; the default table makes one adjacent class pair
// iso-intense in every modality, so telling all classes apart needs more than
// one modality.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "hftrans/random.hpp"
#include "hftrans/volume.hpp"

namespace hft {

struct PhantomConfig {
    std::size_t modalities = 2;
    Extents extents{32, 32, 32};
    std::size_t num_classes = 5;
    /// intensity[class][modality]; empty selects default_intensity_table().
    std::vector<std::vector<double>> intensity;
    double noise_sigma = 0.2;
    Spacing spacing{1.0f, 1.0f, 1.0f};
    /// Radii as fractions of each half-extent, sampled per axis.
    std::array<double, 2> foreground_radius{0.70, 0.85};
    std::array<std::array<double, 2>, 3> shell_radius{{{0.45, 0.55}, {0.30, 0.38}, {0.16, 0.22}}};
    /// Maximum lesion-centre offset from the foreground centre, same units.
    double lesion_offset = 0.12;
    std::uint64_t seed = 0;

    std::size_t shells() const { return num_classes - 2; }

    std::vector<std::vector<double>> table() const;
    void validate() const;
};

/// Levels rise by one per class, except that modality m repeats the level
/// of the pair (m mod (classes−2)) + 1, making that pair iso-intense in m.
/// Background is 0. With one modality no pair is repeated, and with a single
/// lesion pair the last modality keeps it apart.
inline std::vector<std::vector<double>> default_intensity_table(std::size_t num_classes, std::size_t modalities) {
    std::vector<std::vector<double>> t(num_classes, std::vector<double>(modalities, 0.0));
    const std::size_t pairs = num_classes >= 3 ? num_classes - 2 : 0;  // adjacent pairs among classes 1..
    for (std::size_t m = 0; m < modalities; ++m) {
        std::size_t iso = (modalities > 1 && pairs > 0) ? 1 + m % pairs : 0;
        if (pairs == 1 && m + 1 == modalities) iso = 0;
        double level = 1.0;
        for (std::size_t c = 1; c < num_classes; ++c) {
            if (c > 1 && c - 1 != iso) level += 1.0;
            t[c][m] = level;
        }
    }
    return t;
}

inline std::vector<std::vector<double>> PhantomConfig::table() const {
    return intensity.empty() ? default_intensity_table(num_classes, modalities) : intensity;
}

inline void PhantomConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("phantom config: " + m); };
    if (modalities < 1) fail("modalities must be at least 1");
    if (num_classes < 2 || num_classes > 5) fail("num_classes must be between 2 and 5");
    for (auto e : extents)
        if (e == 0) fail("extents must be positive");
    if (!(noise_sigma >= 0.0)) fail("noise_sigma must be non-negative");
    for (float s : spacing)
        if (!(s > 0.0f)) fail("spacing must be positive");
    const auto t = table();
    if (t.size() != num_classes) fail("intensity table needs one row per class");
    for (const auto& row : t)
        if (row.size() != modalities) fail("intensity table needs one column per modality");
    for (std::size_t c = 0; c + 1 < num_classes; ++c) {
        bool separable = false;
        for (std::size_t m = 0; m < modalities; ++m)
            separable |= std::abs(t[c + 1][m] - t[c][m]) >= 3.0 * noise_sigma && t[c + 1][m] != t[c][m];
        if (!separable)
            fail("classes " + std::to_string(c) + " and " + std::to_string(c + 1) +
                 " are not 3 sigma apart in any modality");
    }
    if (foreground_radius[0] <= 0.0 || foreground_radius[0] > foreground_radius[1] || foreground_radius[1] > 1.0)
        fail("foreground radius range must satisfy 0 < min <= max <= 1");
    double outer_min = foreground_radius[0];
    double offset = lesion_offset;
    for (std::size_t s = 0; s < shells(); ++s) {
        const auto& r = shell_radius[s];
        if (r[0] <= 0.0 || r[0] > r[1]) fail("shell radius range " + std::to_string(s + 1) + " is invalid");
        if (r[1] + offset >= outer_min)
            fail("shell " + std::to_string(s + 1) + " cannot be nested inside its enclosing region");
        outer_min = r[0];
        offset = 0.0;  // shells are concentric with L1
    }
}

inline VolumeSample generate_phantom(const PhantomConfig& cfg) {
    cfg.validate();
    const auto table = cfg.table();
    Rng rng(derive_seed(cfg.seed, "phantom"));

    std::array<double, 3> half{}, fg_radius{}, lesion_center{};
    std::array<std::array<double, 3>, 3> shell{};
    for (std::size_t a = 0; a < 3; ++a) half[a] = static_cast<double>(cfg.extents[a]) / 2.0;
    for (std::size_t a = 0; a < 3; ++a)
        fg_radius[a] = half[a] * rng.uniform(cfg.foreground_radius[0], cfg.foreground_radius[1]);
    for (std::size_t a = 0; a < 3; ++a)
        lesion_center[a] = half[a] + half[a] * rng.uniform(-cfg.lesion_offset, cfg.lesion_offset);
    for (std::size_t s = 0; s < cfg.shells(); ++s)
        for (std::size_t a = 0; a < 3; ++a)
            shell[s][a] = half[a] * rng.uniform(cfg.shell_radius[s][0], cfg.shell_radius[s][1]);

    auto inside = [](const std::array<double, 3>& p, const std::array<double, 3>& c, const std::array<double, 3>& r) {
        double q = 0.0;
        for (std::size_t a = 0; a < 3; ++a) q += ((p[a] - c[a]) / r[a]) * ((p[a] - c[a]) / r[a]);
        return q <= 1.0;
    };

    VolumeSample out;
    const std::size_t V = voxel_count(cfg.extents);
    out.labels.extents = cfg.extents;
    out.labels.spacing = cfg.spacing;
    out.labels.labels.assign(V, 0);
    out.foreground.extents = cfg.extents;
    out.foreground.values.assign(V, 0);

    std::size_t v = 0;
    for (std::size_t x = 0; x < cfg.extents[0]; ++x)
        for (std::size_t y = 0; y < cfg.extents[1]; ++y)
            for (std::size_t z = 0; z < cfg.extents[2]; ++z, ++v) {
                const std::array<double, 3> p{x + 0.5, y + 0.5, z + 0.5};
                if (!inside(p, half, fg_radius)) continue;
                std::uint8_t label = 1;
                // Nesting holds by construction: a shell only counts where every
                // enclosing region already does.
                for (std::size_t s = 0; s < cfg.shells(); ++s) {
                    if (!inside(p, lesion_center, shell[s])) break;
                    label = static_cast<std::uint8_t>(2 + s);
                }
                out.labels.labels[v] = label;
                out.foreground.values[v] = 1;
            }

    std::vector<float> intensities(cfg.modalities * V, 0.0f);
    for (std::size_t m = 0; m < cfg.modalities; ++m)
        for (std::size_t i = 0; i < V; ++i) {
            if (!out.foreground.values[i]) continue;
            const double noise = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * rng.normal() : 0.0;
            intensities[m * V + i] = static_cast<float>(table[out.labels.labels[i]][m] + noise);
        }
    out.modalities = Tensor<float>({cfg.modalities, cfg.extents[0], cfg.extents[1], cfg.extents[2]},
                                   std::move(intensities));
    return out;
}

/// `count` phantoms with seeds derived from cfg.seed and the sample index.
inline std::vector<VolumeSample> generate_phantoms(const PhantomConfig& cfg, std::size_t count) {
    std::vector<VolumeSample> out;
    for (std::size_t i = 0; i < count; ++i) {
        PhantomConfig c = cfg;
        c.seed = derive_seed(cfg.seed, "sample" + std::to_string(i));
        out.push_back(generate_phantom(c));
    }
    return out;
}

}  // namespace hft
