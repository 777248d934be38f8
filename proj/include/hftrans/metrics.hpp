#pragma once

// Overlap and distance metrics on binary masks, and nested region masks
// built from label volumes.

#include <algorithm>
#include <charconv>
#include <limits>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hftrans/volume.hpp"

namespace hft {

/// A named union of classes, e.g. {"TC", {3, 4}}.
struct Region {
    std::string name;
    std::vector<std::size_t> classes;
};

using RegionSpec = std::vector<Region>;

struct MetricsRow {
    std::string region;
    double dice = 0.0;
    double hd95 = 0.0;  // mm
    double volume_similarity = 0.0;
};

namespace detail {

inline void check_same_extents(const char* op, const BinaryMask& a, const BinaryMask& b) {
    if (a.extents != b.extents || a.values.size() != b.values.size() || a.values.size() != voxel_count(a.extents))
        throw std::invalid_argument(std::string(op) + ": mask extents differ");
}

}  // namespace detail

/// 2|P∩G| / (|P| + |G|); 1 when both masks are empty.
inline double dice_score(const BinaryMask& pred, const BinaryMask& gt) {
    detail::check_same_extents("dice_score", pred, gt);
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const bool a = pred.values[i] != 0;
        const bool b = gt.values[i] != 0;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// 1 − |Vp − Vg| / (Vp + Vg); 1 when both masks are empty.
inline double volume_similarity(const BinaryMask& pred, const BinaryMask& gt) {
    detail::check_same_extents("volume_similarity", pred, gt);
    const auto vp = static_cast<double>(pred.count());
    const auto vg = static_cast<double>(gt.count());
    if (vp + vg == 0.0) return 1.0;
    return 1.0 - std::abs(vp - vg) / (vp + vg);
}

namespace detail {

struct Voxel {
    std::ptrdiff_t x, y, z;
};

inline std::vector<Voxel> foreground_voxels(const BinaryMask& m, bool boundary_only) {
    const auto X = static_cast<std::ptrdiff_t>(m.extents[0]);
    const auto Y = static_cast<std::ptrdiff_t>(m.extents[1]);
    const auto Z = static_cast<std::ptrdiff_t>(m.extents[2]);
    auto at = [&](std::ptrdiff_t x, std::ptrdiff_t y, std::ptrdiff_t z) {
        return m.values[static_cast<std::size_t>((x * Y + y) * Z + z)] != 0;
    };
    std::vector<Voxel> out;
    for (std::ptrdiff_t x = 0; x < X; ++x)
        for (std::ptrdiff_t y = 0; y < Y; ++y)
            for (std::ptrdiff_t z = 0; z < Z; ++z) {
                if (!at(x, y, z)) continue;
                if (boundary_only) {
                    // Nearest-point queries from outside the mask always land
                    // on a voxel with an in-grid 6-neighbour outside the mask.
                    const bool interior = (x == 0 || at(x - 1, y, z)) && (x + 1 == X || at(x + 1, y, z)) &&
                                          (y == 0 || at(x, y - 1, z)) && (y + 1 == Y || at(x, y + 1, z)) &&
                                          (z == 0 || at(x, y, z - 1)) && (z + 1 == Z || at(x, y, z + 1));
                    if (interior) continue;
                }
                out.push_back({x, y, z});
            }
    return out;
}

inline double voxel_distance(const Voxel& a, const Voxel& b, const Spacing& s) {
    const double dx = static_cast<double>(a.x - b.x) * static_cast<double>(s[0]);
    const double dy = static_cast<double>(a.y - b.y) * static_cast<double>(s[1]);
    const double dz = static_cast<double>(a.z - b.z) * static_cast<double>(s[2]);
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Distance from every voxel of `from` to the nearest voxel of `to`.
inline std::vector<double> directed_distances(const BinaryMask& from, const BinaryMask& to, const Spacing& s) {
    const auto sources = foreground_voxels(from, false);
    const auto targets = foreground_voxels(to, true);
    const auto Y = static_cast<std::ptrdiff_t>(from.extents[1]);
    const auto Z = static_cast<std::ptrdiff_t>(from.extents[2]);
    std::vector<double> out;
    out.reserve(sources.size());
    for (const auto& a : sources) {
        if (to.values[static_cast<std::size_t>((a.x * Y + a.y) * Z + a.z)]) {
            out.push_back(0.0);
            continue;
        }
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : targets) best = std::min(best, voxel_distance(a, b, s));
        out.push_back(best);
    }
    return out;
}

/// Nearest-rank 95th percentile: element ceil(0.95·n) of the sorted values.
inline double percentile95(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t rank = (95 * values.size() + 99) / 100;
    return values[rank - 1];
}

}  // namespace detail

/// Physical diagonal of the volume, reported when exactly one mask is empty.
inline double volume_diagonal(const Extents& e, const Spacing& s) {
    double total = 0.0;
    for (std::size_t a = 0; a < 3; ++a) {
        const double len = static_cast<double>(e[a]) * static_cast<double>(s[a]);
        total += len * len;
    }
    return std::sqrt(total);
}

/// 95th-percentile symmetric Hausdorff distance in mm between the centres of
/// foreground voxels. Both empty → 0; one empty → volume diagonal.
inline double hd95(const BinaryMask& pred, const BinaryMask& gt, const Spacing& spacing) {
    detail::check_same_extents("hd95", pred, gt);
    for (float s : spacing)
        if (!(s > 0.0f)) throw std::invalid_argument("hd95: spacing must be positive");
    const std::size_t np = pred.count();
    const std::size_t ng = gt.count();
    if (np == 0 && ng == 0) return 0.0;
    if (np == 0 || ng == 0) return volume_diagonal(pred.extents, spacing);
    return std::max(detail::percentile95(detail::directed_distances(pred, gt, spacing)),
                    detail::percentile95(detail::directed_distances(gt, pred, spacing)));
}

inline BinaryMask region_mask(const LabelVolume& labels, const std::vector<std::size_t>& classes) {
    BinaryMask m{labels.extents, std::vector<std::uint8_t>(labels.labels.size(), 0)};
    for (std::size_t v = 0; v < labels.labels.size(); ++v)
        for (std::size_t c : classes)
            if (labels.labels[v] == c) m.values[v] = 1;
    return m;
}

/// One mask per region, each the union of its classes.
inline std::vector<std::pair<std::string, BinaryMask>> nested_region_masks(const LabelVolume& labels,
                                                                           const RegionSpec& regions,
                                                                           std::size_t num_classes) {
    std::vector<std::pair<std::string, BinaryMask>> out;
    for (const auto& r : regions) {
        for (std::size_t c : r.classes)
            if (c >= num_classes)
                throw std::invalid_argument("region '" + r.name + "' refers to class " + std::to_string(c) +
                                            " but there are only " + std::to_string(num_classes));
        out.emplace_back(r.name, region_mask(labels, r.classes));
    }
    return out;
}

/// ET ⊂ TC ⊂ WT layout for the five-class phantom (lesion shells 2..4).
inline RegionSpec nested_tumor_regions() {
    return {{"ET", {4}}, {"TC", {3, 4}}, {"WT", {2, 3, 4}}};
}

/// One singleton region per non-background class.
inline RegionSpec per_class_regions(std::size_t num_classes) {
    RegionSpec out;
    for (std::size_t c = 1; c < num_classes; ++c) out.push_back({"class" + std::to_string(c), {c}});
    return out;
}

inline RegionSpec default_regions(std::size_t num_classes) {
    return num_classes == 5 ? nested_tumor_regions() : per_class_regions(num_classes);
}

inline std::vector<MetricsRow> compute_metrics(const LabelVolume& pred, const LabelVolume& gt,
                                               const RegionSpec& regions, std::size_t num_classes) {
    if (pred.extents != gt.extents) throw std::invalid_argument("compute_metrics: label extents differ");
    const auto pm = nested_region_masks(pred, regions, num_classes);
    const auto gm = nested_region_masks(gt, regions, num_classes);
    std::vector<MetricsRow> rows;
    for (std::size_t i = 0; i < regions.size(); ++i)
        rows.push_back({regions[i].name, dice_score(pm[i].second, gm[i].second),
                        hd95(pm[i].second, gm[i].second, gt.spacing),
                        volume_similarity(pm[i].second, gm[i].second)});
    return rows;
}

/// Fixed six-decimal rendering with '.' regardless of locale.
inline std::string format_fixed(double value, int precision = 6) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::fixed, precision);
    if (ec != std::errc{}) throw std::runtime_error("format_fixed: value out of range");
    return std::string(buf, end);
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << "region,dice,hd95_mm,volume_similarity\n";
    for (const auto& r : rows)
        os << r.region << ',' << format_fixed(r.dice) << ',' << format_fixed(r.hd95) << ','
           << format_fixed(r.volume_similarity) << '\n';
}

}  // namespace hft
