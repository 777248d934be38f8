#pragma once

// Volume file, little-endian:
//   "HFTV", u8 version (1), u8 dtype (1 = f32, 2 = u8), u8 rank,
//   u64 extents[rank], f32 spacing[3], raw payload (row-major).
// A sample is two files: intensities [N,W,H,D] as f32 and labels [W,H,D] as
// u8. A dataset manifest lists one "<id> <intensities> <labels>" per line;
// relative paths are resolved against the manifest's directory.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <variant>

#include "hftrans/binary_io.hpp"
#include "hftrans/volume.hpp"

namespace hft {

inline constexpr char kVolumeMagic[] = "HFTV";
inline constexpr std::uint8_t kVolumeVersion = 1;

enum class VolumeDType : std::uint8_t { f32 = 1, u8 = 2 };

struct VolumeFile {
    Shape extents;
    Spacing spacing{1.0f, 1.0f, 1.0f};
    std::variant<std::vector<float>, std::vector<std::uint8_t>> payload;

    VolumeDType dtype() const { return payload.index() == 0 ? VolumeDType::f32 : VolumeDType::u8; }
};

constexpr std::size_t volume_header_size(std::size_t rank) { return 4 + 1 + 1 + 1 + 8 * rank + 3 * 4; }

inline void write_volume_file(const VolumeFile& vol, const std::filesystem::path& path) {
    const std::size_t n = shape_size(vol.extents);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kVolumeMagic, 4);
    io::put_u8(os, kVolumeVersion);
    io::put_u8(os, static_cast<std::uint8_t>(vol.dtype()));
    io::put_u8(os, static_cast<std::uint8_t>(vol.extents.size()));
    for (auto e : vol.extents) io::put_u64(os, e);
    for (float s : vol.spacing) io::put_f32(os, s);
    if (const auto* f = std::get_if<std::vector<float>>(&vol.payload)) {
        if (f->size() != n) throw std::invalid_argument("write_volume: payload size does not match extents");
        for (float v : *f) io::put_f32(os, v);
    } else {
        const auto& u = std::get<std::vector<std::uint8_t>>(vol.payload);
        if (u.size() != n) throw std::invalid_argument("write_volume: payload size does not match extents");
        os.write(reinterpret_cast<const char*>(u.data()), static_cast<std::streamsize>(u.size()));
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline VolumeFile read_volume_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    io::expect_magic(is, kVolumeMagic, path.string());
    const auto version = io::get_u8(is, "version");
    if (version != kVolumeVersion)
        throw FormatError(path.string() + ": unsupported volume version " + std::to_string(version));
    const auto dtype = io::get_u8(is, "dtype");
    const auto rank = io::get_u8(is, "rank");
    VolumeFile vol;
    vol.extents.resize(rank);
    for (auto& e : vol.extents) {
        e = io::get_u64(is, "extents");
        if (e == 0) throw FormatError(path.string() + ": zero extent");
    }
    for (auto& s : vol.spacing) s = io::get_f32(is, "spacing");
    const std::size_t n = shape_size(vol.extents);
    if (dtype == static_cast<std::uint8_t>(VolumeDType::f32)) {
        std::vector<float> values(n);
        for (auto& v : values) v = io::get_f32(is, "payload");
        vol.payload = std::move(values);
    } else if (dtype == static_cast<std::uint8_t>(VolumeDType::u8)) {
        std::vector<std::uint8_t> values(n);
        is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("truncated file while reading payload");
        vol.payload = std::move(values);
    } else {
        throw FormatError(path.string() + ": unknown dtype code " + std::to_string(dtype));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
    return vol;
}

inline void write_volume(const VolumeSample& sample, const std::filesystem::path& intensities,
                         const std::filesystem::path& labels) {
    const auto& e = sample.extents();
    write_volume_file({Shape{sample.modality_count(), e[0], e[1], e[2]}, sample.spacing(),
                       std::vector<float>(sample.modalities.values().begin(), sample.modalities.values().end())},
                      intensities);
    write_volume_file({Shape{e[0], e[1], e[2]}, sample.spacing(), sample.labels.labels}, labels);
}

/// Reads a sample written by write_volume. The foreground is every voxel
/// with a nonzero label or any nonzero intensity.
inline VolumeSample read_volume(const std::filesystem::path& intensities, const std::filesystem::path& labels) {
    auto iv = read_volume_file(intensities);
    auto lv = read_volume_file(labels);
    if (iv.dtype() != VolumeDType::f32 || iv.extents.size() != 4)
        throw FormatError(intensities.string() + ": expected rank-4 f32 intensities");
    if (lv.dtype() != VolumeDType::u8 || lv.extents.size() != 3)
        throw FormatError(labels.string() + ": expected rank-3 u8 labels");
    if (!std::equal(lv.extents.begin(), lv.extents.end(), iv.extents.begin() + 1))
        throw FormatError(labels.string() + ": extents do not match " + intensities.string());
    VolumeSample s;
    const Extents ext{lv.extents[0], lv.extents[1], lv.extents[2]};
    const std::size_t V = voxel_count(ext);
    const std::size_t N = iv.extents[0];
    auto values = std::get<std::vector<float>>(std::move(iv.payload));
    s.labels = {ext, lv.spacing, std::get<std::vector<std::uint8_t>>(std::move(lv.payload))};
    s.foreground = {ext, std::vector<std::uint8_t>(V, 0)};
    for (std::size_t v = 0; v < V; ++v) {
        bool fg = s.labels.labels[v] != 0;
        for (std::size_t m = 0; m < N && !fg; ++m) fg = values[m * V + v] != 0.0f;
        s.foreground.values[v] = fg;
    }
    s.modalities = Tensor<float>({N, ext[0], ext[1], ext[2]}, std::move(values));
    return s;
}

struct ManifestEntry {
    std::string id;
    std::filesystem::path intensities;
    std::filesystem::path labels;
};

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (const auto& e : entries) os << e.id << ' ' << e.intensities.string() << ' ' << e.labels.string() << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string a, b, extra;
        if (!(ls >> e.id >> a >> b) || (ls >> extra))
            throw FormatError(path.string() + ":" + std::to_string(lineno) +
                              ": expected '<sample-id> <intensities-path> <labels-path>'");
        e.intensities = std::filesystem::path(a).is_absolute() ? std::filesystem::path(a) : path.parent_path() / a;
        e.labels = std::filesystem::path(b).is_absolute() ? std::filesystem::path(b) : path.parent_path() / b;
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace hft
