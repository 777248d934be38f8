#pragma once

// Checkpoint file, little-endian:
//   "HFTC", u8 version (1)
//   config: u32 modalities, u8 fusion mode, u32 encoder count,
//           per encoder { u32 subset size, u32 modality index... },
//           u32 num_classes, u64 extents[3], u32 base_width,
//           u32 encoder_channels, u32 embed_dim, u32 layers, u32 heads,
//           u32 mlp_ratio, u8 instance_norm, u64 seed
//   u32 tensor count, then per tensor:
//           u32 name length, name bytes, u8 rank, u64 extents[rank],
//           f32 values (row-major)

#include <filesystem>
#include <fstream>

#include "hftrans/binary_io.hpp"
#include "hftrans/model.hpp"

namespace hft {

inline constexpr char kCheckpointMagic[] = "HFTC";
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

inline void write_config(std::ostream& os, const ModelConfig& cfg) {
    const FusionSpec spec = cfg.fusion_spec();
    io::put_u32(os, static_cast<std::uint32_t>(cfg.modalities));
    io::put_u8(os, static_cast<std::uint8_t>(cfg.fusion));
    io::put_u32(os, static_cast<std::uint32_t>(spec.encoder_count()));
    for (const auto& subset : spec.encoder_inputs) {
        io::put_u32(os, static_cast<std::uint32_t>(subset.size()));
        for (auto m : subset) io::put_u32(os, static_cast<std::uint32_t>(m));
    }
    io::put_u32(os, static_cast<std::uint32_t>(cfg.num_classes));
    for (auto e : cfg.extents) io::put_u64(os, e);
    for (auto v : {cfg.base_width, cfg.encoder_channels, cfg.embed_dim, cfg.layers, cfg.heads, cfg.mlp_ratio})
        io::put_u32(os, static_cast<std::uint32_t>(v));
    io::put_u8(os, cfg.instance_norm ? 1 : 0);
    io::put_u64(os, cfg.seed);
}

inline ModelConfig read_config(std::istream& is) {
    ModelConfig cfg;
    cfg.modalities = io::get_u32(is, "modalities");
    const auto mode = io::get_u8(is, "fusion mode");
    if (mode > static_cast<std::uint8_t>(FusionMode::custom)) throw FormatError("checkpoint: unknown fusion mode");
    cfg.fusion = static_cast<FusionMode>(mode);
    const auto encoders = io::get_u32(is, "encoder count");
    std::vector<std::vector<std::size_t>> subsets(encoders);
    for (auto& subset : subsets) {
        subset.resize(io::get_u32(is, "subset size"));
        for (auto& m : subset) m = io::get_u32(is, "modality index");
    }
    if (cfg.fusion == FusionMode::custom) cfg.custom_encoders = subsets;
    cfg.num_classes = io::get_u32(is, "num_classes");
    for (auto& e : cfg.extents) e = io::get_u64(is, "extent");
    for (auto* v : {&cfg.base_width, &cfg.encoder_channels, &cfg.embed_dim, &cfg.layers, &cfg.heads, &cfg.mlp_ratio})
        *v = io::get_u32(is, "width");
    cfg.instance_norm = io::get_u8(is, "instance_norm") != 0;
    cfg.seed = io::get_u64(is, "seed");
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint: invalid config: ") + e.what());
    }
    if (cfg.fusion_spec().encoder_inputs != subsets) throw FormatError("checkpoint: encoder subsets disagree with mode");
    return cfg;
}

}  // namespace detail

template <class T>
void write_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic, 4);
    io::put_u8(os, kCheckpointVersion);
    detail::write_config(os, model.config());
    const auto named = model.params().named();
    io::put_u32(os, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        io::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::put_u8(os, static_cast<std::uint8_t>(t.rank()));
        for (auto e : t.shape()) io::put_u64(os, e);
        for (T v : t.values()) io::put_f32(os, static_cast<float>(v));
    }
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

/// Reads a checkpoint; tensor names and shapes must match the layout the
/// stored config implies.
template <class T = float>
Model<T> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    io::expect_magic(is, kCheckpointMagic, path.string());
    const auto version = io::get_u8(is, "version");
    if (version != kCheckpointVersion)
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    const ModelConfig cfg = detail::read_config(is);

    ModelParams<T> params = init_params<T>(cfg);
    const auto count = io::get_u32(is, "tensor count");
    std::size_t index = 0;
    std::size_t expected = 0;
    params.for_each([&](const std::string&, Tensor<T>&) { ++expected; });
    if (count != expected)
        throw FormatError(path.string() + ": expected " + std::to_string(expected) + " tensors, found " +
                          std::to_string(count));
    params.for_each([&](const std::string& name, Tensor<T>& t) {
        const auto len = io::get_u32(is, "name length");
        std::string stored(len, '\0');
        is.read(stored.data(), len);
        if (is.gcount() != static_cast<std::streamsize>(len)) throw FormatError("truncated file while reading name");
        if (stored != name)
            throw FormatError(path.string() + ": tensor " + std::to_string(index) + " is '" + stored +
                              "', expected '" + name + "'");
        const auto rank = io::get_u8(is, "rank");
        Shape shape(rank);
        for (auto& e : shape) e = io::get_u64(is, "extent");
        if (shape != t.shape())
            throw FormatError(path.string() + ": tensor '" + name + "' has shape " + shape_str(shape) +
                              ", expected " + shape_str(t.shape()));
        std::vector<T> values(t.size());
        for (auto& v : values) v = static_cast<T>(io::get_f32(is, "tensor values"));
        t = Tensor<T>(shape, std::move(values));
        ++index;
    });
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
    return Model<T>(cfg, std::move(params));
}

}  // namespace hft
