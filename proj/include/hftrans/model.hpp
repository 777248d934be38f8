#pragma once

// Hybrid-fusion segmentation network.
//
//   inputs [N,W,H,D]
//     → one CNN encoder per fusion-spec entry (all modalities, then per-modality
//       or leave-one-out subsets), each giving f [K,W/8,H/8,D/8] and skips at
//       full, 1/2 and 1/4 resolution
//     → 2×2×2 patch embedding of every f, tokens of all encoders concatenated
//       plus a learned positional embedding: z0 [M,C]
//     → L pre-norm transformer layers with global self-attention over all
//       M tokens (this is where the encoders' features are fused)
//     → CNN decoder: tokens folded back per encoder, concatenated, upsampled,
//       then three deconv stages each joined with the same-scale skips of
//       every encoder
//     → 1×1×1 head and softmax over classes.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hftrans/conv.hpp"
#include "hftrans/ops.hpp"
#include "hftrans/random.hpp"

namespace hft {

enum class FusionMode : std::uint8_t { early = 0, middle = 1, hybrid = 2, hybrid_star = 3, custom = 4 };

inline std::string_view to_string(FusionMode mode) {
    switch (mode) {
        case FusionMode::early: return "early";
        case FusionMode::middle: return "middle";
        case FusionMode::hybrid: return "hybrid";
        case FusionMode::hybrid_star: return "hybrid_star";
        case FusionMode::custom: return "custom";
    }
    return "unknown";
}

inline FusionMode parse_fusion_mode(std::string_view name) {
    for (auto m : {FusionMode::early, FusionMode::middle, FusionMode::hybrid, FusionMode::hybrid_star,
                   FusionMode::custom})
        if (to_string(m) == name) return m;
    if (name == "hybrid*") return FusionMode::hybrid_star;
    throw std::invalid_argument("unknown fusion mode '" + std::string(name) + "'");
}

/// Modality subsets (1-based indices) feeding each encoder, in encoder order.
struct FusionSpec {
    std::vector<std::vector<std::size_t>> encoder_inputs;

    std::size_t encoder_count() const { return encoder_inputs.size(); }
    bool operator==(const FusionSpec&) const = default;
};

/// e.g. "All / 1 / 2" style composition label: "1+2|1|2".
inline std::string describe(const FusionSpec& spec) {
    std::string out;
    for (std::size_t j = 0; j < spec.encoder_inputs.size(); ++j) {
        if (j) out += '|';
        for (std::size_t i = 0; i < spec.encoder_inputs[j].size(); ++i) {
            if (i) out += '+';
            out += std::to_string(spec.encoder_inputs[j][i]);
        }
    }
    return out;
}

inline FusionSpec make_fusion_spec(FusionMode mode, std::size_t modalities,
                                   const std::vector<std::vector<std::size_t>>& custom = {}) {
    if (modalities < 1) throw std::invalid_argument("make_fusion_spec: need at least one modality");
    std::vector<std::size_t> all(modalities);
    for (std::size_t m = 0; m < modalities; ++m) all[m] = m + 1;
    FusionSpec spec;
    switch (mode) {
        case FusionMode::early:
            spec.encoder_inputs = {all};
            break;
        case FusionMode::middle:
            for (std::size_t m : all) spec.encoder_inputs.push_back({m});
            break;
        case FusionMode::hybrid:
            spec.encoder_inputs = {all};
            for (std::size_t m : all) spec.encoder_inputs.push_back({m});
            break;
        case FusionMode::hybrid_star:
            if (modalities < 2) throw std::invalid_argument("make_fusion_spec: hybrid_star needs at least 2 modalities");
            spec.encoder_inputs = {all};
            for (std::size_t excluded : all) {
                std::vector<std::size_t> rest;
                for (std::size_t m : all)
                    if (m != excluded) rest.push_back(m);
                spec.encoder_inputs.push_back(rest);
            }
            break;
        case FusionMode::custom:
            if (custom.empty()) throw std::invalid_argument("make_fusion_spec: custom mode needs encoder subsets");
            for (const auto& subset : custom) {
                if (subset.empty()) throw std::invalid_argument("make_fusion_spec: empty encoder subset");
                for (std::size_t m : subset)
                    if (m < 1 || m > modalities)
                        throw std::invalid_argument("make_fusion_spec: modality index " + std::to_string(m) +
                                                    " outside 1.." + std::to_string(modalities));
            }
            spec.encoder_inputs = custom;
            break;
        default:
            throw std::invalid_argument("make_fusion_spec: unknown mode");
    }
    return spec;
}

struct ModelConfig {
    std::size_t modalities = 4;
    FusionMode fusion = FusionMode::hybrid;
    std::vector<std::vector<std::size_t>> custom_encoders;  // used when fusion == custom
    std::size_t num_classes = 5;
    std::array<std::size_t, 3> extents{32, 32, 32};
    std::size_t base_width = 8;
    std::size_t encoder_channels = 16;  // K
    std::size_t embed_dim = 48;         // C
    std::size_t layers = 4;             // L
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    bool instance_norm = true;
    std::uint64_t seed = 0;

    bool operator==(const ModelConfig&) const = default;

    FusionSpec fusion_spec() const { return make_fusion_spec(fusion, modalities, custom_encoders); }

    std::array<std::size_t, 3> token_grid() const {
        return {extents[0] / 16, extents[1] / 16, extents[2] / 16};
    }
    std::size_t tokens_per_encoder() const {
        const auto g = token_grid();
        return g[0] * g[1] * g[2];
    }
    std::size_t token_count() const { return fusion_spec().encoder_count() * tokens_per_encoder(); }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
        if (modalities < 1) fail("modalities must be at least 1");
        if (num_classes < 2) fail("num_classes must be at least 2");
        for (auto e : extents)
            if (e == 0 || e % 16 != 0) fail("extents must be positive multiples of 16");
        if (base_width < 1 || encoder_channels < 1 || embed_dim < 1 || heads < 1 || mlp_ratio < 1)
            fail("widths, heads and mlp_ratio must be positive");
        if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
        (void)fusion_spec();
    }
};

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct ConvParams {
    Tensor<T> weight;
    Tensor<T> bias;

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F& f) {
        f(prefix + ".weight", self.weight);
        f(prefix + ".bias", self.bias);
    }
};

template <class T>
using LinearParams = ConvParams<T>;

template <class T>
struct NormParams {
    Tensor<T> gamma;
    Tensor<T> beta;

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F& f) {
        f(prefix + ".gamma", self.gamma);
        f(prefix + ".beta", self.beta);
    }
};

/// blocks[s]: 3×3×3 conv at scale s (its output is skip s);
/// downs[s]: stride-2 3×3×3 conv from scale s to s+1.
template <class T>
struct EncoderParams {
    std::array<ConvParams<T>, 3> blocks;
    std::array<ConvParams<T>, 3> downs;

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F& f) {
        for (std::size_t s = 0; s < 3; ++s) {
            ConvParams<T>::visit(self.blocks[s], prefix + ".block" + std::to_string(s), f);
            ConvParams<T>::visit(self.downs[s], prefix + ".down" + std::to_string(s), f);
        }
    }
};

template <class T>
struct EmbeddingParams {
    LinearParams<T> projector;  // [C, 8K]
    Tensor<T> position;         // [M, C]

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F& f) {
        ConvParams<T>::visit(self.projector, prefix + ".projector", f);
        f(prefix + ".position", self.position);
    }
};

template <class T>
struct AttentionParams {
    LinearParams<T> query, key, value, output;

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F& f) {
        ConvParams<T>::visit(self.query, prefix + ".query", f);
        ConvParams<T>::visit(self.key, prefix + ".key", f);
        ConvParams<T>::visit(self.value, prefix + ".value", f);
        ConvParams<T>::visit(self.output, prefix + ".output", f);
    }
};

template <class T>
struct TransformerLayerParams {
    NormParams<T> norm1;
    AttentionParams<T> attention;
    std::size_t heads = 1;
    NormParams<T> norm2;
    LinearParams<T> fc1;  // C → rC
    LinearParams<T> fc2;  // rC → C

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F& f) {
        NormParams<T>::visit(self.norm1, prefix + ".norm1", f);
        AttentionParams<T>::visit(self.attention, prefix + ".attn", f);
        NormParams<T>::visit(self.norm2, prefix + ".norm2", f);
        ConvParams<T>::visit(self.fc1, prefix + ".fc1", f);
        ConvParams<T>::visit(self.fc2, prefix + ".fc2", f);
    }
};

/// up0: deconv of the folded tokens (E·C → E·C) to 1/8 scale; fuse0: conv
/// E·C → K. ups[s]/convs[s]: deconv into scale s and the conv that merges it
/// with every encoder's skip s. head: 1×1×1 conv to class logits.
template <class T>
struct DecoderParams {
    ConvParams<T> up0;
    ConvParams<T> fuse0;
    std::array<ConvParams<T>, 3> ups;
    std::array<ConvParams<T>, 3> convs;
    ConvParams<T> head;

    template <class Self, class F>
    static void visit(Self& self, const std::string& prefix, F& f) {
        ConvParams<T>::visit(self.up0, prefix + ".up0", f);
        ConvParams<T>::visit(self.fuse0, prefix + ".fuse0", f);
        for (std::size_t s = 3; s-- > 0;) {
            ConvParams<T>::visit(self.ups[s], prefix + ".up" + std::to_string(s + 1), f);
            ConvParams<T>::visit(self.convs[s], prefix + ".conv" + std::to_string(s + 1), f);
        }
        ConvParams<T>::visit(self.head, prefix + ".head", f);
    }
};

template <class T>
struct ModelParams {
    std::vector<EncoderParams<T>> encoders;
    EmbeddingParams<T> embedding;
    std::vector<TransformerLayerParams<T>> layers;
    DecoderParams<T> decoder;

    /// Calls f(name, tensor) for every parameter in a fixed order.
    template <class F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <class F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    /// (name, tensor) pairs sharing storage with this object.
    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for_each([&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
        return out;
    }

private:
    template <class Self, class F>
    static void visit(Self& self, F& f) {
        for (std::size_t j = 0; j < self.encoders.size(); ++j)
            EncoderParams<T>::visit(self.encoders[j], "encoder" + std::to_string(j), f);
        EmbeddingParams<T>::visit(self.embedding, "embedding", f);
        for (std::size_t l = 0; l < self.layers.size(); ++l)
            TransformerLayerParams<T>::visit(self.layers[l], "layer" + std::to_string(l), f);
        DecoderParams<T>::visit(self.decoder, "decoder", f);
    }
};

namespace detail {

template <class T>
Tensor<T> uniform_tensor(Rng& rng, Shape shape, double bound) {
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>(std::move(shape), std::move(v));
}

template <class T>
ConvParams<T> init_conv(Rng& rng, std::size_t cout, std::size_t cin, std::size_t k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k * k));
    return {uniform_tensor<T>(rng, {cout, cin, k, k, k}, bound), Tensor<T>::zeros({cout})};
}

/// Kernel [cin, cout, 2,2,2]; with stride 2 each output sees cin taps.
template <class T>
ConvParams<T> init_deconv(Rng& rng, std::size_t cin, std::size_t cout) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin));
    return {uniform_tensor<T>(rng, {cin, cout, 2, 2, 2}, bound), Tensor<T>::zeros({cout})};
}

template <class T>
LinearParams<T> init_linear(Rng& rng, std::size_t dout, std::size_t din) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    return {uniform_tensor<T>(rng, {dout, din}, bound), Tensor<T>::zeros({dout})};
}

template <class T>
NormParams<T> init_norm(std::size_t width) {
    return {Tensor<T>::full({width}, T(1)), Tensor<T>::zeros({width})};
}

}  // namespace detail

/// Seeded initialization: fan-in scaled uniform weights, zero biases, unit
/// norm gains, positional embedding uniform in [−0.02, 0.02].
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg) {
    cfg.validate();
    const FusionSpec spec = cfg.fusion_spec();
    const std::size_t E = spec.encoder_count();
    const std::size_t bw = cfg.base_width;
    const std::size_t K = cfg.encoder_channels;
    const std::size_t C = cfg.embed_dim;
    Rng rng(derive_seed(cfg.seed, "init"));

    ModelParams<T> p;
    const std::array<std::size_t, 3> width{bw, 2 * bw, 4 * bw};
    for (const auto& subset : spec.encoder_inputs) {
        EncoderParams<T> enc;
        std::size_t cin = subset.size();
        for (std::size_t s = 0; s < 3; ++s) {
            enc.blocks[s] = detail::init_conv<T>(rng, width[s], cin, 3);
            const std::size_t next = s < 2 ? width[s + 1] : K;
            enc.downs[s] = detail::init_conv<T>(rng, next, width[s], 3);
            cin = next;
        }
        p.encoders.push_back(std::move(enc));
    }

    p.embedding.projector = detail::init_linear<T>(rng, C, 8 * K);
    p.embedding.position = detail::uniform_tensor<T>(rng, {cfg.token_count(), C}, 0.02);

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        TransformerLayerParams<T> layer;
        layer.heads = cfg.heads;
        layer.norm1 = detail::init_norm<T>(C);
        layer.attention.query = detail::init_linear<T>(rng, C, C);
        layer.attention.key = detail::init_linear<T>(rng, C, C);
        layer.attention.value = detail::init_linear<T>(rng, C, C);
        layer.attention.output = detail::init_linear<T>(rng, C, C);
        layer.norm2 = detail::init_norm<T>(C);
        layer.fc1 = detail::init_linear<T>(rng, cfg.mlp_ratio * C, C);
        layer.fc2 = detail::init_linear<T>(rng, C, cfg.mlp_ratio * C);
        p.layers.push_back(std::move(layer));
    }

    auto& d = p.decoder;
    d.up0 = detail::init_deconv<T>(rng, E * C, E * C);
    d.fuse0 = detail::init_conv<T>(rng, K, E * C, 3);
    std::size_t below = K;
    for (std::size_t s = 3; s-- > 0;) {
        d.ups[s] = detail::init_deconv<T>(rng, below, width[s]);
        d.convs[s] = detail::init_conv<T>(rng, width[s], (E + 1) * width[s], 3);
        below = width[s];
    }
    d.head = detail::init_conv<T>(rng, cfg.num_classes, bw, 1);
    return p;
}

/// Copy of `params` whose tensors are leaves on `tape` (same storage).
template <class T>
ModelParams<T> bind(const ModelParams<T>& params, Tape<T>& tape) {
    ModelParams<T> out = params;
    out.for_each([&](const std::string&, Tensor<T>& t) { t = tape.watch(t); });
    return out;
}

template <class T>
std::size_t count_parameters(const ModelParams<T>& params) {
    std::size_t total = 0;
    params.for_each([&](const std::string&, const Tensor<T>& t) { total += t.size(); });
    return total;
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
struct EncoderOutput {
    Tensor<T> f;                     // [K, W/8, H/8, D/8]
    std::array<Tensor<T>, 3> skips;  // widths bw, 2bw, 4bw at W, W/2, W/4
};

namespace detail {

template <class T>
Tensor<T> conv_block(const Tensor<T>& x, const ConvParams<T>& p, std::size_t stride, bool normalize) {
    auto h = conv3d(x, p.weight, p.bias, stride, 1);
    if (normalize) h = instance_norm(h);
    return relu(h);
}

/// Channels of `inputs` named by 1-based `subset`.
template <class T>
Tensor<T> select_modalities(const Tensor<T>& inputs, const std::vector<std::size_t>& subset) {
    bool identity = subset.size() == inputs.extent(0);
    for (std::size_t i = 0; identity && i < subset.size(); ++i) identity = subset[i] == i + 1;
    if (identity) return inputs;
    std::vector<Tensor<T>> channels;
    for (std::size_t m : subset) {
        require(m >= 1 && m <= inputs.extent(0), "fusion spec refers to modality " + std::to_string(m) +
                                                     " but input has " + std::to_string(inputs.extent(0)));
        channels.push_back(slice(inputs, 0, m - 1, 1));
    }
    return channels.size() == 1 ? channels.front() : concat(channels, 0);
}

}  // namespace detail

/// Three downsampling stages: 3×3×3 conv block (skip), then stride-2 conv.
template <class T>
EncoderOutput<T> encoder_forward(const Tensor<T>& x, const EncoderParams<T>& p, bool normalize = true) {
    detail::check_volume("encoder_forward", x, "input");
    detail::require(x.extent(0) == p.blocks[0].weight.extent(1),
                    "encoder_forward: input has " + std::to_string(x.extent(0)) + " channels, encoder expects " +
                        std::to_string(p.blocks[0].weight.extent(1)));
    for (std::size_t a = 1; a < 4; ++a)
        detail::require(x.extent(a) % 8 == 0, "encoder_forward: spatial extents must be divisible by 8, got " +
                                                  shape_str(x.shape()));
    EncoderOutput<T> out;
    Tensor<T> h = x;
    for (std::size_t s = 0; s < 3; ++s) {
        h = detail::conv_block(h, p.blocks[s], 1, normalize);
        out.skips[s] = h;
        h = detail::conv_block(h, p.downs[s], 2, normalize);
    }
    out.f = h;
    return out;
}

/// Cuts every f [K,w,h,d] into 2×2×2 patches (flattened K-major), projects
/// them to C, concatenates all encoders' tokens in encoder order and adds the
/// positional embedding. Tokens within an encoder are in row-major patch order.
template <class T>
Tensor<T> patch_embed_and_position(const std::vector<Tensor<T>>& features, const EmbeddingParams<T>& p) {
    detail::require(!features.empty(), "patch_embed_and_position: no encoder features");
    const Shape& fs = features.front().shape();
    detail::require(fs.size() == 4, "patch_embed_and_position: features must be [K,w,h,d]");
    for (std::size_t a = 1; a < 4; ++a)
        detail::require(fs[a] % 2 == 0, "patch_embed_and_position: extents must be divisible by 2, got " +
                                            shape_str(fs));
    const std::size_t K = fs[0];
    const std::size_t g0 = fs[1] / 2, g1 = fs[2] / 2, g2 = fs[3] / 2;
    std::vector<Tensor<T>> tokens;
    for (const auto& f : features) {
        detail::require(f.shape() == fs, "patch_embed_and_position: encoders disagree on feature shape");
        auto patches = reshape(f, {K, g0, 2, g1, 2, g2, 2});
        patches = permute(patches, {1, 3, 5, 0, 2, 4, 6});
        tokens.push_back(linear(reshape(patches, {g0 * g1 * g2, 8 * K}), p.projector.weight, p.projector.bias));
    }
    auto z = tokens.size() == 1 ? tokens.front() : concat(tokens, 0);
    detail::require(p.position.shape() == z.shape(), "patch_embed_and_position: positional embedding " +
                                                         shape_str(p.position.shape()) + " does not match tokens " +
                                                         shape_str(z.shape()));
    return add(z, p.position);
}

/// Multi-head self-attention over all M tokens.
template <class T>
Tensor<T> msa(const Tensor<T>& z, const AttentionParams<T>& p, std::size_t heads) {
    detail::require(z.rank() == 2, "msa: expected [M,C], got " + shape_str(z.shape()));
    const std::size_t C = z.extent(1);
    detail::require(heads >= 1 && C % heads == 0, "msa: embedding dim not divisible by head count");
    const std::size_t dh = C / heads;
    const auto q = linear(z, p.query.weight, p.query.bias);
    const auto k = linear(z, p.key.weight, p.key.bias);
    const auto v = linear(z, p.value.weight, p.value.bias);
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> outputs;
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = heads == 1 ? q : slice(q, 1, h * dh, dh);
        auto kh = heads == 1 ? k : slice(k, 1, h * dh, dh);
        auto vh = heads == 1 ? v : slice(v, 1, h * dh, dh);
        auto attention = softmax(scale(matmul(qh, transpose(kh)), inv_scale));
        outputs.push_back(matmul(attention, vh));
    }
    auto merged = outputs.size() == 1 ? outputs.front() : concat(outputs, 1);
    return linear(merged, p.output.weight, p.output.bias);
}

/// z* = MSA(LN(z)) + z;  out = MLP(LN(z*)) + z*.
template <class T>
Tensor<T> transformer_layer(const Tensor<T>& z, const TransformerLayerParams<T>& p) {
    auto attended = add(msa(layer_norm(z, p.norm1.gamma, p.norm1.beta), p.attention, p.heads), z);
    auto hidden = gelu(linear(layer_norm(attended, p.norm2.gamma, p.norm2.beta), p.fc1.weight, p.fc1.bias));
    return add(linear(hidden, p.fc2.weight, p.fc2.bias), attended);
}

template <class T>
Tensor<T> transformer_encoder(const Tensor<T>& z0, const std::vector<TransformerLayerParams<T>>& layers) {
    Tensor<T> z = z0;
    for (const auto& layer : layers) z = transformer_layer(z, layer);
    return z;
}

/// Class logits [num_classes, W, H, D].
template <class T>
Tensor<T> decoder_forward(const Tensor<T>& tokens, const std::vector<EncoderOutput<T>>& encoders,
                          const DecoderParams<T>& p, const std::array<std::size_t, 3>& token_grid,
                          bool normalize = true) {
    const std::size_t E = encoders.size();
    const std::size_t T_per = token_grid[0] * token_grid[1] * token_grid[2];
    detail::require(tokens.rank() == 2 && tokens.extent(0) == E * T_per,
                    "decoder_forward: expected " + std::to_string(E * T_per) + " tokens, got " +
                        shape_str(tokens.shape()));
    const std::size_t C = tokens.extent(1);

    std::vector<Tensor<T>> maps;
    for (std::size_t j = 0; j < E; ++j) {
        auto zj = E == 1 ? tokens : slice(tokens, 0, j * T_per, T_per);
        zj = reshape(zj, {token_grid[0], token_grid[1], token_grid[2], C});
        maps.push_back(permute(zj, {3, 0, 1, 2}));
    }
    auto h = maps.size() == 1 ? maps.front() : concat(maps, 0);
    h = conv_transpose3d(h, p.up0.weight, p.up0.bias, 2);
    h = detail::conv_block(h, p.fuse0, 1, normalize);

    for (std::size_t s = 3; s-- > 0;) {
        auto up = conv_transpose3d(h, p.ups[s].weight, p.ups[s].bias, 2);
        std::vector<Tensor<T>> parts{up};
        for (const auto& enc : encoders) {
            detail::require(enc.skips[s].rank() == 4 && enc.skips[s].extent(1) == up.extent(1) &&
                                enc.skips[s].extent(2) == up.extent(2) && enc.skips[s].extent(3) == up.extent(3),
                            "decoder_forward: skip " + std::to_string(s) + " has shape " +
                                shape_str(enc.skips[s].shape()) + ", decoder is at " + shape_str(up.shape()));
            parts.push_back(enc.skips[s]);
        }
        h = detail::conv_block(concat(parts, 0), p.convs[s], 1, normalize);
    }
    return conv3d(h, p.head.weight, p.head.bias, 1, 0);
}

template <class T>
Tensor<T> model_logits(const Tensor<T>& inputs, const ModelConfig& cfg, const FusionSpec& spec,
                       const ModelParams<T>& p) {
    detail::check_volume("model_forward", inputs, "inputs");
    detail::require(inputs.extent(0) == cfg.modalities, "model_forward: expected " + std::to_string(cfg.modalities) +
                                                            " modalities, got " + std::to_string(inputs.extent(0)));
    for (std::size_t a = 0; a < 3; ++a)
        detail::require(inputs.extent(a + 1) == cfg.extents[a] && cfg.extents[a] % 16 == 0,
                        "model_forward: input extents " + shape_str(inputs.shape()) +
                            " do not match the configured multiples of 16");
    detail::require(p.encoders.size() == spec.encoder_count(), "model_forward: parameter/encoder count mismatch");

    std::vector<EncoderOutput<T>> encoded;
    std::vector<Tensor<T>> features;
    for (std::size_t j = 0; j < spec.encoder_count(); ++j) {
        encoded.push_back(encoder_forward(detail::select_modalities(inputs, spec.encoder_inputs[j]), p.encoders[j],
                                          cfg.instance_norm));
        features.push_back(encoded.back().f);
    }
    auto z = patch_embed_and_position(features, p.embedding);
    z = transformer_encoder(z, p.layers);
    return decoder_forward(z, encoded, p.decoder, cfg.token_grid(), cfg.instance_norm);
}

/// Class probabilities [num_classes, W, H, D].
template <class T>
Tensor<T> model_forward(const Tensor<T>& inputs, const ModelConfig& cfg, const FusionSpec& spec,
                        const ModelParams<T>& p) {
    return softmax(model_logits(inputs, cfg, spec, p), 0);
}

/// Configuration, fusion spec and parameters of one network instance.
template <class T>
class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)), spec_(cfg_.fusion_spec()), params_(init_params<T>(cfg_)) {}

    Model(ModelConfig cfg, ModelParams<T> params)
        : cfg_(std::move(cfg)), spec_(cfg_.fusion_spec()), params_(std::move(params)) {
        cfg_.validate();
    }

    const ModelConfig& config() const { return cfg_; }
    const FusionSpec& fusion() const { return spec_; }
    std::size_t encoder_count() const { return spec_.encoder_count(); }
    ModelParams<T>& params() { return params_; }
    const ModelParams<T>& params() const { return params_; }

    Tensor<T> logits(const Tensor<T>& inputs) const { return model_logits(inputs, cfg_, spec_, params_); }
    Tensor<T> forward(const Tensor<T>& inputs) const { return model_forward(inputs, cfg_, spec_, params_); }

    /// Probabilities recorded on `tape`, with every parameter as a leaf.
    /// The bound parameters are returned through `bound` for gradient lookup.
    Tensor<T> forward(const Tensor<T>& inputs, Tape<T>& tape, ModelParams<T>& bound) const {
        bound = bind(params_, tape);
        return model_forward(inputs, cfg_, spec_, bound);
    }

private:
    ModelConfig cfg_;
    FusionSpec spec_;
    ModelParams<T> params_;
};

}  // namespace hft
