#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"

using hft::FusionMode;
using hft::ModelConfig;
using hft::Rng;
using hft::Shape;
using hft::Tensor;
using testutil::random_tensor;

namespace {

const FusionMode kModes[] = {FusionMode::early, FusionMode::middle, FusionMode::hybrid, FusionMode::hybrid_star};

std::size_t expected_encoders(FusionMode m, std::size_t n) {
    switch (m) {
        case FusionMode::early: return 1;
        case FusionMode::middle: return n;
        default: return n + 1;
    }
}

}  // namespace

TEST(Fusion, SpecsForEveryMode) {
    using V = std::vector<std::vector<std::size_t>>;
    EXPECT_EQ(hft::make_fusion_spec(FusionMode::early, 3).encoder_inputs, (V{{1, 2, 3}}));
    EXPECT_EQ(hft::make_fusion_spec(FusionMode::middle, 3).encoder_inputs, (V{{1}, {2}, {3}}));
    EXPECT_EQ(hft::make_fusion_spec(FusionMode::hybrid, 3).encoder_inputs, (V{{1, 2, 3}, {1}, {2}, {3}}));
    EXPECT_EQ(hft::make_fusion_spec(FusionMode::hybrid_star, 3).encoder_inputs,
              (V{{1, 2, 3}, {2, 3}, {1, 3}, {1, 2}}));
    EXPECT_EQ(hft::describe(hft::make_fusion_spec(FusionMode::hybrid, 2)), "1+2|1|2");
}

TEST(Fusion, CustomSpecValidation) {
    EXPECT_THROW(hft::make_fusion_spec(FusionMode::custom, 2), std::invalid_argument);
    EXPECT_THROW(hft::make_fusion_spec(FusionMode::custom, 2, {{1, 3}}), std::invalid_argument);
    EXPECT_THROW(hft::make_fusion_spec(FusionMode::custom, 2, {{}}), std::invalid_argument);
    EXPECT_THROW(hft::make_fusion_spec(FusionMode::hybrid_star, 1), std::invalid_argument);
    EXPECT_EQ(hft::make_fusion_spec(FusionMode::custom, 2, {{2}, {1, 2}}).encoder_count(), 2u);
}

TEST(Fusion, ParseModeNames) {
    EXPECT_EQ(hft::parse_fusion_mode("hybrid*"), FusionMode::hybrid_star);
    EXPECT_EQ(hft::parse_fusion_mode("middle"), FusionMode::middle);
    EXPECT_THROW(hft::parse_fusion_mode("late"), std::invalid_argument);
}

TEST(ModelConfig, RejectsInvalid) {
    ModelConfig c;
    c.extents = {24, 32, 32};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.heads = 5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.num_classes = 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

// Encoder counts, token counts, output shape and per-voxel probability sums
// for N ∈ {2,3,4}, extents ∈ {16³, 32³} and all four modes at default widths.
TEST(Model, ShapeAndFusionInvariants) {
    for (std::size_t n : {2u, 3u, 4u})
        for (std::size_t e : {16u, 32u})
            for (auto mode : kModes) {
                ModelConfig c;
                c.modalities = n;
                c.fusion = mode;
                c.extents = {e, e, e};
                c.seed = n * 100 + e;
                const hft::Model<float> model(c);
                SCOPED_TRACE(std::string(hft::to_string(mode)) + " N=" + std::to_string(n) + " e=" + std::to_string(e));
                EXPECT_EQ(model.encoder_count(), expected_encoders(mode, n));
                EXPECT_EQ(c.token_count(), model.encoder_count() * (e / 16) * (e / 16) * (e / 16));
                EXPECT_EQ(model.params().embedding.position.shape(), (Shape{c.token_count(), c.embed_dim}));
                Rng rng(c.seed);
                auto probs = model.forward(random_tensor<float>(rng, {n, e, e, e}));
                ASSERT_EQ(probs.shape(), (Shape{c.num_classes, e, e, e}));
                const std::size_t V = e * e * e;
                for (std::size_t v = 0; v < V; ++v) {
                    double s = 0.0;
                    for (std::size_t k = 0; k < c.num_classes; ++k) s += probs[k * V + v];
                    ASSERT_NEAR(s, 1.0, 1e-5) << "voxel " << v;
                }
            }
}

TEST(Model, NonRectangularExtents) {
    auto c = testutil::tiny_model(2, FusionMode::hybrid);
    c.extents = {16, 32, 48};
    const hft::Model<double> model(c);
    EXPECT_EQ(c.token_count(), 3u * 1 * 2 * 3);
    Rng rng(3);
    EXPECT_EQ(model.forward(random_tensor(rng, {2, 16, 32, 48})).shape(), (Shape{3, 16, 32, 48}));
}

TEST(Model, RejectsWrongInput) {
    const hft::Model<double> model(testutil::tiny_model(2, FusionMode::hybrid));
    EXPECT_THROW(model.forward(Tensor<double>::zeros({3, 16, 16, 16})), hft::ShapeError);
    EXPECT_THROW(model.forward(Tensor<double>::zeros({2, 32, 16, 16})), hft::ShapeError);
}

TEST(Encoder, SkipAndFeatureShapes) {
    auto c = testutil::tiny_model(2, FusionMode::early, 32);
    const auto p = hft::init_params<double>(c);
    Rng rng(4);
    const auto out = hft::encoder_forward(random_tensor(rng, {2, 32, 32, 32}), p.encoders[0]);
    EXPECT_EQ(out.skips[0].shape(), (Shape{2, 32, 32, 32}));
    EXPECT_EQ(out.skips[1].shape(), (Shape{4, 16, 16, 16}));
    EXPECT_EQ(out.skips[2].shape(), (Shape{8, 8, 8, 8}));
    EXPECT_EQ(out.f.shape(), (Shape{4, 4, 4, 4}));
}

// Patch embedding against an explicit gather of each 2×2×2 patch, flattened
// channel-major then (dx,dy,dz), followed by the projection and position add.
TEST(Embedding, MatchesPatchGatherOracle) {
    Rng rng(5);
    const std::size_t K = 3, C = 5, g = 2;
    std::vector<Tensor<double>> features{random_tensor(rng, {K, 2 * g, 2 * g, 2 * g}),
                                         random_tensor(rng, {K, 2 * g, 2 * g, 2 * g})};
    hft::EmbeddingParams<double> p{{random_tensor(rng, {C, 8 * K}), random_tensor(rng, {C})},
                                   random_tensor(rng, {2 * g * g * g, C})};
    const auto z = hft::patch_embed_and_position(features, p);
    ASSERT_EQ(z.shape(), (Shape{2 * g * g * g, C}));
    const std::size_t n = 2 * g;
    for (std::size_t e = 0; e < 2; ++e)
        for (std::size_t px = 0; px < g; ++px)
            for (std::size_t py = 0; py < g; ++py)
                for (std::size_t pz = 0; pz < g; ++pz) {
                    std::vector<double> patch;
                    for (std::size_t k = 0; k < K; ++k)
                        for (std::size_t dx = 0; dx < 2; ++dx)
                            for (std::size_t dy = 0; dy < 2; ++dy)
                                for (std::size_t dz = 0; dz < 2; ++dz)
                                    patch.push_back(
                                        features[e][((k * n + 2 * px + dx) * n + 2 * py + dy) * n + 2 * pz + dz]);
                    const std::size_t token = e * g * g * g + (px * g + py) * g + pz;
                    for (std::size_t c = 0; c < C; ++c) {
                        double s = p.projector.bias[c] + p.position[token * C + c];
                        for (std::size_t i = 0; i < 8 * K; ++i) s += p.projector.weight[c * 8 * K + i] * patch[i];
                        EXPECT_NEAR(z[token * C + c], s, 1e-12);
                    }
                }
}

// Two tokens, one head: the attention weight of token i on token j is the
// logistic of the score difference.
TEST(Attention, TwoTokenClosedForm) {
    Rng rng(6);
    const std::size_t C = 4;
    auto z = random_tensor(rng, {2, C});
    hft::AttentionParams<double> p;
    for (auto* l : {&p.query, &p.key, &p.value, &p.output}) *l = {random_tensor(rng, {C, C}), random_tensor(rng, {C})};
    testutil::expect_near_all(hft::msa(z, p, 1), oracle::two_token_attention(z, p), 1e-6);
}

// Heads partition the channels: with block-diagonal projections, h heads
// equal h independent single-head attentions on the channel blocks.
TEST(Attention, HeadsActOnChannelBlocks) {
    Rng rng(7);
    const std::size_t M = 5, C = 6, H = 2, d = C / H;
    auto z = random_tensor(rng, {M, C});
    hft::AttentionParams<double> p;
    for (auto* l : {&p.query, &p.key, &p.value, &p.output}) *l = {random_tensor(rng, {C, C}), random_tensor(rng, {C})};
    const auto out = hft::msa(z, p, H);

    // Oracle: per-head attention from explicit loops.
    auto proj = [&](const hft::LinearParams<double>& l, const Tensor<double>& x) { return hft::linear(x, l.weight, l.bias); };
    const auto q = proj(p.query, z), k = proj(p.key, z), v = proj(p.value, z);
    std::vector<double> merged(M * C);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < M; ++i) {
            std::vector<double> s(M);
            double mx = -1e300;
            for (std::size_t j = 0; j < M; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < d; ++c) acc += q[i * C + h * d + c] * k[j * C + h * d + c];
                s[j] = acc / std::sqrt(double(d));
                mx = std::max(mx, s[j]);
            }
            double total = 0.0;
            for (auto& x : s) total += (x = std::exp(x - mx));
            for (std::size_t c = 0; c < d; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < M; ++j) acc += s[j] / total * v[j * C + h * d + c];
                merged[i * C + h * d + c] = acc;
            }
        }
    const auto expected = proj(p.output, Tensor<double>({M, C}, merged));
    testutil::expect_near_all(out, expected, 1e-10);
}

TEST(Transformer, ZeroedOutputProjectionsGiveIdentity) {
    auto c = testutil::tiny_model(2, FusionMode::hybrid);
    c.layers = 3;
    auto p = hft::init_params<double>(c);
    for (auto& layer : p.layers) {
        for (auto* t : {&layer.attention.output.weight, &layer.attention.output.bias, &layer.fc2.weight,
                        &layer.fc2.bias})
            *t = Tensor<double>::zeros(t->shape());
    }
    Rng rng(8);
    auto z = random_tensor(rng, {c.token_count(), c.embed_dim}, -5.0, 5.0);
    EXPECT_TRUE(testutil::bit_equal(hft::transformer_encoder(z, p.layers), z));
    auto zf = z.cast<float>();
    auto pf = hft::init_params<float>(c);
    for (auto& layer : pf.layers)
        for (auto* t : {&layer.attention.output.weight, &layer.attention.output.bias, &layer.fc2.weight,
                        &layer.fc2.bias})
            *t = Tensor<float>::zeros(t->shape());
    EXPECT_TRUE(testutil::bit_equal(hft::transformer_encoder(zf, pf.layers), zf));
}

TEST(Transformer, ResidualPathsAreAdditive) {
    // Zeroing only the MLP output leaves z + MSA(LN(z)).
    auto c = testutil::tiny_model(2, FusionMode::early);
    auto p = hft::init_params<double>(c);
    auto& layer = p.layers[0];
    layer.fc2.weight = Tensor<double>::zeros(layer.fc2.weight.shape());
    layer.fc2.bias = Tensor<double>::zeros(layer.fc2.bias.shape());
    Rng rng(9);
    auto z = random_tensor(rng, {c.token_count(), c.embed_dim});
    const auto expected = add(hft::msa(hft::layer_norm(z, layer.norm1.gamma, layer.norm1.beta), layer.attention,
                                       layer.heads),
                              z);
    testutil::expect_near_all(hft::transformer_layer(z, layer), expected, 1e-15);
}

// Swapping the two single-modality encoders of a middle-fusion model while
// also swapping the input modalities and every encoder-indexed block in the
// embedding and decoder leaves the output unchanged.
TEST(Model, EncoderPermutationEquivariance) {
    auto c = testutil::tiny_model(2, FusionMode::middle);
    const auto p = hft::init_params<double>(c);
    auto q = p;
    for (auto* tensor : {&q.decoder.up0.weight, &q.decoder.up0.bias}) *tensor = tensor->clone();
    std::swap(q.encoders[0], q.encoders[1]);

    const std::size_t T = c.tokens_per_encoder(), C = c.embed_dim, E = 2;
    auto swap_blocks = [](const Tensor<double>& t, std::size_t axis, std::size_t block) {
        auto a = hft::slice(t, axis, 0, block), b = hft::slice(t, axis, block, block);
        return hft::concat<double>({b, a}, axis);
    };
    q.embedding.position = swap_blocks(p.embedding.position, 0, T);
    q.decoder.up0.weight = swap_blocks(swap_blocks(p.decoder.up0.weight, 0, C), 1, C);
    q.decoder.up0.bias = swap_blocks(p.decoder.up0.bias, 0, C);
    q.decoder.fuse0.weight = swap_blocks(p.decoder.fuse0.weight, 1, C);
    for (std::size_t s = 0; s < 3; ++s) {
        const auto& w = p.decoder.convs[s].weight;
        const std::size_t width = w.extent(0);
        ASSERT_EQ(w.extent(1), (E + 1) * width);
        auto up = hft::slice(w, 1, 0, width);
        auto e0 = hft::slice(w, 1, width, width), e1 = hft::slice(w, 1, 2 * width, width);
        q.decoder.convs[s].weight = hft::concat<double>({up, e1, e0}, 1);
    }
    Rng rng(10);
    auto x = random_tensor(rng, {2, 16, 16, 16});
    auto x_swapped = swap_blocks(x, 0, 1);
    const auto spec = c.fusion_spec();
    testutil::expect_near_all(hft::model_forward(x, c, spec, p), hft::model_forward(x_swapped, c, spec, q), 1e-10);
}

TEST(Model, InitializationIsSeeded) {
    auto c = testutil::tiny_model(2, FusionMode::hybrid);
    const auto a = hft::init_params<float>(c).named();
    const auto b = hft::init_params<float>(c).named();
    c.seed += 1;
    const auto d = hft::init_params<float>(c).named();
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_TRUE(testutil::bit_equal(a[i].second, b[i].second)) << a[i].first;
        any_diff |= !testutil::bit_equal(a[i].second, d[i].second);
    }
    EXPECT_TRUE(any_diff);
}

// Closed-form parameter count, written out layer by layer.
TEST(Complexity, ParameterCountOracle) {
    for (std::size_t n : {2u, 3u, 4u})
        for (auto mode : kModes) {
            ModelConfig c;
            c.modalities = n;
            c.fusion = mode;
            const auto spec = c.fusion_spec();
            const std::size_t E = spec.encoder_count(), bw = c.base_width, K = c.encoder_channels,
                              C = c.embed_dim, nc = c.num_classes, r = c.mlp_ratio;
            auto conv = [](std::size_t co, std::size_t ci, std::size_t k) { return co * ci * k * k * k + co; };
            std::size_t expected = 0;
            for (const auto& subset : spec.encoder_inputs)
                expected += conv(bw, subset.size(), 3) + conv(2 * bw, bw, 3) + conv(2 * bw, 2 * bw, 3) +
                            conv(4 * bw, 2 * bw, 3) + conv(4 * bw, 4 * bw, 3) + conv(K, 4 * bw, 3);
            expected += (8 * K * C + C) + c.token_count() * C;
            expected += c.layers * (2 * 2 * C + 4 * (C * C + C) + (C * r * C + r * C) + (r * C * C + C));
            expected += (E * C) * (E * C) * 8 + E * C;                   // up0
            expected += conv(K, E * C, 3);                               // fuse0
            expected += K * 4 * bw * 8 + 4 * bw + conv(4 * bw, (E + 1) * 4 * bw, 3);
            expected += 4 * bw * 2 * bw * 8 + 2 * bw + conv(2 * bw, (E + 1) * 2 * bw, 3);
            expected += 2 * bw * bw * 8 + bw + conv(bw, (E + 1) * bw, 3);
            expected += conv(nc, bw, 1);
            const hft::Model<float> model(c);
            EXPECT_EQ(hft::count_parameters(model.params()), expected) << hft::to_string(mode) << " N=" << n;
        }
}

TEST(Complexity, ParameterCountsIncreaseEarlyMiddleHybrid) {
    for (std::size_t n : {2u, 3u, 4u}) {
        std::vector<std::size_t> counts;
        for (auto mode : kModes) {
            ModelConfig c;
            c.modalities = n;
            c.fusion = mode;
            counts.push_back(hft::count_parameters(hft::Model<float>(c).params()));
        }
        EXPECT_LT(counts[0], counts[1]);
        EXPECT_LT(counts[1], counts[2]);
        if (n > 2) {
            EXPECT_GT(counts[3], counts[2]);  // leave-one-out encoders take N−1 inputs
        } else {
            EXPECT_EQ(counts[3], counts[2]);  // N−1 = 1 input, same as single-modality encoders
        }
    }
}

// MACs for the default 32³ two-modality hybrid model, summed by hand:
// 3 encoders (first sees 2 channels), then embedding, 4 layers, decoder.
TEST(Complexity, MacCountOracle) {
    ModelConfig c;
    c.modalities = 2;
    c.fusion = FusionMode::hybrid;
    const std::uint64_t v0 = 32768, v1 = 4096, v2 = 512, v3 = 64;
    auto encoder = [&](std::uint64_t cin) {
        return 8 * cin * 27 * v0 + 16 * 8 * 27 * v1 + 16 * 16 * 27 * v1 + 32 * 16 * 27 * v2 + 32 * 32 * 27 * v2 +
               16 * 32 * 27 * v3;
    };
    std::uint64_t expected = encoder(2) + 2 * encoder(1);
    expected += 3 * 8 * (128 * 48);                                      // patch projection, 8 tokens per encoder
    expected += 4 * (4 * 24 * 48 * 48 + 2 * 24 * 24 * 48 + 2 * 24 * 48 * 192);  // M = 24
    expected += 144 * 144 * 8 * 8;                                       // up0 on the 2³ token grid
    expected += 16 * 144 * 27 * v3;                                      // fuse0
    expected += 16 * 32 * 8 * v3 + 32 * 128 * 27 * v2;                   // stage 1/4
    expected += 32 * 16 * 8 * v2 + 16 * 64 * 27 * v1;                   // stage 1/2
    expected += 16 * 8 * 8 * v1 + 8 * 32 * 27 * v0;                     // full resolution
    expected += 5 * 8 * v0;                                              // head
    EXPECT_EQ(hft::estimate_flops(c), expected);
}

// Full network, every parameter group and the input, against central
// differences at 64-bit on a 16³ volume.
TEST(Model, EndToEndGradientCheck) {
    auto c = testutil::tiny_model(2, FusionMode::hybrid);
    const auto spec = c.fusion_spec();
    const auto base = hft::init_params<double>(c);
    Rng rng(12);
    const auto x = random_tensor(rng, {2, 16, 16, 16});
    hft::LabelVolume labels{{16, 16, 16}, {1, 1, 1}, std::vector<std::uint8_t>(4096)};
    for (auto& l : labels.labels) l = static_cast<std::uint8_t>(rng.below(c.num_classes));

    const auto named = base.named();
    const std::vector<std::string> checked{"encoder0.block0.weight", "encoder1.down2.weight", "embedding.projector.weight",
                                           "embedding.position",     "layer0.attn.query.weight", "layer0.norm1.gamma",
                                           "layer0.fc1.weight",      "decoder.up0.weight",      "decoder.fuse0.weight",
                                           "decoder.conv1.weight",   "decoder.head.bias"};
    std::vector<Tensor<double>> inputs{x};
    for (const auto& name : checked) {
        auto it = std::find_if(named.begin(), named.end(), [&](const auto& p) { return p.first == name; });
        ASSERT_NE(it, named.end()) << name;
        inputs.push_back(it->second.clone());
    }
    hft::DoubleOp op = [&](const std::vector<Tensor<double>>& in) {
        auto p = base;
        p.for_each([&](const std::string& name, Tensor<double>& t) {
            auto it = std::find(checked.begin(), checked.end(), name);
            if (it != checked.end()) t = in[1 + static_cast<std::size_t>(it - checked.begin())];
        });
        return hft::combined_loss(hft::model_forward(in[0], c, spec, p), labels);
    };
    hft::GradCheckOptions opt;
    opt.step = 1e-5;
    opt.tolerance = 1e-3;
    opt.abs_floor = 1e-7;
    opt.max_probes_per_input = 6;
    const auto r = hft::grad_check("model", op, inputs, opt);
    EXPECT_TRUE(r.passed) << r.failures << " failures; worst " << r.worst_relative_error << " at "
                          << r.worst_location;
    std::size_t probes = 0;
    for (const auto& t : inputs) probes += std::min<std::size_t>(6, t.size());
    EXPECT_EQ(r.checked + r.skipped, probes);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto c = testutil::tiny_model(3, FusionMode::hybrid_star);
    c.instance_norm = false;
    const hft::Model<float> model(c);
    const auto dir = testutil::scratch_dir("ckpt");
    hft::write_checkpoint(model, dir / "a.hftc");
    const auto back = hft::read_checkpoint<float>(dir / "a.hftc");
    EXPECT_EQ(back.config(), model.config());
    const auto a = model.params().named(), b = back.params().named();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_TRUE(testutil::bit_equal(a[i].second, b[i].second)) << a[i].first;
    }
    hft::write_checkpoint(back, dir / "b.hftc");
    EXPECT_EQ(testutil::read_bytes(dir / "a.hftc"), testutil::read_bytes(dir / "b.hftc"));
}

TEST(Checkpoint, CustomFusionRoundTrip) {
    auto c = testutil::tiny_model(3, FusionMode::custom);
    c.custom_encoders = {{3}, {1, 2}};
    const hft::Model<float> model(c);
    const auto dir = testutil::scratch_dir("ckpt");
    hft::write_checkpoint(model, dir / "c.hftc");
    EXPECT_EQ(hft::read_checkpoint<float>(dir / "c.hftc").fusion(), model.fusion());
}

TEST(Checkpoint, RejectsCorruptFiles) {
    const hft::Model<float> model(testutil::tiny_model(2, FusionMode::early));
    const auto dir = testutil::scratch_dir("ckpt");
    hft::write_checkpoint(model, dir / "good.hftc");
    const auto bytes = testutil::read_bytes(dir / "good.hftc");
    auto write = [&](const std::string& name, const std::string& data) {
        std::ofstream(dir / name, std::ios::binary) << data;
        return dir / name;
    };
    EXPECT_THROW(hft::read_checkpoint<float>(write("magic.hftc", "XXXX" + bytes.substr(4))), hft::FormatError);
    EXPECT_THROW(hft::read_checkpoint<float>(write("short.hftc", bytes.substr(0, bytes.size() - 3))),
                 hft::FormatError);
    EXPECT_THROW(hft::read_checkpoint<float>(write("long.hftc", bytes + "z")), hft::FormatError);
    auto version = bytes;
    version[4] = 9;
    EXPECT_THROW(hft::read_checkpoint<float>(write("version.hftc", version)), hft::FormatError);
    EXPECT_THROW(hft::read_checkpoint<float>(dir / "missing.hftc"), std::runtime_error);
}
