#include <cmath>
#include <set>

#include "test_util.hpp"

using hft::Extents;
using hft::PhantomConfig;
using hft::Rng;
using hft::VolumeSample;

namespace {

PhantomConfig small_phantom(std::uint64_t seed = 1) {
    PhantomConfig c;
    c.extents = {20, 24, 16};
    c.seed = seed;
    return c;
}

}  // namespace

TEST(Phantom, DeterministicPerSeed) {
    const auto a = hft::generate_phantom(small_phantom(5));
    const auto b = hft::generate_phantom(small_phantom(5));
    const auto c = hft::generate_phantom(small_phantom(6));
    EXPECT_TRUE(testutil::bit_equal(a.modalities, b.modalities));
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_FALSE(testutil::bit_equal(a.modalities, c.modalities));
}

TEST(Phantom, ShapesAndClassesPresent) {
    const auto s = hft::generate_phantom(small_phantom());
    EXPECT_EQ(s.modalities.shape(), (hft::Shape{2, 20, 24, 16}));
    std::set<int> classes(s.labels.labels.begin(), s.labels.labels.end());
    EXPECT_EQ(classes, (std::set<int>{0, 1, 2, 3, 4}));
}

TEST(Phantom, LesionRegionsAreNestedAndInsideForeground) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto s = hft::generate_phantom(small_phantom(seed));
        const auto m = hft::nested_region_masks(s.labels, hft::nested_tumor_regions(), 5);
        for (std::size_t v = 0; v < s.labels.labels.size(); ++v) {
            EXPECT_LE(m[0].second.values[v], m[1].second.values[v]);  // ET ⊆ TC
            EXPECT_LE(m[1].second.values[v], m[2].second.values[v]);  // TC ⊆ WT
            EXPECT_EQ(s.foreground.values[v], s.labels.labels[v] != 0);
        }
        EXPECT_GT(m[0].second.count(), 0u);
    }
}

TEST(Phantom, BackgroundIsExactlyZero) {
    const auto s = hft::generate_phantom(small_phantom());
    const std::size_t V = hft::voxel_count(s.extents());
    for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t v = 0; v < V; ++v)
            if (!s.foreground.values[v]) ASSERT_EQ(s.modalities[m * V + v], 0.0f);
}

TEST(Phantom, NoiselessIntensitiesEqualTable) {
    auto cfg = small_phantom();
    cfg.noise_sigma = 0.0;
    const auto s = hft::generate_phantom(cfg);
    const auto table = cfg.table();
    const std::size_t V = hft::voxel_count(s.extents());
    for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t v = 0; v < V; ++v)
            ASSERT_EQ(s.modalities[m * V + v], static_cast<float>(table[s.labels.labels[v]][m]));
}

TEST(Phantom, NoiseHasConfiguredSpread) {
    auto cfg = small_phantom();
    cfg.extents = {32, 32, 32};
    cfg.noise_sigma = 0.3;
    const auto s = hft::generate_phantom(cfg);
    const auto table = cfg.table();
    const std::size_t V = hft::voxel_count(s.extents());
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < V; ++v)
        if (s.labels.labels[v] == 1) {
            const double r = s.modalities[v] - table[1][0];
            sum += r;
            sq += r * r;
            ++n;
        }
    ASSERT_GT(n, 1000u);
    EXPECT_NEAR(sum / n, 0.0, 0.03);
    EXPECT_NEAR(std::sqrt(sq / n), 0.3, 0.03);
}

TEST(Phantom, DefaultTableNeedsBothModalities) {
    // Every adjacent class pair is separable in some modality, but each
    // modality alone leaves one pair iso-intense.
    const auto t = hft::default_intensity_table(5, 2);
    for (std::size_t m = 0; m < 2; ++m) {
        std::size_t iso = 0;
        for (std::size_t c = 0; c + 1 < 5; ++c) iso += t[c][m] == t[c + 1][m];
        EXPECT_EQ(iso, 1u) << "modality " << m;
    }
    for (std::size_t c = 0; c + 1 < 5; ++c)
        EXPECT_TRUE(t[c][0] != t[c + 1][0] || t[c][1] != t[c + 1][1]) << "classes " << c;
    EXPECT_EQ(t[0], (std::vector<double>{0.0, 0.0}));
}

TEST(Phantom, ValidationRejectsInseparableTable) {
    auto cfg = small_phantom();
    cfg.noise_sigma = 0.5;  // unit level steps are then < 3σ
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = small_phantom();
    cfg.modalities = 1;
    cfg.intensity = {{0}, {1}, {1}, {2}, {3}};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg.intensity = {{0}, {1}, {2}};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);  // wrong row count
    cfg = small_phantom();
    cfg.num_classes = 6;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Phantom, FewerClasses) {
    auto cfg = small_phantom();
    cfg.num_classes = 3;
    const auto s = hft::generate_phantom(cfg);
    std::set<int> classes(s.labels.labels.begin(), s.labels.labels.end());
    EXPECT_EQ(classes, (std::set<int>{0, 1, 2}));
}

TEST(Phantom, BatchSeedsAreDistinct) {
    const auto v = hft::generate_phantoms(small_phantom(), 3);
    ASSERT_EQ(v.size(), 3u);
    EXPECT_NE(v[0].labels, v[1].labels);
    EXPECT_NE(v[1].labels, v[2].labels);
}

// ---------------------------------------------------------------------------

TEST(ZScore, ForegroundStandardizedBackgroundZero) {
    const auto raw = hft::generate_phantom(small_phantom());
    const auto s = hft::zscore_normalize(raw);
    const std::size_t V = hft::voxel_count(s.extents());
    const std::size_t n = raw.foreground.count();
    for (std::size_t m = 0; m < 2; ++m) {
        double sum = 0.0, sq = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
            if (!s.foreground.values[v]) {
                ASSERT_EQ(s.modalities[m * V + v], 0.0f);
                continue;
            }
            sum += s.modalities[m * V + v];
            sq += double(s.modalities[m * V + v]) * s.modalities[m * V + v];
        }
        EXPECT_NEAR(sum / n, 0.0, 1e-5);
        EXPECT_NEAR(sq / n, 1.0, 1e-4);
    }
    EXPECT_EQ(s.labels, raw.labels);
}

TEST(ZScore, RejectsConstantOrEmptyForeground) {
    auto cfg = small_phantom();
    cfg.noise_sigma = 0.0;
    cfg.num_classes = 2;
    cfg.intensity = {{0, 0}, {1, 2}};
    EXPECT_THROW(hft::zscore_normalize(hft::generate_phantom(cfg)), std::invalid_argument);
    auto s = hft::generate_phantom(small_phantom());
    std::fill(s.foreground.values.begin(), s.foreground.values.end(), 0);
    EXPECT_THROW(hft::zscore_normalize(s), std::invalid_argument);
}

TEST(Padding, PadThenCropIsIdentity) {
    Rng rng(300);
    for (int t = 0; t < 5; ++t) {
        auto cfg = small_phantom(t);
        cfg.extents = {8 + rng.below(20), 8 + rng.below(20), 8 + rng.below(20)};
        const auto s = hft::generate_phantom(cfg);
        const auto [padded, original] = hft::pad_to_multiple(s, 16);
        EXPECT_EQ(original, cfg.extents);
        for (std::size_t a = 0; a < 3; ++a) {
            EXPECT_EQ(padded.extents()[a] % 16, 0u);
            EXPECT_LT(padded.extents()[a] - cfg.extents[a], 16u);
        }
        const auto back = hft::resize_sample(padded, original);
        EXPECT_TRUE(testutil::bit_equal(back.modalities, s.modalities));
        EXPECT_EQ(back.labels, s.labels);
        EXPECT_EQ(back.foreground, s.foreground);
        EXPECT_EQ(hft::crop_labels(padded.labels, original), s.labels);
        // Padding adds only background.
        EXPECT_EQ(padded.foreground.count(), s.foreground.count());
    }
}

TEST(Padding, AlreadyAlignedIsUnchanged) {
    auto cfg = small_phantom();
    cfg.extents = {16, 32, 16};
    const auto s = hft::generate_phantom(cfg);
    const auto [padded, original] = hft::pad_to_multiple(s);
    EXPECT_TRUE(padded.modalities.same_storage(s.modalities));
}

// ---------------------------------------------------------------------------

TEST(VolumeIO, RoundTripIsBitExact) {
    auto cfg = small_phantom();
    cfg.spacing = {0.958f, 0.958f, 3.0f};
    const auto s = hft::generate_phantom(cfg);
    const auto dir = testutil::scratch_dir("vol");
    hft::write_volume(s, dir / "i.hftv", dir / "l.hftv");
    const auto back = hft::read_volume(dir / "i.hftv", dir / "l.hftv");
    EXPECT_TRUE(testutil::bit_equal(back.modalities, s.modalities));
    EXPECT_EQ(back.labels, s.labels);
    EXPECT_EQ(back.foreground, s.foreground);
    EXPECT_EQ(back.spacing(), cfg.spacing);
    const std::size_t V = hft::voxel_count(cfg.extents);
    EXPECT_EQ(std::filesystem::file_size(dir / "i.hftv"), hft::volume_header_size(4) + 4 * 2 * V);
    EXPECT_EQ(std::filesystem::file_size(dir / "l.hftv"), hft::volume_header_size(3) + V);
    EXPECT_EQ(hft::volume_header_size(3), 4u + 3 + 24 + 12);
}

TEST(VolumeIO, HeaderLayout) {
    const auto dir = testutil::scratch_dir("vol");
    hft::write_volume_file({{2, 1, 1}, {1.0f, 2.0f, 0.5f}, std::vector<std::uint8_t>{7, 9}}, dir / "x.hftv");
    const auto b = testutil::read_bytes(dir / "x.hftv");
    ASSERT_EQ(b.size(), hft::volume_header_size(3) + 2);
    EXPECT_EQ(b.substr(0, 4), "HFTV");
    EXPECT_EQ(b[4], 1);  // version
    EXPECT_EQ(b[5], 2);  // u8 labels
    EXPECT_EQ(b[6], 3);  // rank
    EXPECT_EQ(b[7], 2);  // first extent, little-endian u64
    EXPECT_EQ(b.substr(8, 7), std::string(7, '\0'));
    EXPECT_EQ(b[b.size() - 2], 7);
}

TEST(VolumeIO, RejectsCorruptFiles) {
    const auto s = hft::generate_phantom(small_phantom());
    const auto dir = testutil::scratch_dir("vol");
    hft::write_volume(s, dir / "i.hftv", dir / "l.hftv");
    const auto bytes = testutil::read_bytes(dir / "l.hftv");
    auto write = [&](const std::string& name, const std::string& data) {
        std::ofstream(dir / name, std::ios::binary) << data;
        return dir / name;
    };
    try {
        hft::read_volume_file(write("m.hftv", "NOPE" + bytes.substr(4)));
        FAIL() << "bad magic accepted";
    } catch (const hft::FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
    }
    EXPECT_THROW(hft::read_volume_file(write("t.hftv", bytes.substr(0, bytes.size() - 1))), hft::FormatError);
    EXPECT_THROW(hft::read_volume_file(write("x.hftv", bytes + "!")), hft::FormatError);
    auto dtype = bytes;
    dtype[5] = 7;
    EXPECT_THROW(hft::read_volume_file(write("d.hftv", dtype)), hft::FormatError);
    // Swapped roles: labels file passed as intensities.
    EXPECT_THROW(hft::read_volume(dir / "l.hftv", dir / "i.hftv"), hft::FormatError);
}

TEST(Manifest, RoundTripResolvesRelativePaths) {
    const auto dir = testutil::scratch_dir("manifest");
    hft::write_manifest({{"a", "data/a_i.hftv", "data/a_l.hftv"}, {"b", "/abs/b_i.hftv", "/abs/b_l.hftv"}},
                        dir / "m.txt");
    const auto m = hft::read_manifest(dir / "m.txt");
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m[0].id, "a");
    EXPECT_EQ(m[0].intensities, dir / "data/a_i.hftv");
    EXPECT_EQ(m[1].labels, std::filesystem::path("/abs/b_l.hftv"));
    std::ofstream(dir / "bad.txt") << "only-two fields\n";
    EXPECT_THROW(hft::read_manifest(dir / "bad.txt"), hft::FormatError);
}

// ---------------------------------------------------------------------------

TEST(KFold, SizesPartitionAndDeterminism) {
    const auto f = hft::kfold_split(369, 5, 42);
    ASSERT_EQ(f.size(), 5u);
    std::vector<std::size_t> sizes;
    std::vector<int> seen(369, 0);
    for (const auto& fold : f) {
        sizes.push_back(fold.validation.size());
        EXPECT_EQ(fold.train.size() + fold.validation.size(), 369u);
        EXPECT_TRUE(std::is_sorted(fold.validation.begin(), fold.validation.end()));
        for (auto i : fold.validation) ++seen[i];
        std::vector<std::size_t> both;
        std::set_intersection(fold.train.begin(), fold.train.end(), fold.validation.begin(), fold.validation.end(),
                              std::back_inserter(both));
        EXPECT_TRUE(both.empty());
    }
    EXPECT_EQ(sizes, (std::vector<std::size_t>{74, 74, 74, 74, 73}));
    for (int s : seen) EXPECT_EQ(s, 1);
    const auto g = hft::kfold_split(369, 5, 42);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(f[i].validation, g[i].validation);
    EXPECT_NE(hft::kfold_split(369, 5, 43)[0].validation, f[0].validation);
}

TEST(KFold, LeaveOneOutAndErrors) {
    const auto f = hft::kfold_split(7, 7, 1);
    for (const auto& fold : f) {
        EXPECT_EQ(fold.validation.size(), 1u);
        EXPECT_EQ(fold.train.size(), 6u);
    }
    EXPECT_THROW(hft::kfold_split(3, 4, 0), std::invalid_argument);
    EXPECT_THROW(hft::kfold_split(3, 1, 0), std::invalid_argument);
}

TEST(Random, FixedStreamValues) {
    // Pins the generator so data and splits reproduce across platforms.
    hft::Rng a(123), b(123);
    for (int i = 0; i < 5; ++i) EXPECT_EQ(a.next(), b.next());
    hft::Rng c(5489);
    for (int i = 0; i < 9999; ++i) c.next();
    EXPECT_EQ(c.next(), 9981545732273789042ULL);  // the standard's mt19937_64 check value
    hft::Rng r(9);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        ASSERT_LT(r.below(7), 7u);
    }
    EXPECT_NE(hft::derive_seed(1, "a"), hft::derive_seed(1, "b"));
    EXPECT_NE(hft::derive_seed(1, "a"), hft::derive_seed(2, "a"));
}
