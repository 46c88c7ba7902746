#include <random>

#include "test_util.hpp"

#include "omicsmap/expr.hpp"
#include "omicsmap/render.hpp"

using namespace omicsmap;

namespace {

TreemapLayout synthetic_layout(double side, int categories = 10) {
    SyntheticTreeSpec spec;
    spec.categories = categories;
    auto tree = generate_synthetic_tree(spec);
    std::unordered_map<std::string, double> keys;
    for (const auto* g : all_leaves(tree)) keys[g->kegg_id] = 0;
    return build_layout(tree, keys, side);
}

std::unordered_map<std::string, double> random_values(const TreemapLayout& layout, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(4, 3);
    std::unordered_map<std::string, double> v;
    for (const auto& e : layout.entries) v.try_emplace(e.kegg_id, d(rng));
    return v;
}

void expect_error(ErrorKind kind, const std::function<void()>& f) {
    try {
        f();
        ADD_FAILURE() << "no error thrown";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

} // namespace

TEST(Intensities, MinMaxScaling) {
    TreemapLayout l;
    l.entries = {{"a", 0, {}, {}}, {"b", 0, {}, {}}, {"c", 0, {}, {}}};
    auto v = sample_intensities(l, {{"a", -2}, {"b", 2}, {"c", 0}});
    EXPECT_EQ(v, (std::vector<double>{0, 1, 0.5}));
    auto k = sample_intensities(l, {{"a", 3}, {"b", 3}, {"c", 3}});
    EXPECT_EQ(k, (std::vector<double>{0.5, 0.5, 0.5}));
    expect_error(ErrorKind::MissingValue, [&] { sample_intensities(l, {{"a", 1}}); });
}

TEST(Colormap, AnchorsAndQuantization) {
    EXPECT_EQ(apply_colormap(0.0), (std::array<double, 3>{0, 0, 255}));
    // 0.5 quantizes to level 128, one step past the yellow anchor
    auto mid = apply_colormap(0.5);
    EXPECT_EQ(mid[0], 255);
    EXPECT_NEAR(mid[1], 254, 1e-9);
    EXPECT_EQ(mid[2], 0);
    auto below = apply_colormap(127.0 / 255.0);
    EXPECT_NEAR(below[0], 254, 1e-9);
    EXPECT_NEAR(below[2], 1, 1e-9);
    EXPECT_EQ(apply_colormap(1.0), (std::array<double, 3>{255, 0, 0}));
    // 0.25 -> level 64 of 255 -> t = 128/255 along blue->yellow
    auto q = apply_colormap(0.25);
    EXPECT_NEAR(q[0], 128, 1e-9);
    EXPECT_NEAR(q[1], 128, 1e-9);
    EXPECT_NEAR(q[2], 127, 1e-9);
    expect_error(ErrorKind::OutOfRange, [] { apply_colormap(1.5); });
    expect_error(ErrorKind::OutOfRange, [] { apply_colormap(std::nan("")); });
}

TEST(Colormap, RedMonotoneBlueAntitone) {
    double prev_r = -1, prev_b = 256;
    for (int i = 0; i <= 255; ++i) {
        auto c = apply_colormap(i / 255.0);
        EXPECT_GE(c[0], prev_r);
        EXPECT_LE(c[2], prev_b);
        prev_r = c[0];
        prev_b = c[2];
    }
}

TEST(Rasterize, SingleLeafFillsImage) {
    TreemapLayout l;
    l.side = 4;
    l.entries = {{"a", 0, {}, {0, 0, 4, 4}}};
    auto img = rasterize(l, {0.7}, 4);
    for (double v : img.data) EXPECT_EQ(v, 0.7);
}

TEST(Rasterize, PixelCentersDecideOwnership) {
    TreemapLayout l;
    l.side = 4;
    // boundary at x = 1.5 passes exactly through the centers of column 1
    l.entries = {{"a", 0, {}, {0, 0, 1.5, 4}}, {"b", 0, {}, {1.5, 0, 4, 4}}};
    auto img = rasterize(l, {0.25, 1.0}, 4);
    for (int r = 0; r < 4; ++r) {
        EXPECT_EQ(img.at(r, 0), 0.25);
        EXPECT_EQ(img.at(r, 1), 1.0);
        EXPECT_EQ(img.at(r, 2), 1.0);
    }
}

TEST(Rasterize, MatchesPerPixelCenterLookup) {
    auto layout = synthetic_layout(100);
    std::vector<double> inten(layout.entries.size());
    for (std::size_t i = 0; i < inten.size(); ++i) inten[i] = static_cast<double>(i + 1) / static_cast<double>(inten.size());
    for (int side_px : {100, 64, 37}) {
        auto img = rasterize(layout, inten, side_px);
        const double scale = 100.0 / side_px;
        for (int r = 0; r < side_px; ++r)
            for (int c = 0; c < side_px; ++c) {
                const double x = (c + 0.5) * scale, y = (r + 0.5) * scale;
                double expect = 0;
                int owners = 0;
                for (std::size_t i = 0; i < layout.entries.size(); ++i)
                    if (layout.entries[i].rect.contains(x, y)) {
                        expect = inten[i];
                        ++owners;
                    }
                ASSERT_LE(owners, 1);
                ASSERT_EQ(img.at(r, c), expect) << side_px << " " << r << "," << c;
            }
    }
}

TEST(Rasterize, BordersDrawnOnCategoryOutlines) {
    auto layout = synthetic_layout(64, 4);
    std::vector<double> ones(layout.entries.size(), 1.0);
    auto img = rasterize(layout, ones, 64, 1, true);
    for (int i = 0; i < 64; ++i) {
        EXPECT_EQ(img.at(0, i), 0.0);
        EXPECT_EQ(img.at(63, i), 0.0);
        EXPECT_EQ(img.at(i, 0), 0.0);
        EXPECT_EQ(img.at(i, 63), 0.0);
    }
    auto rgb = rasterize(layout, ones, 64, 3, true);
    EXPECT_DOUBLE_EQ(rgb.at(0, 0, 1), kBorderGray);
    EXPECT_EQ(rasterize(layout, ones, 64, 1, false).at(0, 0), 1.0);
}

TEST(Rasterize, RgbUsesColormap) {
    TreemapLayout l;
    l.side = 2;
    l.entries = {{"a", 0, {}, {0, 0, 2, 2}}};
    auto img = rasterize(l, {0.0}, 2, 3);
    EXPECT_EQ(img.at(1, 1, 0), 0.0);
    EXPECT_EQ(img.at(1, 1, 2), 1.0);
    expect_error(ErrorKind::OutOfRange, [&] { rasterize(l, {0.0}, 2, 2); });
    expect_error(ErrorKind::MissingValue, [&] { rasterize(l, {}, 2); });
}

TEST(Downsample, HandExample) {
    SampleImage img(4, 4, 1);
    for (int i = 0; i < 16; ++i) img.data[static_cast<std::size_t>(i)] = i;
    auto d = downsample_mean(img, 2);
    EXPECT_EQ(d.data, (std::vector<double>{2.5, 4.5, 10.5, 12.5}));
    expect_error(ErrorKind::NotDivisible, [&] { downsample_mean(img, 3); });
}

TEST(Downsample, PreservesMeanPerChannel) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    SampleImage img(24, 24, 3);
    for (auto& v : img.data) v = u(rng);
    for (int f : {1, 2, 3, 4, 6}) {
        auto d = downsample_mean(img, f);
        for (int ch = 0; ch < 3; ++ch) {
            double a = 0, b = 0;
            for (int r = 0; r < 24; ++r)
                for (int c = 0; c < 24; ++c) a += img.at(r, c, ch);
            for (int r = 0; r < d.height; ++r)
                for (int c = 0; c < d.width; ++c) b += d.at(r, c, ch);
            EXPECT_NEAR(a / (24 * 24), b / (d.height * d.width), 1e-12);
        }
    }
}

TEST(RenderSample, HalvesLayoutSide) {
    auto layout = synthetic_layout(256);
    auto img = render_sample(layout, random_values(layout, 5), 2);
    EXPECT_EQ(img.height, 128);
    EXPECT_EQ(img.width, 128);
    for (double v : img.data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(TensorFile, RoundTripAndErrors) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    SampleImage img(5, 7, 3);
    for (auto& v : img.data) v = u(rng);
    auto bytes = encode_tensor(img);
    EXPECT_EQ(bytes.size(), 20u + 5 * 7 * 3 * 4);
    auto back = decode_tensor(bytes);
    EXPECT_EQ(back.height, 5);
    EXPECT_EQ(back.width, 7);
    EXPECT_EQ(back.channels, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_EQ(back.data[i], static_cast<float>(img.data[i]));

    auto bad_version = bytes;
    bad_version[4] = 9;
    expect_error(ErrorKind::VersionMismatch, [&] { decode_tensor(bad_version); });
    expect_error(ErrorKind::IoError, [&] { decode_tensor(bytes.substr(0, bytes.size() - 4)); });
    expect_error(ErrorKind::ParseError, [&] { decode_tensor("XXXX" + bytes.substr(4)); });
}

TEST(PngFile, RgbRoundTripIsExact) {
    SampleImage img(3, 4, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>((i * 37) % 256) / 255.0;
    auto dec = decode_png(encode_png(img));
    ASSERT_EQ(dec.height, 3);
    ASSERT_EQ(dec.width, 4);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_EQ(dec.data[i], (i * 37) % 256);
}

TEST(PngFile, GrayGoesThroughColormap) {
    SampleImage img(1, 2, 1);
    img.data = {0.0, 1.0};
    auto dec = decode_png(encode_png(img));
    EXPECT_EQ(dec.at(0, 0, 2), 255);
    EXPECT_EQ(dec.at(0, 1, 0), 255);
    EXPECT_EQ(dec.at(0, 1, 2), 0);

    auto dir = testutil::scratch("");
    export_image(img, dir / "x.png", ImageFormat::Png);
    EXPECT_EQ(testutil::read(dir / "x.png").substr(1, 3), "PNG");
    expect_error(ErrorKind::ParseError, [] { decode_png("not a png"); });
}
