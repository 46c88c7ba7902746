#pragma once

// Per-sample treemap images: intensity normalization, blue-yellow-red
// colormap, rasterization, block-mean downsampling, tensor and PNG files.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <png.h>

#include "omicsmap/error.hpp"
#include "omicsmap/io.hpp"
#include "omicsmap/treemap.hpp"

namespace omicsmap {

/// Row-major, channel-last image.
template <class T>
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<T> data;

    Image() = default;
    Image(int h, int w, int c, T fill = T{})
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t index(int r, int c, int ch = 0) const {
        return (static_cast<std::size_t>(r) * width + c) * channels + ch;
    }
    T& at(int r, int c, int ch = 0) { return data[index(r, c, ch)]; }
    const T& at(int r, int c, int ch = 0) const { return data[index(r, c, ch)]; }
    bool operator==(const Image&) const = default;
};

using SampleImage = Image<double>;

/// Min-max scales each layout leaf's value into [0,1]; a constant sample
/// maps to 0.5 everywhere.
inline std::vector<double> sample_intensities(const TreemapLayout& layout,
                                              const std::unordered_map<std::string, double>& values) {
    std::vector<double> v;
    v.reserve(layout.entries.size());
    for (const auto& e : layout.entries) {
        auto it = values.find(e.kegg_id);
        if (it == values.end()) fail(ErrorKind::MissingValue, "no value for " + e.kegg_id);
        v.push_back(it->second);
    }
    if (v.empty()) return v;
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    const double lo = *mn, hi = *mx;
    for (auto& x : v) x = hi > lo ? (x - lo) / (hi - lo) : 0.5;
    return v;
}

/// 256-level blue (0) -> yellow (0.5) -> red (1) map; channels on 0..255.
inline std::array<double, 3> apply_colormap(double u) {
    if (!(u >= 0.0 && u <= 1.0)) fail(ErrorKind::OutOfRange, "intensity " + io::exact(u));
    const double q = std::floor(u * 255.0 + 0.5) / 255.0;
    if (q <= 0.5) {
        const double t = q / 0.5;
        return {255.0 * t, 255.0 * t, 255.0 * (1.0 - t)};
    }
    const double t = (q - 0.5) / 0.5;
    return {255.0, 255.0 * (1.0 - t), 0.0};
}

namespace detail {

// First pixel index whose center (i + 0.5) / scale is >= v.
inline int first_center_at_or_after(double v, double scale, int limit) {
    int i = static_cast<int>(std::ceil(v * scale - 0.5));
    while (i > 0 && (i - 1 + 0.5) / scale >= v) --i;
    while (i < limit && (i + 0.5) / scale < v) ++i;
    return std::clamp(i, 0, limit);
}

struct PixelSpan {
    int r0, r1, c0, c1; // half-open
};

inline PixelSpan pixel_span(const Rect& r, double scale, int side_px) {
    return {first_center_at_or_after(r.y0, scale, side_px), first_center_at_or_after(r.y1, scale, side_px),
            first_center_at_or_after(r.x0, scale, side_px), first_center_at_or_after(r.x1, scale, side_px)};
}

} // namespace detail

inline constexpr double kBorderGray = 64.0 / 255.0;

/// Paints each leaf onto the pixels whose centers fall in its half-open
/// rectangle. Pixels owned by no leaf stay 0. With `borders`, the outline
/// pixels of level 1-3 categories are overwritten (0 in intensity mode,
/// dark gray in RGB mode).
inline SampleImage rasterize(const TreemapLayout& layout, const std::vector<double>& intensities, int side_px,
                             int channels = 1, bool borders = false) {
    if (intensities.size() != layout.entries.size())
        fail(ErrorKind::MissingValue, "intensity count does not match layout leaves");
    if (channels != 1 && channels != 3) fail(ErrorKind::OutOfRange, "channels must be 1 or 3");
    SampleImage img(side_px, side_px, channels, 0.0);
    const double scale = side_px / layout.side;
    for (std::size_t i = 0; i < layout.entries.size(); ++i) {
        const auto span = detail::pixel_span(layout.entries[i].rect, scale, side_px);
        std::array<double, 3> px{intensities[i], 0, 0};
        if (channels == 3) {
            auto rgb = apply_colormap(intensities[i]);
            px = {rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0};
        }
        for (int r = span.r0; r < span.r1; ++r)
            for (int c = span.c0; c < span.c1; ++c)
                for (int ch = 0; ch < channels; ++ch) img.at(r, c, ch) = px[static_cast<std::size_t>(ch)];
    }
    if (borders) {
        const double v = channels == 3 ? kBorderGray : 0.0;
        for (const auto& cat : layout.categories) {
            if (cat.level < 1 || cat.level > 3) continue;
            const auto s = detail::pixel_span(cat.rect, scale, side_px);
            if (s.r1 <= s.r0 || s.c1 <= s.c0) continue;
            for (int c = s.c0; c < s.c1; ++c)
                for (int ch = 0; ch < channels; ++ch) img.at(s.r0, c, ch) = img.at(s.r1 - 1, c, ch) = v;
            for (int r = s.r0; r < s.r1; ++r)
                for (int ch = 0; ch < channels; ++ch) img.at(r, s.c0, ch) = img.at(r, s.c1 - 1, ch) = v;
        }
    }
    return img;
}

inline SampleImage downsample_mean(const SampleImage& img, int factor) {
    if (factor < 1 || img.width % factor || img.height % factor)
        fail(ErrorKind::NotDivisible, std::to_string(img.width) + "x" + std::to_string(img.height) +
                                          " not divisible by " + std::to_string(factor));
    if (factor == 1) return img;
    SampleImage out(img.height / factor, img.width / factor, img.channels);
    const double inv = 1.0 / (factor * factor);
    for (int r = 0; r < out.height; ++r)
        for (int c = 0; c < out.width; ++c)
            for (int ch = 0; ch < img.channels; ++ch) {
                double s = 0;
                for (int dr = 0; dr < factor; ++dr)
                    for (int dc = 0; dc < factor; ++dc) s += img.at(r * factor + dr, c * factor + dc, ch);
                out.at(r, c, ch) = s * inv;
            }
    return out;
}

/// Full image path for one sample: intensities, raster at the layout's
/// native side (one layout unit per pixel), then block-mean downsampling.
inline SampleImage render_sample(const TreemapLayout& layout, const std::unordered_map<std::string, double>& values,
                                 int divisor, int channels = 1, bool borders = false) {
    const int side_px = static_cast<int>(std::lround(layout.side));
    auto img = rasterize(layout, sample_intensities(layout, values), side_px, channels, borders);
    return downsample_mean(img, divisor);
}

// ------------------------------------------------------------ tensor file

inline constexpr std::uint32_t kTensorVersion = 1;

template <class T>
std::string encode_tensor(const Image<T>& img) {
    io::BinaryWriter w;
    w.magic("OMNT");
    w.u32(kTensorVersion);
    w.u32(static_cast<std::uint32_t>(img.height));
    w.u32(static_cast<std::uint32_t>(img.width));
    w.u32(static_cast<std::uint32_t>(img.channels));
    for (T v : img.data) w.f32(static_cast<float>(v));
    return w.bytes();
}

inline Image<float> decode_tensor(std::string_view bytes) {
    io::BinaryReader r(bytes);
    if (r.magic(4) != "OMNT") fail(ErrorKind::ParseError, "not an OMNT tensor");
    if (auto v = r.u32(); v != kTensorVersion)
        fail(ErrorKind::VersionMismatch, "tensor version " + std::to_string(v));
    Image<float> img;
    img.height = static_cast<int>(r.u32());
    img.width = static_cast<int>(r.u32());
    img.channels = static_cast<int>(r.u32());
    const std::size_t n = static_cast<std::size_t>(img.height) * img.width * img.channels;
    if (r.remaining() != n * 4) fail(ErrorKind::IoError, "tensor payload size does not match header");
    img.data.resize(n);
    for (auto& v : img.data) v = r.f32();
    return img;
}

inline Image<float> read_tensor(const std::filesystem::path& path) { return decode_tensor(io::read_file(path)); }

// -------------------------------------------------------------- PNG file

/// 8-bit RGB PNG. Single-channel images go through the colormap; RGB
/// images are scaled by 255.
template <class T>
std::string encode_png(const Image<T>& img) {
    std::vector<png_byte> rgb(static_cast<std::size_t>(img.width) * img.height * 3);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c) {
            std::array<double, 3> px;
            if (img.channels == 1) {
                px = apply_colormap(std::clamp(static_cast<double>(img.at(r, c)), 0.0, 1.0));
            } else {
                for (int ch = 0; ch < 3; ++ch) px[static_cast<std::size_t>(ch)] = 255.0 * img.at(r, c, ch);
            }
            for (int ch = 0; ch < 3; ++ch)
                rgb[(static_cast<std::size_t>(r) * img.width + c) * 3 + ch] =
                    static_cast<png_byte>(std::clamp(std::lround(px[static_cast<std::size_t>(ch)]), 0L, 255L));
        }
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&pi, nullptr, &size, 0, rgb.data(), 0, nullptr))
        fail(ErrorKind::IoError, std::string("png sizing failed: ") + pi.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&pi, out.data(), &size, 0, rgb.data(), 0, nullptr))
        fail(ErrorKind::IoError, std::string("png encoding failed: ") + pi.message);
    out.resize(size);
    return out;
}

/// Decodes a PNG into 8-bit RGB triples (row-major).
inline Image<std::uint8_t> decode_png(std::string_view bytes) {
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
        fail(ErrorKind::ParseError, std::string("png: ") + pi.message);
    pi.format = PNG_FORMAT_RGB;
    Image<std::uint8_t> img(static_cast<int>(pi.height), static_cast<int>(pi.width), 3);
    if (!png_image_finish_read(&pi, nullptr, img.data.data(), 0, nullptr))
        fail(ErrorKind::ParseError, std::string("png: ") + pi.message);
    return img;
}

enum class ImageFormat { Png, Tensor };

template <class T>
void export_image(const Image<T>& img, const std::filesystem::path& path, ImageFormat format) {
    io::write_file_atomic(path, format == ImageFormat::Png ? encode_png(img) : encode_tensor(img));
}

} // namespace omicsmap
