#pragma once

// Back-projection of strong Pool3 responses onto treemap genes.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "omicsmap/cnn.hpp"
#include "omicsmap/error.hpp"
#include "omicsmap/io.hpp"
#include "omicsmap/treemap.hpp"

namespace omicsmap {

struct PoolPixel {
    int row = 0;
    int col = 0;
    auto operator<=>(const PoolPixel&) const = default;
};

/// Channel whose map has the largest sum (lowest index on ties).
inline std::pair<int, std::vector<double>> strongest_feature_map(const Tensor& maps) {
    const int c = maps.channels;
    std::vector<double> sums(static_cast<std::size_t>(c), 0.0);
    for (int r = 0; r < maps.height; ++r)
        for (int q = 0; q < maps.width; ++q)
            for (int ch = 0; ch < c; ++ch) sums[static_cast<std::size_t>(ch)] += maps.at(r, q, ch);
    const int best = static_cast<int>(std::max_element(sums.begin(), sums.end()) - sums.begin());
    std::vector<double> map(static_cast<std::size_t>(maps.height) * maps.width);
    for (int r = 0; r < maps.height; ++r)
        for (int q = 0; q < maps.width; ++q) map[static_cast<std::size_t>(r) * maps.width + q] = maps.at(r, q, best);
    return {best, std::move(map)};
}

/// The floor(frac * h * w) strongest pixels, ordered by (value desc, row,
/// col). An all-zero map selects nothing.
inline std::vector<PoolPixel> top_fraction_pixels(const std::vector<double>& map, int h, int w, double frac = 0.1) {
    if (!(frac > 0 && frac <= 1)) fail(ErrorKind::OutOfRange, "fraction must be in (0,1]");
    if (map.size() != static_cast<std::size_t>(h) * w) fail(ErrorKind::ShapeMismatch, "map size does not match h*w");
    if (std::all_of(map.begin(), map.end(), [](double v) { return v == 0.0; })) return {};
    const auto k = static_cast<std::size_t>(std::floor(frac * h * w));
    std::vector<std::size_t> idx(map.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return map[a] > map[b]; });
    std::vector<PoolPixel> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({static_cast<int>(idx[i]) / w, static_cast<int>(idx[i]) % w});
    return out;
}

/// Pool pixel (i, j) owns [j*PR, (j+1)*PR) x [i*PR, (i+1)*PR) with
/// PR = side / pool_side; rows map to y and columns to x.
inline PoolPixel owning_pixel(double x, double y, double side, int pool_side) {
    const double pr = side / pool_side;
    auto cell = [&](double v) {
        int i = std::clamp(static_cast<int>(std::floor(v / pr)), 0, pool_side - 1);
        while (i > 0 && v < i * pr) --i;
        while (i < pool_side - 1 && v >= (i + 1) * pr) ++i;
        return i;
    };
    return {cell(y), cell(x)};
}

struct AttributionRow {
    std::string kegg_id;
    int copy_index = 0;
    std::vector<std::string> annotation_path;
    double cx = 0, cy = 0;
    PoolPixel pool_pixel;
    int selection_count = 0;
    int n_samples = 0;
    bool operator==(const AttributionRow&) const = default;
};

struct AttributionReport {
    std::vector<AttributionRow> rows; // layout order
    bool operator==(const AttributionReport&) const = default;
};

/// Counts, for every layout leaf, how many samples selected the pool pixel
/// that owns the leaf's rectangle center.
inline AttributionReport project_to_genes(const std::vector<std::vector<PoolPixel>>& selected,
                                          const TreemapLayout& layout, int pool_side) {
    if (pool_side < 1 || !(layout.side > 0)) fail(ErrorKind::InconsistentSides, "pool side and layout side must be positive");
    const std::size_t cells = static_cast<std::size_t>(pool_side) * pool_side;
    std::vector<int> pixel_count(cells, 0);
    for (const auto& sample : selected) {
        std::vector<char> hit(cells, 0);
        for (const auto& p : sample) {
            if (p.row < 0 || p.col < 0 || p.row >= pool_side || p.col >= pool_side)
                fail(ErrorKind::InconsistentSides, "selected pixel outside the pool map");
            hit[static_cast<std::size_t>(p.row) * pool_side + p.col] = 1;
        }
        for (std::size_t i = 0; i < cells; ++i) pixel_count[i] += hit[i];
    }
    AttributionReport rep;
    rep.rows.reserve(layout.entries.size());
    for (const auto& e : layout.entries) {
        AttributionRow row;
        row.kegg_id = e.kegg_id;
        row.copy_index = e.copy_index;
        row.annotation_path = e.annotation_path;
        row.cx = e.cx();
        row.cy = e.cy();
        row.pool_pixel = owning_pixel(row.cx, row.cy, layout.side, pool_side);
        row.selection_count = pixel_count[static_cast<std::size_t>(row.pool_pixel.row) * pool_side + row.pool_pixel.col];
        row.n_samples = static_cast<int>(selected.size());
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

/// Selected Pool3 pixels of one image under a trained model.
inline std::vector<PoolPixel> select_pixels(const CnnModel& model, const Tensor& image, double frac = 0.1) {
    const Tensor maps = pool3_maps(model, image);
    auto [channel, map] = strongest_feature_map(maps);
    return top_fraction_pixels(map, maps.height, maps.width, frac);
}

/// Rows ordered by selection count descending, then id, then copy.
inline std::vector<AttributionRow> ranked_rows(const AttributionReport& rep) {
    auto rows = rep.rows;
    std::stable_sort(rows.begin(), rows.end(), [](const AttributionRow& a, const AttributionRow& b) {
        if (a.selection_count != b.selection_count) return a.selection_count > b.selection_count;
        if (a.kegg_id != b.kegg_id) return a.kegg_id < b.kegg_id;
        return a.copy_index < b.copy_index;
    });
    return rows;
}

inline std::string format_report(const AttributionReport& rep) {
    std::string out = "kegg_id\tcopy_index\tpath_level1\tpath_level2\tpath_level3\tpath_level4\tcenter_x\tcenter_y\t"
                      "pool_row\tpool_col\tselection_count\tn_samples\n";
    for (const auto& r : ranked_rows(rep)) {
        out += r.kegg_id + "\t" + std::to_string(r.copy_index);
        for (std::size_t i = 0; i < 4; ++i) out += "\t" + (i < r.annotation_path.size() ? r.annotation_path[i] : "");
        out += "\t" + io::exact(r.cx) + "\t" + io::exact(r.cy) + "\t" + std::to_string(r.pool_pixel.row) + "\t" +
               std::to_string(r.pool_pixel.col) + "\t" + std::to_string(r.selection_count) + "\t" +
               std::to_string(r.n_samples) + "\n";
    }
    return out;
}

inline void export_report(const AttributionReport& rep, const std::filesystem::path& path) {
    io::write_file_atomic(path, format_report(rep));
}

inline AttributionReport import_report(const std::filesystem::path& path) {
    AttributionReport rep;
    const auto text = io::read_file(path);
    auto rows = io::lines(text);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (io::trim(rows[i]).empty()) continue;
        auto c = io::split(rows[i], '\t');
        if (c.size() != 12) fail(ErrorKind::ParseError, "report row " + std::to_string(i + 1) + " needs 12 columns");
        AttributionRow r;
        r.kegg_id = c[0];
        r.copy_index = std::stoi(c[1]);
        for (std::size_t k = 2; k < 6; ++k)
            if (!c[k].empty()) r.annotation_path.push_back(c[k]);
        r.cx = io::parse_double(c[6], "center_x");
        r.cy = io::parse_double(c[7], "center_y");
        r.pool_pixel = {std::stoi(c[8]), std::stoi(c[9])};
        r.selection_count = std::stoi(c[10]);
        r.n_samples = std::stoi(c[11]);
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

} // namespace omicsmap
