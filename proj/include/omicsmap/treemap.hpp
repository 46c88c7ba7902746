#pragma once

// Ordered (pivot-by-middle) treemap layout with equal-area gene leaves.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "omicsmap/error.hpp"
#include "omicsmap/hierarchy.hpp"
#include "omicsmap/io.hpp"

namespace omicsmap {

struct Rect {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
    double aspect() const {
        const double w = width(), h = height();
        return std::max(w / h, h / w);
    }
    /// Half-open containment [x0,x1) x [y0,y1).
    bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    bool operator==(const Rect&) const = default;
};

namespace detail {

inline void pivot_recurse(std::span<const double> w, std::size_t offset, const Rect& r, std::vector<Rect>& out) {
    const std::size_t n = w.size();
    if (n == 0) return;
    if (n == 1) {
        out[offset] = r;
        return;
    }
    const bool wide = r.width() >= r.height();
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    // position along the split axis after a cumulative weight
    auto cut = [&](double cum) {
        return wide ? r.x0 + r.width() * (cum / total) : r.y0 + r.height() * (cum / total);
    };
    auto slab = [&](double a, double b) {
        return wide ? Rect{a, r.y0, b, r.y1} : Rect{r.x0, a, r.x1, b};
    };
    const double lo = wide ? r.x0 : r.y0, hi = wide ? r.x1 : r.y1;

    if (n == 2) {
        const double m = cut(w[0]);
        out[offset] = slab(lo, m);
        out[offset + 1] = slab(m, hi);
        return;
    }

    const std::size_t p = n / 2;
    const double s1 = std::accumulate(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(p), 0.0);
    const double wp = w[p];
    const std::size_t rest = n - p - 1;

    // L2 = the first m items after the pivot; pick m giving the squarest pivot
    std::size_t best_m = 0;
    double best_ratio = std::numeric_limits<double>::infinity();
    double s2 = 0;
    const double cross = wide ? r.height() : r.width();
    for (std::size_t m = 0; m <= rest; ++m) {
        if (m > 0) s2 += w[p + m];
        const double along = (wide ? r.width() : r.height()) * ((wp + s2) / total);
        const double pivot_cross = cross * (wp / (wp + s2));
        const double ratio = std::max(along / pivot_cross, pivot_cross / along);
        if (ratio < best_ratio) {
            best_ratio = ratio;
            best_m = m;
        }
    }
    double s2_best = 0;
    for (std::size_t m = 1; m <= best_m; ++m) s2_best += w[p + m];

    const double a = cut(s1);
    const double b = p + 1 + best_m == n ? hi : cut(s1 + wp + s2_best);
    const Rect r1 = slab(lo, a);
    const Rect mid = slab(a, b);
    const Rect r3 = slab(b, hi);

    // pivot first, then L2, stacked across the middle slab
    const double frac = wp / (wp + s2_best);
    Rect rp = mid, r2 = mid;
    if (wide) {
        const double yc = best_m == 0 ? mid.y1 : mid.y0 + mid.height() * frac;
        rp.y1 = yc;
        r2.y0 = yc;
    } else {
        const double xc = best_m == 0 ? mid.x1 : mid.x0 + mid.width() * frac;
        rp.x1 = xc;
        r2.x0 = xc;
    }

    pivot_recurse(w.subspan(0, p), offset, r1, out);
    out[offset + p] = rp;
    pivot_recurse(w.subspan(p + 1, best_m), offset + p + 1, r2, out);
    pivot_recurse(w.subspan(p + 1 + best_m), offset + p + 1 + best_m, r3, out);
}

} // namespace detail

/// Ordered-treemap pivot partition of `rect` into one rectangle per weight,
/// output order matching input order. Each rectangle's area is its weight
/// share of the rectangle area.
inline std::vector<Rect> pivot_partition(std::span<const double> weights, const Rect& rect) {
    for (double w : weights)
        if (!(w > 0) || !std::isfinite(w)) fail(ErrorKind::NonPositiveWeight, "weight " + io::exact(w));
    std::vector<Rect> out(weights.size());
    detail::pivot_recurse(weights, 0, rect, out);
    return out;
}

struct LayoutEntry {
    std::string kegg_id;
    int copy_index = 0;
    std::vector<std::string> annotation_path;
    Rect rect;

    double cx() const { return 0.5 * (rect.x0 + rect.x1); }
    double cy() const { return 0.5 * (rect.y0 + rect.y1); }
    bool operator==(const LayoutEntry&) const = default;
};

struct CategoryRect {
    std::vector<std::string> path; // root label first
    int level = 0;
    Rect rect;
    bool operator==(const CategoryRect&) const = default;
};

struct TreemapLayout {
    double side = 1024;
    std::vector<LayoutEntry> entries;
    std::vector<CategoryRect> categories; // pre-order, levels >= 1

    double worst_aspect() const {
        double w = 1;
        for (const auto& e : entries) w = std::max(w, e.rect.aspect());
        return w;
    }
    bool operator==(const TreemapLayout&) const = default;
};

/// Lays the annotated tree out in [0,side)^2. Internal nodes are weighted by
/// leaf count; genes inside a category are ordered by `sort_key`
/// descending, ties by id ascending.
inline TreemapLayout build_layout(const HierarchyTree& tree, const std::unordered_map<std::string, double>& sort_key,
                                  double side = 1024) {
    if (count_leaves(tree) == 0) fail(ErrorKind::EmptyTree, "no gene leaves to lay out");
    TreemapLayout layout;
    layout.side = side;

    std::function<void(const HierarchyNode&, const Rect&, std::vector<std::string>&)> place =
        [&](const HierarchyNode& node, const Rect& r, std::vector<std::string>& path) {
            path.push_back(node.label);
            if (node.level >= 1) layout.categories.push_back({path, node.level, r});

            std::vector<const HierarchyNode*> kids;
            std::vector<double> weights;
            for (const auto& c : node.children) {
                if (auto n = count_leaves(c); n > 0) {
                    kids.push_back(&c);
                    weights.push_back(static_cast<double>(n));
                }
            }
            std::vector<const GeneLeaf*> genes;
            for (const auto& g : node.genes) {
                if (!sort_key.contains(g.kegg_id)) fail(ErrorKind::MissingValue, "no sort key for " + g.kegg_id);
                genes.push_back(&g);
            }
            std::stable_sort(genes.begin(), genes.end(), [&](const GeneLeaf* a, const GeneLeaf* b) {
                const double ka = sort_key.at(a->kegg_id), kb = sort_key.at(b->kegg_id);
                if (ka != kb) return ka > kb;
                return a->kegg_id < b->kegg_id;
            });
            weights.resize(kids.size() + genes.size(), 1.0);

            auto rects = pivot_partition(weights, r);
            for (std::size_t i = 0; i < kids.size(); ++i) place(*kids[i], rects[i], path);
            for (std::size_t i = 0; i < genes.size(); ++i) {
                LayoutEntry e;
                e.kegg_id = genes[i]->kegg_id;
                e.annotation_path = path;
                e.rect = rects[kids.size() + i];
                layout.entries.push_back(std::move(e));
            }
            path.pop_back();
        };
    std::vector<std::string> path;
    place(tree, Rect{0, 0, side, side}, path);

    std::unordered_map<std::string, int> copies;
    for (auto& e : layout.entries) e.copy_index = copies[e.kegg_id]++;
    return layout;
}

/// Median of each gene over samples, the within-category ordering key.
template <class Matrix>
std::unordered_map<std::string, double> median_sort_key(const Matrix& expr) {
    std::unordered_map<std::string, double> key;
    for (std::size_t g = 0; g < expr.n_genes(); ++g) key[expr.gene_ids[g]] = expr.row_median(g);
    return key;
}

// ------------------------------------------------------------- export

inline std::string format_structure(const TreemapLayout& layout) {
    std::string out = "kegg_id\tcopy_index\tpath_level1\tpath_level2\tpath_level3\tpath_level4\tx0\ty0\tx1\ty1\n";
    for (const auto& e : layout.entries) {
        out += e.kegg_id + "\t" + std::to_string(e.copy_index);
        for (std::size_t i = 0; i < 4; ++i) out += "\t" + (i < e.annotation_path.size() ? e.annotation_path[i] : "");
        for (double v : {e.rect.x0, e.rect.y0, e.rect.x1, e.rect.y1}) out += "\t" + io::fixed(v, 6);
        out += '\n';
    }
    return out;
}

inline void export_structure(const TreemapLayout& layout, const std::filesystem::path& path) {
    io::write_file_atomic(path, format_structure(layout));
}

/// Reads a structure TSV back. Category rectangles are not part of the
/// table; the side is taken as the largest coordinate.
inline TreemapLayout import_structure(const std::filesystem::path& path) {
    TreemapLayout layout;
    layout.side = 0;
    const auto text = io::read_file(path);
    auto rows = io::lines(text);
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (io::trim(rows[r]).empty()) continue;
        auto c = io::split(rows[r], '\t');
        if (c.size() != 10) fail(ErrorKind::ParseError, "structure row " + std::to_string(r + 1) + " needs 10 columns");
        LayoutEntry e;
        e.kegg_id = c[0];
        e.copy_index = std::stoi(c[1]);
        for (std::size_t i = 2; i < 6; ++i)
            if (!c[i].empty()) e.annotation_path.push_back(c[i]);
        e.rect = {io::parse_double(c[6], "x0"), io::parse_double(c[7], "y0"), io::parse_double(c[8], "x1"),
                  io::parse_double(c[9], "y1")};
        layout.side = std::max({layout.side, e.rect.x1, e.rect.y1});
        layout.entries.push_back(std::move(e));
    }
    return layout;
}

inline nlohmann::json layout_to_json(const TreemapLayout& layout) {
    nlohmann::json j;
    j["side"] = layout.side;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : layout.entries)
        j["entries"].push_back({{"id", e.kegg_id},
                                {"copy", e.copy_index},
                                {"path", e.annotation_path},
                                {"rect", {e.rect.x0, e.rect.y0, e.rect.x1, e.rect.y1}}});
    j["categories"] = nlohmann::json::array();
    for (const auto& c : layout.categories)
        j["categories"].push_back(
            {{"path", c.path}, {"level", c.level}, {"rect", {c.rect.x0, c.rect.y0, c.rect.x1, c.rect.y1}}});
    return j;
}

inline TreemapLayout layout_from_json(const nlohmann::json& j) {
    TreemapLayout layout;
    try {
        layout.side = j.at("side").get<double>();
        auto rect = [](const nlohmann::json& a) {
            return Rect{a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>(), a.at(3).get<double>()};
        };
        for (const auto& e : j.at("entries"))
            layout.entries.push_back({e.at("id").get<std::string>(), e.at("copy").get<int>(),
                                      e.at("path").get<std::vector<std::string>>(), rect(e.at("rect"))});
        for (const auto& c : j.at("categories"))
            layout.categories.push_back(
                {c.at("path").get<std::vector<std::string>>(), c.at("level").get<int>(), rect(c.at("rect"))});
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::ParseError, std::string("layout JSON: ") + e.what());
    }
    return layout;
}

inline void save_layout_json(const TreemapLayout& layout, const std::filesystem::path& path) {
    io::write_file_atomic(path, layout_to_json(layout).dump(1) + "\n");
}

inline TreemapLayout load_layout_json(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::ParseError, path.string() + ": " + e.what());
    }
    return layout_from_json(j);
}

} // namespace omicsmap
