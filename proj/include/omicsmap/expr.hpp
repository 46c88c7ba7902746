#pragma once

// Count matrices, TMM normalization to log2-CPM, low-expression filtering,
// gene -> KEGG id collapsing and the planted-signal synthetic generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "omicsmap/error.hpp"
#include "omicsmap/hierarchy.hpp"
#include "omicsmap/io.hpp"

namespace omicsmap {

struct CountMatrix {
    std::vector<std::string> gene_ids;
    std::vector<std::string> sample_ids;
    std::vector<std::int64_t> counts; // genes x samples, row-major

    std::size_t n_genes() const { return gene_ids.size(); }
    std::size_t n_samples() const { return sample_ids.size(); }
    std::int64_t at(std::size_t g, std::size_t s) const { return counts[g * n_samples() + s]; }
    std::int64_t& at(std::size_t g, std::size_t s) { return counts[g * n_samples() + s]; }
    bool operator==(const CountMatrix&) const = default;
};

struct ExpressionMatrix {
    std::vector<std::string> gene_ids;
    std::vector<std::string> sample_ids;
    std::vector<double> values; // genes x samples, row-major, log2 scale
    std::vector<double> norm_factors;

    std::size_t n_genes() const { return gene_ids.size(); }
    std::size_t n_samples() const { return sample_ids.size(); }
    double at(std::size_t g, std::size_t s) const { return values[g * n_samples() + s]; }
    double& at(std::size_t g, std::size_t s) { return values[g * n_samples() + s]; }

    double row_mean(std::size_t g) const {
        double s = 0;
        for (std::size_t j = 0; j < n_samples(); ++j) s += at(g, j);
        return s / static_cast<double>(n_samples());
    }
    double row_median(std::size_t g) const {
        std::vector<double> r(values.begin() + static_cast<std::ptrdiff_t>(g * n_samples()),
                              values.begin() + static_cast<std::ptrdiff_t>((g + 1) * n_samples()));
        std::sort(r.begin(), r.end());
        auto n = r.size();
        return n % 2 ? r[n / 2] : 0.5 * (r[n / 2 - 1] + r[n / 2]);
    }
    /// One sample's values keyed by gene id.
    std::unordered_map<std::string, double> column(std::size_t s) const {
        std::unordered_map<std::string, double> out;
        out.reserve(n_genes());
        for (std::size_t g = 0; g < n_genes(); ++g) out.emplace(gene_ids[g], at(g, s));
        return out;
    }
};

/// Ordered sample -> class assignment.
struct SampleLabels {
    std::vector<std::string> sample_ids;
    std::vector<std::string> classes;

    std::size_t size() const { return sample_ids.size(); }
    std::vector<std::string> class_names() const {
        std::set<std::string> s(classes.begin(), classes.end());
        return {s.begin(), s.end()};
    }
    /// Class index per sample against the sorted class-name list.
    std::vector<int> class_indices() const {
        auto names = class_names();
        std::vector<int> out;
        out.reserve(classes.size());
        for (const auto& c : classes)
            out.push_back(static_cast<int>(std::lower_bound(names.begin(), names.end(), c) - names.begin()));
        return out;
    }
    bool operator==(const SampleLabels&) const = default;
};

// ---------------------------------------------------------------- file I/O

inline CountMatrix parse_counts(std::string_view text) {
    CountMatrix m;
    auto rows = io::lines(text);
    std::size_t r = 0;
    while (r < rows.size() && io::trim(rows[r]).empty()) ++r;
    if (r == rows.size()) fail(ErrorKind::EmptyMatrix, "no header row");
    auto header = io::split(rows[r++], '\t');
    if (header.size() < 2) fail(ErrorKind::EmptyMatrix, "header has no sample columns");
    std::set<std::string> seen;
    for (std::size_t i = 1; i < header.size(); ++i) {
        if (!seen.insert(header[i]).second) fail(ErrorKind::DuplicateSample, "sample '" + header[i] + "' repeated");
        m.sample_ids.push_back(header[i]);
    }
    for (; r < rows.size(); ++r) {
        if (io::trim(rows[r]).empty()) continue;
        auto cells = io::split(rows[r], '\t');
        if (cells.size() != header.size())
            fail(ErrorKind::ParseError, "row " + std::to_string(r + 1) + " has " + std::to_string(cells.size()) +
                                            " cells, expected " + std::to_string(header.size()));
        m.gene_ids.push_back(cells[0]);
        for (std::size_t i = 1; i < cells.size(); ++i) {
            auto cell = io::trim(cells[i]);
            if (cell.empty() || !std::all_of(cell.begin(), cell.end(), [](char c) { return c >= '0' && c <= '9'; }))
                fail(ErrorKind::ParseError, "non-integer count '" + std::string(cell) + "' at row " +
                                                std::to_string(r + 1));
            m.counts.push_back(std::stoll(std::string(cell)));
        }
    }
    if (m.gene_ids.empty()) fail(ErrorKind::EmptyMatrix, "no gene rows");
    return m;
}

inline CountMatrix load_counts(const std::filesystem::path& path) { return parse_counts(io::read_file(path)); }

inline std::string format_counts(const CountMatrix& m) {
    std::string out = "gene_id";
    for (const auto& s : m.sample_ids) out += "\t" + s;
    out += '\n';
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
        out += m.gene_ids[g];
        for (std::size_t s = 0; s < m.n_samples(); ++s) out += "\t" + std::to_string(m.at(g, s));
        out += '\n';
    }
    return out;
}

inline void write_counts(const CountMatrix& m, const std::filesystem::path& path) {
    io::write_file_atomic(path, format_counts(m));
}

/// Expression TSV: same layout as counts, values printed exactly, plus a
/// `#norm_factor` row after the header.
inline std::string format_expression(const ExpressionMatrix& m) {
    std::string out = "gene_id";
    for (const auto& s : m.sample_ids) out += "\t" + s;
    out += "\n#norm_factor";
    for (double f : m.norm_factors) out += "\t" + io::exact(f);
    out += '\n';
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
        out += m.gene_ids[g];
        for (std::size_t s = 0; s < m.n_samples(); ++s) out += "\t" + io::exact(m.at(g, s));
        out += '\n';
    }
    return out;
}

inline ExpressionMatrix parse_expression(std::string_view text) {
    ExpressionMatrix m;
    auto rows = io::lines(text);
    if (rows.empty()) fail(ErrorKind::EmptyMatrix, "no header row");
    auto header = io::split(rows[0], '\t');
    if (header.size() < 2) fail(ErrorKind::EmptyMatrix, "header has no sample columns");
    m.sample_ids.assign(header.begin() + 1, header.end());
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (io::trim(rows[r]).empty()) continue;
        auto cells = io::split(rows[r], '\t');
        if (cells.size() != header.size()) fail(ErrorKind::ParseError, "ragged expression row " + std::to_string(r + 1));
        if (cells[0] == "#norm_factor") {
            for (std::size_t i = 1; i < cells.size(); ++i) m.norm_factors.push_back(io::parse_double(cells[i], "norm_factor"));
            continue;
        }
        m.gene_ids.push_back(cells[0]);
        for (std::size_t i = 1; i < cells.size(); ++i) m.values.push_back(io::parse_double(cells[i], "expression"));
    }
    if (m.norm_factors.empty()) m.norm_factors.assign(m.n_samples(), 1.0);
    if (m.gene_ids.empty()) fail(ErrorKind::EmptyMatrix, "no gene rows");
    return m;
}

inline ExpressionMatrix load_expression(const std::filesystem::path& path) {
    return parse_expression(io::read_file(path));
}

inline SampleLabels parse_labels(std::string_view text) {
    SampleLabels l;
    std::set<std::string> seen;
    for (auto row : io::lines(text)) {
        if (io::trim(row).empty() || row[0] == '#') continue;
        auto cells = io::split(row, '\t');
        if (cells.size() != 2) fail(ErrorKind::ParseError, "labels row needs sample_id<TAB>class");
        if (cells[0] == "sample_id" && l.sample_ids.empty()) continue;
        if (!seen.insert(cells[0]).second) fail(ErrorKind::DuplicateSample, "label for '" + cells[0] + "' repeated");
        l.sample_ids.push_back(cells[0]);
        l.classes.push_back(std::string(io::trim(cells[1])));
    }
    return l;
}

inline SampleLabels load_labels(const std::filesystem::path& path) { return parse_labels(io::read_file(path)); }

inline std::string format_labels(const SampleLabels& l) {
    std::string out = "sample_id\tclass\n";
    for (std::size_t i = 0; i < l.size(); ++i) out += l.sample_ids[i] + "\t" + l.classes[i] + "\n";
    return out;
}

inline std::map<std::string, std::string> load_mapping(const std::filesystem::path& path) {
    std::map<std::string, std::string> m;
    const auto text = io::read_file(path);
    for (auto row : io::lines(text)) {
        if (io::trim(row).empty() || row[0] == '#') continue;
        auto cells = io::split(row, '\t');
        if (cells.size() != 2) fail(ErrorKind::ParseError, "mapping row needs gene_id<TAB>kegg_id");
        if (cells[0] == "gene_id") continue;
        m.emplace(cells[0], std::string(io::trim(cells[1])));
    }
    return m;
}

// ---------------------------------------------------------- normalization

namespace detail {

/// Type-7 sample quantile (the R default).
inline double quantile7(std::vector<double> x, double p) {
    std::sort(x.begin(), x.end());
    const double h = (static_cast<double>(x.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

/// Ranks with ties averaged, 1-based.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

} // namespace detail

struct TmmOptions {
    double logratio_trim = 0.3;
    double sum_trim = 0.05;
    bool weighted = true;
    double prior_count = 0.5;
};

/// TMM factor of one sample against the reference sample.
inline double tmm_factor(const std::vector<double>& obs, const std::vector<double>& ref, double lib_obs, double lib_ref,
                         const TmmOptions& opt = {}) {
    std::vector<double> logr, abse, var;
    for (std::size_t g = 0; g < obs.size(); ++g) {
        if (obs[g] <= 0 || ref[g] <= 0) continue;
        const double po = obs[g] / lib_obs, pr = ref[g] / lib_ref;
        logr.push_back(std::log2(po / pr));
        abse.push_back(0.5 * (std::log2(po) + std::log2(pr)));
        var.push_back((lib_obs - obs[g]) / lib_obs / obs[g] + (lib_ref - ref[g]) / lib_ref / ref[g]);
    }
    if (logr.empty()) return 1.0;
    double max_abs = 0;
    for (double v : logr) max_abs = std::max(max_abs, std::abs(v));
    if (max_abs < 1e-6) return 1.0;

    const double n = static_cast<double>(logr.size());
    const double lo_l = std::floor(n * opt.logratio_trim) + 1, hi_l = n + 1 - lo_l;
    const double lo_s = std::floor(n * opt.sum_trim) + 1, hi_s = n + 1 - lo_s;
    auto rank_l = detail::average_ranks(logr);
    auto rank_s = detail::average_ranks(abse);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < logr.size(); ++i) {
        if (rank_l[i] < lo_l || rank_l[i] > hi_l || rank_s[i] < lo_s || rank_s[i] > hi_s) continue;
        const double w = opt.weighted ? 1.0 / var[i] : 1.0;
        num += w * logr[i];
        den += w;
    }
    const double f = den > 0 ? num / den : 0.0;
    return std::exp2(f);
}

/// TMM factors (reference = sample whose upper-quartile fraction is closest
/// to the mean), rescaled to geometric mean 1.
inline std::vector<double> tmm_factors(const CountMatrix& counts, const TmmOptions& opt = {}) {
    const auto ng = counts.n_genes(), ns = counts.n_samples();
    if (ns == 0 || ng == 0) fail(ErrorKind::EmptyMatrix, "nothing to normalize");
    std::vector<std::vector<double>> cols(ns, std::vector<double>(ng));
    std::vector<double> lib(ns, 0.0);
    for (std::size_t s = 0; s < ns; ++s) {
        for (std::size_t g = 0; g < ng; ++g) {
            cols[s][g] = static_cast<double>(counts.at(g, s));
            lib[s] += cols[s][g];
        }
        if (lib[s] <= 0) fail(ErrorKind::DegenerateLibrary, "sample '" + counts.sample_ids[s] + "' has zero counts");
    }
    std::vector<double> f75(ns);
    for (std::size_t s = 0; s < ns; ++s) {
        std::vector<double> frac(ng);
        for (std::size_t g = 0; g < ng; ++g) frac[g] = cols[s][g] / lib[s];
        f75[s] = detail::quantile7(std::move(frac), 0.75);
    }
    const double mean75 = std::accumulate(f75.begin(), f75.end(), 0.0) / static_cast<double>(ns);
    std::size_t ref = 0;
    for (std::size_t s = 1; s < ns; ++s)
        if (std::abs(f75[s] - mean75) < std::abs(f75[ref] - mean75)) ref = s;

    std::vector<double> factors(ns);
    double log_sum = 0;
    for (std::size_t s = 0; s < ns; ++s) {
        factors[s] = tmm_factor(cols[s], cols[ref], lib[s], lib[ref], opt);
        log_sum += std::log(factors[s]);
    }
    const double geo = std::exp(log_sum / static_cast<double>(ns));
    for (auto& f : factors) f /= geo;
    return factors;
}

/// log2(count * 1e6 / (library_size * factor) + prior_count) per cell.
inline ExpressionMatrix tmm_normalize(const CountMatrix& counts, const TmmOptions& opt = {}) {
    ExpressionMatrix out;
    out.gene_ids = counts.gene_ids;
    out.sample_ids = counts.sample_ids;
    out.norm_factors = tmm_factors(counts, opt);
    const auto ng = counts.n_genes(), ns = counts.n_samples();
    std::vector<double> lib(ns, 0.0);
    for (std::size_t g = 0; g < ng; ++g)
        for (std::size_t s = 0; s < ns; ++s) lib[s] += static_cast<double>(counts.at(g, s));
    out.values.resize(ng * ns);
    for (std::size_t g = 0; g < ng; ++g)
        for (std::size_t s = 0; s < ns; ++s)
            out.at(g, s) = std::log2(static_cast<double>(counts.at(g, s)) * 1e6 / (lib[s] * out.norm_factors[s]) +
                                     opt.prior_count);
    return out;
}

// ------------------------------------------------------ filtering/mapping

inline ExpressionMatrix select_rows(const ExpressionMatrix& m, const std::vector<std::size_t>& rows) {
    ExpressionMatrix out;
    out.sample_ids = m.sample_ids;
    out.norm_factors = m.norm_factors;
    out.values.reserve(rows.size() * m.n_samples());
    for (auto g : rows) {
        out.gene_ids.push_back(m.gene_ids[g]);
        for (std::size_t s = 0; s < m.n_samples(); ++s) out.values.push_back(m.at(g, s));
    }
    return out;
}

/// Keeps a gene when its largest value over samples exceeds `threshold`.
inline ExpressionMatrix filter_low_expression(const ExpressionMatrix& m, double threshold) {
    std::vector<std::size_t> keep;
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < m.n_samples(); ++s) mx = std::max(mx, m.at(g, s));
        if (mx > threshold) keep.push_back(g);
    }
    return select_rows(m, keep);
}

/// Re-keys rows by KEGG id. When several genes map to one id the row with
/// the highest mean survives (ties: smaller source gene id). Output rows
/// follow the first appearance of each id; unmapped genes are dropped.
inline ExpressionMatrix map_to_kegg(const ExpressionMatrix& m, const std::map<std::string, std::string>& mapping) {
    std::vector<std::string> order;
    std::unordered_map<std::string, std::size_t> best;
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
        auto it = mapping.find(m.gene_ids[g]);
        if (it == mapping.end() || it->second.empty()) continue;
        const auto& key = it->second;
        auto [pos, inserted] = best.try_emplace(key, g);
        if (inserted) {
            order.push_back(key);
            continue;
        }
        const auto cur = pos->second;
        const double mg = m.row_mean(g), mc = m.row_mean(cur);
        if (mg > mc || (mg == mc && m.gene_ids[g] < m.gene_ids[cur])) pos->second = g;
    }
    std::vector<std::size_t> rows;
    rows.reserve(order.size());
    for (const auto& k : order) rows.push_back(best[k]);
    ExpressionMatrix out = select_rows(m, rows);
    out.gene_ids = order;
    return out;
}

// ------------------------------------------------------------- synthetic

struct SyntheticTreeSpec {
    int level1 = 4;
    int level2_per_level1 = 2;
    int categories = 40;        // level-3 nodes, spread evenly over level-2 nodes
    int genes_per_category = 12;
    int genes_spread = 2;       // per-category size drawn from mean +/- spread
    double multi_copy_fraction = 0.05;
    std::uint64_t seed = 1;
};

/// Five-layer synthetic annotation tree with sequential K-style ids; a
/// fraction of genes is annotated to a second category.
inline HierarchyTree generate_synthetic_tree(const SyntheticTreeSpec& spec) {
    std::mt19937_64 rng(spec.seed);
    HierarchyTree root;
    root.label = "synthetic";
    const int n_l2 = spec.level1 * spec.level2_per_level1;
    int gene_counter = 0;
    auto next_id = [&] {
        char buf[16];
        std::snprintf(buf, sizeof buf, "K%05d", ++gene_counter);
        return std::string(buf);
    };
    std::uniform_int_distribution<int> size_dist(spec.genes_per_category - spec.genes_spread,
                                                 spec.genes_per_category + spec.genes_spread);
    int cat = 0;
    for (int a = 0; a < spec.level1; ++a) {
        HierarchyNode l1;
        l1.label = "group" + std::to_string(a + 1);
        for (int b = 0; b < spec.level2_per_level1; ++b) {
            const int l2_index = a * spec.level2_per_level1 + b;
            HierarchyNode l2;
            l2.label = "family" + std::to_string(l2_index + 1);
            const int n_cat = spec.categories / n_l2 + (l2_index < spec.categories % n_l2 ? 1 : 0);
            for (int c = 0; c < n_cat; ++c) {
                HierarchyNode l3;
                l3.label = "category" + std::to_string(++cat);
                const int n = std::max(1, size_dist(rng));
                for (int i = 0; i < n; ++i) {
                    GeneLeaf g;
                    g.kegg_id = next_id();
                    g.display_name = "gene" + g.kegg_id.substr(1);
                    l3.genes.push_back(std::move(g));
                }
                l2.children.push_back(std::move(l3));
            }
            l1.children.push_back(std::move(l2));
        }
        root.children.push_back(std::move(l1));
    }
    // second annotations
    std::vector<HierarchyNode*> cats;
    for (auto& l1 : root.children)
        for (auto& l2 : l1.children)
            for (auto& l3 : l2.children) cats.push_back(&l3);
    std::vector<std::pair<GeneLeaf, std::size_t>> extra;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, cats.size() - 1);
    for (std::size_t ci = 0; ci < cats.size(); ++ci)
        for (const auto& g : cats[ci]->genes)
            if (unit(rng) < spec.multi_copy_fraction) {
                std::size_t target = pick(rng);
                if (target == ci) target = (target + 1) % cats.size();
                extra.emplace_back(g, target);
            }
    for (auto& [g, target] : extra) cats[target]->genes.push_back(g);
    refresh_paths(root);
    return root;
}

struct SyntheticDataset {
    CountMatrix counts;
    SampleLabels labels;
    std::set<std::string> planted_genes;
};

/// Log-normal counts round(2^(base + shift + noise)) with base ~ U[2,10]
/// per gene and noise ~ N(0, 0.5) per cell; genes under a class's planted
/// categories get +effect in samples of that class.
inline SyntheticDataset generate_synthetic(int n_samples, const std::vector<std::string>& classes,
                                           const HierarchyTree& tree,
                                           const std::map<std::string, std::set<std::string>>& planted, double effect,
                                           std::uint64_t seed) {
    if (classes.empty()) fail(ErrorKind::UnknownCategory, "no classes given");
    std::vector<std::string> genes;
    std::unordered_set<std::string> seen;
    for (const auto* leaf : all_leaves(tree))
        if (seen.insert(leaf->kegg_id).second) genes.push_back(leaf->kegg_id);
    if (genes.empty()) fail(ErrorKind::EmptyTree, "tree has no genes");

    std::map<std::string, std::unordered_set<std::string>> shifted; // class -> genes
    SyntheticDataset out;
    for (const auto& [cls, cats] : planted) {
        if (std::find(classes.begin(), classes.end(), cls) == classes.end())
            fail(ErrorKind::UnknownCategory, "planted class '" + cls + "' not among classes");
        for (const auto& label : cats) {
            const auto* node = find_node(tree, label);
            if (!node || node->level == 0) fail(ErrorKind::UnknownCategory, "category '" + label + "' not in tree");
            for (const auto* leaf : all_leaves(*node)) {
                shifted[cls].insert(leaf->kegg_id);
                out.planted_genes.insert(leaf->kegg_id);
            }
        }
    }

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> base_dist(2.0, 10.0);
    std::normal_distribution<double> noise(0.0, 0.5);
    std::vector<double> base(genes.size());
    for (auto& b : base) b = base_dist(rng);

    std::vector<std::string> assignment(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) assignment[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(i) % classes.size()];
    std::shuffle(assignment.begin(), assignment.end(), rng);

    out.counts.gene_ids = genes;
    for (int i = 0; i < n_samples; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "S%04d", i + 1);
        out.counts.sample_ids.emplace_back(buf);
    }
    out.labels.sample_ids = out.counts.sample_ids;
    out.labels.classes = assignment;
    out.counts.counts.assign(genes.size() * static_cast<std::size_t>(n_samples), 0);
    for (std::size_t s = 0; s < static_cast<std::size_t>(n_samples); ++s) {
        const auto& cls_genes = shifted[assignment[s]];
        for (std::size_t g = 0; g < genes.size(); ++g) {
            double x = base[g] + noise(rng);
            if (cls_genes.contains(genes[g])) x += effect;
            out.counts.at(g, s) = std::llround(std::exp2(x));
        }
    }
    return out;
}

} // namespace omicsmap
