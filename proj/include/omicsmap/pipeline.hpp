#pragma once

// Pipeline configuration and the workdir stages behind each CLI command.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "omicsmap/attribution.hpp"
#include "omicsmap/cnn.hpp"
#include "omicsmap/error.hpp"
#include "omicsmap/eval.hpp"
#include "omicsmap/expr.hpp"
#include "omicsmap/fetch.hpp"
#include "omicsmap/hierarchy.hpp"
#include "omicsmap/io.hpp"
#include "omicsmap/render.hpp"
#include "omicsmap/seed.hpp"
#include "omicsmap/treemap.hpp"

namespace omicsmap {

namespace fs = std::filesystem;

struct PipelineConfig {
    fs::path workdir = "work";
    std::string hierarchy; // empty: build from the catalog cache
    std::string counts;    // empty: <workdir>/counts.tsv
    std::string labels;    // empty: <workdir>/labels.tsv
    std::string mapping;   // empty: ids already KEGG ids
    std::string cache_dir; // empty: <workdir>/cache
    std::string catalog = "br:br08902";
    std::string branch = "Genes and Proteins";
    std::string base_url = kDefaultCatalogUrl;
    bool loose_ids = false;
    double filter_threshold = -5;

    int layout_side = 1024;
    int render_divisor = 2;
    int channels = 1;
    bool png = false;

    std::array<int, 3> filters{32, 32, 64};
    int hidden = 128;
    TrainConfig train;

    int cv_k = 10;
    double val_fraction = 0.1;
    double attribution_frac = 0.1;
    double enrich_top = 0.1;
    std::vector<double> logreg_c_grid{0.01, 0.1, 1, 10, 100};

    int synth_samples = 200;
    std::vector<std::string> synth_classes{"A", "B", "C"};
    int synth_categories = 40;
    int synth_genes_per_category = 12;
    int synth_planted = 4;
    double synth_effect = 3.0;

    std::uint64_t seed = 0;
    int jobs = 1;

    int input_side() const { return layout_side / render_divisor; }
};

// ------------------------------------------------------------ config keys

namespace detail {

inline long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        long long x = std::stoll(v, &used);
        if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::UsageError, key + ": expected an integer, got '" + v + "'");
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        return io::parse_double(v, key);
    } catch (const Error&) {
        fail(ErrorKind::UsageError, key + ": expected a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(ErrorKind::UsageError, key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    for (auto& item : io::split(v, ','))
        if (auto t = io::trim(item); !t.empty()) out.emplace_back(t);
    return out;
}

using Setter = std::function<void(PipelineConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& setters() {
    using C = PipelineConfig;
    using S = const std::string&;
    static const std::map<std::string, Setter> table = {
        {"workdir", [](C& c, S, S v) { c.workdir = v; }},
        {"hierarchy", [](C& c, S, S v) { c.hierarchy = v; }},
        {"counts", [](C& c, S, S v) { c.counts = v; }},
        {"labels", [](C& c, S, S v) { c.labels = v; }},
        {"mapping", [](C& c, S, S v) { c.mapping = v; }},
        {"cache_dir", [](C& c, S, S v) { c.cache_dir = v; }},
        {"catalog", [](C& c, S, S v) { c.catalog = v; }},
        {"branch", [](C& c, S, S v) { c.branch = v; }},
        {"base_url", [](C& c, S, S v) { c.base_url = v; }},
        {"loose_ids", [](C& c, S k, S v) { c.loose_ids = parse_bool(k, v); }},
        {"filter_threshold", [](C& c, S k, S v) { c.filter_threshold = parse_real(k, v); }},
        {"layout_side", [](C& c, S k, S v) { c.layout_side = static_cast<int>(parse_int(k, v)); }},
        {"render_divisor", [](C& c, S k, S v) { c.render_divisor = static_cast<int>(parse_int(k, v)); }},
        {"channels", [](C& c, S k, S v) { c.channels = static_cast<int>(parse_int(k, v)); }},
        {"png", [](C& c, S k, S v) { c.png = parse_bool(k, v); }},
        {"filters",
         [](C& c, S k, S v) {
             auto items = parse_list(v);
             if (items.size() != 3) fail(ErrorKind::UsageError, k + ": expected three comma-separated counts");
             for (std::size_t i = 0; i < 3; ++i) c.filters[i] = static_cast<int>(parse_int(k, items[i]));
         }},
        {"hidden", [](C& c, S k, S v) { c.hidden = static_cast<int>(parse_int(k, v)); }},
        {"learning_rate", [](C& c, S k, S v) { c.train.lr = parse_real(k, v); }},
        {"beta_l2", [](C& c, S k, S v) { c.train.beta_l2 = parse_real(k, v); }},
        {"keep_prob", [](C& c, S k, S v) { c.train.keep_prob = parse_real(k, v); }},
        {"batch_size", [](C& c, S k, S v) { c.train.batch_size = static_cast<int>(parse_int(k, v)); }},
        {"max_epochs", [](C& c, S k, S v) { c.train.max_epochs = static_cast<int>(parse_int(k, v)); }},
        {"patience", [](C& c, S k, S v) { c.train.patience = static_cast<int>(parse_int(k, v)); }},
        {"adam_beta1", [](C& c, S k, S v) { c.train.adam_beta1 = parse_real(k, v); }},
        {"adam_beta2", [](C& c, S k, S v) { c.train.adam_beta2 = parse_real(k, v); }},
        {"adam_eps", [](C& c, S k, S v) { c.train.adam_eps = parse_real(k, v); }},
        {"cv_k", [](C& c, S k, S v) { c.cv_k = static_cast<int>(parse_int(k, v)); }},
        {"val_fraction", [](C& c, S k, S v) { c.val_fraction = parse_real(k, v); }},
        {"attribution_frac", [](C& c, S k, S v) { c.attribution_frac = parse_real(k, v); }},
        {"enrich_top", [](C& c, S k, S v) { c.enrich_top = parse_real(k, v); }},
        {"logreg_c_grid",
         [](C& c, S k, S v) {
             c.logreg_c_grid.clear();
             for (const auto& item : parse_list(v)) c.logreg_c_grid.push_back(parse_real(k, item));
         }},
        {"synth_samples", [](C& c, S k, S v) { c.synth_samples = static_cast<int>(parse_int(k, v)); }},
        {"synth_classes", [](C& c, S, S v) { c.synth_classes = parse_list(v); }},
        {"synth_categories", [](C& c, S k, S v) { c.synth_categories = static_cast<int>(parse_int(k, v)); }},
        {"synth_genes_per_category",
         [](C& c, S k, S v) { c.synth_genes_per_category = static_cast<int>(parse_int(k, v)); }},
        {"synth_planted", [](C& c, S k, S v) { c.synth_planted = static_cast<int>(parse_int(k, v)); }},
        {"synth_effect", [](C& c, S k, S v) { c.synth_effect = parse_real(k, v); }},
        {"seed", [](C& c, S k, S v) { c.seed = static_cast<std::uint64_t>(parse_int(k, v)); }},
        {"jobs", [](C& c, S k, S v) { c.jobs = static_cast<int>(parse_int(k, v)); }},
    };
    return table;
}

} // namespace detail

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, _] : detail::setters()) keys.push_back(k);
    return keys;
}

inline void apply_setting(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    auto it = detail::setters().find(key);
    if (it == detail::setters().end()) fail(ErrorKind::UsageError, "unknown config key '" + key + "'");
    it->second(cfg, key, value);
}

/// `key = value` lines; `#` starts a comment outside quotes; values may be
/// double-quoted.
inline void apply_config_text(PipelineConfig& cfg, std::string_view text) {
    int line_no = 0;
    for (auto raw : io::lines(text)) {
        ++line_no;
        std::string line(raw);
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        auto t = io::trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string_view::npos)
            fail(ErrorKind::UsageError, "config line " + std::to_string(line_no) + ": expected key = value");
        std::string key(io::trim(t.substr(0, eq)));
        std::string value(io::trim(t.substr(eq + 1)));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        apply_setting(cfg, key, value);
    }
}

inline void validate(const PipelineConfig& c) {
    auto bad = [](const std::string& m) { fail(ErrorKind::UsageError, m); };
    if (c.layout_side <= 0) bad("layout_side must be positive");
    if (c.render_divisor <= 0) bad("render_divisor must be positive");
    if (c.layout_side % c.render_divisor) bad("render_divisor must divide layout_side");
    if (c.channels != 1 && c.channels != 3) bad("channels must be 1 or 3");
    if (c.cv_k < 2) bad("cv_k must be at least 2");
    if (c.jobs < 1) bad("jobs must be at least 1");
    for (double f : {c.val_fraction, c.attribution_frac, c.enrich_top})
        if (!(f > 0 && f <= 1)) bad("fractions must lie in (0, 1]");
    if (c.logreg_c_grid.empty()) bad("logreg_c_grid must not be empty");
    if (c.synth_classes.size() < 2) bad("synth_classes needs at least two classes");
}

// ------------------------------------------------------------ workdir paths

struct Workdir {
    const PipelineConfig& cfg;

    fs::path dir() const { return cfg.workdir; }
    fs::path or_default(const std::string& v, const char* name) const { return v.empty() ? dir() / name : fs::path(v); }
    fs::path counts() const { return or_default(cfg.counts, "counts.tsv"); }
    fs::path labels() const { return or_default(cfg.labels, "labels.tsv"); }
    fs::path cache() const { return or_default(cfg.cache_dir, "cache"); }
    fs::path expression() const { return dir() / "expression.tsv"; }
    fs::path tree() const { return dir() / "tree.json"; }
    fs::path layout_tsv() const { return dir() / "layout.tsv"; }
    fs::path layout_json() const { return dir() / "layout.json"; }
    fs::path images() const { return dir() / "images"; }
    fs::path image(const std::string& sample, const char* ext = ".omnt") const { return images() / (sample + ext); }
    fs::path model() const { return dir() / "model.omck"; }
    fs::path metrics() const { return dir() / "metrics"; }
    fs::path attribution() const { return dir() / "attribution.tsv"; }
    fs::path enrichment() const { return dir() / "enrichment.tsv"; }
    fs::path planted() const { return dir() / "planted.tsv"; }
};

inline const fs::path& require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) fail(ErrorKind::IoError, "missing " + what + " file " + p.string());
    return p;
}

// ------------------------------------------------------------------ stages

/// Catalog resources referenced by childless categories under `branch`.
inline std::vector<std::string> referenced_resources(const HierarchyTree& top, const std::string& branch) {
    const auto* node = find_node(top, branch);
    if (!node) fail(ErrorKind::UnknownCategory, "branch '" + branch + "' not in catalog");
    std::vector<std::string> ids;
    std::function<void(const HierarchyNode&)> walk = [&](const HierarchyNode& n) {
        if (&n != node && n.children.empty() && n.genes.empty()) {
            std::string tok = n.label.substr(0, n.label.find_first_of(" \t"));
            ids.push_back(tok.rfind("br:", 0) == 0 ? tok : "br:" + tok);
        }
        for (const auto& c : n.children) walk(c);
    };
    walk(*node);
    return ids;
}

inline std::size_t stage_fetch(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto top = parse_htext(fetch_catalog(cfg.catalog, w.cache(), cfg.base_url));
    const auto ids = referenced_resources(top, cfg.branch);
    for (const auto& id : ids) fetch_catalog(id, w.cache(), cfg.base_url);
    return ids.size() + 1;
}

inline void write_tree(const HierarchyTree& tree, const fs::path& path) {
    io::write_file_atomic(path, tree_to_json(tree).dump(1) + "\n");
}

inline HierarchyTree read_tree(const fs::path& path) {
    return tree_from_json(nlohmann::json::parse(io::read_file(require_file(path, "tree"))));
}

inline HierarchyTree attach_expression_genes(const HierarchyTree& tree, const ExpressionMatrix& expr) {
    return attach_genes(tree, std::unordered_set<std::string>(expr.gene_ids.begin(), expr.gene_ids.end()));
}

inline HierarchyTree stage_build_tree(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    HtextOptions opts;
    opts.loose_ids = cfg.loose_ids;
    HierarchyTree tree;
    if (!cfg.hierarchy.empty()) {
        const fs::path p = cfg.hierarchy;
        const auto text = io::read_file(require_file(p, "hierarchy"));
        tree = normalize_tree(p.extension() == ".json" ? tree_from_json(nlohmann::json::parse(text))
                                                       : parse_htext(text, opts));
    } else {
        const auto top = parse_htext(fetch_catalog(cfg.catalog, w.cache(), cfg.base_url), opts);
        std::map<std::string, HierarchyTree> subs;
        for (const auto& id : referenced_resources(top, cfg.branch))
            subs[id.substr(3)] = parse_htext(fetch_catalog(id, w.cache(), cfg.base_url), opts);
        tree = build_annotation_tree(top, cfg.branch, subs);
    }
    if (fs::exists(w.expression())) tree = attach_expression_genes(tree, load_expression(w.expression()));
    write_tree(tree, w.tree());
    return tree;
}

inline ExpressionMatrix normalize_counts(const CountMatrix& counts, const PipelineConfig& cfg) {
    auto expr = filter_low_expression(tmm_normalize(counts), cfg.filter_threshold);
    if (!cfg.mapping.empty()) expr = map_to_kegg(expr, load_mapping(require_file(cfg.mapping, "mapping")));
    return expr;
}

inline ExpressionMatrix stage_normalize(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    auto expr = normalize_counts(load_counts(require_file(w.counts(), "counts")), cfg);
    io::write_file_atomic(w.expression(), format_expression(expr));
    return expr;
}

struct SynthOutput {
    SyntheticDataset data;
    std::map<std::string, std::set<std::string>> planted; // class -> categories
    ExpressionMatrix expr;
    HierarchyTree tree;
};

/// Planted categories are spread evenly over the category list and dealt
/// to classes round-robin.
inline std::map<std::string, std::set<std::string>> planted_categories(int n_categories, int n_planted,
                                                                        const std::vector<std::string>& classes) {
    std::map<std::string, std::set<std::string>> out;
    for (int i = 0; i < n_planted; ++i) {
        const int idx = static_cast<int>((i + 0.5) * n_categories / n_planted);
        out[classes[static_cast<std::size_t>(i) % classes.size()]].insert("category" + std::to_string(idx + 1));
    }
    return out;
}

inline SynthOutput synthesize(const PipelineConfig& cfg) {
    SyntheticTreeSpec spec;
    spec.categories = cfg.synth_categories;
    spec.genes_per_category = cfg.synth_genes_per_category;
    spec.seed = derive_seed(cfg.seed, "synth-tree");
    SynthOutput out;
    const auto full_tree = generate_synthetic_tree(spec);
    out.planted = planted_categories(cfg.synth_categories, cfg.synth_planted, cfg.synth_classes);
    out.data = generate_synthetic(cfg.synth_samples, cfg.synth_classes, full_tree, out.planted, cfg.synth_effect,
                                  derive_seed(cfg.seed, "synth-data"));
    out.expr = filter_low_expression(tmm_normalize(out.data.counts), cfg.filter_threshold);
    out.tree = attach_expression_genes(full_tree, out.expr);
    return out;
}

inline SynthOutput stage_synth(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    auto out = synthesize(cfg);
    write_counts(out.data.counts, w.counts());
    io::write_file_atomic(w.labels(), format_labels(out.data.labels));
    io::write_file_atomic(w.expression(), format_expression(out.expr));
    write_tree(out.tree, w.tree());
    std::string planted = "class\tcategory\n";
    for (const auto& [cls, cats] : out.planted)
        for (const auto& c : cats) planted += cls + "\t" + c + "\n";
    io::write_file_atomic(w.planted(), planted);
    return out;
}

inline TreemapLayout stage_layout(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto tree = read_tree(w.tree());
    const auto expr = load_expression(require_file(w.expression(), "expression"));
    auto layout = build_layout(tree, median_sort_key(expr), cfg.layout_side);
    export_structure(layout, w.layout_tsv());
    save_layout_json(layout, w.layout_json());
    return layout;
}

/// Model input as stored on disk (32-bit floats), widened to double.
inline Tensor to_model_input(const Image<float>& img) {
    Tensor t(img.height, img.width, img.channels);
    std::copy(img.data.begin(), img.data.end(), t.data.begin());
    return t;
}

inline Tensor render_model_input(const TreemapLayout& layout, const ExpressionMatrix& expr, std::size_t sample,
                                 const PipelineConfig& cfg) {
    const auto img = render_sample(layout, expr.column(sample), cfg.render_divisor, cfg.channels, false);
    Image<float> f(img.height, img.width, img.channels);
    std::copy(img.data.begin(), img.data.end(), f.data.begin());
    return to_model_input(f);
}

inline void stage_render(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto layout = load_layout_json(require_file(w.layout_json(), "layout"));
    const auto expr = load_expression(require_file(w.expression(), "expression"));
    if (std::lround(layout.side) != cfg.layout_side)
        fail(ErrorKind::InconsistentSides, "layout side " + io::exact(layout.side) + " differs from layout_side " +
                                               std::to_string(cfg.layout_side) + "; rerun layout");
    parallel_for(expr.n_samples(), cfg.jobs, [&](std::size_t s) {
        const auto values = expr.column(s);
        const auto& id = expr.sample_ids[s];
        export_image(render_sample(layout, values, cfg.render_divisor, cfg.channels, false), w.image(id),
                     ImageFormat::Tensor);
        if (cfg.png)
            export_image(render_sample(layout, values, cfg.render_divisor, 3, true), w.image(id, ".png"),
                         ImageFormat::Png);
    });
}

struct LabeledImages {
    SampleLabels labels;
    std::vector<std::string> class_names;
    std::vector<int> classes;
    std::vector<Tensor> images;
};

inline LabeledImages load_labeled_images(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    LabeledImages out;
    out.labels = load_labels(require_file(w.labels(), "labels"));
    out.class_names = out.labels.class_names();
    out.classes = out.labels.class_indices();
    out.images.resize(out.labels.size());
    parallel_for(out.labels.size(), cfg.jobs, [&](std::size_t i) {
        out.images[i] = to_model_input(read_tensor(require_file(w.image(out.labels.sample_ids[i]), "image")));
    });
    return out;
}

inline Architecture architecture_for(const PipelineConfig& cfg, int channels, int n_classes) {
    Architecture a;
    a.input_side = cfg.input_side();
    a.channels = channels;
    a.n_classes = n_classes;
    a.filters = cfg.filters;
    a.hidden = cfg.hidden;
    a.sides();
    return a;
}

inline LabeledSet labeled_subset(const std::vector<Tensor>& images, const std::vector<int>& labels,
                                 const std::vector<std::size_t>& idx) {
    LabeledSet s;
    for (auto i : idx) {
        s.images.push_back(&images[i]);
        s.labels.push_back(labels[i]);
    }
    return s;
}

/// Trains on `train_idx` with a stratified validation split carved out for
/// early stopping. All randomness derives from (seed, stage, index).
inline TrainResult train_with_holdout(const std::vector<Tensor>& images, const std::vector<int>& labels,
                                      const std::vector<std::size_t>& train_idx, const Architecture& arch,
                                      const PipelineConfig& cfg, std::uint64_t seed, const std::string& stage,
                                      std::uint64_t index) {
    auto [tr, val] = stratified_holdout(train_idx, labels, cfg.val_fraction, derive_seed(seed, stage + "-val", index));
    if (val.empty()) fail(ErrorKind::EmptyTrainingSet, "validation split is empty");
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(seed, stage + "-train", index);
    const auto init = init_model(arch, derive_seed(seed, stage + "-init", index));
    return train(init, labeled_subset(images, labels, tr), labeled_subset(images, labels, val), tc);
}

struct CnnCvRun {
    CvResult cv;
    std::vector<CnnModel> fold_models;
    std::vector<std::vector<EpochStats>> histories;
};

/// k-fold CV of the CNN; with `permutation_seed` set, labels are permuted
/// once before the identical fold split and training procedure.
inline CnnCvRun run_cnn_cv(const std::vector<Tensor>& images, const std::vector<int>& classes, int n_classes,
                           const PipelineConfig& cfg, std::optional<std::uint64_t> permutation_seed = {}) {
    if (images.empty()) fail(ErrorKind::EmptyTrainingSet, "no images");
    const auto arch = architecture_for(cfg, images.front().channels, n_classes);
    CnnCvRun run;
    run.fold_models.resize(static_cast<std::size_t>(cfg.cv_k));
    run.histories.resize(static_cast<std::size_t>(cfg.cv_k));
    const std::string stage = permutation_seed ? "permuted-cv" : "cv";
    FoldClassifier clf = [&](const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& test_idx,
                             const std::vector<int>& labels, int fold) {
        auto res = train_with_holdout(images, labels, train_idx, arch, cfg, cfg.seed, stage,
                                      static_cast<std::uint64_t>(fold));
        std::vector<const Tensor*> xs;
        for (auto i : test_idx) xs.push_back(&images[i]);
        auto probs = predict(res.model, xs);
        run.fold_models[static_cast<std::size_t>(fold)] = std::move(res.model);
        run.histories[static_cast<std::size_t>(fold)] = std::move(res.history);
        return probs;
    };
    const auto fold_seed = derive_seed(cfg.seed, "cv-folds");
    run.cv = permutation_seed ? permutation_control(classes, n_classes, cfg.cv_k, fold_seed, *permutation_seed, clf, cfg.jobs)
                              : run_cv(classes, n_classes, cfg.cv_k, fold_seed, clf, cfg.jobs);
    return run;
}

/// Each sample is attributed with the model of the fold that held it out.
inline AttributionReport out_of_fold_attribution(const CnnCvRun& run, const std::vector<Tensor>& images,
                                                 const TreemapLayout& layout, double frac, int jobs = 1) {
    std::vector<std::vector<PoolPixel>> selected(images.size());
    std::vector<const CnnModel*> owner(images.size(), nullptr);
    for (std::size_t f = 0; f < run.cv.folds.size(); ++f)
        for (auto i : run.cv.folds[f].test_indices) owner[i] = &run.fold_models[f];
    parallel_for(images.size(), jobs, [&](std::size_t i) { selected[i] = select_pixels(*owner[i], images[i], frac); });
    const int pool = run.fold_models.front().arch.pool3_side();
    return project_to_genes(selected, layout, pool);
}

inline std::string format_predictions(const std::vector<std::string>& samples, const std::vector<std::string>& class_names,
                                      const std::vector<std::vector<double>>& probs, const std::vector<int>* folds = nullptr) {
    std::string out = "sample_id";
    if (folds) out += ",fold";
    for (const auto& c : class_names) out += ",p_" + c;
    out += ",predicted\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        out += samples[i];
        if (folds) out += "," + std::to_string((*folds)[i]);
        for (double p : probs[i]) out += "," + io::exact(p);
        const auto best = static_cast<std::size_t>(std::max_element(probs[i].begin(), probs[i].end()) - probs[i].begin());
        out += "," + (best < class_names.size() ? class_names[best] : std::to_string(best)) + "\n";
    }
    return out;
}

inline std::string format_history(const std::vector<EpochStats>& h) {
    std::string out = "epoch,train_loss,val_loss,val_accuracy\n";
    for (std::size_t e = 0; e < h.size(); ++e)
        out += std::to_string(e) + "," + io::exact(h[e].train_loss) + "," + io::exact(h[e].val_loss) + "," +
               io::exact(h[e].val_accuracy) + "\n";
    return out;
}

inline void write_cv_outputs(const CnnCvRun& run, const LabeledImages& data, const fs::path& metrics,
                             const std::string& prefix) {
    io::write_file_atomic(metrics / (prefix + "_folds.csv"), format_fold_csv(run.cv, data.class_names));
    io::write_file_atomic(metrics / (prefix + "_summary.csv"), format_summary_csv(run.cv.summary));
    std::vector<std::vector<double>> probs(data.labels.size());
    std::vector<int> fold_of(data.labels.size(), -1);
    for (std::size_t f = 0; f < run.cv.folds.size(); ++f)
        for (std::size_t j = 0; j < run.cv.folds[f].test_indices.size(); ++j) {
            probs[run.cv.folds[f].test_indices[j]] = run.cv.folds[f].probs[j];
            fold_of[run.cv.folds[f].test_indices[j]] = static_cast<int>(f);
        }
    io::write_file_atomic(metrics / (prefix + "_predictions.csv"),
                          format_predictions(data.labels.sample_ids, data.class_names, probs, &fold_of));
    for (std::size_t c = 0; c < data.class_names.size(); ++c) {
        std::vector<RocResult> per_fold;
        for (const auto& f : run.cv.folds) per_fold.push_back(f.roc[c]);
        const auto base = prefix + "_roc_" + data.class_names[c];
        io::write_file_atomic(metrics / (base + ".csv"), format_roc_csv(per_fold));
        io::write_file_atomic(metrics / (base + ".svg"), roc_svg(per_fold, data.class_names[c] + " vs rest"));
    }
    std::string hist = "fold,epoch,train_loss,val_loss,val_accuracy\n";
    for (std::size_t f = 0; f < run.histories.size(); ++f) {
        const auto text = format_history(run.histories[f]);
        auto rows = io::lines(text);
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (!rows[i].empty()) hist += std::to_string(f) + "," + std::string(rows[i]) + "\n";
    }
    io::write_file_atomic(metrics / (prefix + "_history.csv"), hist);
}

inline CnnCvRun stage_cv(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto data = load_labeled_images(cfg);
    auto run = run_cnn_cv(data.images, data.classes, static_cast<int>(data.class_names.size()), cfg);
    write_cv_outputs(run, data, w.metrics(), "cv");
    if (fs::exists(w.layout_json())) {
        const auto layout = load_layout_json(w.layout_json());
        export_report(out_of_fold_attribution(run, data.images, layout, cfg.attribution_frac, cfg.jobs),
                      w.metrics() / "cv_attribution.tsv");
    }
    return run;
}

inline std::vector<double> read_fold_accuracies(const fs::path& csv) {
    std::vector<double> acc;
    const auto text = io::read_file(csv);
    auto rows = io::lines(text);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (io::trim(rows[i]).empty()) continue;
        auto cols = io::split(rows[i], ',');
        if (cols.size() < 3) fail(ErrorKind::ParseError, csv.string() + ": short row");
        acc.push_back(io::parse_double(cols[2], "accuracy"));
    }
    return acc;
}

inline CnnCvRun stage_permute_cv(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto data = load_labeled_images(cfg);
    auto run = run_cnn_cv(data.images, data.classes, static_cast<int>(data.class_names.size()), cfg,
                          derive_seed(cfg.seed, "permutation"));
    write_cv_outputs(run, data, w.metrics(), "permuted");
    if (const auto real = w.metrics() / "cv_folds.csv"; fs::exists(real)) {
        const auto a = read_fold_accuracies(real);
        const auto b = run.cv.accuracies();
        io::write_file_atomic(w.metrics() / "ranksum.csv", "mean_cv,mean_permuted,p_value\n" +
                                                               io::exact(summarize(a).mean) + "," +
                                                               io::exact(run.cv.summary.mean) + "," +
                                                               io::exact(ranksum_test(a, b)) + "\n");
    }
    return run;
}

inline TrainResult stage_train(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto data = load_labeled_images(cfg);
    const auto arch = architecture_for(cfg, data.images.front().channels, static_cast<int>(data.class_names.size()));
    std::vector<std::size_t> all(data.images.size());
    std::iota(all.begin(), all.end(), 0);
    auto res = train_with_holdout(data.images, data.classes, all, arch, cfg, cfg.seed, "final", 0);
    checkpoint_save(res.model, res.adam, w.model());
    io::write_file_atomic(w.metrics() / "train_history.csv", format_history(res.history));
    return res;
}

inline std::vector<std::string> image_samples(const Workdir& w) {
    std::vector<std::string> ids;
    if (fs::exists(w.labels())) return load_labels(w.labels()).sample_ids;
    require_file(w.images(), "images directory");
    for (const auto& e : fs::directory_iterator(w.images()))
        if (e.path().extension() == ".omnt") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline std::vector<Tensor> load_images(const Workdir& w, const std::vector<std::string>& ids, int jobs) {
    std::vector<Tensor> images(ids.size());
    parallel_for(ids.size(), jobs, [&](std::size_t i) {
        images[i] = to_model_input(read_tensor(require_file(w.image(ids[i]), "image")));
    });
    return images;
}

inline std::vector<std::vector<double>> stage_predict(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto [model, adam] = checkpoint_load(require_file(w.model(), "model"));
    const auto ids = image_samples(w);
    const auto images = load_images(w, ids, cfg.jobs);
    std::vector<std::vector<double>> probs(images.size());
    parallel_for(images.size(), cfg.jobs, [&](std::size_t i) { probs[i] = predict(model, std::vector<Tensor>{images[i]})[0]; });
    std::vector<std::string> names;
    if (fs::exists(w.labels())) names = load_labels(w.labels()).class_names();
    io::write_file_atomic(w.metrics() / "predictions.csv", format_predictions(ids, names, probs));
    return probs;
}

inline AttributionReport stage_attribute(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto [model, adam] = checkpoint_load(require_file(w.model(), "model"));
    const auto layout = load_layout_json(require_file(w.layout_json(), "layout"));
    const auto ids = image_samples(w);
    const auto images = load_images(w, ids, cfg.jobs);
    std::vector<std::vector<PoolPixel>> selected(images.size());
    parallel_for(images.size(), cfg.jobs,
                 [&](std::size_t i) { selected[i] = select_pixels(model, images[i], cfg.attribution_frac); });
    auto report = project_to_genes(selected, layout, model.arch.pool3_side());
    export_report(report, w.attribution());
    return report;
}

/// Level-3 categories of the tree as gene-id groups (same-label
/// categories are merged).
inline std::vector<std::pair<std::string, std::set<std::string>>> category_groups(const HierarchyTree& tree) {
    std::map<std::string, std::set<std::string>> groups;
    for (const auto* node : nodes_at_level(tree, kCategoryDepth))
        for (const auto* leaf : all_leaves(*node)) groups[node->label].insert(leaf->kegg_id);
    return {groups.begin(), groups.end()};
}

/// Genes owning the top `frac` of report rows by selection count.
inline std::set<std::string> top_selected_genes(const AttributionReport& report, double frac) {
    const auto rows = ranked_rows(report);
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(frac * static_cast<double>(rows.size()))));
    std::set<std::string> out;
    for (std::size_t i = 0; i < std::min(n, rows.size()); ++i) out.insert(rows[i].kegg_id);
    return out;
}

inline std::vector<EnrichmentRow> enrich_report(const AttributionReport& report, const HierarchyTree& tree, double frac) {
    std::set<std::string> background;
    for (const auto& r : report.rows) background.insert(r.kegg_id);
    return enrich_hypergeom(top_selected_genes(report, frac), background, category_groups(tree));
}

inline std::vector<EnrichmentRow> stage_enrich(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto report = import_report(require_file(w.attribution(), "attribution"));
    auto rows = enrich_report(report, read_tree(w.tree()), cfg.enrich_top);
    io::write_file_atomic(w.enrichment(), format_enrichment(rows));
    return rows;
}

/// Samples x genes design matrix from an expression matrix, rows in
/// `samples` order.
inline Matrix design_matrix(const ExpressionMatrix& expr, const std::vector<std::string>& samples) {
    std::map<std::string, std::size_t> col;
    for (std::size_t s = 0; s < expr.n_samples(); ++s) col[expr.sample_ids[s]] = s;
    Matrix X(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(expr.n_genes()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto it = col.find(samples[i]);
        if (it == col.end()) fail(ErrorKind::MissingValue, "sample " + samples[i] + " not in expression matrix");
        for (std::size_t g = 0; g < expr.n_genes(); ++g)
            X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g)) = expr.at(g, it->second);
    }
    return X;
}

struct PairwiseLogReg {
    std::string negative, positive;
    LogRegCvResult result;
};

/// One-vs-one logistic-regression CV for every class pair (positive is the
/// later class name).
inline std::vector<PairwiseLogReg> pairwise_logreg(const ExpressionMatrix& expr, const SampleLabels& labels,
                                                   const PipelineConfig& cfg) {
    const auto names = labels.class_names();
    const auto cls = labels.class_indices();
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < names.size(); ++a)
        for (std::size_t b = a + 1; b < names.size(); ++b) pairs.emplace_back(a, b);
    std::vector<PairwiseLogReg> out(pairs.size());
    parallel_for(pairs.size(), cfg.jobs, [&](std::size_t p) {
        const auto [a, b] = pairs[p];
        std::vector<std::string> samples;
        std::vector<double> y;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (cls[i] == static_cast<int>(a) || cls[i] == static_cast<int>(b)) {
                samples.push_back(labels.sample_ids[i]);
                y.push_back(cls[i] == static_cast<int>(b) ? 1.0 : -1.0);
            }
        const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
        out[p] = {names[a], names[b],
                  logreg_cv(design_matrix(expr, samples), yv, cfg.logreg_c_grid, cfg.cv_k,
                            derive_seed(cfg.seed, "logreg", p))};
    });
    return out;
}

inline std::vector<PairwiseLogReg> stage_baseline_logreg(const PipelineConfig& cfg) {
    const Workdir w{cfg};
    const auto expr = load_expression(require_file(w.expression(), "expression"));
    const auto labels = load_labels(require_file(w.labels(), "labels"));
    auto res = pairwise_logreg(expr, labels, cfg);
    std::string folds = "negative,positive,fold,C,auc\n", summary = "negative,positive,mean_auc,best_C\n";
    for (const auto& r : res) {
        for (std::size_t f = 0; f < r.result.fold_auc.size(); ++f)
            folds += r.negative + "," + r.positive + "," + std::to_string(f) + "," + io::exact(r.result.fold_C[f]) + "," +
                     io::exact(r.result.fold_auc[f]) + "\n";
        summary += r.negative + "," + r.positive + "," + io::exact(summarize(r.result.fold_auc).mean) + "," +
                   io::exact(r.result.best_C) + "\n";
    }
    io::write_file_atomic(w.metrics() / "logreg_folds.csv", folds);
    io::write_file_atomic(w.metrics() / "logreg_summary.csv", summary);
    return res;
}

} // namespace omicsmap
