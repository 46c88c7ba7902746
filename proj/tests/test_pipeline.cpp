#include <set>
#include <thread>

#include "omicsmap/pipeline.hpp"

#include "httplib.h"
#include "test_util.hpp"

using namespace omicsmap;

namespace {

void expect_error(ErrorKind kind, const std::function<void()>& f) {
    try {
        f();
        ADD_FAILURE() << "no error thrown";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

PipelineConfig small_config(const fs::path& dir) {
    PipelineConfig c;
    c.workdir = dir;
    c.synth_samples = 30;
    c.synth_classes = {"A", "B"};
    c.synth_categories = 8;
    c.synth_genes_per_category = 6;
    c.synth_planted = 2;
    c.layout_side = 64;
    c.render_divisor = 2;
    c.filters = {2, 3, 4};
    c.hidden = 6;
    c.cv_k = 3;
    c.val_fraction = 0.2;
    c.train.max_epochs = 3;
    c.train.patience = 2;
    c.train.batch_size = 8;
    c.logreg_c_grid = {0.1, 1};
    c.seed = 11;
    return c;
}

// synth -> layout -> render once for the whole suite
class SmallWorkdir : public ::testing::Test {
protected:
    static fs::path dir() { return fs::path(OMICSMAP_TEST_TMP) / "SmallWorkdir" / "shared"; }
    static void SetUpTestSuite() {
        fs::remove_all(dir());
        fs::create_directories(dir());
        const auto cfg = small_config(dir());
        stage_synth(cfg);
        stage_layout(cfg);
        stage_render(cfg);
    }
    PipelineConfig cfg = small_config(dir());
};

} // namespace

// ------------------------------------------------------------------ config

TEST(Config, ParsesCommentsQuotesAndLists) {
    PipelineConfig c;
    apply_config_text(c, "# header\n"
                         "layout_side = 256   # trailing\n"
                         "branch = \"Genes # and Proteins\"\n"
                         "\n"
                         "filters = 4, 8,16\n"
                         "logreg_c_grid = 0.5,2\n"
                         "png = true\n"
                         "synth_classes = X,Y,Z\n"
                         "learning_rate = 0.01\n"
                         "seed = 42\n");
    EXPECT_EQ(c.layout_side, 256);
    EXPECT_EQ(c.branch, "Genes # and Proteins");
    EXPECT_EQ(c.filters, (std::array<int, 3>{4, 8, 16}));
    EXPECT_EQ(c.logreg_c_grid, (std::vector<double>{0.5, 2}));
    EXPECT_TRUE(c.png);
    EXPECT_EQ(c.synth_classes, (std::vector<std::string>{"X", "Y", "Z"}));
    EXPECT_EQ(c.train.lr, 0.01);
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.input_side(), 128);
}

TEST(Config, RejectsBadInput) {
    PipelineConfig c;
    expect_error(ErrorKind::UsageError, [&] { apply_config_text(c, "nonsense_key = 1\n"); });
    expect_error(ErrorKind::UsageError, [&] { apply_config_text(c, "layout_side\n"); });
    expect_error(ErrorKind::UsageError, [&] { apply_config_text(c, "layout_side = 12x\n"); });
    expect_error(ErrorKind::UsageError, [&] { apply_config_text(c, "filters = 1,2\n"); });
    expect_error(ErrorKind::UsageError, [&] { apply_config_text(c, "png = maybe\n"); });
    expect_error(ErrorKind::UsageError, [&] { apply_config_text(c, "keep_prob = abc\n"); });
}

TEST(Config, EveryKeyHasASetter) {
    const auto keys = config_keys();
    EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
    for (const auto& k : {"workdir", "layout_side", "filters", "cv_k", "seed", "jobs", "enrich_top"})
        EXPECT_NE(std::find(keys.begin(), keys.end(), k), keys.end()) << k;
}

TEST(Config, Validate) {
    PipelineConfig c;
    EXPECT_NO_THROW(validate(c));
    auto bad = [&](auto mutate) {
        PipelineConfig x;
        mutate(x);
        expect_error(ErrorKind::UsageError, [&] { validate(x); });
    };
    bad([](PipelineConfig& x) { x.render_divisor = 3; });
    bad([](PipelineConfig& x) { x.layout_side = 0; });
    bad([](PipelineConfig& x) { x.channels = 2; });
    bad([](PipelineConfig& x) { x.cv_k = 1; });
    bad([](PipelineConfig& x) { x.jobs = 0; });
    bad([](PipelineConfig& x) { x.enrich_top = 0; });
    bad([](PipelineConfig& x) { x.val_fraction = 1.5; });
    bad([](PipelineConfig& x) { x.logreg_c_grid.clear(); });
    bad([](PipelineConfig& x) { x.synth_classes = {"A"}; });
}

TEST(Workdir, DefaultsAndOverrides) {
    PipelineConfig c;
    c.workdir = "w";
    Workdir w{c};
    EXPECT_EQ(w.counts(), fs::path("w") / "counts.tsv");
    EXPECT_EQ(w.image("s1"), fs::path("w") / "images" / "s1.omnt");
    c.counts = "/elsewhere/c.tsv";
    EXPECT_EQ(w.counts(), fs::path("/elsewhere/c.tsv"));
}

// ------------------------------------------------------------------ synth

TEST(PlantedCategories, SpreadAndDealt) {
    auto p = planted_categories(40, 4, {"A", "B", "C"});
    EXPECT_EQ(p["A"], (std::set<std::string>{"category6", "category36"}));
    EXPECT_EQ(p["B"], (std::set<std::string>{"category16"}));
    EXPECT_EQ(p["C"], (std::set<std::string>{"category26"}));
    auto one = planted_categories(8, 1, {"A", "B"});
    EXPECT_EQ(one["A"], (std::set<std::string>{"category5"}));
    EXPECT_FALSE(one.contains("B"));
}

TEST_F(SmallWorkdir, SynthWritesConsistentFiles) {
    Workdir w{cfg};
    for (const auto& p : {w.counts(), w.labels(), w.expression(), w.tree(), w.planted(), w.layout_tsv(), w.layout_json()})
        EXPECT_TRUE(fs::exists(p)) << p;
    const auto labels = load_labels(w.labels());
    const auto expr = load_expression(w.expression());
    EXPECT_EQ(labels.size(), 30u);
    EXPECT_EQ(expr.n_samples(), 30u);
    EXPECT_EQ(labels.class_names(), (std::vector<std::string>{"A", "B"}));
    EXPECT_EQ(testutil::read(w.planted()), "class\tcategory\nA\tcategory3\nB\tcategory7\n");

    // every tree leaf has an expression row
    std::set<std::string> ids(expr.gene_ids.begin(), expr.gene_ids.end());
    const auto tree = read_tree(w.tree());
    for (const auto* leaf : all_leaves(tree)) EXPECT_TRUE(ids.contains(leaf->kegg_id)) << leaf->kegg_id;
}

TEST_F(SmallWorkdir, RenderedImagesMatchInMemoryRender) {
    Workdir w{cfg};
    const auto layout = load_layout_json(w.layout_json());
    const auto expr = load_expression(w.expression());
    EXPECT_EQ(std::lround(layout.side), 64);
    for (std::size_t s : {0u, 7u, 29u}) {
        const auto disk = to_model_input(read_tensor(w.image(expr.sample_ids[s])));
        const auto mem = render_model_input(layout, expr, s, cfg);
        ASSERT_EQ(disk.height, 32);
        ASSERT_EQ(disk.channels, 1);
        EXPECT_EQ(disk.data, mem.data);
    }
}

TEST_F(SmallWorkdir, RenderRejectsStaleLayout) {
    auto c = cfg;
    c.layout_side = 128;
    expect_error(ErrorKind::InconsistentSides, [&] { stage_render(c); });
}

TEST_F(SmallWorkdir, ParallelRenderIsByteIdentical) {
    auto c = cfg;
    c.workdir = testutil::scratch("");
    for (const char* f : {"expression.tsv", "layout.json"}) fs::copy_file(dir() / f, c.workdir / f);
    c.jobs = 4;
    c.png = true;
    stage_render(c);
    const auto expr = load_expression(dir() / "expression.tsv");
    for (const auto& id : expr.sample_ids) {
        EXPECT_EQ(testutil::read(Workdir{c}.image(id)), testutil::read(Workdir{cfg}.image(id))) << id;
        EXPECT_TRUE(fs::exists(Workdir{c}.image(id, ".png")));
    }
}

// ------------------------------------------------------------------ cnn stages

TEST_F(SmallWorkdir, CvCoversEverySampleOnceAndIsDeterministic) {
    auto c = cfg;
    c.workdir = testutil::scratch("");
    for (const auto& e : fs::directory_iterator(dir()))
        fs::copy(e.path(), c.workdir / e.path().filename(), fs::copy_options::recursive);
    const auto run = stage_cv(c);
    ASSERT_EQ(run.cv.folds.size(), 3u);
    std::vector<int> seen(30, 0);
    for (const auto& f : run.cv.folds)
        for (auto i : f.test_indices) ++seen[i];
    EXPECT_EQ(seen, std::vector<int>(30, 1));

    const auto m = Workdir{c}.metrics();
    for (const char* f : {"cv_folds.csv", "cv_summary.csv", "cv_predictions.csv", "cv_history.csv", "cv_attribution.tsv"})
        EXPECT_TRUE(fs::exists(m / f)) << f;
    EXPECT_EQ(read_fold_accuracies(m / "cv_folds.csv"), run.cv.accuracies());
    const auto folds = testutil::read(m / "cv_folds.csv");
    const auto preds = testutil::read(m / "cv_predictions.csv");

    c.jobs = 3;
    stage_cv(c);
    EXPECT_EQ(testutil::read(m / "cv_folds.csv"), folds);
    EXPECT_EQ(testutil::read(m / "cv_predictions.csv"), preds);

    stage_permute_cv(c);
    const auto rs = testutil::read(m / "ranksum.csv");
    EXPECT_EQ(rs.rfind("mean_cv,mean_permuted,p_value\n", 0), 0u);
    EXPECT_TRUE(fs::exists(m / "permuted_folds.csv"));
}

TEST_F(SmallWorkdir, TrainPredictAttributeEnrich) {
    auto c = cfg;
    c.workdir = testutil::scratch("");
    for (const auto& e : fs::directory_iterator(dir()))
        fs::copy(e.path(), c.workdir / e.path().filename(), fs::copy_options::recursive);
    Workdir w{c};
    const auto res = stage_train(c);
    EXPECT_TRUE(fs::exists(w.model()));
    EXPECT_LE(res.history.size(), 3u);

    const auto probs = stage_predict(c);
    ASSERT_EQ(probs.size(), 30u);
    for (const auto& p : probs) {
        ASSERT_EQ(p.size(), 2u);
        EXPECT_NEAR(p[0] + p[1], 1.0, 1e-12);
    }
    const auto pred_csv = testutil::read(w.metrics() / "predictions.csv");
    EXPECT_EQ(pred_csv.substr(0, pred_csv.find('\n')), "sample_id,p_A,p_B,predicted");

    const auto report = stage_attribute(c);
    const auto layout = load_layout_json(w.layout_json());
    EXPECT_EQ(report.rows.size(), layout.entries.size());
    for (const auto& r : report.rows) {
        EXPECT_EQ(r.n_samples, 30);
        EXPECT_GE(r.selection_count, 0);
        EXPECT_LE(r.selection_count, 30);
    }
    EXPECT_EQ(import_report(w.attribution()).rows, ranked_rows(report));

    const auto rows = stage_enrich(c);
    EXPECT_TRUE(fs::exists(w.enrichment()));
    for (const auto& r : rows) {
        EXPECT_GE(r.p_holm, r.p_raw);
        EXPECT_LE(r.p_holm, 1.0);
    }
}

TEST_F(SmallWorkdir, BaselineLogReg) {
    auto c = cfg;
    c.workdir = testutil::scratch("");
    for (const char* f : {"expression.tsv", "labels.tsv"}) fs::copy_file(dir() / f, c.workdir / f);
    const auto res = stage_baseline_logreg(c);
    ASSERT_EQ(res.size(), 1u);
    EXPECT_EQ(res[0].negative, "A");
    EXPECT_EQ(res[0].positive, "B");
    EXPECT_EQ(res[0].result.fold_auc.size(), 3u);
    // planted effect is strong; a linear model separates the classes
    EXPECT_GT(summarize(res[0].result.fold_auc).mean, 0.9);
    const auto summary = testutil::read(Workdir{c}.metrics() / "logreg_summary.csv");
    EXPECT_EQ(summary.rfind("negative,positive,mean_auc,best_C\nA,B,", 0), 0u);
}

TEST(DesignMatrix, RowsFollowSampleOrder) {
    ExpressionMatrix e;
    e.gene_ids = {"K1", "K2"};
    e.sample_ids = {"s1", "s2"};
    e.values = {1, 2, 3, 4}; // gene-major
    auto X = design_matrix(e, {"s2", "s1"});
    EXPECT_EQ(X(0, 0), e.at(0, 1));
    EXPECT_EQ(X(0, 1), e.at(1, 1));
    EXPECT_EQ(X(1, 0), e.at(0, 0));
    expect_error(ErrorKind::MissingValue, [&] { design_matrix(e, {"s3"}); });
}

// ------------------------------------------------------------------ files

TEST(Stages, MissingInputsAreIoErrors) {
    auto c = small_config(testutil::scratch(""));
    expect_error(ErrorKind::IoError, [&] { stage_normalize(c); });
    expect_error(ErrorKind::IoError, [&] { stage_layout(c); });
    expect_error(ErrorKind::IoError, [&] { stage_render(c); });
    expect_error(ErrorKind::IoError, [&] { stage_cv(c); });
    expect_error(ErrorKind::IoError, [&] { stage_predict(c); });
    expect_error(ErrorKind::IoError, [&] { stage_enrich(c); });
    c.hierarchy = (c.workdir / "nope.keg").string();
    expect_error(ErrorKind::IoError, [&] { stage_build_tree(c); });
}

TEST(Stages, NormalizeWithMapping) {
    auto c = small_config(testutil::scratch(""));
    Workdir w{c};
    io::write_file_atomic(w.counts(), "gene\ts1\ts2\ng1\t10\t20\ng2\t30\t10\ng3\t5\t5\n");
    io::write_file_atomic(c.workdir / "map.tsv", "g1\tK00001\ng2\tK00001\ng3\tK00002\n");
    c.mapping = (c.workdir / "map.tsv").string();
    const auto expr = stage_normalize(c);
    EXPECT_EQ(expr.gene_ids, (std::vector<std::string>{"K00001", "K00002"}));
    EXPECT_EQ(load_expression(w.expression()).gene_ids, expr.gene_ids);
}

TEST(Stages, BuildTreeFromLocalHtext) {
    auto c = small_config(testutil::scratch(""));
    io::write_file_atomic(c.workdir / "h.keg", "A Top\nB Mid\nC Cat1\nD K00001 a\nD K00002 b\nC Cat2\nD K00003 c\n");
    c.hierarchy = (c.workdir / "h.keg").string();
    io::write_file_atomic(Workdir{c}.expression(), "gene\ts1\nK00001\t1\nK00003\t2\n");
    const auto tree = stage_build_tree(c);
    std::set<std::string> ids;
    for (const auto* l : all_leaves(tree)) ids.insert(l->kegg_id);
    EXPECT_EQ(ids, (std::set<std::string>{"K00001", "K00003"}));
    EXPECT_EQ(testutil::read(Workdir{c}.tree()), tree_to_json(tree).dump(1) + "\n");
}

TEST(Stages, FetchThenBuildFromCache) {
    httplib::Server server;
    int hits = 0;
    const std::map<std::string, std::string> files = {
        {"/get/br:top", "A Root\nB Genes and Proteins\nC ko01000 Enzymes\nC ko02000 Transporters\nB Other\nC ko09999 X\n"},
        {"/get/br:ko01000", "A Enzymes\nB Oxidoreductases\nC EC1.1\nD K00001 adh\nD K00002 akr\n"},
        {"/get/br:ko02000", "A Transporters\nB ABC\nC Sugar\nD K10001 malE\n"},
    };
    for (const auto& [path, body] : files)
        server.Get(path, [&hits, b = body](const httplib::Request&, httplib::Response& res) {
            ++hits;
            res.set_content(b, "text/plain");
        });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    auto c = small_config(testutil::scratch(""));
    c.catalog = "br:top";
    c.base_url = "http://127.0.0.1:" + std::to_string(port) + "/get/";
    EXPECT_EQ(stage_fetch(c), 3u);
    server.stop();
    th.join();
    EXPECT_EQ(hits, 3);

    c.base_url = "http://127.0.0.1:1/get/";
    const auto tree = stage_build_tree(c);
    std::set<std::string> ids;
    for (const auto* l : all_leaves(tree)) {
        ids.insert(l->kegg_id);
        EXPECT_GE(l->annotation_path.size(), 3u);
    }
    EXPECT_EQ(ids, (std::set<std::string>{"K00001", "K00002", "K10001"}));

    c.branch = "Missing";
    expect_error(ErrorKind::UnknownCategory, [&] { stage_build_tree(c); });
}

TEST(Synthesize, SameSeedSameBytes) {
    auto a = small_config(testutil::scratch("a"));
    auto b = small_config(testutil::scratch("b"));
    stage_synth(a);
    stage_synth(b);
    for (const char* f : {"counts.tsv", "labels.tsv", "expression.tsv", "tree.json"})
        EXPECT_EQ(testutil::read(a.workdir / f), testutil::read(b.workdir / f)) << f;
    b.seed = 12;
    stage_synth(b);
    EXPECT_NE(testutil::read(a.workdir / "counts.tsv"), testutil::read(b.workdir / "counts.tsv"));
}
