// omicsmap command-line front-end.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"

#include "omicsmap/pipeline.hpp"

namespace {

using namespace omicsmap;

std::string kebab(std::string key) {
    for (auto& c : key)
        if (c == '_') c = '-';
    return key;
}

struct Command {
    const char* name;
    const char* help;
    std::function<void(const PipelineConfig&)> run;
};

std::vector<Command> commands() {
    return {
        {"fetch-hierarchy", "download the catalog and its sub-files into the cache",
         [](const PipelineConfig& c) { std::cout << "fetched " << stage_fetch(c) << " catalog files\n"; }},
        {"build-tree", "build tree.json from the hierarchy (restricted to expressed genes if normalized)",
         [](const PipelineConfig& c) {
             const auto t = stage_build_tree(c);
             std::cout << "tree: " << count_nodes(t) << " nodes, " << count_leaves(t) << " gene leaves\n";
         }},
        {"normalize", "TMM/log2-CPM normalize, filter and map counts to expression.tsv",
         [](const PipelineConfig& c) {
             const auto e = stage_normalize(c);
             std::cout << "expression: " << e.n_genes() << " genes x " << e.n_samples() << " samples\n";
         }},
        {"layout", "compute the treemap layout (layout.tsv, layout.json)",
         [](const PipelineConfig& c) {
             const auto l = stage_layout(c);
             std::cout << "layout: " << l.entries.size() << " leaves, worst aspect " << io::fixed(l.worst_aspect(), 3)
                       << "\n";
         }},
        {"render", "render one image per sample into images/",
         [](const PipelineConfig& c) { stage_render(c); }},
        {"train", "train the CNN on all labeled samples (model.omck)",
         [](const PipelineConfig& c) {
             const auto r = stage_train(c);
             std::cout << "trained " << r.history.size() << " epochs, best epoch " << r.best_epoch << "\n";
         }},
        {"predict", "class probabilities from model.omck (metrics/predictions.csv)",
         [](const PipelineConfig& c) { stage_predict(c); }},
        {"cv", "stratified k-fold cross-validation of the CNN",
         [](const PipelineConfig& c) {
             const auto s = stage_cv(c).cv.summary;
             std::cout << "cv accuracy mean " << io::fixed(s.mean, 4) << " median " << io::fixed(s.median, 4)
                       << " 95% CI [" << io::fixed(s.ci_low, 4) << ", " << io::fixed(s.ci_high, 4) << "]\n";
         }},
        {"permute-cv", "cross-validation on permuted labels",
         [](const PipelineConfig& c) {
             const auto s = stage_permute_cv(c).cv.summary;
             std::cout << "permuted cv accuracy mean " << io::fixed(s.mean, 4) << "\n";
         }},
        {"attribute", "per-gene selection counts from Pool3 maps (attribution.tsv)",
         [](const PipelineConfig& c) { stage_attribute(c); }},
        {"enrich", "hypergeometric enrichment of top-selected genes (enrichment.tsv)",
         [](const PipelineConfig& c) { stage_enrich(c); }},
        {"synth", "generate a synthetic dataset with planted categories",
         [](const PipelineConfig& c) {
             const auto s = stage_synth(c);
             std::cout << "synthetic: " << s.expr.n_genes() << " genes x " << s.expr.n_samples() << " samples, "
                       << s.data.planted_genes.size() << " planted genes\n";
         }},
        {"baseline-logreg", "L2 logistic-regression baseline on the expression matrix",
         [](const PipelineConfig& c) {
             for (const auto& r : stage_baseline_logreg(c))
                 std::cout << r.negative << " vs " << r.positive << ": mean AUC "
                           << io::fixed(summarize(r.result.fold_auc).mean, 4) << "\n";
         }},
    };
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"omicsmap: expression treemap images, CNN classification and gene attribution"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "key = value configuration file");

    std::map<std::string, std::string> flag_values;
    std::map<std::string, CLI::Option*> flags;
    for (const auto& key : config_keys()) {
        auto* opt = app.add_option("--" + kebab(key), flag_values[key], "overrides config key " + key);
        opt->group("Config keys");
        flags[key] = opt;
    }

    const auto cmds = commands();
    std::map<std::string, const Command*> by_name;
    for (const auto& c : cmds) {
        app.add_subcommand(c.name, c.help)->fallthrough();
        by_name[c.name] = &c;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        for (int i = 1; i < argc; ++i) {
            const std::string arg = argv[i];
            if (arg.rfind("-", 0) == 0) {
                ++i; // skip the option's value
                continue;
            }
            if (!by_name.contains(arg)) {
                std::cerr << "omicsmap: unknown subcommand '" << arg << "'\nRun with --help for more information.\n";
                return 2;
            }
            break;
        }
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        PipelineConfig cfg;
        if (!config_path.empty()) {
            if (!std::filesystem::exists(config_path))
                fail(ErrorKind::UsageError, "config file " + config_path + " not found");
            apply_config_text(cfg, io::read_file(config_path));
        }
        for (const auto& [key, opt] : flags)
            if (opt->count() > 0) apply_setting(cfg, key, flag_values[key]);
        validate(cfg);
        Eigen::setNbThreads(1);
        by_name.at(app.get_subcommands().front()->get_name())->run(cfg);
        return 0;
    } catch (const Error& e) {
        std::cerr << "omicsmap: " << e.what() << "\n";
        return e.kind() == ErrorKind::UsageError ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "omicsmap: " << e.what() << "\n";
        return 1;
    }
}
