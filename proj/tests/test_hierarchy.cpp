#include <map>
#include <random>
#include <set>
#include <string>
#include <thread>

#include "httplib.h"
#include "test_util.hpp"

#include "omicsmap/fetch.hpp"
#include "omicsmap/hierarchy.hpp"

using namespace omicsmap;

namespace {

// Random A-D text with n_a top groups; ids drawn from a small pool so
// genes repeat across categories.
std::string random_htext(std::mt19937_64& rng, int n_a, int id_pool) {
    std::uniform_int_distribution<int> fan(1, 3), genes(0, 4), id(1, id_pool);
    std::string s;
    for (int a = 0; a < n_a; ++a) {
        s += "A top" + std::to_string(a) + "\n";
        for (int b = 0, nb = fan(rng); b < nb; ++b) {
            s += "B mid" + std::to_string(a) + "_" + std::to_string(b) + "\n";
            for (int c = 0, nc = fan(rng); c < nc; ++c) {
                s += "C cat" + std::to_string(a) + "_" + std::to_string(b) + "_" + std::to_string(c) + "\n";
                std::set<int> used;
                for (int g = 0, ng = genes(rng); g < ng; ++g) {
                    int k = id(rng);
                    if (!used.insert(k).second) continue;
                    char buf[16];
                    std::snprintf(buf, sizeof buf, "K%05d", k);
                    s += std::string("D ") + buf + " name" + std::to_string(k) + "\n";
                }
            }
        }
    }
    return s;
}

// (id, category path) pairs by walking the text line by line.
std::multiset<std::pair<std::string, std::string>> scan_pairs(const std::string& text,
                                                              const std::unordered_set<std::string>& keep) {
    std::multiset<std::pair<std::string, std::string>> out;
    std::string a, b, c;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const std::string rest = line.substr(2);
        if (line[0] == 'A') a = rest;
        if (line[0] == 'B') b = rest;
        if (line[0] == 'C') c = rest;
        if (line[0] == 'D') {
            const std::string id = rest.substr(0, rest.find(' '));
            if (keep.contains(id)) out.insert({id, a + "/" + b + "/" + c});
        }
    }
    return out;
}

std::multiset<std::pair<std::string, std::string>> tree_pairs(const HierarchyTree& t) {
    std::multiset<std::pair<std::string, std::string>> out;
    for (const auto* leaf : all_leaves(t)) {
        const auto& p = leaf->annotation_path;
        EXPECT_GE(p.size(), 3u);
        out.insert({leaf->kegg_id, p[p.size() - 3] + "/" + p[p.size() - 2] + "/" + p[p.size() - 1]});
    }
    return out;
}

} // namespace

TEST(ParseHtext, SingleChain) {
    auto t = parse_htext("A Top\nB Mid\nC Leaf\nD K00001 geneX\n");
    ASSERT_EQ(t.children.size(), 1u);
    const auto& leaf = t.children[0].children[0].children[0];
    EXPECT_EQ(leaf.label, "Leaf");
    EXPECT_EQ(leaf.level, 3);
    ASSERT_EQ(leaf.genes.size(), 1u);
    EXPECT_EQ(leaf.genes[0].kegg_id, "K00001");
    EXPECT_EQ(leaf.genes[0].display_name, "geneX");
    EXPECT_EQ(leaf.genes[0].annotation_path, (std::vector<std::string>{"root", "Top", "Mid", "Leaf"}));
}

TEST(ParseHtext, LevelJumpIsOrphan) {
    try {
        parse_htext("A Top\nC Leaf\n");
        FAIL() << "expected OrphanLine";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::OrphanLine);
    }
}

TEST(ParseHtext, UnknownPrefixIsMalformed) {
    try {
        parse_htext("A Top\nZ what\n");
        FAIL() << "expected MalformedLine";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::MalformedLine);
    }
}

TEST(ParseHtext, CommentsBlankLinesAndMarkup) {
    auto t = parse_htext("# header\n\n+D\tKO\nA <b>Top</b>\n!\nB Mid\n");
    ASSERT_EQ(t.children.size(), 1u);
    EXPECT_EQ(t.children[0].label, "Top");
    EXPECT_EQ(t.children[0].children[0].label, "Mid");
}

TEST(ParseHtext, NodeCountMatchesLineWalk) {
    std::string text;
    int lines = 0;
    for (int a = 0; a < 3; ++a) {
        text += "A group" + std::to_string(a) + "\n";
        ++lines;
        for (int b = 0; b < 2; ++b, ++lines) text += "B sub" + std::to_string(a) + std::to_string(b) + "\n";
    }
    auto t = parse_htext(text);
    EXPECT_EQ(count_nodes(t), static_cast<std::size_t>(1 + lines));
    EXPECT_EQ(count_nodes(t), 10u);
}

TEST(ParseHtext, StrictIdsVersusLoose) {
    const std::string text = "A a\nB b\nC c\nD geneQ something\nD K00002 real\n";
    auto strict = parse_htext(text);
    EXPECT_EQ(count_leaves(strict), 1u);
    HtextOptions loose;
    loose.loose_ids = true;
    auto t = parse_htext(text, loose);
    EXPECT_EQ(count_leaves(t), 2u);
}

TEST(ParseHtext, SerializeRoundTripIsFixedPoint) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        auto text = random_htext(rng, 4, 40);
        auto t1 = parse_htext(text);
        auto t2 = parse_htext(serialize_htext(t1));
        EXPECT_EQ(t1, t2);
        EXPECT_EQ(serialize_htext(t2), serialize_htext(t1));
    }
}

TEST(TreeJson, RoundTrip) {
    std::mt19937_64 rng(5);
    auto t = parse_htext(random_htext(rng, 3, 30));
    EXPECT_EQ(tree_from_json(nlohmann::json::parse(tree_to_json(t).dump())), t);
}

TEST(BuildAnnotationTree, CountsLevelOneAndTwo) {
    auto top = parse_htext("A Catalog\nB Genes and Proteins\nC br:ko01000 Enzymes\nC br:ko02000 Transporters\n"
                           "B Other\nC br:ko09999 Ignored\n");
    std::map<std::string, HierarchyTree> subs;
    subs["ko01000"] = parse_htext("A g1\nB x\nC K00001\nA g2\nA g3\n");
    subs["ko02000"] = parse_htext("A t1\nA t2\nA t3\n");
    auto tree = build_annotation_tree(top, "Genes and Proteins", subs);
    EXPECT_EQ(nodes_at_level(tree, 1).size(), 2u);
    EXPECT_EQ(nodes_at_level(tree, 2).size(), 6u);
}

TEST(BuildAnnotationTree, EmptySubFileGivesNoGroups) {
    auto top = parse_htext("A Catalog\nB Branch\nC br:f1 one\nC br:f2 two\n");
    std::map<std::string, HierarchyTree> subs;
    subs["f1"] = parse_htext("A g1\nA g2\n");
    subs["f2"] = parse_htext("");
    auto tree = build_annotation_tree(top, "Branch", subs);
    ASSERT_EQ(tree.children.size(), 2u);
    EXPECT_EQ(tree.children[0].children.size(), 2u);
    EXPECT_EQ(tree.children[1].children.size(), 0u);
}

TEST(BuildAnnotationTree, MissingSubFile) {
    auto top = parse_htext("A Catalog\nB Branch\nC br:f1 one\n");
    try {
        build_annotation_tree(top, "Branch", {});
        FAIL() << "expected MissingSubFile";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::MissingSubFile);
    }
}

TEST(BuildAnnotationTree, ToyCatalogGroupCountMatchesGroupLines) {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> groups(0, 8);
    std::string top = "A Pathway and Brite\nB Genes and Proteins\n";
    std::map<std::string, HierarchyTree> subs;
    std::size_t a_lines = 0;
    for (int f = 0; f < 57; ++f) {
        const std::string id = "ko" + std::to_string(10000 + f);
        top += "C br:" + id + " file" + std::to_string(f) + "\n";
        std::string sub;
        for (int g = 0, n = groups(rng); g < n; ++g) sub += "A grp" + std::to_string(g) + "\nB inner\nC K00001\n";
        std::istringstream in(sub);
        for (std::string line; std::getline(in, line);) a_lines += line.rfind("A ", 0) == 0;
        subs[id] = parse_htext(sub);
    }
    auto tree = build_annotation_tree(parse_htext(top), "Genes and Proteins", subs);
    EXPECT_EQ(nodes_at_level(tree, 1).size(), 57u);
    EXPECT_EQ(nodes_at_level(tree, 2).size(), a_lines);
}

TEST(BuildAnnotationTree, DeepStructureIsTruncatedAtFourLevels) {
    auto top = parse_htext("A Cat\nB Br\nC br:f1 one\n");
    std::map<std::string, HierarchyTree> subs;
    subs["f1"] = parse_htext("A g\nB h\nC i\nD deeper\nE K00001 a\nE K00002 b\n");
    auto tree = build_annotation_tree(top, "Br", subs);
    EXPECT_LE(tree_depth(tree), 5);
    auto cats = nodes_at_level(tree, 3);
    ASSERT_EQ(cats.size(), 1u);
    EXPECT_EQ(cats[0]->genes.size(), 2u);
}

TEST(AttachGenes, EmptyFilterLeavesBareRoot) {
    std::mt19937_64 rng(3);
    auto t = normalize_tree(parse_htext(random_htext(rng, 3, 20)));
    auto out = attach_genes(t, {});
    EXPECT_EQ(count_leaves(out), 0u);
    EXPECT_TRUE(out.children.empty());
}

TEST(AttachGenes, GeneUnderTwoCategoriesYieldsTwoLeaves) {
    auto t = parse_htext("A a\nB b\nC c1\nD K00001 x\nD K00002 y\nC c2\nD K00001 x\n");
    auto out = attach_genes(t, {"K00001"});
    EXPECT_EQ(count_leaves(out), 2u);
    EXPECT_EQ(nodes_at_level(out, 3).size(), 2u);
}

TEST(AttachGenes, LeafMultisetMatchesBruteForceScan) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 25; ++trial) {
        const auto text = random_htext(rng, 3, 25);
        std::unordered_set<std::string> keep;
        std::bernoulli_distribution coin(0.4);
        for (int k = 1; k <= 25; ++k) {
            char buf[16];
            std::snprintf(buf, sizeof buf, "K%05d", k);
            if (coin(rng)) keep.insert(buf);
        }
        auto out = attach_genes(parse_htext(text), keep);
        EXPECT_EQ(tree_pairs(out), scan_pairs(text, keep));
        // no category survives without leaves
        for (int level = 1; level <= 3; ++level)
            for (const auto* n : nodes_at_level(out, level)) EXPECT_GT(count_leaves(*n), 0u);
        std::size_t per_cat = 0;
        for (const auto* n : nodes_at_level(out, 3)) per_cat += n->genes.size();
        EXPECT_EQ(per_cat, count_leaves(out));
        EXPECT_LE(tree_depth(out), 5);
    }
}

// ------------------------------------------------------------------ fetch

namespace {

struct LocalServer {
    httplib::Server server;
    int port = 0;
    std::thread thread;
    int hits = 0;

    LocalServer() {
        server.Get("/get/br:ok", [this](const httplib::Request&, httplib::Response& res) {
            ++hits;
            res.set_content("A payload\n", "text/plain");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~LocalServer() {
        server.stop();
        thread.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port) + "/get/"; }
};

} // namespace

TEST(FetchCatalog, CacheHitMakesNoRequest) {
    auto dir = testutil::scratch("");
    io::write_file_atomic(cache_entry(dir, "br:cached"), "A cached\n");
    EXPECT_EQ(fetch_catalog("br:cached", dir, "http://127.0.0.1:1/get/", 1), "A cached\n");
}

TEST(FetchCatalog, NotFoundIsNetworkUnavailable) {
    LocalServer srv;
    auto dir = testutil::scratch("");
    try {
        fetch_catalog("br:missing", dir, srv.url(), 5);
        FAIL() << "expected NetworkUnavailable";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NetworkUnavailable);
    }
    EXPECT_FALSE(std::filesystem::exists(cache_entry(dir, "br:missing")));
}

TEST(FetchCatalog, FetchThenRefetchIsIdenticalAndCached) {
    LocalServer srv;
    auto dir = testutil::scratch("");
    auto a = fetch_catalog("br:ok", dir, srv.url(), 5);
    auto b = fetch_catalog("br:ok", dir, srv.url(), 5);
    EXPECT_EQ(a, "A payload\n");
    EXPECT_EQ(a, b);
    EXPECT_EQ(srv.hits, 1);
    EXPECT_EQ(cache_entry(dir, "br:ok").filename().string(), "br%3Aok");
}

TEST(FetchCatalog, EmptyCacheEntryIsCorrupt) {
    auto dir = testutil::scratch("");
    io::write_file_atomic(cache_entry(dir, "br:empty"), "");
    try {
        fetch_catalog("br:empty", dir, "http://127.0.0.1:1/get/", 1);
        FAIL() << "expected CacheCorrupt";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::CacheCorrupt);
    }
}

TEST(FetchCatalog, UnreachableServerIsNetworkUnavailable) {
    auto dir = testutil::scratch("");
    try {
        fetch_catalog("br:x", dir, "http://127.0.0.1:1/get/", 1);
        FAIL() << "expected NetworkUnavailable";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NetworkUnavailable);
    }
}
