#pragma once

// Functional-annotation hierarchy: letter-prefixed htext parsing, JSON tree
// format, branch extraction with sub-file grafting, and gene attachment.
//
// A built annotation tree always has the same shape:
//
//   level 0   root (labelled with the branch label)
//   level 1-3 categories
//   genes     GeneLeaf entries attached to level-3 categories only
//
// so every GeneLeaf carries exactly four path labels (root, L1, L2, L3).

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

#include "omicsmap/error.hpp"
#include "omicsmap/io.hpp"

namespace omicsmap {

inline constexpr int kCategoryDepth = 3;

struct GeneLeaf {
    std::string kegg_id;
    std::string display_name;
    std::vector<std::string> annotation_path;

    bool operator==(const GeneLeaf&) const = default;
};

struct HierarchyNode {
    std::string label;
    int level = 0;
    std::vector<HierarchyNode> children;
    std::vector<GeneLeaf> genes;

    bool operator==(const HierarchyNode&) const = default;
};

using HierarchyTree = HierarchyNode;

struct HtextOptions {
    /// Accept any first token of a D-or-deeper line as a gene id instead
    /// of requiring the `K<digits>` pattern.
    bool loose_ids = false;
    std::string root_label = "root";
};

namespace detail {

inline std::string strip_markup(std::string_view s) {
    std::string out;
    bool in_tag = false;
    for (char c : s) {
        if (c == '<') in_tag = true;
        else if (c == '>' && in_tag) in_tag = false;
        else if (!in_tag) out.push_back(c);
    }
    return std::string(io::trim(out));
}

inline bool is_kegg_id(std::string_view tok) {
    if (tok.size() < 2 || tok[0] != 'K') return false;
    return std::all_of(tok.begin() + 1, tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

inline void assign_paths(HierarchyNode& node, int level, std::vector<std::string>& path) {
    node.level = level;
    path.push_back(node.label);
    for (auto& g : node.genes) g.annotation_path = path;
    for (auto& c : node.children) assign_paths(c, level + 1, path);
    path.pop_back();
}

} // namespace detail

/// Recomputes every node level and every GeneLeaf path from the tree shape.
inline void refresh_paths(HierarchyTree& tree) {
    std::vector<std::string> path;
    detail::assign_paths(tree, 0, path);
}

/// Parses letter-prefixed hierarchy text. Lines are `A <label>` ... with
/// one letter per depth; `#`, `+` and `!` lines (BRITE headers and
/// markers) and blank lines are skipped. A line at level D or deeper whose
/// first token is a gene id becomes a GeneLeaf of the nearest shallower
/// node. Lines nested under a gene line are ignored.
inline HierarchyTree parse_htext(std::string_view text, const HtextOptions& opts = {}) {
    HierarchyTree root;
    root.label = opts.root_label;
    root.level = 0;

    // stack[d] = node at depth d on the current branch
    std::vector<HierarchyNode*> stack{&root};
    int gene_line_level = -1; // depth of the last gene line, while nested lines follow it

    int line_no = 0;
    for (auto raw : io::lines(text)) {
        ++line_no;
        auto line = raw;
        if (io::trim(line).empty()) continue;
        char first = line[0];
        if (first == '#' || first == '+' || first == '!') continue;
        if (first < 'A' || first > 'H')
            fail(ErrorKind::MalformedLine, "line " + std::to_string(line_no) + ": unknown prefix '" +
                                               std::string(1, first) + "'");
        const int level = first - 'A' + 1;
        std::string body = detail::strip_markup(line.substr(1));

        if (gene_line_level >= 0) {
            if (level > gene_line_level) continue;
            gene_line_level = -1;
        }
        const int depth = static_cast<int>(stack.size()) - 1;
        if (level > depth + 1)
            fail(ErrorKind::OrphanLine,
                 "line " + std::to_string(line_no) + ": level " + std::string(1, first) + " follows depth " +
                     std::to_string(depth));
        stack.resize(static_cast<std::size_t>(level));
        HierarchyNode* parent = stack.back();

        if (level >= 4 && !body.empty()) {
            auto sp = body.find_first_of(" \t");
            std::string tok = body.substr(0, sp);
            if (opts.loose_ids ? level == 4 || detail::is_kegg_id(tok) : detail::is_kegg_id(tok)) {
                GeneLeaf g;
                g.kegg_id = tok;
                g.display_name = sp == std::string::npos ? tok : std::string(io::trim(body.substr(sp)));
                if (g.display_name.empty()) g.display_name = tok;
                parent->genes.push_back(std::move(g));
                gene_line_level = level;
                continue;
            }
        }
        if (body.empty()) fail(ErrorKind::MalformedLine, "line " + std::to_string(line_no) + ": empty label");
        HierarchyNode node;
        node.label = std::move(body);
        node.level = level;
        parent->children.push_back(std::move(node));
        stack.push_back(&parent->children.back());
    }
    refresh_paths(root);
    return root;
}

/// Inverse of parse_htext for trees whose genes sit at depth >= 3.
inline std::string serialize_htext(const HierarchyTree& tree) {
    std::string out;
    std::function<void(const HierarchyNode&)> walk = [&](const HierarchyNode& n) {
        if (n.level >= 1) {
            out.push_back(static_cast<char>('A' + n.level - 1));
            out += ' ';
            out += n.label;
            out += '\n';
        }
        for (const auto& c : n.children) walk(c);
        for (const auto& g : n.genes) {
            out.push_back(static_cast<char>('A' + n.level));
            out += ' ';
            out += g.kegg_id;
            if (!g.display_name.empty() && g.display_name != g.kegg_id) {
                out += ' ';
                out += g.display_name;
            }
            out += '\n';
        }
    };
    walk(tree);
    return out;
}

inline nlohmann::json tree_to_json(const HierarchyNode& node) {
    nlohmann::json j;
    j["label"] = node.label;
    j["children"] = nlohmann::json::array();
    for (const auto& c : node.children) j["children"].push_back(tree_to_json(c));
    j["genes"] = nlohmann::json::array();
    for (const auto& g : node.genes) j["genes"].push_back({{"id", g.kegg_id}, {"name", g.display_name}});
    return j;
}

inline HierarchyTree tree_from_json(const nlohmann::json& j) {
    std::function<HierarchyNode(const nlohmann::json&)> build = [&](const nlohmann::json& o) {
        HierarchyNode n;
        try {
            n.label = o.at("label").get<std::string>();
            if (o.contains("children"))
                for (const auto& c : o.at("children")) n.children.push_back(build(c));
            if (o.contains("genes"))
                for (const auto& g : o.at("genes")) {
                    GeneLeaf leaf;
                    leaf.kegg_id = g.at("id").get<std::string>();
                    leaf.display_name = g.value("name", leaf.kegg_id);
                    n.genes.push_back(std::move(leaf));
                }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::ParseError, std::string("tree JSON: ") + e.what());
        }
        return n;
    };
    HierarchyTree t = build(j);
    refresh_paths(t);
    return t;
}

inline std::size_t count_nodes(const HierarchyNode& n) {
    std::size_t c = 1;
    for (const auto& ch : n.children) c += count_nodes(ch);
    return c;
}

inline std::size_t count_leaves(const HierarchyNode& n) {
    std::size_t c = n.genes.size();
    for (const auto& ch : n.children) c += count_leaves(ch);
    return c;
}

inline int tree_depth(const HierarchyNode& n) {
    int d = 1 + (n.genes.empty() ? 0 : 1);
    for (const auto& ch : n.children) d = std::max(d, 1 + tree_depth(ch));
    return d;
}

inline std::vector<const HierarchyNode*> nodes_at_level(const HierarchyNode& root, int level) {
    std::vector<const HierarchyNode*> out;
    std::function<void(const HierarchyNode&)> walk = [&](const HierarchyNode& n) {
        if (n.level == level) {
            out.push_back(&n);
            return;
        }
        for (const auto& c : n.children) walk(c);
    };
    walk(root);
    return out;
}

/// All gene leaves in depth-first order.
inline std::vector<const GeneLeaf*> all_leaves(const HierarchyNode& root) {
    std::vector<const GeneLeaf*> out;
    std::function<void(const HierarchyNode&)> walk = [&](const HierarchyNode& n) {
        for (const auto& g : n.genes) out.push_back(&g);
        for (const auto& c : n.children) walk(c);
    };
    walk(root);
    return out;
}

inline const HierarchyNode* find_node(const HierarchyNode& root, std::string_view label) {
    if (root.label == label) return &root;
    for (const auto& c : root.children)
        if (const auto* f = find_node(c, label)) return f;
    return nullptr;
}

namespace detail {

inline const HierarchyTree* lookup_sub_file(const std::map<std::string, HierarchyTree>& files,
                                            const std::string& label) {
    if (auto it = files.find(label); it != files.end()) return &it->second;
    std::string tok = label.substr(0, label.find_first_of(" \t"));
    for (std::string key : {tok, tok.rfind("br:", 0) == 0 ? tok.substr(3) : std::string{}}) {
        if (key.empty()) continue;
        if (auto it = files.find(key); it != files.end()) return &it->second;
    }
    return nullptr;
}

inline void graft(HierarchyNode& node, const std::map<std::string, HierarchyTree>& files) {
    if (node.children.empty() && node.genes.empty()) {
        const auto* sub = lookup_sub_file(files, node.label);
        if (!sub) fail(ErrorKind::MissingSubFile, "no parsed hierarchy file for '" + node.label + "'");
        node.children = sub->children;
        node.genes = sub->genes;
        return;
    }
    for (auto& c : node.children) graft(c, files);
}

inline void collect_genes(const HierarchyNode& n, std::vector<GeneLeaf>& out) {
    for (const auto& g : n.genes) out.push_back(g);
    for (const auto& c : n.children) collect_genes(c, out);
}

// Flattens structure below depth 3 into its level-3 ancestor and pads genes
// found above depth 3 with a same-label chain so every gene sits at depth 3.
inline void normalize_depth(HierarchyNode& n, int depth) {
    if (depth == kCategoryDepth) {
        std::vector<GeneLeaf> genes;
        collect_genes(n, genes);
        n.children.clear();
        std::vector<GeneLeaf> unique;
        std::set<std::string> seen;
        for (auto& g : genes)
            if (seen.insert(g.kegg_id).second) unique.push_back(std::move(g));
        n.genes = std::move(unique);
        return;
    }
    for (auto& c : n.children) normalize_depth(c, depth + 1);
    if (!n.genes.empty() && depth > 0) {
        HierarchyNode pad;
        pad.label = n.label;
        pad.genes = std::move(n.genes);
        n.genes.clear();
        normalize_depth(pad, depth + 1);
        n.children.push_back(std::move(pad));
    }
}

} // namespace detail

/// Brings a complete user-supplied tree to the fixed layering: genes sit
/// under level-3 categories, deeper structure is flattened.
inline HierarchyTree normalize_tree(HierarchyTree tree) {
    tree.genes.clear();
    detail::normalize_depth(tree, 0);
    refresh_paths(tree);
    return tree;
}

/// Extracts `branch_label` from the top catalog and grafts each referenced
/// sub-file under the category that names it. A category without children
/// is a reference; its sub-file is looked up by full label, by first token,
/// and by first token without a `br:` prefix.
inline HierarchyTree build_annotation_tree(const HierarchyTree& top_catalog, const std::string& branch_label,
                                           const std::map<std::string, HierarchyTree>& sub_files) {
    const HierarchyNode* branch = find_node(top_catalog, branch_label);
    if (!branch) fail(ErrorKind::UnknownCategory, "branch '" + branch_label + "' not in catalog");

    HierarchyTree out;
    out.label = branch_label;
    out.children = branch->children;
    for (auto& c : out.children) detail::graft(c, sub_files);
    // genes directly under the root have no category to live in
    out.genes.clear();
    detail::normalize_depth(out, 0);
    refresh_paths(out);
    return out;
}

/// Keeps only leaves whose id is in `id_filter` and prunes categories left
/// without any leaf descendant. The root is always kept.
inline HierarchyTree attach_genes(const HierarchyTree& tree, const std::unordered_set<std::string>& id_filter) {
    std::function<bool(HierarchyNode&)> prune = [&](HierarchyNode& n) {
        std::erase_if(n.genes, [&](const GeneLeaf& g) { return !id_filter.contains(g.kegg_id); });
        std::erase_if(n.children, [&](HierarchyNode& c) { return !prune(c); });
        return !n.genes.empty() || !n.children.empty();
    };
    HierarchyTree out = tree;
    prune(out);
    refresh_paths(out);
    return out;
}

} // namespace omicsmap
