// SPDX-License-Identifier: Apache-2.0

#include "slapo/pattern.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace slapo {

namespace {

bool is_core(const GraphNode& n) {
    return n.kind != NodeKind::Input && n.kind != NodeKind::Output;
}

std::string node_label(const GraphNode& n, const ModuleDef* host) {
    switch (n.kind) {
        case NodeKind::CallOp: return "op:" + n.op;
        case NodeKind::CallModule: {
            if (host) {
                const ModuleDef* m = host->resolve(n.target);
                if (m) return "mod:" + m->kind;
            }
            return "mod:" + n.target;
        }
        case NodeKind::ParamRef: return "param";
        case NodeKind::GetItem: return "get_item";
        default: return node_kind_name(n.kind);
    }
}

std::string pattern_label(const GraphNode& n) {
    switch (n.kind) {
        case NodeKind::CallOp: return "op:" + n.op;
        case NodeKind::CallModule: return "mod:" + n.target;  // target names the module kind
        case NodeKind::ParamRef: return "param";
        case NodeKind::GetItem: return "get_item";
        default: return node_kind_name(n.kind);
    }
}

bool attrs_subsume(const AttrMap& pattern_attrs, const AttrMap& graph_attrs) {
    for (const auto& [k, v] : pattern_attrs) {
        const AttrValue* g = find_attr(graph_attrs, k);
        if (!g || !(*g == v)) return false;
    }
    return true;
}

struct Matcher {
    const StaticGraph& graph;
    const StaticGraph& pattern;
    const ModuleDef* host;

    std::vector<const GraphNode*> core;              // pattern core in pattern order
    std::unordered_map<int, int> core_index;         // pattern id -> core position
    std::unordered_set<int> binder_ids;              // pattern input node ids

    std::unordered_map<int, int> assignment;         // pattern id -> graph id
    std::unordered_map<int, int> binder_binding;     // binder pattern id -> graph id
    std::unordered_set<int> used_graph;              // injectivity over core images

    std::vector<std::map<int, int>> results;         // full core bindings

    void run() {
        for (const auto& n : pattern.nodes) {
            if (is_core(n)) {
                core_index[n.id] = static_cast<int>(core.size());
                core.push_back(&n);
            } else if (n.kind == NodeKind::Input) {
                binder_ids.insert(n.id);
            }
        }
        extend(0);
    }

    void extend(std::size_t pos) {
        if (pos == core.size()) {
            std::map<int, int> b;
            for (const auto& [pid, gid] : assignment) b[pid] = gid;
            results.push_back(std::move(b));
            return;
        }
        const GraphNode& p = *core[pos];
        std::string want = pattern_label(p);
        for (const auto& g : graph.nodes) {
            if (!is_core(g)) continue;
            if (used_graph.count(g.id)) continue;
            if (node_label(g, host) != want) continue;
            if (p.args.size() != g.args.size()) continue;
            if (!attrs_subsume(p.attrs, g.attrs)) continue;
            // Ordered dataflow edges; pattern is SSA so core args are already
            // assigned when we get here.
            bool ok = true;
            std::vector<std::pair<int, int>> new_bindings;
            for (std::size_t i = 0; i < p.args.size() && ok; ++i) {
                int pa = p.args[i];
                int ga = g.args[i];
                if (binder_ids.count(pa)) {
                    auto it = binder_binding.find(pa);
                    if (it == binder_binding.end()) {
                        binder_binding[pa] = ga;
                        new_bindings.push_back({pa, ga});
                    } else if (it->second != ga) {
                        ok = false;
                    }
                } else {
                    auto it = assignment.find(pa);
                    if (it == assignment.end() || it->second != ga) ok = false;
                }
            }
            if (ok) {
                assignment[p.id] = g.id;
                used_graph.insert(g.id);
                extend(pos + 1);
                used_graph.erase(g.id);
                assignment.erase(p.id);
            }
            for (const auto& [pid, gid] : new_bindings) binder_binding.erase(pid);
        }
    }
};

}  // namespace

std::vector<int> escaping_values(const StaticGraph& graph, const std::vector<int>& nodes) {
    std::unordered_set<int> in_match(nodes.begin(), nodes.end());
    std::set<int> escaping;
    for (const auto& n : graph.nodes) {
        bool outside = !in_match.count(n.id);
        for (int a : n.args) {
            if (in_match.count(a) && (outside || n.kind == NodeKind::Output)) escaping.insert(a);
        }
    }
    return {escaping.begin(), escaping.end()};
}

void validate_pattern(const StaticGraph& pattern) {
    pattern.validate();
    std::vector<int> core_ids;
    for (const auto& n : pattern.nodes) {
        if (is_core(n)) core_ids.push_back(n.id);
    }
    if (core_ids.empty()) throw Error("malformed pattern: no core nodes");
    // Connectivity over core nodes through direct dataflow edges.
    std::unordered_set<int> core_set(core_ids.begin(), core_ids.end());
    std::unordered_map<int, std::vector<int>> adj;
    for (const auto& n : pattern.nodes) {
        if (!core_set.count(n.id)) continue;
        for (int a : n.args) {
            if (core_set.count(a)) {
                adj[n.id].push_back(a);
                adj[a].push_back(n.id);
            }
        }
    }
    std::unordered_set<int> seen;
    std::vector<int> stack = {core_ids[0]};
    while (!stack.empty()) {
        int v = stack.back();
        stack.pop_back();
        if (!seen.insert(v).second) continue;
        for (int w : adj[v]) stack.push_back(w);
    }
    if (seen.size() != core_set.size())
        throw Error("malformed pattern: core nodes are not connected");
}

std::vector<SubgraphMatch> find_matches(const StaticGraph& graph, const StaticGraph& pattern,
                                        const ModuleDef* host) {
    validate_pattern(pattern);
    Matcher m{graph, pattern, host, {}, {}, {}, {}, {}, {}, {}};
    m.run();

    // Canonicalize by image set, keep single-output matches only.
    std::map<std::vector<int>, std::map<int, int>> by_image;
    for (auto& binding : m.results) {
        std::vector<int> image;
        for (const auto& [pid, gid] : binding) image.push_back(gid);
        std::sort(image.begin(), image.end());
        if (escaping_values(graph, image).size() != 1) continue;
        by_image.emplace(std::move(image), std::move(binding));
    }

    // Greedy non-overlap by smallest anchor id (map order is already sorted
    // lexicographically, which for equal-size images means anchor order).
    std::vector<SubgraphMatch> out;
    std::unordered_set<int> taken;
    for (const auto& [image, binding] : by_image) {
        bool overlaps = false;
        for (int id : image) {
            if (taken.count(id)) {
                overlaps = true;
                break;
            }
        }
        if (overlaps) continue;
        for (int id : image) taken.insert(id);
        SubgraphMatch match;
        match.nodes = image;
        match.binding = binding;
        out.push_back(std::move(match));
    }
    return out;
}

std::vector<SubgraphMatch> find_module_calls(const StaticGraph& graph, const std::string& glob) {
    ModulePath pat = ModulePath::parse(glob);
    std::vector<SubgraphMatch> out;
    for (const auto& n : graph.nodes) {
        if (n.kind != NodeKind::CallModule) continue;
        if (!path_matches(pat, ModulePath::parse(n.target))) continue;
        SubgraphMatch m;
        m.nodes = {n.id};
        m.binding[0] = n.id;
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace slapo
