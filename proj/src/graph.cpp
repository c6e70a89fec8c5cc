// SPDX-License-Identifier: Apache-2.0

#include "slapo/graph.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

namespace slapo {

const char* node_kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::Input: return "input";
        case NodeKind::ParamRef: return "param_ref";
        case NodeKind::CallModule: return "call_module";
        case NodeKind::CallOp: return "call_op";
        case NodeKind::GetItem: return "get_item";
        case NodeKind::Output: return "output";
    }
    return "?";
}

NodeKind node_kind_from_name(const std::string& name) {
    if (name == "input") return NodeKind::Input;
    if (name == "param_ref") return NodeKind::ParamRef;
    if (name == "call_module") return NodeKind::CallModule;
    if (name == "call_op") return NodeKind::CallOp;
    if (name == "get_item") return NodeKind::GetItem;
    if (name == "output") return NodeKind::Output;
    throw Error("unknown node kind '" + name + "'");
}

int StaticGraph::index_of(int id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].id == id) return static_cast<int>(i);
    }
    return -1;
}

bool StaticGraph::has_node(int id) const { return index_of(id) >= 0; }

const GraphNode& StaticGraph::node(int id) const {
    int i = index_of(id);
    if (i < 0) throw Error("no node with id " + std::to_string(id));
    return nodes[i];
}

GraphNode& StaticGraph::node(int id) {
    int i = index_of(id);
    if (i < 0) throw Error("no node with id " + std::to_string(id));
    return nodes[i];
}

int StaticGraph::max_id() const {
    int m = -1;
    for (const auto& n : nodes) m = std::max(m, n.id);
    return m;
}

void StaticGraph::validate() const {
    std::unordered_set<int> seen;
    int outputs = 0;
    int inputs = 0;
    for (const auto& n : nodes) {
        if (seen.count(n.id)) throw Error("duplicate node id " + std::to_string(n.id));
        for (int a : n.args) {
            if (!seen.count(a))
                throw Error("node " + std::to_string(n.id) +
                            " references id " + std::to_string(a) +
                            " that does not precede it");
        }
        seen.insert(n.id);
        if (n.kind == NodeKind::Output) ++outputs;
        if (n.kind == NodeKind::Input) ++inputs;
        if (n.kind == NodeKind::GetItem) {
            if (n.args.size() != 1) throw Error("get_item expects exactly one arg");
            if (!attr_int(n.attrs, "index"))
                throw Error("get_item node " + std::to_string(n.id) + " missing index attr");
        }
    }
    if (outputs != 1) throw Error("graph must have exactly 1 output node, has " + std::to_string(outputs));
    if (inputs < 1) throw Error("graph must have at least 1 input node");
    if (output_id < 0 || nodes.back().id != output_id || nodes.back().kind != NodeKind::Output)
        throw Error("output node must be last and match output_id");
    for (int i : input_ids) {
        if (!seen.count(i)) throw Error("input_ids entry not present in graph");
    }
}

StaticGraph StaticGraph::renumbered() const {
    StaticGraph out;
    std::unordered_map<int, int> remap;
    int next = 0;
    for (const auto& n : nodes) remap[n.id] = next++;
    for (const auto& n : nodes) {
        GraphNode m = n;
        m.id = remap[n.id];
        for (auto& a : m.args) a = remap[a];
        out.nodes.push_back(std::move(m));
    }
    for (int i : input_ids) out.input_ids.push_back(remap[i]);
    out.output_id = remap.at(output_id);
    return out;
}

bool graphs_isomorphic(const StaticGraph& a, const StaticGraph& b) {
    StaticGraph ra = a.renumbered();
    StaticGraph rb = b.renumbered();
    if (ra.nodes.size() != rb.nodes.size()) return false;
    if (ra.input_ids != rb.input_ids || ra.output_id != rb.output_id) return false;
    for (std::size_t i = 0; i < ra.nodes.size(); ++i) {
        const auto& x = ra.nodes[i];
        const auto& y = rb.nodes[i];
        if (x.id != y.id || x.kind != y.kind || x.op != y.op || x.target != y.target ||
            x.args != y.args || x.attrs != y.attrs)
            return false;
    }
    return true;
}

}  // namespace slapo
