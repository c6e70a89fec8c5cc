// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "slapo/attrs.hpp"

namespace slapo {

/// The IR has exactly six node kinds.
enum class NodeKind { Input, ParamRef, CallModule, CallOp, GetItem, Output };

const char* node_kind_name(NodeKind k);
NodeKind node_kind_from_name(const std::string& name);

struct GraphNode {
    int id = -1;
    NodeKind kind = NodeKind::Input;
    std::string op;      // call_op only
    std::string target;  // call_module: submodule path; param_ref: param path
    std::vector<int> args;
    AttrMap attrs;
};

/// SSA dataflow graph: nodes are topologically ordered, args reference earlier
/// nodes only, exactly one output node whose args enumerate the results.
struct StaticGraph {
    std::vector<GraphNode> nodes;
    std::vector<int> input_ids;
    int output_id = -1;

    const GraphNode& node(int id) const;
    GraphNode& node(int id);
    bool has_node(int id) const;
    int index_of(int id) const;

    const GraphNode& output_node() const { return node(output_id); }
    std::vector<int> result_ids() const { return output_node().args; }

    int max_id() const;
    int fresh_id() { return max_id() + 1; }

    /// Structural checks: six kinds, SSA ordering, single output, no dangling refs.
    void validate() const;

    /// Renumber nodes 0..n-1 in order, remapping args. Used for canonical serialization.
    StaticGraph renumbered() const;
};

/// Builder with auto-assigned ids.
class GraphBuilder {
public:
    int input() { return add(NodeKind::Input, {}, {}, {}, {}); }
    int input(AttrMap attrs) { return add(NodeKind::Input, {}, {}, {}, std::move(attrs)); }
    int param(const std::string& name) { return add(NodeKind::ParamRef, {}, name, {}, {}); }
    int call_module(const std::string& target, std::vector<int> args) {
        return add(NodeKind::CallModule, {}, target, std::move(args), {});
    }
    int call_op(const std::string& op, std::vector<int> args, AttrMap attrs = {}) {
        return add(NodeKind::CallOp, op, {}, std::move(args), std::move(attrs));
    }
    int get_item(int arg, std::int64_t index) {
        return add(NodeKind::GetItem, {}, {}, {arg}, AttrMap{{"index", index}});
    }
    StaticGraph output(std::vector<int> results) {
        add(NodeKind::Output, {}, {}, std::move(results), {});
        graph_.output_id = next_ - 1;
        graph_.validate();
        return std::move(graph_);
    }

private:
    int add(NodeKind kind, std::string op, std::string target, std::vector<int> args, AttrMap attrs) {
        GraphNode n;
        n.id = next_++;
        n.kind = kind;
        n.op = std::move(op);
        n.target = std::move(target);
        n.args = std::move(args);
        n.attrs = std::move(attrs);
        if (kind == NodeKind::Input) graph_.input_ids.push_back(n.id);
        graph_.nodes.push_back(std::move(n));
        return next_ - 1;
    }

    StaticGraph graph_;
    int next_ = 0;
};

/// True when two graphs are isomorphic under id renumbering (same node order).
bool graphs_isomorphic(const StaticGraph& a, const StaticGraph& b);

}  // namespace slapo
