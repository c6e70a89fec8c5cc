// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "slapo/module.hpp"

namespace slapo {

/// A matched region: connected, single escaping value.
struct SubgraphMatch {
    std::string site;               // module path the match was found in
    std::vector<int> nodes;         // matched graph node ids, ascending
    std::map<int, int> binding;     // pattern core node id -> graph node id
};

/// Subgraph isomorphism with node labels (kind, op / module kind) and ordered
/// dataflow edges. Pattern input nodes are wildcard binders; pattern attrs
/// must equal the graph's where present (absent attr = wildcard). Results are
/// deduplicated by node set, sorted by anchor node id, filtered to single-
/// output matches, then overlaps are dropped greedily by smallest anchor.
/// `host` resolves call_module targets to module kinds; pattern call_module
/// targets name the required kind (e.g. "Linear").
std::vector<SubgraphMatch> find_matches(const StaticGraph& graph, const StaticGraph& pattern,
                                        const ModuleDef* host);

/// The name-pattern half of find: call_module nodes whose target matches the
/// glob, each as a single-node match.
std::vector<SubgraphMatch> find_module_calls(const StaticGraph& graph, const std::string& glob);

/// Ids of matched nodes whose value is consumed outside the match (or is a
/// graph result).
std::vector<int> escaping_values(const StaticGraph& graph, const std::vector<int>& nodes);

/// Throws Error("malformed pattern: ...") unless the pattern has a connected,
/// non-empty core.
void validate_pattern(const StaticGraph& pattern);

}  // namespace slapo
