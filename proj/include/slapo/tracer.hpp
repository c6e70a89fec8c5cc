// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "slapo/module.hpp"

namespace slapo {

/// Granularity control for tracing. `leaves` are patterns (relative to the
/// traced module) for submodules that stay opaque call_module nodes; builtin
/// modules are always leaves. `flatten` inlines everything else into one graph.
struct TraceSpec {
    std::vector<std::string> leaves;
    bool flatten = false;
};

struct TracedModule {
    std::string origin;  // path of the traced module
    StaticGraph graph;
    std::map<std::string, TracedModule> child_traces;  // absent when flattened
};

/// Models are declared as dataflow, so tracing is controlled inlining rather
/// than execution capture. Pure: `root` is not modified.
TracedModule trace(const ModuleDef& root, const std::string& target, const TraceSpec& spec);

/// Splice `callee` into `graph` at `call_node`, re-qualifying param and module
/// targets with `callee_prefix`. Fresh ids are max-id+1 counters.
StaticGraph inline_call(const StaticGraph& graph, int call_node, const StaticGraph& callee,
                        const std::string& callee_prefix);

/// In-place flatten of a composite module's forward per `spec` (the mutation
/// the schedule's trace primitive applies). Returns number of inlined calls.
int flatten_module(ModuleDef& target, const TraceSpec& spec,
                   std::vector<std::string>* warnings = nullptr);

/// Error when a graph outside `owner_path`'s subtree references parameters
/// inside it; inlining under such aliasing is unsupported.
void check_param_aliasing(const ModuleDef& root, const std::string& owner_path);

}  // namespace slapo
