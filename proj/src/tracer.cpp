// SPDX-License-Identifier: Apache-2.0

#include "slapo/tracer.hpp"

#include <algorithm>
#include <unordered_map>

namespace slapo {

namespace {

bool matches_any(const std::vector<std::string>& patterns, const std::string& rel_path) {
    ModulePath concrete = ModulePath::parse(rel_path);
    for (const auto& p : patterns) {
        if (path_matches(ModulePath::parse(p), concrete)) return true;
    }
    return false;
}

}  // namespace

// Inlining re-qualifies refs rather than cloning params, so an alias from
// outside the traced subtree would end up sharing shard bookkeeping with the
// inlined copy.
void check_param_aliasing(const ModuleDef& root, const std::string& owner_path) {
    struct Walker {
        const std::string& owner;
        void walk(const ModuleDef& m, const std::string& path) {
            if (m.forward) {
                for (const auto& n : m.forward->nodes) {
                    if (n.kind != NodeKind::ParamRef) continue;
                    std::string full = join_path(path, parent_path(n.target));
                    bool inside_owner = full == owner || full.rfind(owner + ".", 0) == 0;
                    bool ref_from_inside = path == owner || path.rfind(owner + ".", 0) == 0;
                    bool ref_from_parent = owner.rfind(path.empty() ? "" : path + ".", 0) == 0 &&
                                           (path.empty() || owner != path);
                    if (inside_owner && !ref_from_inside && !ref_from_parent)
                        throw Error("parameter aliasing across inlined boundary is unsupported: '" +
                                    join_path(path, n.target) + "'");
                }
            }
            for (const auto& s : m.submodules) walk(*s.module, join_path(path, s.name));
        }
    };
    Walker w{owner_path};
    w.walk(root, "");
}

StaticGraph inline_call(const StaticGraph& graph, int call_node, const StaticGraph& callee,
                        const std::string& callee_prefix) {
    const GraphNode& call = graph.node(call_node);
    if (call.kind != NodeKind::CallModule)
        throw Error("inline target node " + std::to_string(call_node) + " is not call_module");
    if (call.args.size() != callee.input_ids.size())
        throw Error("arity mismatch inlining '" + callee_prefix + "': call has " +
                    std::to_string(call.args.size()) + " args, callee expects " +
                    std::to_string(callee.input_ids.size()));

    StaticGraph out;
    out.input_ids = graph.input_ids;
    int next_id = std::max(graph.max_id(), callee.max_id()) + 1;

    std::unordered_map<int, int> callee_map;   // callee id -> new id in out
    std::vector<int> callee_results;
    std::unordered_map<int, int> alias;        // old graph id -> replacement id

    for (const auto& n : graph.nodes) {
        if (n.id != call_node) {
            GraphNode copy = n;
            for (auto& a : copy.args) {
                auto it = alias.find(a);
                if (it != alias.end()) a = it->second;
            }
            out.nodes.push_back(std::move(copy));
            continue;
        }
        // Splice callee body here.
        std::size_t input_idx = 0;
        for (const auto& cn : callee.nodes) {
            if (cn.kind == NodeKind::Input) {
                callee_map[cn.id] = call.args[input_idx++];
                continue;
            }
            if (cn.kind == NodeKind::Output) {
                for (int res : cn.args) callee_results.push_back(callee_map.at(res));
                continue;
            }
            GraphNode copy = cn;
            copy.id = next_id++;
            for (auto& a : copy.args) a = callee_map.at(a);
            if (copy.kind == NodeKind::ParamRef || copy.kind == NodeKind::CallModule)
                copy.target = join_path(callee_prefix, copy.target);
            callee_map[cn.id] = copy.id;
            out.nodes.push_back(std::move(copy));
        }
        if (callee_results.size() == 1) {
            alias[call_node] = callee_results[0];
        } else {
            // Multi-result callee: later get_item nodes select the results.
            alias[call_node] = -1;
        }
    }

    // Second pass resolves get_item over multi-result inlined calls.
    if (callee_results.size() > 1) {
        std::unordered_map<int, int> item_alias;
        StaticGraph fixed;
        fixed.input_ids = out.input_ids;
        for (auto& n : out.nodes) {
            if (n.kind == NodeKind::GetItem && n.args[0] == -1) {
                std::int64_t idx = attr_int(n.attrs, "index").value_or(0);
                if (idx < 0 || idx >= static_cast<std::int64_t>(callee_results.size()))
                    throw Error("get_item index out of range after inlining");
                item_alias[n.id] = callee_results[idx];
                continue;
            }
            GraphNode copy = n;
            for (auto& a : copy.args) {
                auto it = item_alias.find(a);
                if (it != item_alias.end()) a = it->second;
                if (a == -1) throw Error("multi-result inlined call used without get_item");
            }
            fixed.nodes.push_back(std::move(copy));
        }
        out = std::move(fixed);
    } else {
        for (auto& n : out.nodes) {
            for (auto& a : n.args) {
                auto it = alias.find(a);
                if (it != alias.end()) a = it->second;
            }
        }
    }

    out.output_id = out.nodes.back().id;
    out.validate();
    return out;
}

int flatten_module(ModuleDef& target, const TraceSpec& spec, std::vector<std::string>* warnings) {
    if (!target.is_composite()) throw Error("cannot trace builtin module '" + target.name + "'");
    if (warnings) {
        for (const auto& leaf : spec.leaves) {
            if (resolve_paths(target, leaf).empty())
                warnings->push_back("leaf pattern '" + leaf + "' matches nothing");
        }
    }
    if (!spec.flatten) return 0;

    int inlined = 0;
    bool changed = true;
    // rel_of tracks each call's path relative to the trace root as inlining
    // re-qualifies targets.
    while (changed) {
        changed = false;
        for (const auto& n : target.forward->nodes) {
            if (n.kind != NodeKind::CallModule) continue;
            const std::string& rel = n.target;
            const ModuleDef* sub = target.resolve(rel);
            if (!sub) throw Error("unknown submodule '" + rel + "'");
            if (!sub->is_composite()) continue;           // builtins are always leaves
            if (matches_any(spec.leaves, rel)) continue;  // descent stops at a leaf match
            target.forward = inline_call(*target.forward, n.id, *sub->forward, rel);
            ++inlined;
            changed = true;
            break;
        }
    }
    return inlined;
}

namespace {

TracedModule trace_rec(const ModuleDef& root, const ModuleDef& module, const std::string& path,
                       const TraceSpec& spec, const std::string& rel) {
    TracedModule t;
    t.origin = path;
    if (spec.flatten) {
        ModuleDef copy = module;
        // Leaf patterns resolve against the trace root, so shift them into the
        // submodule's frame when recursing; at the top rel is empty.
        TraceSpec local = spec;
        flatten_module(copy, local, nullptr);
        t.graph = *copy.forward;
        return t;
    }
    t.graph = *module.forward;
    for (const auto& s : module.submodules) {
        if (!s.module->is_composite()) continue;
        std::string child_rel = join_path(rel, s.name);
        if (matches_any(spec.leaves, child_rel)) continue;
        TraceSpec child_spec = spec;
        t.child_traces[s.name] =
            trace_rec(root, *s.module, join_path(path, s.name), child_spec, child_rel);
    }
    return t;
}

}  // namespace

TracedModule trace(const ModuleDef& root, const std::string& target, const TraceSpec& spec) {
    const ModuleDef* m = root.resolve(target);
    if (!m) throw Error("unknown module path '" + target + "'");
    if (!m->is_composite()) throw Error("cannot trace builtin module '" + target + "'");
    if (spec.flatten) check_param_aliasing(root, target);
    TracedModule t = trace_rec(root, *m, target, spec, "");
    return t;
}

}  // namespace slapo
