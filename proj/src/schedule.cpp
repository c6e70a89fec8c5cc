// SPDX-License-Identifier: Apache-2.0

#include "slapo/schedule.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

#include "slapo/library.hpp"
#include "slapo/shape_inference.hpp"

namespace slapo {

const char* primitive_name(Primitive p) {
    switch (p) {
        case Primitive::Replace: return "replace";
        case Primitive::Shard: return "shard";
        case Primitive::Sync: return "sync";
        case Primitive::Checkpoint: return "checkpoint";
        case Primitive::Trace: return "trace";
        case Primitive::Find: return "find";
        case Primitive::Fuse: return "fuse";
        case Primitive::PipelineSplit: return "pipeline_split";
    }
    return "?";
}

struct ScheduleState {
    ModuleDef original;
    ModuleDef shadow;
    WorldConfig world;
    std::vector<PrimitiveRecord> log;
    std::map<std::string, StaticGraph> patterns;
    std::vector<std::string> warnings;
    bool deferred = false;
};

namespace {

bool is_ancestor_or_same(const std::string& a, const std::string& b) {
    // a == b, or a is an ancestor path of b
    if (a == b) return true;
    if (a.empty()) return true;
    return b.rfind(a + ".", 0) == 0;
}

// ---------------------------------------------------------------------------
// Region extraction (fuse / checkpoint(subgraph) / replace(subgraph))

struct RegionInfo {
    std::string submodule_name;
    std::vector<TensorSpec> input_specs;  // boundary inputs, in call-arg order
};

/// Pull `match` out of host.forward into a new submodule called as one node.
/// Boundary inputs become module inputs (params are passed by value and stay
/// owned by the host); the single escaping value becomes the module output.
RegionInfo extract_region(ModuleDef& host, const SubgraphMatch& match, const std::string& name,
                          const AttrMap& extra_attrs, const std::vector<TensorSpec>& host_inputs) {
    StaticGraph& g = *host.forward;
    std::unordered_set<int> region(match.nodes.begin(), match.nodes.end());

    std::vector<int> escapes = escaping_values(g, match.nodes);
    if (escapes.size() != 1)
        throw Error("region has " + std::to_string(escapes.size()) +
                    " escaping values; exactly one is required");
    int escape = escapes[0];

    ShapeMap shapes = infer_shapes(g, host_inputs, host);

    // Boundary inputs in first-use order.
    std::vector<int> boundary;
    std::unordered_set<int> seen;
    for (const auto& n : g.nodes) {
        if (!region.count(n.id)) continue;
        for (int a : n.args) {
            if (!region.count(a) && seen.insert(a).second) boundary.push_back(a);
        }
    }

    ModuleDef sub;
    sub.kind = "composite";
    sub.attrs = extra_attrs;
    StaticGraph sg;
    std::unordered_map<int, int> remap;
    int next = 0;
    RegionInfo info;
    info.submodule_name = name;
    for (int b : boundary) {
        GraphNode in;
        in.id = next++;
        in.kind = NodeKind::Input;
        const ValueSpec& vs = shapes.at(b);
        if (vs.tuple) throw Error("region boundary value is a tuple; unsupported");
        info.input_specs.push_back(vs.parts[0]);
        sg.input_ids.push_back(in.id);
        remap[b] = in.id;
        sg.nodes.push_back(std::move(in));
    }
    std::vector<std::string> moved_children;
    for (const auto& n : g.nodes) {
        if (!region.count(n.id)) continue;
        GraphNode copy = n;
        copy.id = next++;
        for (auto& a : copy.args) a = remap.at(a);
        remap[n.id] = copy.id;
        if (n.kind == NodeKind::ParamRef)
            throw Error("patterns may not capture param_ref nodes; the value arrives as a "
                        "region input instead");
        if (n.kind == NodeKind::CallModule) {
            std::string head = ModulePath::parse(n.target).segments.front();
            // The called child moves into the region module; another call site
            // outside the region would leave a dangling reference.
            for (const auto& other : g.nodes) {
                if (other.id == n.id || region.count(other.id)) continue;
                if (other.kind == NodeKind::CallModule &&
                    ModulePath::parse(other.target).segments.front() == head)
                    throw Error("submodule '" + head +
                                "' is called both inside and outside the matched region");
            }
            if (std::find(moved_children.begin(), moved_children.end(), head) ==
                moved_children.end())
                moved_children.push_back(head);
        }
        sg.nodes.push_back(std::move(copy));
        // Keep replaced-region introspection attrs for library builders.
        if (n.kind == NodeKind::CallOp && n.op == "reshape") {
            if (auto f = attr_int(n.attrs, "factor")) sub.attrs.emplace("head_dim", *f);
        }
        if (n.kind == NodeKind::CallOp && n.op == "dropout") {
            if (auto p = attr_double(n.attrs, "p")) sub.attrs.emplace("p", *p);
            if (auto s = attr_int(n.attrs, "seed")) sub.attrs.emplace("seed", *s);
        }
    }
    GraphNode outn;
    outn.id = next++;
    outn.kind = NodeKind::Output;
    outn.args = {remap.at(escape)};
    sg.output_id = outn.id;
    sg.nodes.push_back(std::move(outn));
    sg.validate();
    sub.forward = std::move(sg);
    for (const auto& child : moved_children) {
        const ModuleDef* cm = host.find_child(child);
        if (!cm) throw Error("region references unknown submodule '" + child + "'");
        sub.add_submodule(child, *cm);
    }
    host.add_submodule(name, std::move(sub));
    for (const auto& child : moved_children) {
        for (auto it = host.submodules.begin(); it != host.submodules.end(); ++it) {
            if (it->name == child) {
                host.submodules.erase(it);
                break;
            }
        }
    }

    // Rebuild the host graph with the region collapsed to one call.
    StaticGraph ng;
    ng.input_ids = g.input_ids;
    int call_id = g.max_id() + 1;
    int last_region_pos = -1;
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        if (region.count(g.nodes[i].id)) last_region_pos = static_cast<int>(i);
    }
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const GraphNode& n = g.nodes[i];
        if (!region.count(n.id)) {
            GraphNode copy = n;
            for (auto& a : copy.args) {
                if (a == escape) a = call_id;
            }
            ng.nodes.push_back(std::move(copy));
        }
        if (static_cast<int>(i) == last_region_pos) {
            GraphNode call;
            call.id = call_id;
            call.kind = NodeKind::CallModule;
            call.target = name;
            call.args = boundary;
            ng.nodes.push_back(std::move(call));
        }
    }
    ng.output_id = ng.nodes.back().id;
    try {
        ng.validate();
    } catch (const Error& e) {
        throw Error(std::string("region cannot be extracted as one node: ") + e.what());
    }
    host.forward = std::move(ng);
    return info;
}

int fused_name_counter(const ModuleDef& host, const std::string& base) {
    int i = 0;
    while (host.find_child(base + "_" + std::to_string(i)) != nullptr) ++i;
    return i;
}

// ---------------------------------------------------------------------------
// Sync lowering

/// Insert all_reduce after every call to `rel_target` in `graph`, rewiring
/// later uses.
int insert_all_reduce_after_calls(StaticGraph& graph, const std::string& rel_target) {
    int inserted = 0;
    bool changed = true;
    std::unordered_set<int> wrapped;
    while (changed) {
        changed = false;
        for (const auto& n : graph.nodes) {
            if (n.kind != NodeKind::CallModule || n.target != rel_target || wrapped.count(n.id))
                continue;
            int call_id = n.id;
            int new_id = graph.max_id() + 1;
            StaticGraph ng;
            ng.input_ids = graph.input_ids;
            for (const auto& old : graph.nodes) {
                GraphNode copy = old;
                if (old.id != call_id) {
                    for (auto& a : copy.args) {
                        if (a == call_id) a = new_id;
                    }
                }
                ng.nodes.push_back(std::move(copy));
                if (old.id == call_id) {
                    GraphNode ar;
                    ar.id = new_id;
                    ar.kind = NodeKind::CallOp;
                    ar.op = "all_reduce";
                    ar.args = {call_id};
                    ng.nodes.push_back(std::move(ar));
                }
            }
            ng.output_id = ng.nodes.back().id;
            ng.validate();
            graph = std::move(ng);
            wrapped.insert(call_id);
            ++inserted;
            changed = true;
            break;
        }
    }
    return inserted;
}

/// Wrap calls to `site` wherever they occur in graphs reachable from the
/// root. After trace-flattening, the live call may sit in an ancestor's graph
/// under a dotted target while the original parent's graph is dead code, so a
/// plain parent lookup would miss it.
int lower_sync_into_live_graphs(ModuleDef& m, const std::string& path, const std::string& site,
                                std::set<std::string>& visited) {
    if (!m.forward || !visited.insert(path).second) return 0;
    int wrapped = 0;
    std::set<std::string> rel_targets;
    for (const auto& n : m.forward->nodes) {
        if (n.kind == NodeKind::CallModule && join_path(path, n.target) == site)
            rel_targets.insert(n.target);
    }
    for (const auto& rel : rel_targets)
        wrapped += insert_all_reduce_after_calls(*m.forward, rel);
    // Recurse only through modules that are actually called.
    std::set<std::string> callee_paths;
    for (const auto& n : m.forward->nodes) {
        if (n.kind == NodeKind::CallModule) callee_paths.insert(n.target);
    }
    for (const auto& target : callee_paths) {
        ModuleDef* sub = m.resolve(target);
        if (sub && sub->is_composite())
            wrapped += lower_sync_into_live_graphs(*sub, join_path(path, target), site, visited);
    }
    return wrapped;
}

void lower_sync_forward(ModuleDef& model, const std::string& site) {
    if (site.empty()) {
        // Root: all_reduce each result.
        StaticGraph& g = *model.forward;
        GraphNode out = g.output_node();
        StaticGraph ng;
        ng.input_ids = g.input_ids;
        int next = g.max_id() + 1;
        for (const auto& n : g.nodes) {
            if (n.kind != NodeKind::Output) ng.nodes.push_back(n);
        }
        std::vector<int> new_results;
        for (int res : out.args) {
            GraphNode ar;
            ar.id = next++;
            ar.kind = NodeKind::CallOp;
            ar.op = "all_reduce";
            ar.args = {res};
            new_results.push_back(ar.id);
            ng.nodes.push_back(std::move(ar));
        }
        GraphNode no;
        no.id = next++;
        no.kind = NodeKind::Output;
        no.args = new_results;
        ng.output_id = no.id;
        ng.nodes.push_back(std::move(no));
        ng.validate();
        model.forward = std::move(ng);
        return;
    }
    std::set<std::string> visited;
    if (lower_sync_into_live_graphs(model, "", site, visited) == 0)
        throw Error("cannot place sync: no live call to '" + site + "' found");
}

// ---------------------------------------------------------------------------
// Checkpoint nesting guard

bool subtree_has_checkpoint(const ModuleDef& m) {
    if (attr_flag(m.attrs, "checkpoint")) return true;
    for (const auto& s : m.submodules) {
        if (subtree_has_checkpoint(*s.module)) return true;
    }
    return false;
}

void check_checkpoint_nesting(const ModuleDef& model, const std::string& site) {
    const ModuleDef* target = model.resolve(site);
    if (!target) throw Error("unknown module path '" + site + "'");
    if (subtree_has_checkpoint(*target))
        throw Error("nested checkpoint regions are rejected: '" + site +
                    "' already contains a checkpointed module");
    std::string p = site;
    while (!p.empty()) {
        p = parent_path(p);
        const ModuleDef* anc = model.resolve(p);
        if (anc && attr_flag(anc->attrs, "checkpoint"))
            throw Error("nested checkpoint regions are rejected: ancestor '" + p +
                        "' is checkpointed");
        if (p.empty()) break;
    }
}

std::vector<TensorSpec> site_input_specs(const ModuleDef& model, const std::string& site) {
    try {
        return module_input_specs_at(model, site);
    } catch (const Error& e) {
        throw RuleError("R4", std::string("cannot infer module interface: ") + e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Rule checks over the log prefix

void check_record_rules(const PrimitiveRecord& rec, const std::vector<PrimitiveRecord>& prior,
                        const WorldConfig& world) {
    auto has_prior = [&](auto pred) {
        for (const auto& r : prior) {
            if (pred(r)) return true;
        }
        return false;
    };

    bool distributed = rec.primitive == Primitive::Shard || rec.primitive == Primitive::Sync ||
                       rec.primitive == Primitive::PipelineSplit;
    if (distributed && world.world_size <= 1)
        throw RuleError("R2", std::string(primitive_name(rec.primitive)) +
                                  " requires a distributed environment (world_size > 1)");

    if (rec.primitive == Primitive::Sync) {
        bool ok = has_prior([&](const PrimitiveRecord& r) {
            return r.primitive == Primitive::Shard &&
                   (is_ancestor_or_same(r.site, rec.site) || is_ancestor_or_same(rec.site, r.site));
        });
        if (!ok)
            throw RuleError("R1", "sync at '" + rec.site +
                                      "' has no corresponding shard at the site, an ancestor, or "
                                      "within its subtree");
    }

    bool needs_trace = rec.primitive == Primitive::Fuse ||
                       rec.primitive == Primitive::PipelineSplit ||
                       (rec.primitive == Primitive::Replace && !rec.pattern.empty()) ||
                       (rec.primitive == Primitive::Checkpoint && !rec.pattern.empty()) ||
                       (rec.primitive == Primitive::Find && !rec.pattern.empty());
    if (needs_trace) {
        bool ok = has_prior([&](const PrimitiveRecord& r) {
            return r.primitive == Primitive::Trace && is_ancestor_or_same(r.site, rec.site);
        });
        if (!ok)
            throw RuleError("R3", std::string(primitive_name(rec.primitive)) + " at '" + rec.site +
                                      "' requires a static graph; apply trace first");
    }
}

// ---------------------------------------------------------------------------
// Record execution

void apply_record(ModuleDef& model, const PrimitiveRecord& rec, const WorldConfig& world,
                  const std::map<std::string, StaticGraph>& patterns,
                  std::vector<std::string>* warnings) {
    ModuleDef* site_mod = model.resolve(rec.site);
    if (!site_mod) throw Error("unknown module path '" + rec.site + "'");

    switch (rec.primitive) {
        case Primitive::Trace: {
            if (!site_mod->is_composite())
                throw Error("cannot trace builtin module '" + rec.site + "'");
            if (rec.trace_spec.flatten) check_param_aliasing(model, rec.site);
            flatten_module(*site_mod, rec.trace_spec, warnings);
            break;
        }
        case Primitive::Replace: {
            if (rec.pattern.empty()) {
                if (rec.site.empty()) throw Error("cannot replace the root module");
                std::vector<TensorSpec> specs = site_input_specs(model, rec.site);
                ModuleDef replacement = build_library_module(rec.library, *site_mod);
                ValueSpec old_out = module_output_spec(*site_mod, specs);
                ValueSpec new_out;
                try {
                    new_out = module_output_spec(replacement, specs);
                } catch (const Error& e) {
                    throw RuleError("R4", std::string("replacement rejects the module inputs: ") +
                                              e.what());
                }
                if (!(old_out == new_out))
                    throw RuleError("R4", "interface mismatch replacing '" + rec.site + "': " +
                                              old_out.to_string() + " vs " + new_out.to_string());
                replacement.name = last_segment(rec.site);
                ModuleDef* parent = model.resolve(parent_path(rec.site));
                parent->replace_submodule(last_segment(rec.site), std::move(replacement));
            } else {
                auto pit = patterns.find(rec.pattern);
                if (pit == patterns.end()) throw Error("unknown pattern '" + rec.pattern + "'");
                std::vector<TensorSpec> specs = site_input_specs(model, rec.site);
                std::vector<SubgraphMatch> matches =
                    find_matches(*site_mod->forward, pit->second, site_mod);
                if (matches.empty() && warnings)
                    warnings->push_back("pattern '" + rec.pattern + "' matched nothing at '" +
                                        rec.site + "'");
                for (const auto& match : matches) {
                    std::string name = "replaced_" + rec.pattern + "_" +
                                       std::to_string(fused_name_counter(*site_mod,
                                                                         "replaced_" + rec.pattern));
                    RegionInfo info = extract_region(*site_mod, match, name, {}, specs);
                    ModuleDef* extracted = site_mod->find_child(name);
                    ModuleDef replacement = build_library_module(rec.library, *extracted);
                    ValueSpec old_out = module_output_spec(*extracted, info.input_specs);
                    ValueSpec new_out = module_output_spec(replacement, info.input_specs);
                    if (!(old_out == new_out))
                        throw RuleError("R4", "interface mismatch replacing region at '" + rec.site +
                                                  "': " + old_out.to_string() + " vs " +
                                                  new_out.to_string());
                    replacement.name = name;
                    site_mod->replace_submodule(name, std::move(replacement));
                }
            }
            break;
        }
        case Primitive::Shard: {
            for (const auto& pname : rec.params) {
                ParamDef* p = site_mod->find_param(pname);
                if (!p) throw Error("unknown param '" + pname + "' at '" + rec.site + "'");
                if (p->shard) throw Error("param '" + pname + "' is already sharded");
                if (rec.axis == 1 && p->spec.rank() == 1) {
                    // Rank-1 bias under axis=1: kept whole, added once after the
                    // reduction (on rank 0).
                    if (warnings)
                        warnings->push_back("bias '" + pname + "' kept whole under axis=1 sharding");
                    continue;
                }
                if (rec.axis < 0 || rec.axis >= p->spec.rank())
                    throw Error("shard axis " + std::to_string(rec.axis) +
                                " out of range for param '" + pname + "'");
                int blocks = (site_mod->kind == "FusedQKV" && rec.axis == 0) ? 3 : 1;
                std::int64_t dim = p->spec.shape[rec.axis];
                if (dim % (static_cast<std::int64_t>(blocks) * world.world_size) != 0)
                    throw RuleError("R5", "dimension " + std::to_string(dim) + " of param '" +
                                              pname + "' is not divisible by world size " +
                                              std::to_string(world.world_size));
                ShardInfo info;
                info.axis = rec.axis;
                info.world_size = world.world_size;
                info.blocks = blocks;
                info.full_shape = p->spec.shape;
                p->shard = info;
                p->spec.shape[rec.axis] = dim / world.world_size;
            }
            break;
        }
        case Primitive::Sync: {
            if (rec.sync_type != "forward" && rec.sync_type != "backward" &&
                rec.sync_type != "both")
                throw Error("sync type must be forward, backward or both, got '" + rec.sync_type +
                            "'");
            if (rec.sync_type == "backward" || rec.sync_type == "both")
                site_mod->attrs["sync_backward"] = std::int64_t(1);
            if (rec.sync_type == "forward" || rec.sync_type == "both")
                lower_sync_forward(model, rec.site);
            break;
        }
        case Primitive::Checkpoint: {
            if (rec.pattern.empty()) {
                check_checkpoint_nesting(model, rec.site);
                site_mod->attrs["checkpoint"] = std::int64_t(1);
            } else {
                auto pit = patterns.find(rec.pattern);
                if (pit == patterns.end()) throw Error("unknown pattern '" + rec.pattern + "'");
                std::vector<TensorSpec> specs = site_input_specs(model, rec.site);
                std::vector<SubgraphMatch> matches =
                    find_matches(*site_mod->forward, pit->second, site_mod);
                if (matches.empty() && warnings)
                    warnings->push_back("pattern '" + rec.pattern + "' matched nothing at '" +
                                        rec.site + "'");
                AttrMap attrs;
                attrs["checkpoint"] = std::int64_t(1);
                for (const auto& match : matches) {
                    std::string base = "ckpt_" + rec.pattern;
                    std::string name =
                        base + "_" + std::to_string(fused_name_counter(*site_mod, base));
                    extract_region(*site_mod, match, name, attrs, specs);
                }
            }
            break;
        }
        case Primitive::Find:
            break;  // queries do not mutate; results are consumed eagerly
        case Primitive::Fuse: {
            if (rec.backend != "composed")
                throw Error("unknown backend '" + rec.backend + "' (registered: composed)");
            auto pit = patterns.find(rec.pattern);
            if (pit == patterns.end()) throw Error("unknown pattern '" + rec.pattern + "'");
            std::vector<TensorSpec> specs = site_input_specs(model, rec.site);
            std::vector<SubgraphMatch> matches =
                find_matches(*site_mod->forward, pit->second, site_mod);
            if (matches.empty() && warnings)
                warnings->push_back("pattern '" + rec.pattern + "' matched nothing at '" + rec.site +
                                    "'");
            AttrMap attrs;
            attrs["fused"] = std::int64_t(1);
            attrs["backend"] = rec.backend;
            for (const auto& match : matches) {
                std::string base = "fused_" + rec.pattern;
                std::string name = base + "_" + std::to_string(fused_name_counter(*site_mod, base));
                extract_region(*site_mod, match, name, attrs, specs);
            }
            break;
        }
        case Primitive::PipelineSplit: {
            if (!site_mod->forward)
                throw Error("pipeline_split target '" + rec.site + "' has no graph");
            bool found = false;
            for (const auto& n : site_mod->forward->nodes) {
                if (n.kind == NodeKind::CallModule && n.target == rec.after_child) found = true;
            }
            if (!found)
                throw Error("pipeline boundary not found: no call to '" + rec.after_child +
                            "' in '" + rec.site + "'");
            break;  // boundaries are materialized at apply() end
        }
    }
}

// ---------------------------------------------------------------------------
// Schedule handle

Schedule::Schedule(ModuleDef model, WorldConfig world) {
    model.validate();
    auto state = std::make_shared<ScheduleState>();
    state->original = model;
    state->shadow = std::move(model);
    state->world = world;
    state_ = std::move(state);
}

Schedule::Schedule(std::shared_ptr<ScheduleState> state, std::string path)
    : state_(std::move(state)), path_(std::move(path)) {}

Schedule create_schedule(ModuleDef model, WorldConfig world) {
    return Schedule(std::move(model), world);
}

Schedule Schedule::at(const std::string& path) const {
    std::string full = join_path(path_, path);
    if (!state_->shadow.resolve(full)) throw Error("unknown module path '" + full + "'");
    return Schedule(state_, full);
}

std::vector<std::string> Schedule::children() const {
    std::vector<std::string> out;
    for (const auto& s : module().submodules) out.push_back(s.name);
    return out;
}

const ModuleDef& Schedule::module() const {
    const ModuleDef* m = state_->shadow.resolve(path_);
    if (!m) throw Error("schedule path '" + path_ + "' no longer resolves");
    return *m;
}

const ModuleDef& Schedule::original_model() const { return state_->original; }
const WorldConfig& Schedule::world() const { return state_->world; }
const std::vector<PrimitiveRecord>& Schedule::log() const { return state_->log; }
const std::vector<std::string>& Schedule::warnings() const { return state_->warnings; }
const std::map<std::string, StaticGraph>& Schedule::patterns() const { return state_->patterns; }

void Schedule::set_deferred(bool deferred) { state_->deferred = deferred; }

void Schedule::record_raw(PrimitiveRecord rec) { state_->log.push_back(std::move(rec)); }

void Schedule::record(PrimitiveRecord rec) {
    if (!state_->deferred) {
        check_record_rules(rec, state_->log, state_->world);
        // Execute against a copy first so a failing primitive mutates nothing.
        ModuleDef next = state_->shadow;
        apply_record(next, rec, state_->world, state_->patterns, &state_->warnings);
        state_->shadow = std::move(next);
    }
    state_->log.push_back(std::move(rec));
}

void Schedule::trace(TraceSpec spec) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Trace;
    rec.site = path_;
    rec.trace_spec = std::move(spec);
    record(std::move(rec));
}

void Schedule::replace_with(const std::string& library_module) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Replace;
    rec.site = path_;
    rec.library = library_module;
    record(std::move(rec));
}

void Schedule::replace_at(const std::string& library_module, const std::string& pattern_name) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Replace;
    rec.site = path_;
    rec.library = library_module;
    rec.pattern = pattern_name;
    record(std::move(rec));
}

void Schedule::shard(const std::vector<std::string>& param_names, int axis) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Shard;
    rec.site = path_;
    rec.params = param_names;
    rec.axis = axis;
    record(std::move(rec));
}

void Schedule::sync(const std::string& type) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Sync;
    rec.site = path_;
    rec.sync_type = type;
    record(std::move(rec));
}

void Schedule::checkpoint() {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Checkpoint;
    rec.site = path_;
    record(std::move(rec));
}

void Schedule::checkpoint_at(const std::string& pattern_name) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Checkpoint;
    rec.site = path_;
    rec.pattern = pattern_name;
    record(std::move(rec));
}

std::vector<SubgraphMatch> Schedule::find(const std::string& glob) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Find;
    rec.site = path_;
    record(std::move(rec));
    std::vector<SubgraphMatch> out = find_module_calls(*module().forward, glob);
    for (auto& m : out) m.site = path_;
    return out;
}

std::vector<SubgraphMatch> Schedule::find(const StaticGraph& pattern) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Find;
    rec.site = path_;
    rec.pattern = "<inline>";
    record(std::move(rec));
    std::vector<SubgraphMatch> out = find_matches(*module().forward, pattern, &module());
    for (auto& m : out) m.site = path_;
    return out;
}

void Schedule::fuse_at(const std::string& pattern_name, const std::string& backend) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::Fuse;
    rec.site = path_;
    rec.pattern = pattern_name;
    rec.backend = backend;
    record(std::move(rec));
}

void Schedule::pipeline_split(const std::string& after_child) {
    PrimitiveRecord rec;
    rec.primitive = Primitive::PipelineSplit;
    rec.site = path_;
    rec.after_child = after_child;
    record(std::move(rec));
}

void Schedule::define_pattern(const std::string& name, StaticGraph pattern) {
    validate_pattern(pattern);
    state_->patterns[name] = std::move(pattern);
}

ApplyResult Schedule::apply() const {
    // Phase 1: rule-check the whole log before any mutation.
    for (std::size_t i = 0; i < state_->log.size(); ++i) {
        std::vector<PrimitiveRecord> prior(state_->log.begin(), state_->log.begin() + i);
        check_record_rules(state_->log[i], prior, state_->world);
    }
    // Phase 2: replay on a pristine copy.
    ApplyResult result;
    result.model = state_->original;
    std::vector<std::string> sink;
    for (std::size_t i = 0; i < state_->log.size(); ++i) {
        try {
            apply_record(result.model, state_->log[i], state_->world, state_->patterns, &sink);
        } catch (const Error& e) {
            throw Error("apply failed at record " + std::to_string(i) + " (" +
                        primitive_name(state_->log[i].primitive) + " at '" + state_->log[i].site +
                        "'): " + e.what());
        }
    }
    // Phase 3: materialize pipeline stages from the surviving annotations.
    std::vector<SplitAnnotation> splits;
    for (const auto& rec : state_->log) {
        if (rec.primitive == Primitive::PipelineSplit)
            splits.push_back({rec.site, rec.after_child});
    }
    if (!splits.empty()) result.stages = build_pipeline_plan(result.model, splits);
    return result;
}

}  // namespace slapo
