// SPDX-License-Identifier: Apache-2.0

#include "slapo/pipeline.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "slapo/shape_inference.hpp"

namespace slapo {

namespace {

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out)
        if (c == '.') c = '_';
    return out;
}

std::string value_name(const StaticGraph& g, int node_id) {
    const GraphNode& n = g.node(node_id);
    if (n.kind == NodeKind::CallModule) return "n" + std::to_string(node_id) + "_" + sanitize(n.target);
    if (n.kind == NodeKind::CallOp) return "n" + std::to_string(node_id) + "_" + n.op;
    return "n" + std::to_string(node_id);
}

/// A module partitioned at positional boundaries, with per-part value I/O.
struct Segmentation {
    std::vector<ModuleDef> parts;
    std::vector<std::vector<std::string>> consumes;  // per part, ordered
    std::vector<std::vector<std::string>> produces;
    std::vector<std::string> input_names;   // "in0"... for the module's own inputs
    std::vector<std::string> output_names;  // names of the module's results
};

Segmentation segment_module(const ModuleDef& m, std::vector<int> boundaries,
                            const std::vector<TensorSpec>& input_specs) {
    const StaticGraph& g = *m.forward;
    ShapeMap shapes = infer_shapes(g, input_specs, m);

    std::sort(boundaries.begin(), boundaries.end(),
              [&](int a, int b) { return g.index_of(a) < g.index_of(b); });
    int seg_count = static_cast<int>(boundaries.size()) + 1;

    // Assign every non-input, non-output node to a segment by position.
    std::unordered_map<int, int> seg_of;  // node id -> segment
    {
        std::size_t next_boundary = 0;
        int seg = 0;
        for (const auto& n : g.nodes) {
            if (n.kind == NodeKind::Output) break;
            if (n.kind == NodeKind::Input) continue;
            seg_of[n.id] = seg;
            if (next_boundary < boundaries.size() && n.id == boundaries[next_boundary]) {
                ++next_boundary;
                ++seg;
            }
        }
    }

    std::unordered_map<int, int> producer_seg;  // value node id -> segment (-1 = module input)
    std::unordered_map<int, std::string> names;
    std::vector<std::string> input_names;
    for (std::size_t i = 0; i < g.input_ids.size(); ++i) {
        producer_seg[g.input_ids[i]] = -1;
        names[g.input_ids[i]] = "in" + std::to_string(i);
        input_names.push_back(names[g.input_ids[i]]);
    }
    for (const auto& n : g.nodes) {
        if (n.kind == NodeKind::Input || n.kind == NodeKind::Output) continue;
        producer_seg[n.id] = seg_of.at(n.id);
        names[n.id] = value_name(g, n.id);
    }

    // last_use[v] = last segment index that consumes v; the module's results
    // count as used one past the end.
    std::unordered_map<int, int> last_use;
    for (const auto& n : g.nodes) {
        if (n.kind == NodeKind::Input) continue;
        int user_seg = n.kind == NodeKind::Output ? seg_count : seg_of.at(n.id);
        for (int a : n.args) {
            auto it = last_use.find(a);
            if (it == last_use.end() || it->second < user_seg) last_use[a] = user_seg;
        }
    }

    Segmentation out;
    out.input_names = input_names;
    for (int res : g.result_ids()) out.output_names.push_back(names.at(res));

    for (int s = 0; s < seg_count; ++s) {
        // consumes: produced earlier, needed at or after this segment.
        std::vector<int> consumed, produced;
        for (const auto& n : g.nodes) {
            if (n.kind == NodeKind::Output) continue;
            int id = n.id;
            int p = producer_seg.at(id);
            auto lu = last_use.find(id);
            int last = lu == last_use.end() ? -2 : lu->second;
            if (p < s && last >= s) consumed.push_back(id);
            if (p <= s && last >= s + 1) produced.push_back(id);
        }

        ModuleDef part;
        part.kind = "composite";
        part.name = "part" + std::to_string(s);
        StaticGraph pg;
        std::unordered_map<int, int> remap;  // original id -> part graph id
        int next_id = 0;
        for (int id : consumed) {
            GraphNode in;
            in.id = next_id++;
            in.kind = NodeKind::Input;
            const ValueSpec& vs = shapes.at(id);
            if (vs.tuple) throw Error("pipeline boundary value '" + names.at(id) + "' is a tuple");
            in.attrs["shape"] = vs.parts[0].shape;
            in.attrs["dtype"] = std::string(dtype_name(vs.parts[0].dtype));
            pg.input_ids.push_back(in.id);
            remap[id] = in.id;
            pg.nodes.push_back(std::move(in));
        }
        std::set<std::string> moved_children;
        std::set<std::string> moved_params;
        for (const auto& n : g.nodes) {
            if (n.kind == NodeKind::Input || n.kind == NodeKind::Output) continue;
            if (seg_of.at(n.id) != s) continue;
            GraphNode copy = n;
            copy.id = next_id++;
            for (auto& a : copy.args) {
                auto it = remap.find(a);
                if (it == remap.end())
                    throw Error("pipeline segmentation lost value " + std::to_string(a));
                a = it->second;
            }
            remap[n.id] = copy.id;
            if (n.kind == NodeKind::CallModule) {
                std::string child = ModulePath::parse(n.target).segments.front();
                moved_children.insert(child);
            }
            if (n.kind == NodeKind::ParamRef) {
                std::string head = ModulePath::parse(n.target).segments.front();
                if (m.find_param(head) || m.find_param(n.target))
                    moved_params.insert(n.target);
                else
                    moved_children.insert(head);
            }
            pg.nodes.push_back(std::move(copy));
        }
        GraphNode outn;
        outn.id = next_id++;
        outn.kind = NodeKind::Output;
        for (int id : produced) outn.args.push_back(remap.at(id));
        pg.output_id = outn.id;
        pg.nodes.push_back(std::move(outn));
        pg.validate();
        part.forward = std::move(pg);

        for (const auto& child : moved_children) {
            const ModuleDef* sub = m.find_child(child);
            if (!sub) throw Error("pipeline segmentation: unknown child '" + child + "'");
            part.add_submodule(child, *sub);
        }
        for (const auto& pname : moved_params) {
            const ParamDef* p = m.find_param(pname);
            if (p) part.params.push_back(*p);
        }

        out.parts.push_back(std::move(part));
        std::vector<std::string> cons, prod;
        for (int id : consumed) cons.push_back(names.at(id));
        for (int id : produced) prod.push_back(names.at(id));
        out.consumes.push_back(std::move(cons));
        out.produces.push_back(std::move(prod));
    }

    // A child or param claimed by two segments would alias state across stages.
    std::map<std::string, int> claims;
    for (int s = 0; s < seg_count; ++s) {
        for (const auto& sub : out.parts[s].submodules) {
            auto [it, fresh] = claims.emplace(sub.name, s);
            if (!fresh && it->second != s)
                throw Error("submodule '" + sub.name + "' is used by two pipeline segments");
        }
    }
    return out;
}

/// Replace the single call to `child_seg` in `parent` with a chain of part
/// calls, wiring part I/O through get_item nodes. Returns the node ids of the
/// part calls marking the propagated boundaries (after part i, i < n-1).
std::vector<int> inline_parts(ModuleDef& parent, const std::string& child_seg,
                              const Segmentation& seg) {
    StaticGraph& g = *parent.forward;
    int call_id = -1;
    for (const auto& n : g.nodes) {
        if (n.kind == NodeKind::CallModule && n.target == child_seg) {
            if (call_id >= 0)
                throw Error("module '" + child_seg + "' is called more than once; cannot partition");
            call_id = n.id;
        }
    }
    if (call_id < 0) throw Error("no call to '" + child_seg + "' found in parent graph");
    const GraphNode call = g.node(call_id);

    StaticGraph out;
    out.input_ids = g.input_ids;
    int next_id = g.max_id() + 1;
    std::vector<int> part_call_ids;
    std::unordered_map<int, int> alias;        // old id -> new id
    std::unordered_map<std::string, int> value_node;  // boundary name -> node id

    for (const auto& n : g.nodes) {
        if (n.id != call_id) {
            GraphNode copy = n;
            for (auto& a : copy.args) {
                auto it = alias.find(a);
                if (it != alias.end()) a = it->second;
            }
            out.nodes.push_back(std::move(copy));
            continue;
        }
        for (std::size_t i = 0; i < seg.input_names.size(); ++i)
            value_node[seg.input_names[i]] = call.args[i];
        for (std::size_t s = 0; s < seg.parts.size(); ++s) {
            GraphNode pc;
            pc.id = next_id++;
            pc.kind = NodeKind::CallModule;
            pc.target = child_seg + "_p" + std::to_string(s);
            for (const auto& name : seg.consumes[s]) pc.args.push_back(value_node.at(name));
            int pc_id = pc.id;
            out.nodes.push_back(std::move(pc));
            part_call_ids.push_back(pc_id);
            if (seg.produces[s].size() == 1) {
                value_node[seg.produces[s][0]] = pc_id;
            } else {
                for (std::size_t k = 0; k < seg.produces[s].size(); ++k) {
                    GraphNode gi;
                    gi.id = next_id++;
                    gi.kind = NodeKind::GetItem;
                    gi.args = {pc_id};
                    gi.attrs["index"] = static_cast<std::int64_t>(k);
                    value_node[seg.produces[s][k]] = gi.id;
                    out.nodes.push_back(std::move(gi));
                }
            }
        }
        if (seg.output_names.size() == 1) {
            alias[call_id] = value_node.at(seg.output_names[0]);
        } else {
            // Multi-result module: the parent consumes it via get_item; those
            // nodes are rewritten in the pass below.
            alias[call_id] = -1;
        }
    }

    if (seg.output_names.size() > 1) {
        StaticGraph fixed;
        fixed.input_ids = out.input_ids;
        std::unordered_map<int, int> item_alias;
        for (auto& n : out.nodes) {
            if (n.kind == NodeKind::GetItem && !n.args.empty() && n.args[0] == -1) {
                std::int64_t idx = attr_int(n.attrs, "index").value_or(0);
                item_alias[n.id] = value_node.at(seg.output_names.at(static_cast<std::size_t>(idx)));
                continue;
            }
            GraphNode copy = n;
            for (auto& a : copy.args) {
                auto it = item_alias.find(a);
                if (it != item_alias.end()) a = it->second;
                if (a == -1) throw Error("partitioned multi-result module used without get_item");
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

    // Swap in the new graph and submodules.
    parent.forward = std::move(out);
    for (auto it = parent.submodules.begin(); it != parent.submodules.end(); ++it) {
        if (it->name == child_seg) {
            parent.submodules.erase(it);
            break;
        }
    }
    for (std::size_t s = 0; s < seg.parts.size(); ++s)
        parent.add_submodule(child_seg + "_p" + std::to_string(s), seg.parts[s]);

    part_call_ids.pop_back();  // boundaries lie after every part but the last
    return part_call_ids;
}

struct SpecFinder {
    const ModuleDef& root;
    const std::string& wanted;
    std::vector<TensorSpec> result;
    bool found = false;

    void search(const ModuleDef& m, const std::string& path, const std::vector<TensorSpec>& inputs) {
        if (found || !m.forward) return;
        ShapeMap shapes = infer_shapes(*m.forward, inputs, m);
        for (const auto& n : m.forward->nodes) {
            if (found) return;
            if (n.kind != NodeKind::CallModule) continue;
            std::string full = join_path(path, n.target);
            std::vector<TensorSpec> sub_inputs;
            for (int a : n.args) sub_inputs.push_back(shapes.at(a).single());
            if (full == wanted) {
                result = sub_inputs;
                found = true;
                return;
            }
            if (wanted.rfind(full + ".", 0) == 0) {
                const ModuleDef* sub = m.resolve(n.target);
                if (sub && sub->is_composite()) search(*sub, full, sub_inputs);
            }
        }
    }
};

}  // namespace

std::vector<TensorSpec> module_input_specs_at(const ModuleDef& root, const std::string& path) {
    if (path.empty()) return declared_input_specs(*root.forward);
    SpecFinder f{root, path, {}, false};
    f.search(root, "", declared_input_specs(*root.forward));
    if (!f.found) throw Error("module '" + path + "' is never called; cannot infer its inputs");
    return f.result;
}

PipelineStagePlan build_pipeline_plan(const ModuleDef& model,
                                      const std::vector<SplitAnnotation>& splits) {
    if (splits.empty()) throw Error("no pipeline_split annotations");
    ModuleDef work = model;

    // site -> boundary node ids in that module's current graph
    std::map<std::string, std::vector<int>> ann;
    for (const auto& sp : splits) {
        const ModuleDef* site = work.resolve(sp.site);
        if (!site) throw Error("unknown module path '" + sp.site + "'");
        if (!site->forward) throw Error("pipeline_split target '" + sp.site + "' has no graph");
        int node_id = -1;
        for (const auto& n : site->forward->nodes) {
            if (n.kind == NodeKind::CallModule && n.target == sp.after_child) node_id = n.id;
        }
        if (node_id < 0)
            throw Error("pipeline boundary not found: no call to '" + sp.after_child + "' in '" +
                        sp.site + "'");
        ann[sp.site].push_back(node_id);
    }

    // Propagate every annotated subschedule up to the top module, partitioning
    // and inlining level by level (deepest site first).
    while (!(ann.size() == 1 && ann.begin()->first.empty())) {
        auto deepest = std::max_element(ann.begin(), ann.end(), [](const auto& a, const auto& b) {
            auto depth = [](const std::string& p) {
                return p.empty() ? 0 : std::count(p.begin(), p.end(), '.') + 1;
            };
            if (depth(a.first) != depth(b.first)) return depth(a.first) < depth(b.first);
            return a.first > b.first;  // tie: lexicographically smallest wins as "max"
        });
        std::string site = deepest->first;
        std::vector<int> boundaries = deepest->second;
        ann.erase(deepest);

        ModuleDef* m = work.resolve(site);
        std::vector<TensorSpec> specs = module_input_specs_at(work, site);
        Segmentation seg = segment_module(*m, boundaries, specs);

        std::string parent = parent_path(site);
        std::string child_seg = last_segment(site);
        ModuleDef* pm = work.resolve(parent);
        if (!pm || !pm->forward)
            throw Error("cannot propagate pipeline annotations into '" + parent + "'");

        // An existing parent boundary "after the call we are replacing" moves
        // to after the last part call.
        int replaced_call = -1;
        for (const auto& n : pm->forward->nodes)
            if (n.kind == NodeKind::CallModule && n.target == child_seg) replaced_call = n.id;
        std::vector<int> new_bounds = inline_parts(*pm, child_seg, seg);
        int last_part_call = -1;
        for (const auto& n : pm->forward->nodes)
            if (n.kind == NodeKind::CallModule &&
                n.target == child_seg + "_p" + std::to_string(seg.parts.size() - 1))
                last_part_call = n.id;
        auto& parent_ann = ann[parent];
        for (auto& b : parent_ann)
            if (b == replaced_call) b = last_part_call;
        parent_ann.insert(parent_ann.end(), new_bounds.begin(), new_bounds.end());
    }

    std::vector<int> top_bounds = ann[""];
    Segmentation seg = segment_module(work, top_bounds, declared_input_specs(*work.forward));

    PipelineStagePlan plan;
    plan.model_inputs = seg.input_names;
    plan.model_outputs = seg.output_names;
    for (std::size_t s = 0; s < seg.parts.size(); ++s) {
        PipelineStage stage;
        stage.module = std::move(seg.parts[s]);
        stage.module.name = "stage" + std::to_string(s);
        stage.consumes = seg.consumes[s];
        stage.produces = seg.produces[s];
        plan.stages.push_back(std::move(stage));
    }
    return plan;
}

}  // namespace slapo
