// SPDX-License-Identifier: Apache-2.0

#include "slapo/shape_inference.hpp"

#include <algorithm>
#include <sstream>

namespace slapo {

const std::vector<std::string>& builtin_ops() {
    static const std::vector<std::string> ops = {
        "matmul", "add",     "mul",     "scale",      "transpose",  "reshape",
        "split",  "concat",  "relu",    "gelu",       "softmax",    "layernorm",
        "dropout", "reduce_sum", "all_reduce", "all_gather"};
    return ops;
}

bool is_builtin_op(const std::string& op) {
    const auto& ops = builtin_ops();
    return std::find(ops.begin(), ops.end(), op) != ops.end();
}

namespace {

[[noreturn]] void shape_error(int node_id, const std::string& detail) {
    throw Error("shape mismatch at node " + std::to_string(node_id) + ": " + detail);
}

int normalize_axis(std::int64_t axis, int rank, int node_id) {
    std::int64_t a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank)
        shape_error(node_id, "axis " + std::to_string(axis) + " out of range for rank " +
                                 std::to_string(rank));
    return static_cast<int>(a);
}

const TensorSpec& single_arg(const std::vector<const ValueSpec*>& args, std::size_t i, int node_id) {
    if (i >= args.size()) shape_error(node_id, "missing operand " + std::to_string(i));
    if (args[i]->tuple) shape_error(node_id, "operand " + std::to_string(i) + " is a tuple");
    return args[i]->parts[0];
}

TensorSpec infer_matmul(const TensorSpec& a, const TensorSpec& b, int node_id) {
    if (a.rank() < 2 || b.rank() < 2)
        shape_error(node_id, "matmul needs rank >= 2 operands, got " + a.to_string() + " and " +
                                 b.to_string());
    if (a.rank() != b.rank())
        shape_error(node_id, "matmul rank mismatch: " + a.to_string() + " vs " + b.to_string());
    for (int i = 0; i < a.rank() - 2; ++i) {
        if (a.shape[i] != b.shape[i])
            shape_error(node_id, "matmul batch dims differ: " + a.to_string() + " vs " + b.to_string());
    }
    std::int64_t k_a = a.shape[a.rank() - 1];
    std::int64_t k_b = b.shape[b.rank() - 2];
    if (k_a != k_b)
        shape_error(node_id, "matmul contraction mismatch between " + a.to_string() + " and " +
                                 b.to_string());
    TensorSpec out = a;
    out.shape[out.rank() - 1] = b.shape[b.rank() - 1];
    return out;
}

TensorSpec infer_elementwise_pair(const TensorSpec& a, const TensorSpec& b, int node_id) {
    // Only scalar-with-tensor broadcasting is allowed.
    if (a.is_scalar()) return b;
    if (b.is_scalar()) return a;
    if (a.shape != b.shape)
        shape_error(node_id, "operand shapes differ: " + a.to_string() + " vs " + b.to_string());
    return a;
}

TensorSpec infer_reshape(const TensorSpec& x, const AttrMap& attrs, int node_id) {
    if (auto shape = attr_int_list(attrs, "shape")) {
        TensorSpec out = x;
        out.shape = *shape;
        int infer_at = -1;
        std::int64_t prod = 1;
        for (std::size_t i = 0; i < out.shape.size(); ++i) {
            if (out.shape[i] == -1) {
                if (infer_at >= 0) shape_error(node_id, "reshape allows one -1 dim");
                infer_at = static_cast<int>(i);
            } else {
                prod *= out.shape[i];
            }
        }
        if (infer_at >= 0) {
            if (prod == 0 || x.element_count() % prod != 0)
                shape_error(node_id, "cannot infer -1 dim reshaping " + x.to_string());
            out.shape[infer_at] = x.element_count() / prod;
        }
        if (out.element_count() != x.element_count())
            shape_error(node_id, "reshape element count differs: " + x.to_string() + " -> " +
                                     out.to_string());
        return out;
    }
    if (auto split_axis = attr_int(attrs, "split_axis")) {
        auto factor = attr_int(attrs, "factor");
        if (!factor) shape_error(node_id, "reshape split_axis requires factor attr");
        int a = normalize_axis(*split_axis, x.rank(), node_id);
        if (x.shape[a] % *factor != 0)
            shape_error(node_id, "dim " + std::to_string(x.shape[a]) + " not divisible by factor " +
                                     std::to_string(*factor));
        TensorSpec out = x;
        out.shape[a] = x.shape[a] / *factor;
        out.shape.insert(out.shape.begin() + a + 1, *factor);
        return out;
    }
    if (auto merge = attr_int_list(attrs, "merge_axes")) {
        if (merge->size() != 2) shape_error(node_id, "merge_axes expects two adjacent axes");
        int a = normalize_axis((*merge)[0], x.rank(), node_id);
        int b = normalize_axis((*merge)[1], x.rank(), node_id);
        if (b != a + 1) shape_error(node_id, "merge_axes expects adjacent axes");
        TensorSpec out = x;
        out.shape[a] = x.shape[a] * x.shape[b];
        out.shape.erase(out.shape.begin() + b);
        return out;
    }
    shape_error(node_id, "reshape needs shape, split_axis or merge_axes attr");
}

TensorSpec infer_transpose(const TensorSpec& x, const AttrMap& attrs, int node_id) {
    if (auto perm = attr_int_list(attrs, "perm")) {
        if (static_cast<int>(perm->size()) != x.rank())
            shape_error(node_id, "perm length != rank of " + x.to_string());
        TensorSpec out = x;
        std::vector<bool> seen(x.rank(), false);
        for (int i = 0; i < x.rank(); ++i) {
            int p = normalize_axis((*perm)[i], x.rank(), node_id);
            if (seen[p]) shape_error(node_id, "perm repeats axis");
            seen[p] = true;
            out.shape[i] = x.shape[p];
        }
        return out;
    }
    std::vector<std::int64_t> axes = attr_int_list(attrs, "axes").value_or(std::vector<std::int64_t>{-2, -1});
    if (axes.size() != 2) shape_error(node_id, "transpose axes expects two entries");
    if (x.rank() < 2) shape_error(node_id, "transpose needs rank >= 2, got " + x.to_string());
    int a = normalize_axis(axes[0], x.rank(), node_id);
    int b = normalize_axis(axes[1], x.rank(), node_id);
    TensorSpec out = x;
    std::swap(out.shape[a], out.shape[b]);
    return out;
}

ValueSpec infer_split(const TensorSpec& x, const AttrMap& attrs, int node_id) {
    std::int64_t axis_raw = attr_int(attrs, "axis").value_or(-1);
    int axis = normalize_axis(axis_raw, x.rank(), node_id);
    std::vector<TensorSpec> parts;
    if (auto sizes = attr_int_list(attrs, "sizes")) {
        std::int64_t total = 0;
        for (auto s : *sizes) total += s;
        if (total != x.shape[axis])
            shape_error(node_id, "split sizes sum to " + std::to_string(total) + " but dim is " +
                                     std::to_string(x.shape[axis]));
        for (auto s : *sizes) {
            TensorSpec p = x;
            p.shape[axis] = s;
            parts.push_back(std::move(p));
        }
    } else if (auto n = attr_int(attrs, "parts")) {
        if (*n < 1 || x.shape[axis] % *n != 0)
            shape_error(node_id, "dim " + std::to_string(x.shape[axis]) +
                                     " not divisible into " + std::to_string(*n) + " parts");
        for (std::int64_t i = 0; i < *n; ++i) {
            TensorSpec p = x;
            p.shape[axis] = x.shape[axis] / *n;
            parts.push_back(std::move(p));
        }
    } else {
        shape_error(node_id, "split needs parts or sizes attr");
    }
    return ValueSpec::make_tuple(std::move(parts));
}

TensorSpec infer_concat(const std::vector<const ValueSpec*>& args, const AttrMap& attrs,
                        int node_id) {
    if (args.empty()) shape_error(node_id, "concat needs at least one operand");
    TensorSpec first = single_arg(args, 0, node_id);
    int axis = normalize_axis(attr_int(attrs, "axis").value_or(-1), first.rank(), node_id);
    TensorSpec out = first;
    for (std::size_t i = 1; i < args.size(); ++i) {
        const TensorSpec& s = single_arg(args, i, node_id);
        if (s.rank() != first.rank())
            shape_error(node_id, "concat rank mismatch: " + first.to_string() + " vs " + s.to_string());
        for (int d = 0; d < s.rank(); ++d) {
            if (d == axis) continue;
            if (s.shape[d] != first.shape[d])
                shape_error(node_id,
                            "concat shapes differ off-axis: " + first.to_string() + " vs " + s.to_string());
        }
        out.shape[axis] += s.shape[axis];
    }
    return out;
}

}  // namespace

ValueSpec infer_op(const std::string& op, const std::vector<const ValueSpec*>& args,
                   const AttrMap& attrs, int node_id) {
    if (op == "matmul") {
        return ValueSpec(infer_matmul(single_arg(args, 0, node_id), single_arg(args, 1, node_id),
                                      node_id));
    }
    if (op == "add" || op == "mul") {
        return ValueSpec(infer_elementwise_pair(single_arg(args, 0, node_id),
                                                single_arg(args, 1, node_id), node_id));
    }
    if (op == "scale" || op == "relu" || op == "gelu" || op == "dropout" || op == "all_reduce") {
        return ValueSpec(single_arg(args, 0, node_id));
    }
    if (op == "softmax" || op == "layernorm") {
        const TensorSpec& x = single_arg(args, 0, node_id);
        normalize_axis(attr_int(attrs, "axis").value_or(-1), std::max(x.rank(), 1), node_id);
        return ValueSpec(x);
    }
    if (op == "transpose") return ValueSpec(infer_transpose(single_arg(args, 0, node_id), attrs, node_id));
    if (op == "reshape") return ValueSpec(infer_reshape(single_arg(args, 0, node_id), attrs, node_id));
    if (op == "split") return infer_split(single_arg(args, 0, node_id), attrs, node_id);
    if (op == "concat") return ValueSpec(infer_concat(args, attrs, node_id));
    if (op == "reduce_sum") {
        const TensorSpec& x = single_arg(args, 0, node_id);
        TensorSpec out = x;
        if (auto axis = attr_int(attrs, "axis")) {
            int a = normalize_axis(*axis, x.rank(), node_id);
            out.shape.erase(out.shape.begin() + a);
        } else {
            out.shape.clear();
        }
        return ValueSpec(out);
    }
    if (op == "all_gather") {
        const TensorSpec& x = single_arg(args, 0, node_id);
        std::int64_t world = attr_int(attrs, "world").value_or(1);
        int axis = normalize_axis(attr_int(attrs, "axis").value_or(-1), x.rank(), node_id);
        TensorSpec out = x;
        out.shape[axis] *= world;
        return ValueSpec(out);
    }
    throw Error("unknown op '" + op + "' at node " + std::to_string(node_id));
}

int module_input_arity(const ModuleDef& module) {
    if (module.is_composite()) return static_cast<int>(module.forward->input_ids.size());
    if (module.kind == "EfficientAttention") return 3;
    return 1;
}

ValueSpec module_output_spec(const ModuleDef& module, const std::vector<TensorSpec>& inputs) {
    if (static_cast<int>(inputs.size()) != module_input_arity(module))
        throw Error("module '" + module.name + "' expects " +
                    std::to_string(module_input_arity(module)) + " inputs, got " +
                    std::to_string(inputs.size()));
    const std::string& k = module.kind;
    if (k == "Linear" || k == "FusedQKV") {
        const ParamDef* w = module.find_param("weight");
        if (!w) throw Error("module '" + module.name + "' missing weight param");
        const TensorSpec& x = inputs[0];
        // Out-major weight: (out_features, in_features); uses the worker-local spec.
        std::int64_t out_f = w->spec.shape[0];
        std::int64_t in_f = w->spec.shape[1];
        if (x.rank() < 1 || x.shape[x.rank() - 1] != in_f)
            throw Error("shape mismatch at module '" + module.name + "': input " + x.to_string() +
                        " does not match weight " + w->spec.to_string());
        TensorSpec out = x;
        out.shape[out.rank() - 1] = out_f;
        if (k == "Linear") return ValueSpec(out);
        if (out_f % 3 != 0)
            throw Error("FusedQKV weight rows must divide by 3, got " + std::to_string(out_f));
        TensorSpec part = out;
        part.shape[part.rank() - 1] = out_f / 3;
        return ValueSpec::make_tuple({part, part, part});
    }
    if (k == "LayerNorm") {
        const ParamDef* g = module.find_param("gamma");
        const TensorSpec& x = inputs[0];
        if (g && (x.rank() < 1 || x.shape[x.rank() - 1] != g->spec.shape[0]))
            throw Error("shape mismatch at module '" + module.name + "': input " + x.to_string() +
                        " does not match normalized size " + std::to_string(g->spec.shape[0]));
        return ValueSpec(x);
    }
    if (k == "Dropout") return ValueSpec(inputs[0]);
    if (k == "Embedding") {
        const ParamDef* w = module.find_param("weight");
        if (!w) throw Error("module '" + module.name + "' missing weight param");
        TensorSpec out = inputs[0];
        out.shape.push_back(w->spec.shape[1]);
        out.dtype = w->spec.dtype;
        return ValueSpec(out);
    }
    if (k == "EfficientAttention") {
        // (q, k, v) each (..., S, H) -> (..., S, H); head count divides H.
        if (inputs[0] != inputs[1] || inputs[0] != inputs[2])
            throw Error("shape mismatch at module '" + module.name + "': q/k/v specs differ: " +
                        inputs[0].to_string() + ", " + inputs[1].to_string() + ", " +
                        inputs[2].to_string());
        if (inputs[0].rank() < 2)
            throw Error("EfficientAttention expects rank >= 2 inputs, got " + inputs[0].to_string());
        return ValueSpec(inputs[0]);
    }
    // Composite: propagate through the forward graph.
    ShapeMap map = infer_shapes(*module.forward, inputs, module);
    const GraphNode& out = module.forward->output_node();
    if (out.args.size() == 1 && !map.at(out.args[0]).tuple) return map.at(out.args[0]);
    std::vector<TensorSpec> parts;
    for (int a : out.args) {
        const ValueSpec& v = map.at(a);
        if (v.tuple) throw Error("module '" + module.name + "' output flattens a tuple result");
        parts.push_back(v.parts[0]);
    }
    return ValueSpec::make_tuple(std::move(parts));
}

ShapeMap infer_shapes(const StaticGraph& graph, const std::vector<TensorSpec>& inputs,
                      const ModuleDef& ctx) {
    if (inputs.size() != graph.input_ids.size())
        throw Error("expected " + std::to_string(graph.input_ids.size()) + " inputs, got " +
                    std::to_string(inputs.size()));
    ShapeMap map;
    std::size_t next_input = 0;
    for (const auto& n : graph.nodes) {
        switch (n.kind) {
            case NodeKind::Input:
                map[n.id] = ValueSpec(inputs[next_input++]);
                break;
            case NodeKind::ParamRef: {
                const ParamDef* p = ctx.resolve_param(n.target);
                if (!p) throw Error("unknown param '" + n.target + "' at node " + std::to_string(n.id));
                map[n.id] = ValueSpec(p->spec);
                break;
            }
            case NodeKind::CallOp: {
                std::vector<const ValueSpec*> args;
                for (int a : n.args) args.push_back(&map.at(a));
                map[n.id] = infer_op(n.op, args, n.attrs, n.id);
                break;
            }
            case NodeKind::CallModule: {
                const ModuleDef* sub = ctx.resolve(n.target);
                if (!sub)
                    throw Error("unknown submodule '" + n.target + "' at node " + std::to_string(n.id));
                std::vector<TensorSpec> sub_inputs;
                for (int a : n.args) {
                    const ValueSpec& v = map.at(a);
                    if (v.tuple)
                        throw Error("shape mismatch at node " + std::to_string(n.id) +
                                    ": tuple passed as module input");
                    sub_inputs.push_back(v.parts[0]);
                }
                map[n.id] = module_output_spec(*sub, sub_inputs);
                break;
            }
            case NodeKind::GetItem: {
                const ValueSpec& v = map.at(n.args[0]);
                std::int64_t idx = attr_int(n.attrs, "index").value_or(0);
                if (!v.tuple || idx < 0 || idx >= static_cast<std::int64_t>(v.parts.size()))
                    throw Error("shape mismatch at node " + std::to_string(n.id) +
                                ": get_item index " + std::to_string(idx) + " invalid for " +
                                v.to_string());
                map[n.id] = ValueSpec(v.parts[idx]);
                break;
            }
            case NodeKind::Output: {
                std::vector<TensorSpec> parts;
                bool any_tuple = false;
                for (int a : n.args) {
                    const ValueSpec& v = map.at(a);
                    if (v.tuple) any_tuple = true;
                    for (const auto& p : v.parts) parts.push_back(p);
                }
                if (n.args.size() == 1 && !any_tuple)
                    map[n.id] = ValueSpec(parts[0]);
                else
                    map[n.id] = ValueSpec::make_tuple(std::move(parts));
                break;
            }
        }
    }
    return map;
}

std::vector<TensorSpec> declared_input_specs(const StaticGraph& graph) {
    std::vector<TensorSpec> specs;
    for (int id : graph.input_ids) {
        const GraphNode& n = graph.node(id);
        auto shape = attr_int_list(n.attrs, "shape");
        if (!shape)
            throw Error("input node " + std::to_string(id) + " has no declared shape");
        TensorSpec s;
        s.shape = *shape;
        s.dtype = dtype_from_name(attr_string(n.attrs, "dtype").value_or("f64"));
        specs.push_back(std::move(s));
    }
    return specs;
}

}  // namespace slapo
