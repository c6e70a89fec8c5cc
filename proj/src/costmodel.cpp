// SPDX-License-Identifier: Apache-2.0

#include "slapo/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "slapo/library.hpp"

namespace slapo {

namespace {

struct Accum {
    std::int64_t flops = 0;
    std::int64_t recompute_flops = 0;
    std::int64_t launches = 0;
    std::int64_t activation_bytes = 0;
    std::int64_t fwd_collective_wire = 0;   // ring wire bytes
    std::int64_t bwd_collective_wire = 0;
    std::int64_t param_bytes = 0;
};

std::int64_t ring_allreduce_wire(std::int64_t payload, int world) {
    if (world <= 1) return 0;
    return 2 * (world - 1) * payload / world;
}

std::int64_t ring_allgather_wire(std::int64_t gathered_payload, int world) {
    if (world <= 1) return 0;
    return (world - 1) * gathered_payload / world;
}

struct Walker {
    const EstimateOptions& opts;
    Accum acc;
    bool counting_activations = true;  // off inside checkpointed regions
    bool count_params = true;

    std::int64_t op_flops(const GraphNode& n, const std::vector<const ValueSpec*>& args,
                          const ValueSpec& out) {
        const std::string& op = n.op;
        if (op == "matmul") {
            const TensorSpec& a = args[0]->single();
            const TensorSpec& o = out.single();
            std::int64_t k = a.shape[a.rank() - 1];
            return 2 * o.element_count() * k;
        }
        if (op == "add" || op == "mul" || op == "scale" || op == "relu" || op == "gelu" ||
            op == "dropout")
            return out.single().element_count();
        if (op == "softmax") return 5 * out.single().element_count();
        if (op == "layernorm") return 8 * out.single().element_count();
        if (op == "reduce_sum") return args[0]->single().element_count();
        return 0;  // transpose/reshape/split/concat/collectives move data
    }

    void count_collective(const GraphNode& n, const std::vector<const ValueSpec*>& args,
                          const ValueSpec& out) {
        if (n.op == "all_reduce") {
            std::int64_t wire = ring_allreduce_wire(args[0]->byte_size(), opts.world_size);
            acc.fwd_collective_wire += wire;
            acc.bwd_collective_wire += wire;  // gradient all_reduce mirrors it
        } else if (n.op == "all_gather") {
            std::int64_t wire = ring_allgather_wire(out.byte_size(), opts.world_size);
            acc.fwd_collective_wire += wire;
            acc.bwd_collective_wire += wire;
        }
    }

    void add_params(const ModuleDef& m) {
        if (!count_params) return;
        for (const auto& p : m.params) acc.param_bytes += p.spec.byte_size();
        for (const auto& s : m.submodules) add_params(*s.module);
    }

    /// Returns output spec; accumulates flops/launches/bytes.
    ValueSpec walk_module(const ModuleDef& m, const std::vector<TensorSpec>& inputs) {
        bool checkpointed = attr_flag(m.attrs, "checkpoint") || m.kind == "EfficientAttention";
        if (attr_flag(m.attrs, "sync_backward") && opts.world_size > 1 && !inputs.empty()) {
            std::int64_t wire = ring_allreduce_wire(inputs[0].byte_size(), opts.world_size);
            acc.bwd_collective_wire += wire;
        }
        if (checkpointed && counting_activations) {
            // Region rule: retain boundary inputs and outputs, recompute internals.
            counting_activations = false;
            std::int64_t flops_before = acc.flops;
            ValueSpec out = walk_module_body(m, inputs);
            counting_activations = true;
            acc.recompute_flops += acc.flops - flops_before;
            for (const auto& in : inputs) acc.activation_bytes += in.byte_size();
            acc.activation_bytes += out.byte_size();
            return out;
        }
        return walk_module_body(m, inputs);
    }

    ValueSpec walk_module_body(const ModuleDef& m, const std::vector<TensorSpec>& inputs) {
        const std::string& k = m.kind;
        if (k == "Linear" || k == "FusedQKV") {
            ValueSpec out = module_output_spec(m, inputs);
            const ParamDef* w = m.find_param("weight");
            std::int64_t rows = inputs[0].element_count() / w->spec.shape[1];
            acc.flops += 2 * rows * w->spec.shape[0] * w->spec.shape[1];
            if (m.find_param("bias")) acc.flops += rows * w->spec.shape[0];
            acc.launches += 1;
            if (counting_activations) acc.activation_bytes += out.byte_size();
            return out;
        }
        if (k == "LayerNorm") {
            ValueSpec out = module_output_spec(m, inputs);
            acc.flops += 8 * out.single().element_count();
            acc.launches += 1;
            if (counting_activations) acc.activation_bytes += out.byte_size();
            return out;
        }
        if (k == "Dropout") {
            ValueSpec out = module_output_spec(m, inputs);
            acc.flops += out.single().element_count();
            acc.launches += 1;
            if (counting_activations) acc.activation_bytes += out.byte_size();
            return out;
        }
        if (k == "Embedding") {
            ValueSpec out = module_output_spec(m, inputs);
            acc.launches += 1;
            if (counting_activations) acc.activation_bytes += out.byte_size();
            return out;
        }
        if (k == "EfficientAttention") {
            // One fused kernel; flops follow its reference graph.
            std::int64_t head_dim = attr_int(m.attrs, "head_dim").value_or(1);
            ModuleDef ref = make_attention_core(head_dim, attr_double(m.attrs, "p").value_or(0.0),
                                                attr_int(m.attrs, "seed").value_or(0));
            bool saved = counting_activations;
            counting_activations = false;
            std::int64_t launches_before = acc.launches;
            ValueSpec out = walk_graph(*ref.forward, ref, inputs);
            acc.launches = launches_before + 1;
            counting_activations = saved;
            return out;
        }
        // Composite: fused composites count as one launch.
        bool fused = attr_flag(m.attrs, "fused");
        std::int64_t launches_before = acc.launches;
        ValueSpec out = walk_graph(*m.forward, m, inputs);
        if (fused) acc.launches = launches_before + 1;
        return out;
    }

    ValueSpec walk_graph(const StaticGraph& g, const ModuleDef& ctx,
                         const std::vector<TensorSpec>& inputs) {
        std::map<int, ValueSpec> env;
        std::size_t next_input = 0;
        ValueSpec result;
        for (const auto& n : g.nodes) {
            switch (n.kind) {
                case NodeKind::Input:
                    env[n.id] = ValueSpec(inputs[next_input++]);
                    break;
                case NodeKind::ParamRef: {
                    const ParamDef* p = ctx.resolve_param(n.target);
                    if (!p) throw Error("unknown param '" + n.target + "'");
                    env[n.id] = ValueSpec(p->spec);
                    break;
                }
                case NodeKind::CallOp: {
                    std::vector<const ValueSpec*> args;
                    for (int a : n.args) args.push_back(&env.at(a));
                    ValueSpec out = infer_op(n.op, args, n.attrs, n.id);
                    acc.flops += op_flops(n, args, out);
                    acc.launches += 1;
                    count_collective(n, args, out);
                    if (counting_activations) acc.activation_bytes += out.byte_size();
                    env[n.id] = std::move(out);
                    break;
                }
                case NodeKind::CallModule: {
                    const ModuleDef* sub = ctx.resolve(n.target);
                    if (!sub) throw Error("unknown submodule '" + n.target + "'");
                    std::vector<TensorSpec> sub_inputs;
                    for (int a : n.args) sub_inputs.push_back(env.at(a).single());
                    env[n.id] = walk_module(*sub, sub_inputs);
                    break;
                }
                case NodeKind::GetItem: {
                    const ValueSpec& v = env.at(n.args[0]);
                    std::int64_t idx = attr_int(n.attrs, "index").value_or(0);
                    env[n.id] = ValueSpec(v.parts.at(static_cast<std::size_t>(idx)));
                    break;
                }
                case NodeKind::Output: {
                    std::vector<TensorSpec> parts;
                    bool any_tuple = false;
                    for (int a : n.args) {
                        const ValueSpec& v = env.at(a);
                        if (v.tuple) any_tuple = true;
                        for (const auto& p : v.parts) parts.push_back(p);
                    }
                    if (n.args.size() == 1 && !any_tuple)
                        result = ValueSpec(parts[0]);
                    else
                        result = ValueSpec::make_tuple(parts);
                    break;
                }
            }
        }
        return result;
    }
};

std::vector<TensorSpec> batched_inputs(const StaticGraph& g, std::int64_t batch) {
    std::vector<TensorSpec> specs = declared_input_specs(g);
    if (batch > 0) {
        for (auto& s : specs) {
            if (s.rank() < 1)
                throw Error("cannot apply batch override to scalar input");
            s.shape[0] = batch;
        }
    }
    return specs;
}

CostReport finish(const Accum& acc, std::int64_t batch_rows, const EstimateOptions& opts) {
    CostReport r;
    r.flops = acc.flops;
    r.recompute_flops = acc.recompute_flops;
    r.launches = acc.launches;
    r.collective_bytes = acc.fwd_collective_wire + acc.bwd_collective_wire;
    r.param_bytes = acc.param_bytes;
    r.activation_bytes = acc.activation_bytes;

    const CostConstants& c = opts.constants;
    double fwd = static_cast<double>(acc.flops) / c.device_flops_per_s +
                 static_cast<double>(acc.launches) * c.kernel_launch_overhead_s;
    double bwd = static_cast<double>(2 * acc.flops + acc.recompute_flops) / c.device_flops_per_s +
                 static_cast<double>(2 * acc.launches) * c.kernel_launch_overhead_s;
    double comm = static_cast<double>(r.collective_bytes) / c.link_bytes_per_s;
    r.step_time_s = fwd + bwd + comm;

    double grads = static_cast<double>(acc.param_bytes);
    r.peak_memory_bytes = acc.param_bytes +
                          static_cast<std::int64_t>(c.optimizer_state_multiplier * grads) +
                          static_cast<std::int64_t>(grads) + acc.activation_bytes;
    r.oom = r.peak_memory_bytes > opts.device_memory_bytes;
    r.throughput_samples_per_s =
        r.oom ? 0.0 : static_cast<double>(batch_rows) / std::max(r.step_time_s, 1e-30);
    return r;
}

}  // namespace

CostReport estimate(const ModuleDef& model, const EstimateOptions& opts) {
    if (!model.forward) throw Error("estimate needs a composite root");
    Walker w{opts, {}, true, true};
    w.add_params(model);
    std::vector<TensorSpec> inputs = batched_inputs(*model.forward, opts.batch);
    w.walk_graph(*model.forward, model, inputs);
    std::int64_t rows = inputs.empty() || inputs[0].rank() < 1 ? 1 : inputs[0].shape[0];
    return finish(w.acc, rows, opts);
}

CostReport estimate_pipeline(const PipelineStagePlan& plan, const EstimateOptions& opts) {
    int m = std::max(opts.micro_batches, 1);
    std::int64_t s = static_cast<std::int64_t>(plan.stages.size());
    CostReport total;
    double max_stage_time = 0.0;
    std::int64_t batch_rows = 0;
    for (const auto& stage : plan.stages) {
        Walker w{opts, {}, true, true};
        w.add_params(stage.module);
        std::vector<TensorSpec> inputs = declared_input_specs(*stage.module.forward);
        if (opts.batch > 0) {
            for (auto& sp : inputs) sp.shape[0] = opts.batch;
        }
        if (batch_rows == 0 && !inputs.empty()) batch_rows = inputs[0].shape[0];
        for (auto& sp : inputs) {
            if (sp.shape[0] % m != 0)
                throw Error("batch dimension " + std::to_string(sp.shape[0]) +
                            " not divisible into " + std::to_string(m) + " micro-batches");
            sp.shape[0] /= m;
        }
        w.walk_graph(*stage.module.forward, stage.module, inputs);
        CostReport sr = finish(w.acc, 1, opts);
        total.flops += sr.flops * m;
        total.recompute_flops += sr.recompute_flops * m;
        total.launches += sr.launches * m;
        total.collective_bytes += sr.collective_bytes * m;
        total.param_bytes += sr.param_bytes;
        total.activation_bytes += sr.activation_bytes * m;
        max_stage_time = std::max(max_stage_time, sr.step_time_s);
        // GPipe keeps activations of all in-flight micro-batches on each stage.
        std::int64_t stage_mem =
            sr.param_bytes +
            static_cast<std::int64_t>(opts.constants.optimizer_state_multiplier *
                                      static_cast<double>(sr.param_bytes)) +
            sr.param_bytes + sr.activation_bytes * m;
        total.peak_memory_bytes = std::max(total.peak_memory_bytes, stage_mem);
        if (stage_mem > opts.device_memory_bytes) total.oom = true;
    }
    total.step_time_s = static_cast<double>(m + s - 1) * max_stage_time;
    total.throughput_samples_per_s =
        total.oom ? 0.0
                  : static_cast<double>(batch_rows) / std::max(total.step_time_s, 1e-30);
    return total;
}

int apply_checkpoint_ratio(ModuleDef& model, const std::string& container, double ratio) {
    ModuleDef* c = model.resolve(container);
    if (!c) throw Error("unknown module path '" + container + "'");
    int layers = static_cast<int>(c->submodules.size());
    int count = static_cast<int>(std::floor(ratio * layers));
    count = std::clamp(count, 0, layers);
    for (int i = 0; i < layers; ++i) {
        if (i < count)
            c->submodules[i].module->attrs["checkpoint"] = std::int64_t(1);
        else
            c->submodules[i].module->attrs.erase("checkpoint");
    }
    return count;
}

std::string CostReport::to_text() const {
    std::ostringstream oss;
    oss << "step_time_s           " << step_time_s << "\n";
    oss << "flops                 " << flops << "\n";
    oss << "recompute_flops       " << recompute_flops << "\n";
    oss << "launches              " << launches << "\n";
    oss << "collective_bytes      " << collective_bytes << "\n";
    oss << "param_bytes           " << param_bytes << "\n";
    oss << "activation_bytes      " << activation_bytes << "\n";
    oss << "peak_memory_bytes     " << peak_memory_bytes << "\n";
    oss << "oom                   " << (oom ? "true" : "false") << "\n";
    oss << "throughput_samples_s  " << throughput_samples_per_s << "\n";
    return oss.str();
}

}  // namespace slapo
