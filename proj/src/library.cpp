// SPDX-License-Identifier: Apache-2.0

#include "slapo/library.hpp"

#include <cmath>

namespace slapo {

ModuleDef make_attention_core(std::int64_t head_dim, double dropout_p, std::uint64_t seed) {
    ModuleDef core;
    core.kind = "composite";
    core.attrs["head_dim"] = head_dim;
    core.attrs["p"] = dropout_p;
    core.attrs["seed"] = static_cast<std::int64_t>(seed);
    double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    GraphBuilder b;
    int q = b.input(), k = b.input(), v = b.input();
    auto heads = [&](int x) {
        int s = b.call_op("reshape", {x}, {{"split_axis", std::int64_t(2)}, {"factor", head_dim}});
        return b.call_op("transpose", {s}, {{"perm", std::vector<std::int64_t>{0, 2, 1, 3}}});
    };
    int qh = heads(q), kh = heads(k), vh = heads(v);
    int kt = b.call_op("transpose", {kh}, {{"axes", std::vector<std::int64_t>{-2, -1}}});
    int scores = b.call_op("matmul", {qh, kt});
    int scaled = b.call_op("scale", {scores}, {{"factor", scale}});
    int attn = b.call_op("softmax", {scaled}, {{"axis", std::int64_t(-1)}});
    int dropped = b.call_op("dropout", {attn}, {{"p", dropout_p}, {"seed", static_cast<std::int64_t>(seed)}});
    int ctx = b.call_op("matmul", {dropped, vh});
    int back = b.call_op("transpose", {ctx}, {{"perm", std::vector<std::int64_t>{0, 2, 1, 3}}});
    int merged = b.call_op("reshape", {back}, {{"merge_axes", std::vector<std::int64_t>{2, 3}}});
    core.forward = b.output({merged});
    return core;
}

ModuleDef make_qkv_composite(std::int64_t hidden, std::uint64_t seed) {
    ModuleDef qkv;
    qkv.kind = "composite";
    qkv.add_submodule("query", make_linear(hidden, hidden, true, seed));
    qkv.add_submodule("key", make_linear(hidden, hidden, true, seed + 10));
    qkv.add_submodule("value", make_linear(hidden, hidden, true, seed + 20));
    GraphBuilder b;
    int x = b.input();
    int q = b.call_module("query", {x});
    int k = b.call_module("key", {x});
    int v = b.call_module("value", {x});
    qkv.forward = b.output({q, k, v});
    return qkv;
}

ModuleDef build_fused_qkv(const ModuleDef& old_qkv) {
    std::vector<const ModuleDef*> linears;
    for (const auto& s : old_qkv.submodules) {
        if (s.module->kind == "Linear") linears.push_back(s.module);
    }
    if (linears.size() != 3)
        throw Error("FusedQKV replacement expects a composite with exactly three Linear "
                    "submodules, found " + std::to_string(linears.size()));
    const ParamDef* w0 = linears[0]->find_param("weight");
    std::int64_t out_f = w0->spec.shape[0];
    std::int64_t in_f = w0->spec.shape[1];
    bool bias = linears[0]->find_param("bias") != nullptr;
    for (const ModuleDef* l : linears) {
        const ParamDef* w = l->find_param("weight");
        if (w->spec.shape != w0->spec.shape || w->init != w0->init)
            throw Error("FusedQKV replacement requires identically shaped and initialized Linears");
        if ((l->find_param("bias") != nullptr) != bias)
            throw Error("FusedQKV replacement requires consistent bias usage");
        if (w->shard) throw Error("fuse the QKV weights before sharding, not after");
    }

    ModuleDef fused;
    fused.kind = "FusedQKV";
    fused.attrs["in_features"] = in_f;
    fused.attrs["out_features"] = out_f * 3;
    ParamDef w;
    w.name = "weight";
    w.spec.shape = {out_f * 3, in_f};
    w.spec.dtype = w0->spec.dtype;
    w.init = w0->init;
    w.seed = w0->seed;
    for (const ModuleDef* l : linears) w.block_seeds.push_back(l->find_param("weight")->seed);
    fused.params.push_back(std::move(w));
    if (bias) {
        const ParamDef* b0 = linears[0]->find_param("bias");
        ParamDef b;
        b.name = "bias";
        b.spec.shape = {out_f * 3};
        b.spec.dtype = b0->spec.dtype;
        b.init = b0->init;
        b.seed = b0->seed;
        for (const ModuleDef* l : linears) b.block_seeds.push_back(l->find_param("bias")->seed);
        fused.params.push_back(std::move(b));
    }
    return fused;
}

bool has_library_module(const std::string& name) {
    return name == "FusedQKV" || name == "EfficientAttention";
}

ModuleDef build_library_module(const std::string& name, const ModuleDef& old_module) {
    if (name == "FusedQKV") return build_fused_qkv(old_module);
    if (name == "EfficientAttention") {
        auto head_dim = attr_int(old_module.attrs, "head_dim");
        if (!head_dim)
            throw Error("EfficientAttention replacement requires a head_dim attr on the "
                        "replaced module");
        ModuleDef ea;
        ea.kind = "EfficientAttention";
        ea.attrs = old_module.attrs;
        return ea;
    }
    throw Error("unknown library module '" + name + "'");
}

}  // namespace slapo
