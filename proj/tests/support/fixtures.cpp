// SPDX-License-Identifier: Apache-2.0

#include "support/fixtures.hpp"

#include "slapo/library.hpp"

namespace slapo::testing {

namespace {

ModuleDef bert_output_block(std::int64_t hidden, double p, std::uint64_t seed) {
    ModuleDef out;
    out.kind = "composite";
    out.add_submodule("dense", make_linear(hidden, hidden, true, seed));
    out.add_submodule("dropout", make_dropout(p, seed + 1));
    out.add_submodule("norm", make_layernorm(hidden, 1e-5, seed + 2));
    GraphBuilder b;
    int ctx = b.input();
    int residual = b.input();
    int dense = b.call_module("dense", {ctx});
    int drop = b.call_module("dropout", {dense});
    int sum = b.call_op("add", {drop, residual});
    int norm = b.call_module("norm", {sum});
    out.forward = b.output({norm});
    return out;
}

ModuleDef bert_attention(const BertConfig& cfg, std::uint64_t seed) {
    ModuleDef attn;
    attn.kind = "composite";
    attn.add_submodule("qkv", make_qkv_composite(cfg.hidden, seed));
    attn.add_submodule("core",
                       make_attention_core(cfg.hidden / cfg.heads, cfg.dropout_p, seed + 40));
    attn.add_submodule("output", bert_output_block(cfg.hidden, cfg.dropout_p, seed + 50));
    GraphBuilder b;
    int x = b.input();
    int qkv = b.call_module("qkv", {x});
    int q = b.get_item(qkv, 0);
    int k = b.get_item(qkv, 1);
    int v = b.get_item(qkv, 2);
    int ctx = b.call_module("core", {q, k, v});
    int out = b.call_module("output", {ctx, x});
    attn.forward = b.output({out});
    return attn;
}

ModuleDef bert_ffn(const BertConfig& cfg, std::uint64_t seed) {
    ModuleDef ffn;
    ffn.kind = "composite";
    ffn.add_submodule("dense1", make_linear(cfg.hidden, 4 * cfg.hidden, true, seed));
    ffn.add_submodule("dense2", make_linear(4 * cfg.hidden, cfg.hidden, true, seed + 10));
    ffn.add_submodule("norm", make_layernorm(cfg.hidden, 1e-5, seed + 20));
    GraphBuilder b;
    int x = b.input();
    int h1 = b.call_module("dense1", {x});
    int act = b.call_op("gelu", {h1});
    int h2 = b.call_module("dense2", {act});
    int sum = b.call_op("add", {h2, x});
    int norm = b.call_module("norm", {sum});
    ffn.forward = b.output({norm});
    return ffn;
}

ModuleDef bert_layer(const BertConfig& cfg, std::uint64_t seed) {
    ModuleDef layer;
    layer.kind = "composite";
    layer.add_submodule("attention", bert_attention(cfg, seed));
    layer.add_submodule("ffn", bert_ffn(cfg, seed + 100));
    GraphBuilder b;
    int x = b.input();
    int a = b.call_module("attention", {x});
    int f = b.call_module("ffn", {a});
    layer.forward = b.output({f});
    return layer;
}

}  // namespace

ModuleDef toy_bert(const BertConfig& cfg) {
    ModuleDef root;
    root.name = "toy_bert";
    root.kind = "composite";
    root.add_submodule("embeddings", make_embedding(cfg.vocab, cfg.hidden, 7));

    ModuleDef layer_container;
    layer_container.kind = "composite";
    {
        GraphBuilder b;
        int x = b.input();
        int prev = x;
        for (int i = 0; i < cfg.layers; ++i)
            prev = b.call_module(std::to_string(i), {prev});
        layer_container.forward = b.output({prev});
    }
    for (int i = 0; i < cfg.layers; ++i) {
        layer_container.add_submodule(std::to_string(i),
                                      bert_layer(cfg, 1000 + 977 * static_cast<std::uint64_t>(i)));
    }

    ModuleDef encoder;
    encoder.kind = "composite";
    encoder.add_submodule("layer", std::move(layer_container));
    {
        GraphBuilder b;
        int x = b.input();
        int out = b.call_module("layer", {x});
        encoder.forward = b.output({out});
    }
    root.add_submodule("encoder", std::move(encoder));

    ModuleDef pooler;
    pooler.kind = "composite";
    pooler.add_submodule("dense", make_linear(cfg.hidden, cfg.hidden, true, 31));
    {
        GraphBuilder b;
        int x = b.input();
        int d = b.call_module("dense", {x});
        int g = b.call_op("gelu", {d});
        pooler.forward = b.output({g});
    }
    root.add_submodule("pooler", std::move(pooler));

    GraphBuilder b;
    int ids = b.input(AttrMap{{"shape", std::vector<std::int64_t>{cfg.batch, cfg.seq}},
                              {"dtype", std::string("f64")}});
    int emb = b.call_module("embeddings", {ids});
    int hidden = b.call_module("encoder", {emb});
    int sum = b.call_op("add", {hidden, emb});  // residual: embeddings feed the pooler too
    int pooled = b.call_module("pooler", {sum});
    root.forward = b.output({pooled});
    root.validate();
    return root;
}

ModuleDef tp_two_linear(std::int64_t hidden, std::int64_t inner, std::int64_t batch) {
    ModuleDef root;
    root.name = "tp_two_linear";
    root.kind = "composite";
    root.add_submodule("a", make_linear(hidden, inner, true, 11));
    root.add_submodule("b", make_linear(inner, hidden, true, 13));
    GraphBuilder b;
    int x = b.input(AttrMap{{"shape", std::vector<std::int64_t>{batch, hidden}},
                            {"dtype", std::string("f64")}});
    int h = b.call_module("a", {x});
    int act = b.call_op("gelu", {h});
    int out = b.call_module("b", {act});
    root.forward = b.output({out});
    root.validate();
    return root;
}

ModuleDef fig3c_exact() {
    ModuleDef root;
    root.name = "fig3c";
    root.kind = "composite";
    ModuleDef wa = make_linear(2, 4, false, 0);
    wa.find_param("weight")->values = {1, 0, 0, 1, 1, 1, -1, 0};
    ModuleDef wb = make_linear(4, 2, false, 0);
    wb.find_param("weight")->values = {1, 0, 0, 0, 0, 1, 0, 1};
    root.add_submodule("wa", std::move(wa));
    root.add_submodule("wb", std::move(wb));
    GraphBuilder b;
    int x = b.input(AttrMap{{"shape", std::vector<std::int64_t>{1, 2}},
                            {"dtype", std::string("f64")}});
    int h = b.call_module("wa", {x});
    int act = b.call_op("relu", {h});
    int out = b.call_module("wb", {act});
    root.forward = b.output({out});
    root.validate();
    return root;
}

ModuleDef ffn_stack(int n, std::int64_t hidden, std::int64_t batch) {
    ModuleDef root;
    root.name = "ffn_stack";
    root.kind = "composite";
    for (int i = 0; i < n; ++i)
        root.add_submodule("lin" + std::to_string(i),
                           make_linear(hidden, hidden, true, 500 + static_cast<std::uint64_t>(i)));
    GraphBuilder b;
    int prev = b.input(AttrMap{{"shape", std::vector<std::int64_t>{batch, hidden}},
                               {"dtype", std::string("f64")}});
    for (int i = 0; i < n; ++i) {
        int lin = b.call_module("lin" + std::to_string(i), {prev});
        prev = b.call_op("gelu", {lin});
    }
    root.forward = b.output({prev});
    root.validate();
    return root;
}

StaticGraph linear_gelu_pattern() {
    GraphBuilder b;
    int x = b.input();
    int lin = b.call_module("Linear", {x});
    int act = b.call_op("gelu", {lin});
    return b.output({act});
}

}  // namespace slapo::testing
