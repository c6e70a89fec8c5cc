// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "slapo/model_io.hpp"
#include "slapo/shape_inference.hpp"
#include "support/fixtures.hpp"

using namespace slapo;
using namespace slapo::testing;

TEST_CASE("tensor spec counts elements and bytes") {
    TensorSpec s;
    s.shape = {3, 4};
    s.dtype = Dtype::F32;
    CHECK(s.element_count() == 12);
    CHECK(s.byte_size() == 48);
    s.dtype = Dtype::F64;
    CHECK(s.byte_size() == 96);
    TensorSpec scalar;
    CHECK(scalar.rank() == 0);
    CHECK(scalar.element_count() == 1);
    TensorSpec bad;
    bad.shape = {2, 0};
    CHECK_THROWS_AS(validate_spec(bad), Error);
}

TEST_CASE("toy bert loads, validates, and round-trips") {
    ModuleDef model = toy_bert();
    std::string text = save_model(model);
    ModuleDef reloaded = load_model(text);
    CHECK(modules_structurally_equal(model, reloaded));

    // Serialize -> load -> serialize is byte-stable.
    CHECK(save_model(reloaded) == text);

    std::vector<std::string> roots;
    for (const auto& s : reloaded.submodules) roots.push_back(s.name);
    CHECK(roots == std::vector<std::string>{"embeddings", "encoder", "pooler"});
    CHECK(reloaded.resolve("encoder.layer")->submodules.size() == 24);
}

TEST_CASE("declared linear weight shape echoes through load") {
    std::string text = R"({
      "format": "slapo-model-v1",
      "name": "tiny",
      "modules": {
        "kind": "composite",
        "submodules": {
          "proj": {
            "kind": "Linear",
            "attrs": {"in_features": 2, "out_features": 4},
            "params": [
              {"name": "weight", "shape": [4, 2], "dtype": "f64", "init": "normal", "seed": 1}
            ]
          }
        },
        "forward": [
          {"id": 0, "kind": "input"},
          {"id": 1, "kind": "call_module", "target": "proj", "args": [0]},
          {"id": 2, "kind": "output", "args": [1]}
        ]
      }
    })";
    ModuleDef m = load_model(text);
    const ParamDef* w = m.resolve("proj")->find_param("weight");
    REQUIRE(w != nullptr);
    CHECK(w->spec.shape == std::vector<std::int64_t>{4, 2});
}

TEST_CASE("references to undeclared submodules fail") {
    std::string text = R"({
      "format": "slapo-model-v1",
      "name": "broken",
      "modules": {
        "kind": "composite",
        "forward": [
          {"id": 0, "kind": "input"},
          {"id": 1, "kind": "call_module", "target": "qkv", "args": [0]},
          {"id": 2, "kind": "output", "args": [1]}
        ]
      }
    })";
    CHECK_THROWS_WITH_AS(load_model(text), doctest::Contains("unknown submodule"), Error);
}

TEST_CASE("parse errors carry line and column") {
    std::string text = "{\n  \"format\": \"slapo-model-v1\",\n  broken\n}";
    try {
        load_model(text);
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        CHECK(std::string(e.what()).find("column") != std::string::npos);
    }
}

TEST_CASE("duplicate names are rejected") {
    ModuleDef m;
    m.kind = "composite";
    m.add_submodule("a", make_linear(2, 2, false, 1));
    CHECK_THROWS_AS(m.add_submodule("a", make_linear(2, 2, false, 2)), Error);

    ModuleDef p;
    p.kind = "Linear";
    ParamDef w;
    w.name = "weight";
    w.spec.shape = {2, 2};
    p.params.push_back(w);
    p.params.push_back(w);
    CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("duplicate param"), Error);
}

TEST_CASE("exactly six node kinds exist and a seventh is rejected") {
    const char* names[] = {"input", "param_ref", "call_module", "call_op", "get_item", "output"};
    for (const char* n : names) CHECK(node_kind_name(node_kind_from_name(n)) == std::string(n));
    CHECK_THROWS_AS(node_kind_from_name("call_function"), Error);
    CHECK_THROWS_AS(node_kind_from_name("placeholder"), Error);

    // Loader fuzz: mangle the kind of each node in a valid file; the loader
    // must reject every unknown kind rather than construct a seventh.
    std::string text = save_model(toy_bert(BertConfig{.layers = 1}));
    std::size_t pos = text.find("\"kind\": \"call_op\"");
    REQUIRE(pos != std::string::npos);
    std::string mangled = text;
    mangled.replace(pos, 17, "\"kind\": \"call_fn\"");
    CHECK_THROWS_AS(load_model(mangled), Error);
}

TEST_CASE("resolve_paths expands globs deterministically") {
    ModuleDef model = toy_bert();
    std::vector<std::string> attn = resolve_paths(model, "encoder.layer.*.attention");
    CHECK(attn.size() == 24);
    // Lexicographic: "10" sorts before "2".
    CHECK(attn[0] == "encoder.layer.0.attention");
    CHECK(attn[1] == "encoder.layer.1.attention");
    CHECK(attn[2] == "encoder.layer.10.attention");

    CHECK(resolve_paths(model, "pooler") == std::vector<std::string>{"pooler"});
    CHECK(resolve_paths(model, "encoder.layer.99.*").empty());
    // ** spans any depth.
    std::vector<std::string> cores = resolve_paths(model, "**.core");
    CHECK(cores.size() == 24);
    CHECK(resolve_paths(model, "encoder.**").size() > 24);
}

TEST_CASE("shape inference: linear, concat, matmul mismatch") {
    ModuleDef root;
    root.kind = "composite";
    root.add_submodule("proj", make_linear(2, 4, true, 1));
    GraphBuilder b;
    int x = b.input();
    int y = b.call_module("proj", {x});
    root.forward = b.output({y});
    TensorSpec in;
    in.shape = {1, 2};
    ShapeMap m = infer_shapes(*root.forward, {in}, root);
    CHECK(m.at(1).single().shape == std::vector<std::int64_t>{1, 4});

    // concat of three (B, H) along axis 1 -> (B, 3H), the fused-QKV shape.
    ValueSpec bh{TensorSpec{{3, 8}, Dtype::F64}};
    std::vector<const ValueSpec*> args = {&bh, &bh, &bh};
    ValueSpec out = infer_op("concat", args, AttrMap{{"axis", std::int64_t(1)}}, 0);
    CHECK(out.single().shape == std::vector<std::int64_t>{3, 24});

    ValueSpec a{TensorSpec{{1, 3}, Dtype::F64}};
    ValueSpec c{TensorSpec{{2, 5}, Dtype::F64}};
    std::vector<const ValueSpec*> mm = {&a, &c};
    try {
        infer_op("matmul", mm, {}, 7);
        FAIL("expected shape mismatch");
    } catch (const Error& e) {
        std::string msg = e.what();
        CHECK(msg.find("shape mismatch at node 7") != std::string::npos);
        CHECK(msg.find("(1,3)") != std::string::npos);
        CHECK(msg.find("(2,5)") != std::string::npos);
    }
}

TEST_CASE("shape inference is deterministic and total on the fixture") {
    ModuleDef model = toy_bert(BertConfig{.layers = 2});
    std::vector<TensorSpec> inputs = declared_input_specs(*model.forward);
    ShapeMap a = infer_shapes(*model.forward, inputs, model);
    ShapeMap b = infer_shapes(*model.forward, inputs, model);
    REQUIRE(a.size() == b.size());
    for (const auto& [id, spec] : a) CHECK(b.at(id) == spec);
    for (const auto& n : model.forward->nodes) CHECK(a.count(n.id) == 1);
}

TEST_CASE("graph builder enforces SSA and single output") {
    StaticGraph g;
    GraphNode n;
    n.id = 0;
    n.kind = NodeKind::CallOp;
    n.op = "relu";
    n.args = {5};  // forward reference
    g.nodes.push_back(n);
    CHECK_THROWS_AS(g.validate(), Error);
}
