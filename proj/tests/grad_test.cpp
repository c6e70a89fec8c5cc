// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "slapo/executor.hpp"
#include "slapo/library.hpp"
#include "slapo/shape_inference.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace slapo;
using namespace slapo::testing;

namespace {

ModuleDef op_model(const std::string& op, const std::vector<TensorSpec>& inputs,
                   AttrMap attrs = {}) {
    ModuleDef root;
    root.kind = "composite";
    GraphBuilder b;
    std::vector<int> ins;
    for (const auto& spec : inputs) {
        AttrMap a;
        a["shape"] = spec.shape;
        a["dtype"] = std::string(dtype_name(spec.dtype));
        ins.push_back(b.input(a));
    }
    int y = b.call_op(op, ins, std::move(attrs));
    root.forward = b.output({y});
    return root;
}

std::vector<TensorValue> gen_inputs(const ModuleDef& m, std::uint64_t seed, bool nudge = false) {
    std::vector<TensorValue> out;
    auto specs = declared_input_specs(*m.forward);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        TensorValue t = random_tensor(specs[i], seed, i);
        if (nudge) {
            // keep relu/split-style kinks away from the FD step
            for (auto& v : t.data) v += (v >= 0 ? 0.2 : -0.2);
        }
        out.push_back(std::move(t));
    }
    return out;
}

void check_op_gradients(const ModuleDef& m, ExecMode mode = ExecMode::Verify,
                        bool nudge = false) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        FdReport rep = finite_difference_check(m, gen_inputs(m, 1000 + s, nudge), mode, 5);
        CHECK(rep.checked > 0);
        CHECK(rep.max_rel_err < 1e-4);
    }
}

}  // namespace

TEST_CASE("d/dW of sum(X W^T) puts the input row in every weight row") {
    ModuleDef root;
    root.kind = "composite";
    ModuleDef lin = make_linear(2, 3, false, 0);
    lin.find_param("weight")->values = {1, 2, 3, 4, 5, 6};
    root.add_submodule("proj", std::move(lin));
    GraphBuilder b;
    int x = b.input(AttrMap{{"shape", std::vector<std::int64_t>{1, 2}},
                            {"dtype", std::string("f64")}});
    int y = b.call_module("proj", {x});
    root.forward = b.output({y});

    TensorValue X(TensorSpec{{1, 2}, Dtype::F64}, {1, 2});
    GradientMap g = run_backward(root, {X}, ExecMode::Verify, 0);
    CHECK(g.params.at("proj.weight").data == std::vector<double>{1, 2, 1, 2, 1, 2});
}

TEST_CASE("finite differences agree with reverse mode for every builtin op") {
    TensorSpec s23{{2, 3}, Dtype::F64};
    TensorSpec s32{{3, 2}, Dtype::F64};
    TensorSpec s24{{2, 4}, Dtype::F64};
    TensorSpec scalar{{}, Dtype::F64};

    SUBCASE("matmul") { check_op_gradients(op_model("matmul", {s23, s32})); }
    SUBCASE("batched matmul") {
        check_op_gradients(op_model("matmul", {TensorSpec{{2, 2, 3}, Dtype::F64},
                                               TensorSpec{{2, 3, 2}, Dtype::F64}}));
    }
    SUBCASE("add") { check_op_gradients(op_model("add", {s23, s23})); }
    SUBCASE("add scalar") { check_op_gradients(op_model("add", {s23, scalar})); }
    SUBCASE("mul") { check_op_gradients(op_model("mul", {s23, s23})); }
    SUBCASE("mul scalar") { check_op_gradients(op_model("mul", {scalar, s23})); }
    SUBCASE("scale") { check_op_gradients(op_model("scale", {s23}, {{"factor", 1.7}})); }
    SUBCASE("relu") { check_op_gradients(op_model("relu", {s23}), ExecMode::Verify, true); }
    SUBCASE("gelu") { check_op_gradients(op_model("gelu", {s23})); }
    SUBCASE("softmax last axis") {
        check_op_gradients(op_model("softmax", {s23}, {{"axis", std::int64_t(-1)}}));
    }
    SUBCASE("softmax axis 0") {
        check_op_gradients(op_model("softmax", {s23}, {{"axis", std::int64_t(0)}}));
    }
    SUBCASE("layernorm") {
        check_op_gradients(op_model("layernorm", {s23}, {{"eps", 1e-5}}));
    }
    SUBCASE("dropout train mode") {
        check_op_gradients(op_model("dropout", {s23}, {{"p", 0.3}, {"seed", std::int64_t(4)}}),
                           ExecMode::Train);
    }
    SUBCASE("transpose") {
        check_op_gradients(op_model("transpose", {s23}, {{"axes", std::vector<std::int64_t>{-2, -1}}}));
    }
    SUBCASE("transpose perm") {
        check_op_gradients(op_model("transpose", {TensorSpec{{2, 3, 4}, Dtype::F64}},
                                    {{"perm", std::vector<std::int64_t>{1, 0, 2}}}));
    }
    SUBCASE("reshape") {
        check_op_gradients(op_model("reshape", {s23}, {{"shape", std::vector<std::int64_t>{3, 2}}}));
    }
    SUBCASE("reshape split_axis") {
        check_op_gradients(op_model("reshape", {s24},
                                    {{"split_axis", std::int64_t(1)}, {"factor", std::int64_t(2)}}));
    }
    SUBCASE("concat") {
        check_op_gradients(op_model("concat", {s23, s23}, {{"axis", std::int64_t(0)}}));
    }
    SUBCASE("reduce_sum all") { check_op_gradients(op_model("reduce_sum", {s23})); }
    SUBCASE("reduce_sum axis") {
        check_op_gradients(op_model("reduce_sum", {s23}, {{"axis", std::int64_t(1)}}));
    }
    SUBCASE("all_reduce single worker") { check_op_gradients(op_model("all_reduce", {s23})); }
    SUBCASE("all_gather single worker") {
        check_op_gradients(op_model("all_gather", {s23},
                                    {{"axis", std::int64_t(0)}, {"world", std::int64_t(1)}}));
    }
    SUBCASE("split and get_item") {
        ModuleDef root;
        root.kind = "composite";
        GraphBuilder b;
        int x = b.input(AttrMap{{"shape", std::vector<std::int64_t>{2, 4}},
                                {"dtype", std::string("f64")}});
        int sp = b.call_op("split", {x}, {{"axis", std::int64_t(-1)}, {"parts", std::int64_t(2)}});
        int lo = b.get_item(sp, 0);
        int hi = b.get_item(sp, 1);
        int y = b.call_op("mul", {lo, hi});
        root.forward = b.output({y});
        check_op_gradients(root);
    }
}

TEST_CASE("finite differences agree for builtin modules") {
    auto wrap = [](ModuleDef sub, std::vector<std::int64_t> in_shape) {
        ModuleDef root;
        root.kind = "composite";
        root.add_submodule("m", std::move(sub));
        GraphBuilder b;
        int x = b.input(AttrMap{{"shape", in_shape}, {"dtype", std::string("f64")}});
        int y = b.call_module("m", {x});
        root.forward = b.output({y});
        return root;
    };
    SUBCASE("Linear") { check_op_gradients(wrap(make_linear(3, 5, true, 2), {2, 3})); }
    SUBCASE("LayerNorm") { check_op_gradients(wrap(make_layernorm(4, 1e-5, 3), {2, 4})); }
    SUBCASE("Dropout train") {
        check_op_gradients(wrap(make_dropout(0.25, 6), {2, 4}), ExecMode::Train);
    }
    SUBCASE("Embedding table gradient") {
        // FD over the table; index inputs are not differentiable.
        ModuleDef root = wrap(make_embedding(5, 3, 8), {2, 2});
        for (std::uint64_t s = 0; s < 5; ++s) {
            ModuleDef work = root;
            freeze_params(work);
            std::vector<TensorValue> ids = {
                TensorValue(TensorSpec{{2, 2}, Dtype::F64}, {0, 2, 4, 1})};
            GradientMap grads = run_backward(work, ids, ExecMode::Verify, s);
            ParamDef* table = work.resolve("m")->find_param("weight");
            double h = 1e-5;
            double max_err = 0;
            for (std::size_t j = 0; j < table->values.size(); ++j) {
                double saved = table->values[j];
                table->values[j] = saved + h;
                double up = loss_of(work, ids, ExecMode::Verify, s);
                table->values[j] = saved - h;
                double down = loss_of(work, ids, ExecMode::Verify, s);
                table->values[j] = saved;
                double fd = (up - down) / (2 * h);
                double a = grads.params.at("m.weight").data[static_cast<std::int64_t>(j)];
                max_err = std::max(max_err, std::fabs(a - fd));
            }
            CHECK(max_err < 1e-4);
            // Index gradient is defined as zero.
            for (double v : grads.inputs[0].data) CHECK(v == 0.0);
        }
    }
    SUBCASE("FusedQKV") {
        ModuleDef fused = build_fused_qkv(make_qkv_composite(4, 9));
        ModuleDef root;
        root.kind = "composite";
        root.add_submodule("m", std::move(fused));
        GraphBuilder b;
        int x = b.input(AttrMap{{"shape", std::vector<std::int64_t>{2, 4}},
                                {"dtype", std::string("f64")}});
        int y = b.call_module("m", {x});
        int q = b.get_item(y, 0);
        int k = b.get_item(y, 1);
        int v = b.get_item(y, 2);
        int qk = b.call_op("mul", {q, k});
        int qkv = b.call_op("add", {qk, v});
        root.forward = b.output({qkv});
        check_op_gradients(root);
    }
    SUBCASE("EfficientAttention") {
        ModuleDef ea;
        ea.kind = "EfficientAttention";
        ea.attrs["head_dim"] = std::int64_t(2);
        ea.attrs["p"] = 0.0;
        ea.attrs["seed"] = std::int64_t(3);
        ModuleDef root;
        root.kind = "composite";
        root.add_submodule("m", std::move(ea));
        GraphBuilder b;
        AttrMap in_attrs{{"shape", std::vector<std::int64_t>{2, 3, 4}},
                         {"dtype", std::string("f64")}};
        int q = b.input(in_attrs);
        int k = b.input(in_attrs);
        int v = b.input(in_attrs);
        int y = b.call_module("m", {q, k, v});
        root.forward = b.output({y});
        check_op_gradients(root);
    }
}

TEST_CASE("finite differences agree for composite fixtures") {
    BertConfig cfg;
    cfg.layers = 1;
    cfg.batch = 2;
    cfg.seq = 3;
    ModuleDef bert = toy_bert(cfg);

    auto standalone = [&](const std::string& path, std::vector<std::int64_t> in_shape) {
        ModuleDef root;
        root.kind = "composite";
        root.add_submodule("m", *bert.resolve(path));
        GraphBuilder b;
        int x = b.input(AttrMap{{"shape", in_shape}, {"dtype", std::string("f64")}});
        int y = b.call_module("m", {x});
        root.forward = b.output({y});
        return root;
    };

    SUBCASE("attention core") {
        ModuleDef root;
        root.kind = "composite";
        root.add_submodule("m", *bert.resolve("encoder.layer.0.attention.core"));
        GraphBuilder b;
        AttrMap in_attrs{{"shape", std::vector<std::int64_t>{2, 3, 8}},
                         {"dtype", std::string("f64")}};
        int q = b.input(in_attrs);
        int k = b.input(in_attrs);
        int v = b.input(in_attrs);
        int y = b.call_module("m", {q, k, v});
        root.forward = b.output({y});
        check_op_gradients(root, ExecMode::Train);
    }
    SUBCASE("ffn block") {
        check_op_gradients(standalone("encoder.layer.0.ffn", {2, 3, 8}), ExecMode::Train);
    }
    SUBCASE("full layer") {
        check_op_gradients(standalone("encoder.layer.0", {2, 3, 8}), ExecMode::Train);
    }
}

TEST_CASE("checkpointed gradients are bitwise equal to plain gradients") {
    BertConfig cfg;
    cfg.layers = 2;
    cfg.batch = 2;
    ModuleDef plain = toy_bert(cfg);
    ModuleDef ckpt = plain;
    ckpt.resolve("encoder.layer.0")->attrs["checkpoint"] = std::int64_t(1);

    std::vector<TensorValue> inputs = {
        random_tensor(declared_input_specs(*plain.forward)[0], 17)};
    for (ExecMode mode : {ExecMode::Verify, ExecMode::Train}) {
        GradientMap a = run_backward(plain, inputs, mode, 3);
        GradientMap b = run_backward(ckpt, inputs, mode, 3);
        REQUIRE(a.params.size() == b.params.size());
        for (const auto& [k, v] : a.params) CHECK(b.params.at(k).data == v.data);
        CHECK(a.inputs[0].data == b.inputs[0].data);
    }
}
