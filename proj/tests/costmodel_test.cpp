// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "slapo/costmodel.hpp"
#include "slapo/executor.hpp"
#include "slapo/schedule.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace slapo;
using namespace slapo::testing;

TEST_CASE("matmul flop form: (1,2)x(2,4) costs 16") {
    ModuleDef root;
    root.kind = "composite";
    ParamDef w;
    w.name = "w";
    w.spec.shape = {2, 4};
    root.params.push_back(w);
    GraphBuilder b;
    int x = b.input(AttrMap{{"shape", std::vector<std::int64_t>{1, 2}},
                            {"dtype", std::string("f64")}});
    int p = b.param("w");
    int y = b.call_op("matmul", {x, p});
    root.forward = b.output({y});
    CostReport r = estimate(root, EstimateOptions{});
    CHECK(r.flops == 16);  // 2 * 1 * 4 * 2
    CHECK(r.launches == 1);
}

TEST_CASE("checkpoint ratio sweeps are strictly monotonic and match the ledger") {
    BertConfig cfg;
    cfg.layers = 8;
    ModuleDef base = toy_bert(cfg);
    EstimateOptions opts;

    std::vector<TensorValue> inputs = {
        random_tensor(declared_input_specs(*base.forward)[0], 4)};

    std::int64_t prev_mem = -1;
    std::int64_t prev_recompute = -1;
    for (double ratio : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        ModuleDef model = base;
        apply_checkpoint_ratio(model, "encoder.layer", ratio);
        CostReport r = estimate(model, opts);
        if (prev_mem >= 0) {
            CHECK(r.peak_memory_bytes < prev_mem);
            CHECK(r.recompute_flops > prev_recompute);
        }
        prev_mem = r.peak_memory_bytes;
        prev_recompute = r.recompute_flops;

        // The analytical activation bytes equal the executor's ledger exactly.
        Executor ex(model, ExecMode::Verify, 0, 1);
        ex.forward(inputs);
        CHECK(ex.ledger().retained_bytes == r.activation_bytes);
    }
}

TEST_CASE("ledger equality also holds for fused and replaced models") {
    ModuleDef model = toy_bert(BertConfig{.layers = 2});
    Schedule sch(model, WorldConfig{});
    sch.at("encoder.layer.0.attention.core").replace_with("EfficientAttention");
    sch.at("encoder.layer.1").checkpoint();
    ApplyResult res = sch.apply();

    std::vector<TensorValue> inputs = {
        random_tensor(declared_input_specs(*model.forward)[0], 4)};
    Executor ex(res.model, ExecMode::Verify, 0, 1);
    ex.forward(inputs);
    CostReport r = estimate(res.model, EstimateOptions{});
    CHECK(ex.ledger().retained_bytes == r.activation_bytes);
}

TEST_CASE("gpipe time: equal stages, m=4, s=2 gives 5x the stage time") {
    ModuleDef stage_mod;
    stage_mod.kind = "composite";
    stage_mod.add_submodule("lin", make_linear(8, 8, true, 1));
    GraphBuilder b;
    int x = b.input(AttrMap{{"shape", std::vector<std::int64_t>{1, 8}},
                            {"dtype", std::string("f64")}});
    int y = b.call_module("lin", {x});
    stage_mod.forward = b.output({y});

    PipelineStage s0{stage_mod, {"in0"}, {"mid"}};
    PipelineStage s1{stage_mod, {"mid"}, {"out"}};
    PipelineStagePlan plan1{{s0}, {"in0"}, {"mid"}};
    PipelineStagePlan plan2{{s0, s1}, {"in0"}, {"out"}};

    EstimateOptions one;
    one.batch = 1;
    one.micro_batches = 1;
    CostReport t1 = estimate_pipeline(plan1, one);

    EstimateOptions opts;
    opts.batch = 4;
    opts.micro_batches = 4;
    CostReport total = estimate_pipeline(plan2, opts);
    CHECK(total.step_time_s == doctest::Approx(5.0 * t1.step_time_s).epsilon(1e-12));
}

TEST_CASE("fusing a k-node match drops launches by k-1 and keeps flops") {
    ModuleDef model = toy_bert(BertConfig{.layers = 1});
    std::string site = "encoder.layer.0.attention.output";
    EstimateOptions opts;
    CostReport before = estimate(model, opts);

    WorldConfig world;
    Schedule sch(model, world);
    sch.at(site).trace(TraceSpec{{}, true});
    GraphBuilder p;
    int ctx = p.input();
    int residual = p.input();
    int dense = p.call_module("Linear", {ctx});
    int drop = p.call_module("Dropout", {dense});
    int sum = p.call_op("add", {drop, residual});
    int norm = p.call_module("LayerNorm", {sum});
    sch.define_pattern("pat", p.output({norm}));
    sch.at(site).fuse_at("pat");
    CostReport after = estimate(sch.apply().model, opts);

    CHECK(after.launches == before.launches - 3);  // 4-node match -> 1 kernel
    CHECK(after.flops == before.flops);
}

TEST_CASE("sharding halves sharded param bytes at world 2") {
    ModuleDef model = tp_two_linear();
    WorldConfig world;
    world.world_size = 2;
    Schedule sch(model, world);
    sch.at("a").shard({"weight", "bias"}, 0);
    sch.at("b").shard({"weight", "bias"}, 1);
    ApplyResult res = sch.apply();

    const ModuleDef* a = res.model.resolve("a");
    const ModuleDef* b = res.model.resolve("b");
    CHECK(a->find_param("weight")->spec.byte_size() * 2 ==
          model.resolve("a")->find_param("weight")->spec.byte_size());
    CHECK(a->find_param("bias")->spec.byte_size() * 2 ==
          model.resolve("a")->find_param("bias")->spec.byte_size());
    CHECK(b->find_param("weight")->spec.byte_size() * 2 ==
          model.resolve("b")->find_param("weight")->spec.byte_size());
    // axis=1 keeps the bias whole.
    CHECK(b->find_param("bias")->spec.byte_size() ==
          model.resolve("b")->find_param("bias")->spec.byte_size());
}

TEST_CASE("oom forces throughput to zero") {
    ModuleDef model = toy_bert(BertConfig{.layers = 2});
    EstimateOptions opts;
    opts.device_memory_bytes = 1024;  // nothing fits
    CostReport r = estimate(model, opts);
    CHECK(r.oom);
    CHECK(r.throughput_samples_per_s == 0.0);
}

TEST_CASE("collective bytes follow the ring form") {
    ModuleDef model = fig3c_exact();
    WorldConfig world;
    world.world_size = 2;
    Schedule sch(model, world);
    sch.at("wa").shard({"weight"}, 0);
    sch.at("wb").shard({"weight"}, 1);
    sch.at("wb").sync("forward");
    ApplyResult res = sch.apply();

    EstimateOptions opts;
    opts.world_size = 2;
    CostReport r = estimate(res.model, opts);
    // Payload (1,2) f64 = 16 bytes; ring all-reduce wire = 2*(w-1)/w*16 = 16,
    // counted in forward and backward.
    CHECK(r.collective_bytes == 32);
}
