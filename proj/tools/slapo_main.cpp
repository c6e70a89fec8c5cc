// SPDX-License-Identifier: Apache-2.0
//
// slapo — schedule-language compiler CLI: load a model, apply a schedule
// script, verify, estimate, run, tune.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "slapo/costmodel.hpp"
#include "slapo/dump.hpp"
#include "slapo/rng.hpp"
#include "slapo/executor.hpp"
#include "slapo/model_io.hpp"
#include "slapo/schedule.hpp"
#include "slapo/script.hpp"
#include "slapo/tuner.hpp"
#include "slapo/verifier.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuleViolation = 2;
constexpr int kExitNumericFailure = 3;
constexpr int kExitInternal = 4;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw slapo::Error("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

slapo::CliConfig load_config_opt(const std::string& path) {
    if (path.empty()) return {};
    return slapo::load_cli_config(read_file(path));
}

void print_tree(const slapo::ModuleDef& m, const std::string& name, int depth) {
    std::string indent(static_cast<std::size_t>(depth) * 2, ' ');
    std::ostringstream line;
    line << indent << (name.empty() ? m.name : name) << ": " << m.kind;
    for (const auto& p : m.params) {
        line << "  " << p.name << p.spec.to_string();
        if (p.shard)
            line << "[shard axis=" << p.shard->axis << " world=" << p.shard->world_size << "]";
    }
    if (slapo::attr_flag(m.attrs, "checkpoint")) line << "  [checkpoint]";
    if (slapo::attr_flag(m.attrs, "fused")) line << "  [fused]";
    std::cout << line.str() << "\n";
    for (const auto& s : m.submodules) print_tree(*s.module, s.name, depth + 1);
}

slapo::Schedule build_schedule(const slapo::ModuleDef& model, const std::string& script_path,
                               const slapo::WorldConfig& world) {
    slapo::Schedule sch(model, world);
    if (!script_path.empty()) slapo::load_schedule_script(sch, read_file(script_path));
    return sch;
}

/// Exits with kExitRuleViolation when the log is illegal.
slapo::ApplyResult validate_and_apply(const slapo::Schedule& sch) {
    std::vector<slapo::RuleViolation> violations = slapo::validate_rules(sch);
    if (!violations.empty()) {
        for (const auto& v : violations)
            std::cerr << v.rule << " at record " << v.record_index << ": " << v.message << "\n";
        std::exit(kExitRuleViolation);
    }
    return sch.apply();
}

std::vector<slapo::TensorValue> default_inputs(const slapo::ModuleDef& model, std::uint64_t seed) {
    std::vector<slapo::TensorSpec> specs = slapo::declared_input_specs(*model.forward);
    std::vector<slapo::TensorValue> inputs;
    for (std::size_t i = 0; i < specs.size(); ++i)
        inputs.push_back(slapo::random_tensor(specs[i], slapo::derive_seed(seed, "cli-input"),
                                              static_cast<std::uint64_t>(i)));
    return inputs;
}

std::string assignment_text(const slapo::Assignment& a) {
    std::ostringstream oss;
    bool first = true;
    for (const auto& [k, v] : a) {
        if (!first) oss << " ";
        first = false;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%g", v);
        oss << k << "=" << buf;
    }
    return oss.str();
}

int cmd_inspect(const std::string& model_path) {
    slapo::ModuleDef model = slapo::load_model_file(model_path);
    print_tree(model, model.name, 0);
    return kExitOk;
}

int cmd_apply(const std::string& model_path, const std::string& script_path,
              const slapo::CliConfig& cfg, std::string out_path, std::string stages_prefix) {
    slapo::ModuleDef model = slapo::load_model_file(model_path);
    slapo::Schedule sch = build_schedule(model, script_path, cfg.world);
    slapo::ApplyResult result = validate_and_apply(sch);
    if (out_path.empty()) out_path = model_path + ".out.json";
    slapo::save_model_file(result.model, out_path);
    std::cout << "wrote " << out_path << "\n";
    if (result.stages) {
        if (stages_prefix.empty()) stages_prefix = out_path + ".stage";
        for (std::size_t i = 0; i < result.stages->stages.size(); ++i) {
            const auto& stage = result.stages->stages[i];
            std::string path = stages_prefix + std::to_string(i) + ".json";
            slapo::save_model_file(stage.module, path);
            std::ostringstream io;
            io << "consumes:";
            for (const auto& c : stage.consumes) io << " " << c;
            io << "  produces:";
            for (const auto& p : stage.produces) io << " " << p;
            std::cout << "wrote " << path << "  " << io.str() << "\n";
        }
    }
    return kExitOk;
}

int cmd_verify(const std::string& model_path, const std::string& script_path,
               const slapo::CliConfig& cfg, std::uint64_t seed) {
    slapo::ModuleDef model = slapo::load_model_file(model_path);
    slapo::Schedule sch = build_schedule(model, script_path, cfg.world);
    slapo::ApplyResult result = validate_and_apply(sch);
    slapo::VerifyOptions opts;
    opts.trials = cfg.verify_trials;
    opts.atol = cfg.verify_atol;
    opts.rtol = cfg.verify_rtol;
    opts.seed = slapo::derive_seed(seed, "verify");
    slapo::EquivalenceReport rep = slapo::verify_end_to_end(model, result, cfg.world, opts);
    std::cout << rep.to_text();
    return rep.pass ? kExitOk : kExitNumericFailure;
}

int cmd_estimate(const std::string& model_path, const std::string& script_path,
                 const slapo::CliConfig& cfg, std::int64_t batch, int micro_batches) {
    slapo::ModuleDef model = slapo::load_model_file(model_path);
    slapo::EstimateOptions opts;
    opts.batch = batch;
    opts.micro_batches = micro_batches;
    opts.world_size = cfg.world.world_size;
    opts.device_memory_bytes = cfg.world.device_memory_bytes;
    opts.constants = cfg.world.cost;
    slapo::CostReport report;
    if (!script_path.empty()) {
        slapo::Schedule sch = build_schedule(model, script_path, cfg.world);
        slapo::ApplyResult result = validate_and_apply(sch);
        report = result.stages ? slapo::estimate_pipeline(*result.stages, opts)
                               : slapo::estimate(result.model, opts);
    } else {
        report = slapo::estimate(model, opts);
    }
    std::cout << report.to_text();
    return kExitOk;
}

int cmd_run(const std::string& model_path, const std::string& script_path,
            const slapo::CliConfig& cfg, std::uint64_t seed, int world_size, int micro_batches,
            const std::string& dump_path, const std::string& mode_name) {
    slapo::ModuleDef model = slapo::load_model_file(model_path);
    slapo::ExecMode mode =
        mode_name == "train" ? slapo::ExecMode::Train : slapo::ExecMode::Verify;
    slapo::WorldConfig world = cfg.world;
    if (world_size > 0) world.world_size = world_size;

    std::vector<slapo::TensorValue> outputs;
    std::vector<slapo::TensorValue> inputs = default_inputs(model, seed);
    if (!script_path.empty()) {
        slapo::Schedule sch = build_schedule(model, script_path, world);
        slapo::ApplyResult result = validate_and_apply(sch);
        if (result.stages) {
            outputs = slapo::run_pipeline(*result.stages, inputs, std::max(micro_batches, 1),
                                          mode, slapo::derive_seed(seed, "run"));
        } else if (world.world_size > 1) {
            outputs = slapo::run_sharded(result.model, inputs, world.world_size, mode,
                                         slapo::derive_seed(seed, "run"));
        } else {
            outputs = slapo::run_forward(result.model, inputs, mode, slapo::derive_seed(seed, "run"));
        }
    } else {
        outputs = slapo::run_forward(model, inputs, mode, slapo::derive_seed(seed, "run"));
    }
    for (const auto& t : outputs) std::cout << slapo::format_tensor_text(t) << "\n";
    if (!dump_path.empty()) {
        slapo::write_tensor_dump(dump_path, outputs);
        std::cout << "dumped " << outputs.size() << " tensors to " << dump_path << "\n";
    }
    return kExitOk;
}

int cmd_tune(const std::string& model_path, const std::string& space_path,
             const std::string& script_path, const slapo::CliConfig& cfg, const std::string& algo,
             std::uint64_t seed, int restarts, const std::string& trials_log,
             const std::string& best_out) {
    slapo::ModuleDef model = slapo::load_model_file(model_path);
    slapo::TuneSpaceFile space_file = slapo::load_tune_space(read_file(space_path));
    const slapo::TuneBindings& bind = space_file.bindings;
    std::string base_script = script_path.empty() ? std::string() : read_file(script_path);

    slapo::Objective objective = [&](const slapo::Assignment& a) -> slapo::TrialEval {
        slapo::Schedule sch(model, cfg.world);
        std::string script = base_script;
        for (const auto& cond : bind.conditional_lines) {
            auto it = a.find(cond.var);
            if (it != a.end() && it->second != 0.0) script += "\n" + cond.line + "\n";
        }
        if (!script.empty()) slapo::load_schedule_script(sch, script);
        if (!slapo::validate_rules(sch).empty()) return {0.0, {}};
        slapo::ApplyResult result = sch.apply();
        if (!bind.checkpoint_ratio_var.empty()) {
            auto it = a.find(bind.checkpoint_ratio_var);
            if (it != a.end())
                slapo::apply_checkpoint_ratio(result.model, bind.checkpoint_container, it->second);
        }
        slapo::EstimateOptions opts;
        opts.world_size = cfg.world.world_size;
        opts.device_memory_bytes = cfg.world.device_memory_bytes;
        opts.constants = cfg.world.cost;
        if (!bind.batch_var.empty() && a.count(bind.batch_var))
            opts.batch = static_cast<std::int64_t>(a.at(bind.batch_var));
        if (!bind.micro_batches_var.empty() && a.count(bind.micro_batches_var))
            opts.micro_batches = static_cast<int>(a.at(bind.micro_batches_var));
        slapo::CostReport report = result.stages ? slapo::estimate_pipeline(*result.stages, opts)
                                                 : slapo::estimate(result.model, opts);
        return {report.throughput_samples_per_s, report};
    };

    slapo::TunerResult result;
    if (algo == "exhaustive") {
        result = slapo::exhaustive(space_file.space, objective);
    } else if (algo == "cd") {
        result = slapo::coordinate_descent(space_file.space, objective,
                                           slapo::derive_seed(seed, "tuner"), restarts);
    } else {
        std::cerr << "unknown --algo '" << algo << "' (expected exhaustive or cd)\n";
        return kExitUsage;
    }

    std::ostringstream log;
    for (const auto& t : result.trials) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), " throughput=%.6g memory=%lld oom=%d",
                      t.objective, static_cast<long long>(t.report.peak_memory_bytes),
                      t.report.oom ? 1 : 0);
        log << assignment_text(t.assignment) << buf << "\n";
    }
    if (!trials_log.empty()) {
        std::ofstream out(trials_log);
        out << log.str();
    } else {
        std::cout << log.str();
    }

    std::ostringstream best;
    best << "# tuned: " << assignment_text(result.best.assignment) << "\n";
    best << "# throughput_samples_per_s " << result.best.objective
         << (result.all_zero ? " (all configurations OOM)" : "") << "\n";
    if (!bind.batch_var.empty())
        best << "# runtime knob: batch = " << result.best.assignment.at(bind.batch_var) << "\n";
    if (!bind.micro_batches_var.empty() && result.best.assignment.count(bind.micro_batches_var))
        best << "# runtime knob: micro_batches = "
             << result.best.assignment.at(bind.micro_batches_var) << "\n";
    for (const auto& cond : bind.conditional_lines) {
        auto it = result.best.assignment.find(cond.var);
        if (it != result.best.assignment.end() && it->second != 0.0) best << cond.line << "\n";
    }
    if (!bind.checkpoint_ratio_var.empty() &&
        result.best.assignment.count(bind.checkpoint_ratio_var)) {
        double ratio = result.best.assignment.at(bind.checkpoint_ratio_var);
        slapo::ModuleDef tmp = model;
        const slapo::ModuleDef* container = tmp.resolve(bind.checkpoint_container);
        if (container) {
            int n = static_cast<int>(ratio * static_cast<double>(container->submodules.size()));
            for (int i = 0; i < n; ++i)
                best << "checkpoint "
                     << slapo::join_path(bind.checkpoint_container, container->submodules[i].name)
                     << "\n";
        }
    }
    if (!best_out.empty()) {
        std::ofstream out(best_out);
        out << best.str();
        std::cout << "wrote " << best_out << "\n";
    } else {
        std::cout << best.str();
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"slapo: schedule-language compiler for model training strategies"};
    app.require_subcommand(1);

    std::string model_path, script_path, config_path, out_path, stages_prefix, dump_path;
    std::string space_path, algo = "exhaustive", mode_name = "verify", trials_log, best_out;
    std::uint64_t seed = 0;
    std::int64_t batch = 0;
    int micro_batches = 0, world_size = 0, restarts = 3;

    CLI::App* inspect = app.add_subcommand("inspect", "print the module tree with param shapes");
    inspect->add_option("model", model_path)->required();

    CLI::App* apply = app.add_subcommand("apply", "apply a schedule script and write the result");
    apply->add_option("model", model_path)->required();
    apply->add_option("schedule", script_path)->required();
    apply->add_option("--config", config_path);
    apply->add_option("--out", out_path);
    apply->add_option("--stages-prefix", stages_prefix);

    CLI::App* verify = app.add_subcommand("verify", "rule-validate and numerically verify");
    verify->add_option("model", model_path)->required();
    verify->add_option("schedule", script_path)->required();
    verify->add_option("--config", config_path);
    verify->add_option("--world-size", world_size);
    verify->add_option("--seed", seed);

    CLI::App* estimate = app.add_subcommand("estimate", "cost-model report");
    estimate->add_option("model", model_path)->required();
    estimate->add_option("schedule", script_path);
    estimate->add_option("--config", config_path);
    estimate->add_option("--batch", batch);
    estimate->add_option("--micro-batches", micro_batches);

    CLI::App* run = app.add_subcommand("run", "execute forward");
    run->add_option("model", model_path)->required();
    run->add_option("schedule", script_path);
    run->add_option("--config", config_path);
    run->add_option("--seed", seed);
    run->add_option("--world-size", world_size);
    run->add_option("--micro-batches", micro_batches);
    run->add_option("--dump", dump_path);
    run->add_option("--mode", mode_name)->check(CLI::IsMember({"verify", "train"}));

    CLI::App* tune = app.add_subcommand("tune", "search schedule hyperparameters");
    tune->add_option("model", model_path)->required();
    tune->add_option("space", space_path)->required();
    tune->add_option("schedule", script_path);
    tune->add_option("--config", config_path);
    tune->add_option("--algo", algo)->check(CLI::IsMember({"exhaustive", "cd"}));
    tune->add_option("--seed", seed);
    tune->add_option("--restarts", restarts);
    tune->add_option("--trials-log", trials_log);
    tune->add_option("--best-out", best_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        slapo::CliConfig cfg = load_config_opt(config_path);
        if (world_size > 0) cfg.world.world_size = world_size;
        if (inspect->parsed()) return cmd_inspect(model_path);
        if (apply->parsed()) return cmd_apply(model_path, script_path, cfg, out_path, stages_prefix);
        if (verify->parsed()) return cmd_verify(model_path, script_path, cfg, seed);
        if (estimate->parsed())
            return cmd_estimate(model_path, script_path, cfg, batch, micro_batches);
        if (run->parsed())
            return cmd_run(model_path, script_path, cfg, seed, world_size, micro_batches, dump_path,
                           mode_name);
        if (tune->parsed())
            return cmd_tune(model_path, space_path, script_path, cfg, algo, seed, restarts,
                            trials_log, best_out);
        return kExitUsage;
    } catch (const slapo::RuleError& e) {
        std::cerr << e.what() << "\n";
        return kExitRuleViolation;
    } catch (const slapo::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}
