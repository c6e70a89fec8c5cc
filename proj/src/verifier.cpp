// SPDX-License-Identifier: Apache-2.0

#include "slapo/verifier.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "slapo/rng.hpp"
#include "slapo/shape_inference.hpp"

namespace slapo {

std::string EquivalenceReport::to_text() const {
    std::ostringstream oss;
    oss << "trials        " << trials << "\n";
    oss << "max_abs_diff  " << max_abs_diff << "\n";
    oss << "max_rel_diff  " << max_rel_diff << "\n";
    oss << "atol          " << atol << "\n";
    oss << "rtol          " << rtol << "\n";
    oss << "pass          " << (pass ? "true" : "false") << (vacuous ? " (vacuous)" : "") << "\n";
    oss << "note          sampled, not proven\n";
    return oss.str();
}

InputGenerator default_input_generator(std::uint64_t base_seed) {
    return [base_seed](int trial, const std::vector<TensorSpec>& specs) {
        std::vector<TensorValue> inputs;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            inputs.push_back(random_tensor(
                specs[i], hash_combine(base_seed, static_cast<std::uint64_t>(trial)),
                static_cast<std::uint64_t>(i)));
        }
        return inputs;
    };
}

std::vector<RuleViolation> validate_rules(const Schedule& sch) {
    std::vector<RuleViolation> violations;
    ModuleDef scratch = sch.original_model();
    std::vector<std::string> sink;
    const auto& log = sch.log();
    for (std::size_t i = 0; i < log.size(); ++i) {
        std::vector<PrimitiveRecord> prior(log.begin(), log.begin() + i);
        try {
            check_record_rules(log[i], prior, sch.world());
            apply_record(scratch, log[i], sch.world(), sch.patterns(), &sink);
        } catch (const RuleError& e) {
            violations.push_back({e.rule(), e.what(), static_cast<int>(i)});
            break;  // first violation halts apply
        } catch (const Error& e) {
            violations.push_back({"R0", e.what(), static_cast<int>(i)});
            break;
        }
    }
    return violations;
}

namespace {

struct DiffAccum {
    double max_abs = 0.0;
    double max_rel = 0.0;

    void add(const std::vector<TensorValue>& a, const std::vector<TensorValue>& b) {
        if (a.size() != b.size()) throw Error("output arity differs between the two modules");
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i].size() != b[i].size())
                throw Error("output " + std::to_string(i) + " sizes differ: " +
                            a[i].spec.to_string() + " vs " + b[i].spec.to_string());
            for (std::int64_t j = 0; j < a[i].size(); ++j) {
                double x = a[i].data[j], y = b[i].data[j];
                double abs_diff = std::fabs(x - y);
                max_abs = std::max(max_abs, abs_diff);
                double denom = std::max(std::fabs(x), std::fabs(y));
                if (denom > 0.0) max_rel = std::max(max_rel, abs_diff / denom);
            }
        }
    }
};

ModuleDef wrap_as_root(const ModuleDef& m) {
    // Executors want a root; a bare builtin gets a one-call wrapper.
    if (m.is_composite()) return m;
    ModuleDef root;
    root.kind = "composite";
    root.name = "wrapper";
    root.add_submodule("inner", m);
    GraphBuilder b;
    std::vector<int> ins;
    int arity = module_input_arity(m);
    for (int i = 0; i < arity; ++i) ins.push_back(b.input());
    int call = b.call_module("inner", ins);
    root.forward = b.output({call});
    return root;
}

}  // namespace

EquivalenceReport verify_module(const ModuleDef& original, const ModuleDef& replacement,
                                const std::vector<TensorSpec>& input_specs,
                                const VerifyOptions& opts) {
    EquivalenceReport rep;
    rep.atol = opts.atol;
    rep.rtol = opts.rtol;
    rep.trials = opts.trials;
    if (opts.trials == 0) {
        rep.pass = true;
        rep.vacuous = true;
        return rep;
    }
    // Interface check first (R4 semantics).
    ValueSpec a = module_output_spec(original, input_specs);
    ValueSpec b = module_output_spec(replacement, input_specs);
    if (!(a == b))
        throw RuleError("R4", "interface mismatch: " + a.to_string() + " vs " + b.to_string());

    ModuleDef lhs = wrap_as_root(original);
    ModuleDef rhs = wrap_as_root(replacement);
    InputGenerator gen = opts.gen ? opts.gen : default_input_generator(opts.seed);
    DiffAccum acc;
    for (int t = 0; t < opts.trials; ++t) {
        std::vector<TensorValue> inputs = gen(t, input_specs);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (!(inputs[i].spec == input_specs[i]))
                throw Error("input generator produced wrong shape for input " + std::to_string(i) +
                            ": " + inputs[i].spec.to_string() + " vs " +
                            input_specs[i].to_string());
        }
        rep.trial_seeds.push_back(static_cast<std::uint64_t>(t));
        std::vector<TensorValue> ya = run_forward(lhs, inputs, ExecMode::Verify, opts.seed);
        std::vector<TensorValue> yb = run_forward(rhs, inputs, ExecMode::Verify, opts.seed);
        acc.add(ya, yb);
    }
    rep.max_abs_diff = acc.max_abs;
    rep.max_rel_diff = acc.max_rel;
    rep.pass = acc.max_abs <= opts.atol && acc.max_rel <= opts.rtol;
    return rep;
}

namespace {

void check_shard_reassembly(const ModuleDef& m, const std::string& path) {
    for (const auto& p : m.params) {
        if (!p.shard) continue;
        std::vector<std::int64_t> local = p.spec.shape;
        if (p.shard->axis >= static_cast<int>(local.size()))
            throw Error("sharded param '" + join_path(path, p.name) + "' axis out of range");
        local[p.shard->axis] *= p.shard->world_size;
        if (local != p.shard->full_shape)
            throw Error("sharded param '" + join_path(path, p.name) +
                        "' does not reassemble its full shape");
    }
    for (const auto& s : m.submodules) check_shard_reassembly(*s.module, join_path(path, s.name));
}

bool model_is_sharded(const ModuleDef& m) {
    for (const auto& p : m.params) {
        if (p.shard) return true;
    }
    for (const auto& s : m.submodules) {
        if (model_is_sharded(*s.module)) return true;
    }
    return false;
}

}  // namespace

EquivalenceReport verify_end_to_end(const ModuleDef& original, const ApplyResult& scheduled,
                                    const WorldConfig& world, const VerifyOptions& opts) {
    EquivalenceReport rep;
    rep.atol = opts.atol;
    rep.rtol = opts.rtol;
    rep.trials = opts.trials;
    if (opts.trials == 0) {
        rep.pass = true;
        rep.vacuous = true;
        return rep;
    }
    check_shard_reassembly(scheduled.model, "");

    std::vector<TensorSpec> input_specs = declared_input_specs(*original.forward);
    InputGenerator gen = opts.gen ? opts.gen : default_input_generator(opts.seed);
    bool sharded = model_is_sharded(scheduled.model);
    DiffAccum acc;
    for (int t = 0; t < opts.trials; ++t) {
        std::vector<TensorValue> inputs = gen(t, input_specs);
        rep.trial_seeds.push_back(static_cast<std::uint64_t>(t));
        std::vector<TensorValue> ref = run_forward(original, inputs, ExecMode::Verify, opts.seed);
        std::vector<TensorValue> got;
        if (scheduled.stages) {
            got = run_pipeline(*scheduled.stages, inputs, 1, ExecMode::Verify, opts.seed);
        } else if (sharded && world.world_size > 1) {
            got = run_sharded(scheduled.model, inputs, world.world_size, ExecMode::Verify,
                              opts.seed);
        } else {
            got = run_forward(scheduled.model, inputs, ExecMode::Verify, opts.seed);
        }
        acc.add(ref, got);
    }
    rep.max_abs_diff = acc.max_abs;
    rep.max_rel_diff = acc.max_rel;
    rep.pass = acc.max_abs <= opts.atol && acc.max_rel <= opts.rtol;
    return rep;
}

}  // namespace slapo
