// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "slapo/executor.hpp"
#include "slapo/schedule.hpp"

namespace slapo {

struct RuleViolation {
    std::string rule;  // R1..R5
    std::string message;
    int record_index = -1;
};

struct EquivalenceReport {
    int trials = 0;
    double max_abs_diff = 0.0;
    double max_rel_diff = 0.0;
    double atol = 1e-6;
    double rtol = 1e-5;
    bool pass = false;
    bool vacuous = false;  // zero trials
    /// Sampling caveat: passing does not prove semantic correctness.
    bool sampled_not_proven = true;
    std::vector<std::uint64_t> trial_seeds;

    std::string to_text() const;
};

/// Per-trial input generator; default draws standard normals seeded by trial.
using InputGenerator =
    std::function<std::vector<TensorValue>(int trial, const std::vector<TensorSpec>& specs)>;

InputGenerator default_input_generator(std::uint64_t base_seed = 0x5eed);

struct VerifyOptions {
    int trials = 10;
    double atol = 1e-6;
    double rtol = 1e-5;
    InputGenerator gen;  // default when empty
    std::uint64_t seed = 0x5eed;
};

/// Dry-run the recorded log: rule checks plus a scratch replay, stopping at
/// the first violation. Empty result means apply() will replay cleanly.
/// Neither the schedule nor the model is mutated.
std::vector<RuleViolation> validate_rules(const Schedule& sch);

/// Sampling equivalence of two modules over seeded random inputs (verify
/// mode, so dropout is the identity).
EquivalenceReport verify_module(const ModuleDef& original, const ModuleDef& replacement,
                                const std::vector<TensorSpec>& input_specs,
                                const VerifyOptions& opts = {});

/// End-to-end: original on one worker against the applied schedule via
/// run_sharded / run_pipeline; also checks sharded parameter shapes reassemble
/// the originals.
EquivalenceReport verify_end_to_end(const ModuleDef& original, const ApplyResult& scheduled,
                                    const WorldConfig& world, const VerifyOptions& opts = {});

}  // namespace slapo
