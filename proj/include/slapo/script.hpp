// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "slapo/schedule.hpp"
#include "slapo/tuner.hpp"

namespace slapo {

/// Parse a schedule script (one primitive per line, `#` comments) into the
/// schedule as deferred records. Glob paths expand against the original model,
/// one record per match in sorted order. `pattern <name> { ... }` blocks
/// register named pattern graphs.
void load_schedule_script(Schedule& sch, const std::string& text);

/// One conditional schedule line from a tuning space file: applied when the
/// named variable is nonzero.
struct ConditionalLine {
    std::string var;
    std::string line;
};

/// Knob wiring from [bind] sections.
struct TuneBindings {
    std::string batch_var;
    std::string micro_batches_var;
    std::string checkpoint_ratio_var;
    std::string checkpoint_container;
    std::vector<ConditionalLine> conditional_lines;
};

struct TuneSpaceFile {
    SearchSpace space;
    TuneBindings bindings;
};

/// Parse a tuning space file: [var] blocks (name, candidates, optional when),
/// [constraint] blocks (expr), optional [bind] section.
TuneSpaceFile load_tune_space(const std::string& text);

struct CliConfig {
    WorldConfig world;
    int verify_trials = 10;
    double verify_atol = 1e-6;
    double verify_rtol = 1e-5;
};

/// TOML-style sections [world], [cost], [verify]; `key = value` lines.
CliConfig load_cli_config(const std::string& text);

}  // namespace slapo
