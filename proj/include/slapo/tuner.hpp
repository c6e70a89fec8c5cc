// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "slapo/costmodel.hpp"
#include "slapo/expr.hpp"

namespace slapo {

/// Ordered candidate values; candidate expressions may reference earlier
/// variables, so the concrete candidate list can depend on the prefix
/// assignment (polygon spaces).
struct SymbolicVar {
    std::string name;
    std::vector<Expr> candidates;
    Expr when;  // optional filter over earlier vars plus this var's value
    bool has_when = false;
};

struct SearchSpace {
    std::vector<SymbolicVar> vars;
    std::vector<Expr> constraints;  // predicates over full assignments
};

using Assignment = std::map<std::string, double>;

struct TrialResult {
    Assignment assignment;
    double objective = 0.0;  // throughput-like: higher is better
    CostReport report;
};

struct TrialEval {
    double objective = 0.0;
    CostReport report;
};

using Objective = std::function<TrialEval(const Assignment&)>;

struct TunerResult {
    TrialResult best;
    std::vector<TrialResult> trials;  // evaluation order, no duplicates
    bool all_zero = false;            // flagged when every trial scored 0 (all OOM)
};

/// Concrete candidate values of var `i` under the given prefix assignment.
std::vector<double> var_candidates(const SearchSpace& space, std::size_t i,
                                   const Assignment& prefix);

/// Full feasibility: every value is in its var's candidate list, passes its
/// filter, and all constraints hold.
bool is_feasible(const SearchSpace& space, const Assignment& a);

/// All feasible assignments in lexicographic candidate order.
std::vector<Assignment> enumerate(const SearchSpace& space);

/// Argmax by objective; ties break to the earliest enumerated (lexicographically
/// smallest) assignment. Throws on an empty feasible set.
TunerResult exhaustive(const SearchSpace& space, const Objective& objective);

/// Randomized coordinate descent: seeded random feasible start, dimensions
/// swept in seeded random order, each sweep evaluating all feasible candidates
/// with the others held fixed; stops when a full cycle brings no improvement;
/// repeats for `restarts` starts. Assignments are memoized, so `trials` holds
/// distinct evaluations only.
TunerResult coordinate_descent(const SearchSpace& space, const Objective& objective,
                               std::uint64_t seed, int restarts = 3);

}  // namespace slapo
