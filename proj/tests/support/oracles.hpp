// SPDX-License-Identifier: Apache-2.0
//
// Independent oracles used to freeze expected values: central finite
// differences for gradients, naive exhaustive enumeration for subgraph
// matching. These must stay independent of the implementation paths they
// check.

#pragma once

#include "slapo/executor.hpp"
#include "slapo/pattern.hpp"

namespace slapo::testing {

/// Sum of all forward output elements (the fixed loss).
double loss_of(const ModuleDef& model, const std::vector<TensorValue>& inputs, ExecMode mode,
               std::uint64_t seed);

/// Materialize every parameter's current full tensor into explicit values so
/// finite differences can perturb them.
void freeze_params(ModuleDef& model);

struct FdReport {
    double max_rel_err = 0.0;
    int checked = 0;
};

/// Central finite differences (step h) over all inputs and all params against
/// the executor's reverse-mode gradients. Relative error uses
/// |a - fd| / max(1, |a|, |fd|).
FdReport finite_difference_check(const ModuleDef& model, const std::vector<TensorValue>& inputs,
                                 ExecMode mode, std::uint64_t seed, double h = 1e-5);

/// Naive matcher oracle: enumerate every injective assignment of pattern core
/// nodes to graph nodes, post-check labels, ordered edges, binder consistency
/// and attrs, then apply the same single-output filter, dedup, anchor sort and
/// greedy non-overlap rule as the engine. Exponential; graphs must stay small.
std::vector<std::vector<int>> brute_force_matches(const StaticGraph& graph,
                                                  const StaticGraph& pattern);

/// Deterministic random DAG over a small op alphabet (relu/gelu/scale/add/mul),
/// `n` core nodes. Shapes are irrelevant to matching and are not assigned.
StaticGraph random_dag(std::uint64_t seed, int n);

/// Deterministic small chain pattern drawn from the same alphabet.
StaticGraph random_chain_pattern(std::uint64_t seed, int length);

double max_abs_diff(const std::vector<TensorValue>& a, const std::vector<TensorValue>& b);

}  // namespace slapo::testing
