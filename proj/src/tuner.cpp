// SPDX-License-Identifier: Apache-2.0

#include "slapo/tuner.hpp"

#include <algorithm>

#include "slapo/rng.hpp"

namespace slapo {

namespace {

void validate_space(const SearchSpace& space) {
    if (space.vars.empty()) throw Error("search space has no variables");
    std::map<std::string, int> seen;
    for (const auto& v : space.vars) {
        if (v.candidates.empty()) throw Error("variable '" + v.name + "' has no candidates");
        if (++seen[v.name] > 1) throw Error("duplicate variable '" + v.name + "'");
    }
}

bool constraints_hold(const SearchSpace& space, const Assignment& a) {
    for (const auto& c : space.constraints) {
        if (!c.eval_bool(a)) return false;
    }
    return true;
}

/// Deterministic xorshift-style generator (stdlib distributions are not
/// bit-stable across implementations).
struct Rng {
    std::uint64_t state;
    explicit Rng(std::uint64_t seed) : state(splitmix64(seed ^ 0x7454756e65ULL)) {}
    std::uint64_t next() {
        state = splitmix64(state);
        return state;
    }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(next() % n); }
};

}  // namespace

std::vector<double> var_candidates(const SearchSpace& space, std::size_t i,
                                   const Assignment& prefix) {
    const SymbolicVar& v = space.vars[i];
    std::vector<double> out;
    for (const auto& c : v.candidates) {
        double val = c.eval(prefix);
        Assignment probe = prefix;
        probe[v.name] = val;
        if (v.has_when && !v.when.eval_bool(probe)) continue;
        if (std::find(out.begin(), out.end(), val) != out.end())
            throw Error("variable '" + v.name + "' has duplicate candidate " + std::to_string(val));
        out.push_back(val);
    }
    return out;
}

bool is_feasible(const SearchSpace& space, const Assignment& a) {
    Assignment prefix;
    for (std::size_t i = 0; i < space.vars.size(); ++i) {
        const std::string& name = space.vars[i].name;
        auto it = a.find(name);
        if (it == a.end()) return false;
        std::vector<double> cands = var_candidates(space, i, prefix);
        if (std::find(cands.begin(), cands.end(), it->second) == cands.end()) return false;
        prefix[name] = it->second;
    }
    return constraints_hold(space, a);
}

namespace {

void enumerate_rec(const SearchSpace& space, std::size_t i, Assignment& prefix,
                   std::vector<Assignment>& out) {
    if (i == space.vars.size()) {
        if (constraints_hold(space, prefix)) out.push_back(prefix);
        return;
    }
    for (double val : var_candidates(space, i, prefix)) {
        prefix[space.vars[i].name] = val;
        enumerate_rec(space, i + 1, prefix, out);
        prefix.erase(space.vars[i].name);
    }
}

}  // namespace

std::vector<Assignment> enumerate(const SearchSpace& space) {
    validate_space(space);
    std::vector<Assignment> out;
    Assignment prefix;
    enumerate_rec(space, 0, prefix, out);
    return out;
}

TunerResult exhaustive(const SearchSpace& space, const Objective& objective) {
    std::vector<Assignment> feasible = enumerate(space);
    if (feasible.empty()) throw Error("search space has an empty feasible set");
    TunerResult result;
    bool first = true;
    bool any_nonzero = false;
    for (const auto& a : feasible) {
        TrialEval ev = objective(a);
        result.trials.push_back({a, ev.objective, ev.report});
        if (ev.objective != 0.0) any_nonzero = true;
        if (first || ev.objective > result.best.objective) {
            result.best = result.trials.back();
            first = false;
        }
    }
    result.all_zero = !any_nonzero;
    return result;
}

TunerResult coordinate_descent(const SearchSpace& space, const Objective& objective,
                               std::uint64_t seed, int restarts) {
    std::vector<Assignment> feasible = enumerate(space);
    if (feasible.empty()) throw Error("search space has an empty feasible set");
    Rng rng(seed);

    TunerResult result;
    std::map<Assignment, TrialEval> memo;
    auto evaluate = [&](const Assignment& a) -> double {
        auto it = memo.find(a);
        if (it != memo.end()) return it->second.objective;
        TrialEval ev = objective(a);
        memo.emplace(a, ev);
        result.trials.push_back({a, ev.objective, ev.report});
        return ev.objective;
    };

    bool have_best = false;
    for (int restart = 0; restart < std::max(restarts, 1); ++restart) {
        Assignment current = feasible[rng.below(feasible.size())];
        double current_obj = evaluate(current);

        std::vector<std::size_t> dims(space.vars.size());
        for (std::size_t i = 0; i < dims.size(); ++i) dims[i] = i;
        for (std::size_t i = dims.size(); i > 1; --i) std::swap(dims[i - 1], dims[rng.below(i)]);

        bool improved = true;
        while (improved) {
            improved = false;
            for (std::size_t d : dims) {
                const std::string& name = space.vars[d].name;
                Assignment prefix;
                for (std::size_t i = 0; i < d; ++i) prefix[space.vars[i].name] = current.at(space.vars[i].name);
                double best_val = current.at(name);
                double best_obj = current_obj;
                for (double cand : var_candidates(space, d, prefix)) {
                    if (cand == current.at(name)) continue;
                    Assignment probe = current;
                    probe[name] = cand;
                    if (!is_feasible(space, probe)) continue;
                    double obj = evaluate(probe);
                    if (obj > best_obj) {
                        best_obj = obj;
                        best_val = cand;
                    }
                }
                if (best_val != current.at(name)) {
                    current[name] = best_val;
                    current_obj = best_obj;
                    improved = true;
                }
            }
        }
        if (!have_best || current_obj > result.best.objective ||
            (current_obj == result.best.objective && current < result.best.assignment)) {
            result.best = {current, current_obj, memo.at(current).report};
            have_best = true;
        }
    }
    result.all_zero = true;
    for (const auto& t : result.trials) {
        if (t.objective != 0.0) result.all_zero = false;
    }
    return result;
}

}  // namespace slapo
