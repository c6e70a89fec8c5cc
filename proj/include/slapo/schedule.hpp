// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slapo/costmodel.hpp"
#include "slapo/pattern.hpp"
#include "slapo/pipeline.hpp"
#include "slapo/tracer.hpp"

namespace slapo {

struct WorldConfig {
    int world_size = 1;
    std::int64_t device_memory_bytes = 16LL * 1024 * 1024 * 1024;
    CostConstants cost;
};

/// Thrown when a primitive breaks one of the verifier rules (R1 sync needs
/// shard, R2 distributed needs world > 1, R3 static graph needs trace, R4
/// interface mismatch, R5 divisibility).
class RuleError : public Error {
public:
    RuleError(std::string rule, const std::string& msg)
        : Error(rule + ": " + msg), rule_(std::move(rule)) {}
    const std::string& rule() const { return rule_; }

private:
    std::string rule_;
};

enum class Primitive { Replace, Shard, Sync, Checkpoint, Trace, Find, Fuse, PipelineSplit };

const char* primitive_name(Primitive p);

struct PrimitiveRecord {
    Primitive primitive = Primitive::Trace;
    std::string site;
    std::string library;              // replace
    std::string pattern;              // replace/fuse/checkpoint at a named pattern
    std::vector<std::string> params;  // shard
    int axis = 0;                     // shard
    std::string sync_type;            // forward | backward | both
    TraceSpec trace_spec;             // trace
    std::string after_child;          // pipeline_split
    std::string backend;              // fuse
};

struct ApplyResult {
    ModuleDef model;
    std::optional<PipelineStagePlan> stages;
};

struct ScheduleState;

/// Handle into the schedule tree; the tree mirrors the module hierarchy.
/// Primitives validate eagerly against the working model and append to a
/// shared log; apply() replays the log on a pristine copy, so the result is a
/// pure function of (model, log, world).
class Schedule {
public:
    Schedule(ModuleDef model, WorldConfig world);

    Schedule at(const std::string& path) const;
    const std::string& path() const { return path_; }
    std::vector<std::string> children() const;
    const ModuleDef& module() const;
    const ModuleDef& original_model() const;
    const WorldConfig& world() const;

    void trace(TraceSpec spec = {});
    void replace_with(const std::string& library_module);
    void replace_at(const std::string& library_module, const std::string& pattern_name);
    void shard(const std::vector<std::string>& param_names, int axis);
    void sync(const std::string& type);
    void checkpoint();
    void checkpoint_at(const std::string& pattern_name);
    std::vector<SubgraphMatch> find(const std::string& glob);
    std::vector<SubgraphMatch> find(const StaticGraph& pattern);
    void fuse_at(const std::string& pattern_name, const std::string& backend = "composed");
    void pipeline_split(const std::string& after_child);

    void define_pattern(const std::string& name, StaticGraph pattern);
    const std::map<std::string, StaticGraph>& patterns() const;

    const std::vector<PrimitiveRecord>& log() const;
    const std::vector<std::string>& warnings() const;

    ApplyResult apply() const;

    /// Deferred mode records without validating or executing; used by the
    /// script loader so rule checking can run as a separate phase.
    void set_deferred(bool deferred);
    void record_raw(PrimitiveRecord rec);

private:
    Schedule(std::shared_ptr<ScheduleState> state, std::string path);
    void record(PrimitiveRecord rec);

    std::shared_ptr<ScheduleState> state_;
    std::string path_;
};

Schedule create_schedule(ModuleDef model, WorldConfig world = {});

/// Log-prefix rule checks (R1/R2/R3) for one record. Model-state rules
/// (R4/R5) surface during execution. Throws RuleError.
void check_record_rules(const PrimitiveRecord& rec, const std::vector<PrimitiveRecord>& prior,
                        const WorldConfig& world);

/// Execute one record against `model`. Throws RuleError / Error on failure.
void apply_record(ModuleDef& model, const PrimitiveRecord& rec, const WorldConfig& world,
                  const std::map<std::string, StaticGraph>& patterns,
                  std::vector<std::string>* warnings);

}  // namespace slapo
