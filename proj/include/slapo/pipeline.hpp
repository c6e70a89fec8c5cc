// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "slapo/module.hpp"

namespace slapo {

/// One pipeline stage: a self-contained module plus the named values it
/// consumes from earlier stages and produces for later ones.
struct PipelineStage {
    ModuleDef module;
    std::vector<std::string> consumes;  // ordered; match the module's input nodes
    std::vector<std::string> produces;  // ordered; match the module's results
};

/// Sequential composition of the stages reproduces the original model.
/// stage_io comes from liveness analysis over the partitioned top graph.
struct PipelineStagePlan {
    std::vector<PipelineStage> stages;
    std::vector<std::string> model_inputs;   // names bound to the original model inputs
    std::vector<std::string> model_outputs;  // names of the original model results
};

/// One recorded pipeline_split: a stage boundary after `after_child` in the
/// graph of the module at `site`.
struct SplitAnnotation {
    std::string site;
    std::string after_child;
};

/// Propagate split annotations from the annotated submodules up through their
/// ancestors (partition each annotated module into sequential parts, inline
/// the parts into the parent, carry the boundaries along), then partition the
/// top module into stages and compute stage_io by liveness. The input model
/// is not modified.
PipelineStagePlan build_pipeline_plan(const ModuleDef& model,
                                      const std::vector<SplitAnnotation>& splits);

/// Input specs of the module at `path`, inferred from the root's declared
/// input shapes down to the module's first call site.
std::vector<TensorSpec> module_input_specs_at(const ModuleDef& root, const std::string& path);

}  // namespace slapo
