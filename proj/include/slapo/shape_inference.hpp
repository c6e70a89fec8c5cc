// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unordered_map>
#include <vector>

#include "slapo/module.hpp"

namespace slapo {

using ShapeMap = std::unordered_map<int, ValueSpec>;

/// The fixed builtin leaf op set.
bool is_builtin_op(const std::string& op);
const std::vector<std::string>& builtin_ops();

/// Infer the spec of every node in `graph`, with `ctx` supplying param and
/// submodule types. Throws Error("shape mismatch at node N: ...") with both
/// operand shapes on conflict. Deterministic and total on valid graphs.
ShapeMap infer_shapes(const StaticGraph& graph, const std::vector<TensorSpec>& inputs,
                      const ModuleDef& ctx);

/// Shape rule for one builtin op.
ValueSpec infer_op(const std::string& op, const std::vector<const ValueSpec*>& args,
                   const AttrMap& attrs, int node_id);

/// Input/output signature of a module: builtin rules for leaves, graph
/// propagation for composites.
ValueSpec module_output_spec(const ModuleDef& module, const std::vector<TensorSpec>& inputs);

/// Number of inputs a module's forward expects.
int module_input_arity(const ModuleDef& module);

/// Input specs declared on a graph's input nodes ("shape"/"dtype" attrs).
/// Throws if any input node lacks a shape attr.
std::vector<TensorSpec> declared_input_specs(const StaticGraph& graph);

}  // namespace slapo
