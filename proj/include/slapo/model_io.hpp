// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "slapo/module.hpp"

namespace slapo {

inline constexpr const char* kModelFormatVersion = "slapo-model-v1";

/// Parse a model file (JSON). Parse errors carry line/column; reference and
/// naming errors carry the offending name. Assigns persistent seeds to
/// dropout nodes that lack one so retraced graphs stay bitwise reproducible.
ModuleDef load_model(const std::string& text);
ModuleDef load_model_file(const std::string& path);

std::string save_model(const ModuleDef& root);
void save_model_file(const ModuleDef& root, const std::string& path);

/// Node-array form used by pattern blocks in schedule scripts.
StaticGraph parse_graph_json(const std::string& text);

}  // namespace slapo
