// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "slapo/module.hpp"

namespace slapo {

/// Reference attention core: (q, k, v) each (B, S, H) -> context (B, S, H),
/// multi-head with fixed head_dim. Built from the same graph the
/// EfficientAttention kernel evaluates, so replacement is exact.
ModuleDef make_attention_core(std::int64_t head_dim, double dropout_p, std::uint64_t seed);

/// Composite holding three Linears (query, key, value) over a shared input,
/// producing the (q, k, v) tuple. The target of the fused-QKV replacement.
ModuleDef make_qkv_composite(std::int64_t hidden, std::uint64_t seed);

/// FusedQKV builtin with weights concatenated from an existing QKV composite.
ModuleDef build_fused_qkv(const ModuleDef& old_qkv);

bool has_library_module(const std::string& name);

/// Construct the named library replacement from the module it replaces.
/// "FusedQKV" fuses a three-Linear composite; "EfficientAttention" swaps an
/// attention core for the fused kernel equivalent.
ModuleDef build_library_module(const std::string& name, const ModuleDef& old_module);

}  // namespace slapo
