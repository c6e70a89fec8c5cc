// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "slapo/tensor.hpp"

namespace slapo {

/// Binary tensor dump, little-endian, per tensor:
/// u32 rank, i64 dims[rank], u8 dtype tag (0 = f32, 1 = f64), raw data.
void write_tensor_dump(const std::string& path, const std::vector<TensorValue>& tensors);
std::vector<TensorValue> read_tensor_dump(const std::string& path);

/// Human-readable form printed by the CLI.
std::string format_tensor_text(const TensorValue& t);

}  // namespace slapo
