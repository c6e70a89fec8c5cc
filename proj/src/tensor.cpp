// SPDX-License-Identifier: Apache-2.0

#include "slapo/tensor.hpp"

#include <sstream>

namespace slapo {

Dtype dtype_from_name(const std::string& name) {
    if (name == "f32") return Dtype::F32;
    if (name == "f64") return Dtype::F64;
    throw Error("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::string TensorSpec::to_string() const {
    std::ostringstream oss;
    oss << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << ",";
        oss << shape[i];
    }
    oss << "):" << dtype_name(dtype);
    return oss.str();
}

void validate_spec(const TensorSpec& spec) {
    for (auto d : spec.shape) {
        if (d < 1) throw Error("tensor dimension must be >= 1, got " + std::to_string(d));
    }
}

std::string ValueSpec::to_string() const {
    if (!tuple) return parts.empty() ? std::string("()") : parts[0].to_string();
    std::ostringstream oss;
    oss << "tuple[";
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) oss << ", ";
        oss << parts[i].to_string();
    }
    oss << "]";
    return oss.str();
}

}  // namespace slapo
