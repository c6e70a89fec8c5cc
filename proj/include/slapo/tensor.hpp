// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slapo/attrs.hpp"

namespace slapo {

enum class Dtype { F32, F64 };

inline int dtype_width(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }

inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& name);

/// Shape + dtype of a dense row-major tensor. Rank 0 means scalar.
struct TensorSpec {
    std::vector<std::int64_t> shape;
    Dtype dtype = Dtype::F64;

    std::int64_t element_count() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
    std::int64_t byte_size() const { return element_count() * dtype_width(dtype); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return shape.empty(); }

    bool operator==(const TensorSpec& o) const { return shape == o.shape && dtype == o.dtype; }
    bool operator!=(const TensorSpec& o) const { return !(*this == o); }

    std::string to_string() const;
};

void validate_spec(const TensorSpec& spec);

/// Dense row-major tensor. Arithmetic runs in double; f32 results are rounded
/// through float after each op so storage dtype matters numerically too.
struct TensorValue {
    TensorSpec spec;
    std::vector<double> data;

    TensorValue() = default;
    explicit TensorValue(TensorSpec s) : spec(std::move(s)), data(spec.element_count(), 0.0) {}
    TensorValue(TensorSpec s, std::vector<double> d) : spec(std::move(s)), data(std::move(d)) {}

    static TensorValue scalar(double v, Dtype dt = Dtype::F64) {
        TensorValue t;
        t.spec.dtype = dt;
        t.data = {v};
        return t;
    }
    static TensorValue zeros(const TensorSpec& s) { return TensorValue(s); }
    static TensorValue filled(const TensorSpec& s, double v) {
        TensorValue t(s);
        for (auto& x : t.data) x = v;
        return t;
    }

    double& at(std::int64_t i) { return data[i]; }
    double at(std::int64_t i) const { return data[i]; }
    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    /// Round elements through the storage dtype.
    void quantize() {
        if (spec.dtype == Dtype::F32) {
            for (auto& x : data) x = static_cast<double>(static_cast<float>(x));
        }
    }
};

/// A node's runtime/static type: a single tensor or a tuple (split, multi-output modules).
struct ValueSpec {
    std::vector<TensorSpec> parts;
    bool tuple = false;

    ValueSpec() = default;
    explicit ValueSpec(TensorSpec single) : parts{std::move(single)}, tuple(false) {}
    static ValueSpec make_tuple(std::vector<TensorSpec> p) {
        ValueSpec v;
        v.parts = std::move(p);
        v.tuple = true;
        return v;
    }
    const TensorSpec& single() const {
        if (tuple || parts.size() != 1) throw Error("value is not a single tensor");
        return parts[0];
    }
    std::size_t arity() const { return parts.size(); }
    bool operator==(const ValueSpec& o) const { return tuple == o.tuple && parts == o.parts; }
    std::int64_t byte_size() const {
        std::int64_t n = 0;
        for (const auto& p : parts) n += p.byte_size();
        return n;
    }
    std::string to_string() const;
};

}  // namespace slapo
