// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace slapo {

/// Scalar or int-list attribute attached to graph nodes and modules.
using AttrValue = std::variant<std::int64_t, double, std::string, std::vector<std::int64_t>>;

/// Ordered map so serialization is byte-stable.
using AttrMap = std::map<std::string, AttrValue>;

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline const AttrValue* find_attr(const AttrMap& attrs, const std::string& key) {
    auto it = attrs.find(key);
    return it == attrs.end() ? nullptr : &it->second;
}

inline std::optional<std::int64_t> attr_int(const AttrMap& attrs, const std::string& key) {
    if (const auto* v = find_attr(attrs, key)) {
        if (const auto* i = std::get_if<std::int64_t>(v)) return *i;
    }
    return std::nullopt;
}

inline std::optional<double> attr_double(const AttrMap& attrs, const std::string& key) {
    if (const auto* v = find_attr(attrs, key)) {
        if (const auto* f = std::get_if<double>(v)) return *f;
        if (const auto* i = std::get_if<std::int64_t>(v)) return static_cast<double>(*i);
    }
    return std::nullopt;
}

inline std::optional<std::string> attr_string(const AttrMap& attrs, const std::string& key) {
    if (const auto* v = find_attr(attrs, key)) {
        if (const auto* s = std::get_if<std::string>(v)) return *s;
    }
    return std::nullopt;
}

inline std::optional<std::vector<std::int64_t>> attr_int_list(const AttrMap& attrs,
                                                              const std::string& key) {
    if (const auto* v = find_attr(attrs, key)) {
        if (const auto* l = std::get_if<std::vector<std::int64_t>>(v)) return *l;
    }
    return std::nullopt;
}

inline bool attr_flag(const AttrMap& attrs, const std::string& key) {
    return attr_int(attrs, key).value_or(0) != 0;
}

}  // namespace slapo
