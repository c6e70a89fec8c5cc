// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <memory>
#include <string>

#include "slapo/attrs.hpp"

namespace slapo {

/// Tiny arithmetic/boolean expression over named numeric variables, used by
/// tuning-space candidate lists and constraints. Booleans are 0/1.
/// Grammar: || > && > comparisons > +- > */% > unary -/! > primary
/// (number, identifier, parens, min/max/floor/ceil/abs calls).
class Expr {
public:
    using Env = std::map<std::string, double>;

    static Expr parse(const std::string& text);

    double eval(const Env& env) const;
    bool eval_bool(const Env& env) const { return eval(env) != 0.0; }
    const std::string& text() const { return text_; }

    Expr() = default;

    struct Node;

private:
    std::shared_ptr<const Node> root_;
    std::string text_;
};

}  // namespace slapo
