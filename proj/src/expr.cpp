// SPDX-License-Identifier: Apache-2.0

#include "slapo/expr.hpp"

#include <cctype>
#include <cmath>
#include <vector>

namespace slapo {

struct Expr::Node {
    enum class Kind { Num, Var, Unary, Binary, Call };
    Kind kind = Kind::Num;
    double num = 0.0;
    std::string name;  // var, call, or operator
    std::vector<std::shared_ptr<const Node>> args;
};

namespace {

using NodePtr = std::shared_ptr<const Expr::Node>;

struct Parser {
    const std::string& s;
    std::size_t pos = 0;

    void skip_ws() {
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    }

    bool eat(const std::string& tok) {
        skip_ws();
        if (s.compare(pos, tok.size(), tok) == 0) {
            pos += tok.size();
            return true;
        }
        return false;
    }

    char peek() {
        skip_ws();
        return pos < s.size() ? s[pos] : '\0';
    }

    [[noreturn]] void fail(const std::string& msg) {
        throw Error("expression error at offset " + std::to_string(pos) + " in '" + s + "': " + msg);
    }

    NodePtr make_binary(const std::string& op, NodePtr a, NodePtr b) {
        auto n = std::make_shared<Expr::Node>();
        n->kind = Expr::Node::Kind::Binary;
        n->name = op;
        n->args = {std::move(a), std::move(b)};
        return n;
    }

    NodePtr parse_or() {
        NodePtr lhs = parse_and();
        while (eat("||")) lhs = make_binary("||", lhs, parse_and());
        return lhs;
    }

    NodePtr parse_and() {
        NodePtr lhs = parse_cmp();
        while (eat("&&")) lhs = make_binary("&&", lhs, parse_cmp());
        return lhs;
    }

    NodePtr parse_cmp() {
        NodePtr lhs = parse_add();
        for (const char* op : {"==", "!=", "<=", ">=", "<", ">"}) {
            if (eat(op)) return make_binary(op, lhs, parse_add());
        }
        return lhs;
    }

    NodePtr parse_add() {
        NodePtr lhs = parse_mul();
        while (true) {
            if (eat("+")) lhs = make_binary("+", lhs, parse_mul());
            else if (eat("-")) lhs = make_binary("-", lhs, parse_mul());
            else break;
        }
        return lhs;
    }

    NodePtr parse_mul() {
        NodePtr lhs = parse_unary();
        while (true) {
            if (eat("*")) lhs = make_binary("*", lhs, parse_unary());
            else if (eat("/")) lhs = make_binary("/", lhs, parse_unary());
            else if (eat("%")) lhs = make_binary("%", lhs, parse_unary());
            else break;
        }
        return lhs;
    }

    NodePtr parse_unary() {
        if (eat("!")) {
            auto n = std::make_shared<Expr::Node>();
            n->kind = Expr::Node::Kind::Unary;
            n->name = "!";
            n->args = {parse_unary()};
            return n;
        }
        if (eat("-")) {
            auto n = std::make_shared<Expr::Node>();
            n->kind = Expr::Node::Kind::Unary;
            n->name = "-";
            n->args = {parse_unary()};
            return n;
        }
        return parse_primary();
    }

    NodePtr parse_primary() {
        skip_ws();
        if (pos >= s.size()) fail("unexpected end of expression");
        char c = s[pos];
        if (c == '(') {
            ++pos;
            NodePtr inner = parse_or();
            if (!eat(")")) fail("expected ')'");
            return inner;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
            std::size_t end = pos;
            while (end < s.size() &&
                   (std::isdigit(static_cast<unsigned char>(s[end])) || s[end] == '.' ||
                    s[end] == 'e' || s[end] == 'E' ||
                    ((s[end] == '+' || s[end] == '-') && end > pos &&
                     (s[end - 1] == 'e' || s[end - 1] == 'E'))))
                ++end;
            auto n = std::make_shared<Expr::Node>();
            n->kind = Expr::Node::Kind::Num;
            n->num = std::stod(s.substr(pos, end - pos));
            pos = end;
            return n;
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t end = pos;
            while (end < s.size() &&
                   (std::isalnum(static_cast<unsigned char>(s[end])) || s[end] == '_'))
                ++end;
            std::string name = s.substr(pos, end - pos);
            pos = end;
            skip_ws();
            if (pos < s.size() && s[pos] == '(') {
                ++pos;
                auto n = std::make_shared<Expr::Node>();
                n->kind = Expr::Node::Kind::Call;
                n->name = name;
                if (peek() != ')') {
                    n->args.push_back(parse_or());
                    while (eat(",")) n->args.push_back(parse_or());
                }
                if (!eat(")")) fail("expected ')' after call arguments");
                return n;
            }
            auto n = std::make_shared<Expr::Node>();
            n->kind = Expr::Node::Kind::Var;
            n->name = name;
            return n;
        }
        fail(std::string("unexpected character '") + c + "'");
    }
};

double eval_node(const Expr::Node& n, const Expr::Env& env) {
    using Kind = Expr::Node::Kind;
    switch (n.kind) {
        case Kind::Num: return n.num;
        case Kind::Var: {
            auto it = env.find(n.name);
            if (it == env.end()) throw Error("unknown variable '" + n.name + "' in expression");
            return it->second;
        }
        case Kind::Unary: {
            double v = eval_node(*n.args[0], env);
            return n.name == "-" ? -v : (v == 0.0 ? 1.0 : 0.0);
        }
        case Kind::Binary: {
            const std::string& op = n.name;
            if (op == "&&") {
                return eval_node(*n.args[0], env) != 0.0 && eval_node(*n.args[1], env) != 0.0 ? 1.0
                                                                                              : 0.0;
            }
            if (op == "||") {
                return eval_node(*n.args[0], env) != 0.0 || eval_node(*n.args[1], env) != 0.0 ? 1.0
                                                                                              : 0.0;
            }
            double a = eval_node(*n.args[0], env);
            double b = eval_node(*n.args[1], env);
            if (op == "+") return a + b;
            if (op == "-") return a - b;
            if (op == "*") return a * b;
            if (op == "/") return a / b;
            if (op == "%") return std::fmod(a, b);
            if (op == "==") return a == b ? 1.0 : 0.0;
            if (op == "!=") return a != b ? 1.0 : 0.0;
            if (op == "<") return a < b ? 1.0 : 0.0;
            if (op == "<=") return a <= b ? 1.0 : 0.0;
            if (op == ">") return a > b ? 1.0 : 0.0;
            if (op == ">=") return a >= b ? 1.0 : 0.0;
            throw Error("unknown operator '" + op + "'");
        }
        case Kind::Call: {
            std::vector<double> args;
            for (const auto& a : n.args) args.push_back(eval_node(*a, env));
            const std::string& f = n.name;
            if (f == "min" && args.size() == 2) return std::min(args[0], args[1]);
            if (f == "max" && args.size() == 2) return std::max(args[0], args[1]);
            if (f == "floor" && args.size() == 1) return std::floor(args[0]);
            if (f == "ceil" && args.size() == 1) return std::ceil(args[0]);
            if (f == "abs" && args.size() == 1) return std::fabs(args[0]);
            throw Error("unknown function '" + f + "' with " + std::to_string(args.size()) +
                        " args");
        }
    }
    throw Error("corrupt expression node");
}

}  // namespace

Expr Expr::parse(const std::string& text) {
    Parser p{text};
    Expr e;
    auto root = p.parse_or();
    p.skip_ws();
    if (p.pos != text.size()) p.fail("trailing characters");
    e.root_ = root;
    e.text_ = text;
    return e;
}

double Expr::eval(const Env& env) const {
    if (!root_) throw Error("empty expression");
    return eval_node(*root_, env);
}

}  // namespace slapo
