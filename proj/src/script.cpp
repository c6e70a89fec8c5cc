// SPDX-License-Identifier: Apache-2.0

#include "slapo/script.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "slapo/model_io.hpp"

namespace slapo {

namespace {

std::string strip(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

std::vector<std::string> tokenize(const std::string& line) {
    std::istringstream iss(line);
    std::vector<std::string> toks;
    std::string t;
    while (iss >> t) toks.push_back(t);
    return toks;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream iss(s);
    std::string part;
    while (std::getline(iss, part, ',')) {
        part = strip(part);
        if (!part.empty()) out.push_back(part);
    }
    return out;
}

/// key=value token helper; returns empty optional when the token has a
/// different key.
std::optional<std::string> kv(const std::string& tok, const std::string& key) {
    if (tok.rfind(key + "=", 0) == 0) return tok.substr(key.size() + 1);
    return std::nullopt;
}

[[noreturn]] void script_fail(int lineno, const std::string& msg) {
    throw Error("schedule script line " + std::to_string(lineno) + ": " + msg);
}

std::string normalize_site(const std::string& path) { return path == "." ? "" : path; }

std::vector<std::string> expand_site(const ModuleDef& model, const std::string& raw, int lineno) {
    std::string site = normalize_site(raw);
    if (site.empty()) return {""};
    if (!ModulePath::parse(site).has_wildcards()) return {site};
    std::vector<std::string> paths = resolve_paths(model, site);
    if (paths.empty()) script_fail(lineno, "glob '" + raw + "' matches no modules");
    return paths;
}

}  // namespace

void load_schedule_script(Schedule& sch, const std::string& text) {
    sch.set_deferred(true);
    const ModuleDef& model = sch.original_model();

    std::vector<std::string> lines;
    {
        std::istringstream iss(text);
        std::string l;
        while (std::getline(iss, l)) lines.push_back(l);
    }

    for (std::size_t li = 0; li < lines.size(); ++li) {
        int lineno = static_cast<int>(li) + 1;
        std::string line = strip(strip_comment(lines[li]));
        if (line.empty()) continue;

        if (line.rfind("pattern", 0) == 0) {
            // pattern <name> { <node array json, possibly multi-line> }
            std::istringstream head(line);
            std::string kw, name;
            head >> kw >> name;
            if (name.empty() || name.back() == '{') script_fail(lineno, "pattern needs a name");
            std::string rest;
            std::getline(head, rest);
            std::string body = rest;
            int depth = 0;
            bool opened = false;
            std::size_t scan = li;
            std::string collected;
            std::string chunk = rest;
            while (true) {
                for (char c : chunk) {
                    if (c == '{') {
                        ++depth;
                        opened = true;
                        if (depth == 1) continue;
                    }
                    if (c == '}') {
                        --depth;
                        if (depth == 0) break;
                    }
                    if (opened && depth >= 1) collected += c;
                }
                if (opened && depth == 0) break;
                ++scan;
                if (scan >= lines.size()) script_fail(lineno, "unterminated pattern block");
                chunk = strip_comment(lines[scan]);
                collected += '\n';
            }
            li = scan;
            try {
                sch.define_pattern(name, parse_graph_json(strip(collected)));
            } catch (const Error& e) {
                script_fail(lineno, std::string("bad pattern graph: ") + e.what());
            }
            continue;
        }

        std::vector<std::string> toks = tokenize(line);
        const std::string& cmd = toks[0];

        if (cmd == "trace") {
            if (toks.size() < 2) script_fail(lineno, "trace needs a path");
            TraceSpec spec;
            for (std::size_t i = 2; i < toks.size(); ++i) {
                if (auto v = kv(toks[i], "flatten"))
                    spec.flatten = *v == "true" || *v == "1";
                else if (auto l = kv(toks[i], "leaves"))
                    spec.leaves = split_commas(*l);
                else
                    script_fail(lineno, "unknown trace option '" + toks[i] + "'");
            }
            for (const auto& site : expand_site(model, toks[1], lineno)) {
                PrimitiveRecord rec;
                rec.primitive = Primitive::Trace;
                rec.site = site;
                rec.trace_spec = spec;
                sch.record_raw(std::move(rec));
            }
        } else if (cmd == "replace") {
            // replace <path> with <library> [at <pattern>]
            if (toks.size() < 4 || toks[2] != "with")
                script_fail(lineno, "usage: replace <path> with <library-module> [at <pattern>]");
            std::string pattern;
            if (toks.size() >= 6 && toks[4] == "at") pattern = toks[5];
            else if (toks.size() > 4) script_fail(lineno, "unexpected tokens after library module");
            for (const auto& site : expand_site(model, toks[1], lineno)) {
                PrimitiveRecord rec;
                rec.primitive = Primitive::Replace;
                rec.site = site;
                rec.library = toks[3];
                rec.pattern = pattern;
                sch.record_raw(std::move(rec));
            }
        } else if (cmd == "shard") {
            // shard <path> <param[,param]> axis=<0|1>
            if (toks.size() != 4) script_fail(lineno, "usage: shard <path> <params> axis=<0|1>");
            auto axis = kv(toks[3], "axis");
            if (!axis) script_fail(lineno, "shard needs axis=<0|1>");
            for (const auto& site : expand_site(model, toks[1], lineno)) {
                PrimitiveRecord rec;
                rec.primitive = Primitive::Shard;
                rec.site = site;
                rec.params = split_commas(toks[2]);
                rec.axis = std::stoi(*axis);
                sch.record_raw(std::move(rec));
            }
        } else if (cmd == "sync") {
            if (toks.size() != 3) script_fail(lineno, "usage: sync <path> type=<forward|backward|both>");
            auto type = kv(toks[2], "type");
            if (!type) script_fail(lineno, "sync needs type=<forward|backward|both>");
            for (const auto& site : expand_site(model, toks[1], lineno)) {
                PrimitiveRecord rec;
                rec.primitive = Primitive::Sync;
                rec.site = site;
                rec.sync_type = *type;
                sch.record_raw(std::move(rec));
            }
        } else if (cmd == "checkpoint") {
            std::string pattern;
            if (toks.size() == 4 && toks[2] == "at") pattern = toks[3];
            else if (toks.size() != 2) script_fail(lineno, "usage: checkpoint <path> [at <pattern>]");
            for (const auto& site : expand_site(model, toks[1], lineno)) {
                PrimitiveRecord rec;
                rec.primitive = Primitive::Checkpoint;
                rec.site = site;
                rec.pattern = pattern;
                sch.record_raw(std::move(rec));
            }
        } else if (cmd == "fuse") {
            // fuse <path> at <pattern> backend=<name>
            if (toks.size() < 4 || toks[2] != "at")
                script_fail(lineno, "usage: fuse <path> at <pattern> backend=<name>");
            std::string backend = "composed";
            if (toks.size() == 5) {
                auto b = kv(toks[4], "backend");
                if (!b) script_fail(lineno, "expected backend=<name>");
                backend = *b;
            }
            for (const auto& site : expand_site(model, toks[1], lineno)) {
                PrimitiveRecord rec;
                rec.primitive = Primitive::Fuse;
                rec.site = site;
                rec.pattern = toks[3];
                rec.backend = backend;
                sch.record_raw(std::move(rec));
            }
        } else if (cmd == "pipeline_split") {
            if (toks.size() != 3) script_fail(lineno, "usage: pipeline_split <path> after=<child>");
            auto after = kv(toks[2], "after");
            if (!after) script_fail(lineno, "pipeline_split needs after=<child-segment>");
            for (const auto& site : expand_site(model, toks[1], lineno)) {
                PrimitiveRecord rec;
                rec.primitive = Primitive::PipelineSplit;
                rec.site = site;
                rec.after_child = *after;
                sch.record_raw(std::move(rec));
            }
        } else {
            script_fail(lineno, "unknown primitive '" + cmd + "'");
        }
    }
}

// ---------------------------------------------------------------------------
// Tuning space file

namespace {

std::vector<std::string> parse_number_list(const std::string& raw, int lineno) {
    std::string s = strip(raw);
    if (s.size() < 2 || s.front() != '[' || s.back() != ']')
        throw Error("line " + std::to_string(lineno) + ": expected [v1, v2, ...]");
    return split_commas(s.substr(1, s.size() - 2));
}

}  // namespace

TuneSpaceFile load_tune_space(const std::string& text) {
    TuneSpaceFile out;
    std::istringstream iss(text);
    std::string line;
    std::string section;
    SymbolicVar current_var;
    bool in_var = false;
    int lineno = 0;

    auto flush_var = [&]() {
        if (!in_var) return;
        if (current_var.name.empty()) throw Error("[var] block missing name");
        if (current_var.candidates.empty())
            throw Error("[var] block for '" + current_var.name + "' missing candidates");
        out.space.vars.push_back(current_var);
        current_var = {};
        in_var = false;
    };

    while (std::getline(iss, line)) {
        ++lineno;
        line = strip(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            flush_var();
            section = strip(line.substr(1, line.find(']') - 1));
            if (section == "var") in_var = true;
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = strip(line.substr(0, eq));
        std::string value = strip(line.substr(eq + 1));

        if (section == "var") {
            if (key == "name") current_var.name = value;
            else if (key == "candidates") {
                for (const auto& c : parse_number_list(value, lineno))
                    current_var.candidates.push_back(Expr::parse(c));
            } else if (key == "when") {
                current_var.when = Expr::parse(value);
                current_var.has_when = true;
            } else {
                throw Error("line " + std::to_string(lineno) + ": unknown [var] key '" + key + "'");
            }
        } else if (section == "constraint") {
            if (key != "expr")
                throw Error("line " + std::to_string(lineno) + ": [constraint] expects expr = ...");
            out.space.constraints.push_back(Expr::parse(value));
        } else if (section == "bind") {
            if (key == "batch") out.bindings.batch_var = value;
            else if (key == "micro_batches") out.bindings.micro_batches_var = value;
            else if (key == "checkpoint_ratio") {
                // checkpoint_ratio = <var> over <container-path>
                std::vector<std::string> toks = tokenize(value);
                if (toks.size() != 3 || toks[1] != "over")
                    throw Error("line " + std::to_string(lineno) +
                                ": expected checkpoint_ratio = <var> over <path>");
                out.bindings.checkpoint_ratio_var = toks[0];
                out.bindings.checkpoint_container = toks[2];
            } else if (key == "when") {
                // when = <var> apply <schedule line>
                std::vector<std::string> toks = tokenize(value);
                if (toks.size() < 3 || toks[1] != "apply")
                    throw Error("line " + std::to_string(lineno) +
                                ": expected when = <var> apply <schedule line>");
                std::size_t apply_pos = value.find("apply");
                out.bindings.conditional_lines.push_back(
                    {toks[0], strip(value.substr(apply_pos + 5))});
            } else {
                throw Error("line " + std::to_string(lineno) + ": unknown [bind] key '" + key + "'");
            }
        } else {
            throw Error("line " + std::to_string(lineno) + ": content outside any section");
        }
    }
    flush_var();
    if (out.space.vars.empty()) throw Error("tuning space defines no variables");
    return out;
}

// ---------------------------------------------------------------------------
// CLI config

CliConfig load_cli_config(const std::string& text) {
    CliConfig cfg;
    std::istringstream iss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(iss, line)) {
        ++lineno;
        line = strip(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            section = strip(line.substr(1, line.find(']') - 1));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = strip(line.substr(0, eq));
        std::string value = strip(line.substr(eq + 1));
        double num = 0.0;
        try {
            num = std::stod(value);
        } catch (...) {
            throw Error("config line " + std::to_string(lineno) + ": numeric value expected");
        }
        if (section == "world") {
            if (key == "world_size") cfg.world.world_size = static_cast<int>(num);
            else if (key == "device_memory_bytes")
                cfg.world.device_memory_bytes = static_cast<std::int64_t>(num);
            else if (key == "device_memory_gb")
                cfg.world.device_memory_bytes = static_cast<std::int64_t>(num * 1024 * 1024 * 1024);
            else throw Error("unknown [world] key '" + key + "'");
        } else if (section == "cost") {
            if (key == "device_flops_per_s") cfg.world.cost.device_flops_per_s = num;
            else if (key == "link_bytes_per_s") cfg.world.cost.link_bytes_per_s = num;
            else if (key == "kernel_launch_overhead_s") cfg.world.cost.kernel_launch_overhead_s = num;
            else if (key == "optimizer_state_multiplier")
                cfg.world.cost.optimizer_state_multiplier = num;
            else throw Error("unknown [cost] key '" + key + "'");
        } else if (section == "verify") {
            if (key == "trials") cfg.verify_trials = static_cast<int>(num);
            else if (key == "atol") cfg.verify_atol = num;
            else if (key == "rtol") cfg.verify_rtol = num;
            else throw Error("unknown [verify] key '" + key + "'");
        } else {
            throw Error("config line " + std::to_string(lineno) + ": content outside any section");
        }
    }
    return cfg;
}

}  // namespace slapo
