// SPDX-License-Identifier: Apache-2.0

#include "slapo/model_io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "slapo/rng.hpp"
#include "slapo/shape_inference.hpp"

namespace slapo {

using json = nlohmann::ordered_json;

namespace {

std::pair<int, int> line_col_of(const std::string& text, std::size_t byte) {
    int line = 1, col = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

AttrValue attr_from_json(const json& v) {
    if (v.is_boolean()) return static_cast<std::int64_t>(v.get<bool>() ? 1 : 0);
    if (v.is_number_integer()) return v.get<std::int64_t>();
    if (v.is_number_float()) return v.get<double>();
    if (v.is_string()) return v.get<std::string>();
    if (v.is_array()) {
        std::vector<std::int64_t> list;
        for (const auto& e : v) {
            if (!e.is_number_integer()) throw Error("attr arrays must hold integers");
            list.push_back(e.get<std::int64_t>());
        }
        return list;
    }
    throw Error("unsupported attr value type");
}

json attr_to_json(const AttrValue& v) {
    if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
    if (const auto* d = std::get_if<double>(&v)) return *d;
    if (const auto* s = std::get_if<std::string>(&v)) return *s;
    return std::get<std::vector<std::int64_t>>(v);
}

AttrMap attrs_from_json(const json& j) {
    AttrMap attrs;
    for (auto it = j.begin(); it != j.end(); ++it) attrs[it.key()] = attr_from_json(it.value());
    return attrs;
}

json attrs_to_json(const AttrMap& attrs) {
    json j = json::object();
    for (const auto& [k, v] : attrs) j[k] = attr_to_json(v);
    return j;
}

StaticGraph graph_from_json(const json& arr) {
    StaticGraph g;
    for (const auto& jn : arr) {
        GraphNode n;
        n.id = jn.at("id").get<int>();
        n.kind = node_kind_from_name(jn.at("kind").get<std::string>());
        if (jn.contains("op")) n.op = jn["op"].get<std::string>();
        if (jn.contains("target")) n.target = jn["target"].get<std::string>();
        if (jn.contains("args")) {
            for (const auto& a : jn["args"]) n.args.push_back(a.get<int>());
        }
        if (jn.contains("attrs")) n.attrs = attrs_from_json(jn["attrs"]);
        if (n.kind == NodeKind::Input) g.input_ids.push_back(n.id);
        if (n.kind == NodeKind::Output) g.output_id = n.id;
        if (n.kind == NodeKind::CallOp && !is_builtin_op(n.op))
            throw Error("unknown op '" + n.op + "' at node " + std::to_string(n.id));
        g.nodes.push_back(std::move(n));
    }
    g.validate();
    return g;
}

json graph_to_json(const StaticGraph& g) {
    json arr = json::array();
    for (const auto& n : g.nodes) {
        json jn = json::object();
        jn["id"] = n.id;
        jn["kind"] = node_kind_name(n.kind);
        if (!n.op.empty()) jn["op"] = n.op;
        if (!n.target.empty()) jn["target"] = n.target;
        if (!n.args.empty()) jn["args"] = n.args;
        if (!n.attrs.empty()) jn["attrs"] = attrs_to_json(n.attrs);
        arr.push_back(std::move(jn));
    }
    return arr;
}

ParamDef param_from_json(const json& jp) {
    ParamDef p;
    p.name = jp.at("name").get<std::string>();
    p.spec.shape = jp.at("shape").get<std::vector<std::int64_t>>();
    p.spec.dtype = dtype_from_name(jp.value("dtype", "f64"));
    p.init = init_scheme_from_name(jp.value("init", "normal"));
    p.seed = jp.value("seed", 0ULL);
    if (jp.contains("block_seeds"))
        p.block_seeds = jp["block_seeds"].get<std::vector<std::uint64_t>>();
    if (jp.contains("values")) p.values = jp["values"].get<std::vector<double>>();
    if (jp.contains("shard")) {
        ShardInfo s;
        s.axis = jp["shard"].at("axis").get<int>();
        s.world_size = jp["shard"].at("world_size").get<int>();
        s.blocks = jp["shard"].value("blocks", 1);
        s.full_shape = jp["shard"].at("full_shape").get<std::vector<std::int64_t>>();
        p.shard = s;
    }
    validate_spec(p.spec);
    return p;
}

json param_to_json(const ParamDef& p) {
    json jp = json::object();
    jp["name"] = p.name;
    jp["shape"] = p.spec.shape;
    jp["dtype"] = dtype_name(p.spec.dtype);
    jp["init"] = init_scheme_name(p.init);
    jp["seed"] = p.seed;
    if (!p.block_seeds.empty()) jp["block_seeds"] = p.block_seeds;
    if (!p.values.empty()) jp["values"] = p.values;
    if (p.shard) {
        jp["shard"] = {{"axis", p.shard->axis},
                       {"world_size", p.shard->world_size},
                       {"blocks", p.shard->blocks},
                       {"full_shape", p.shard->full_shape}};
    }
    return jp;
}

ModuleDef module_from_json(const json& jm, const std::string& path) {
    ModuleDef m;
    m.name = last_segment(path);
    m.kind = jm.value("kind", "composite");
    if (jm.contains("attrs")) m.attrs = attrs_from_json(jm["attrs"]);
    if (jm.contains("params")) {
        for (const auto& jp : jm["params"]) m.params.push_back(param_from_json(jp));
    }
    if (jm.contains("submodules")) {
        for (auto it = jm["submodules"].begin(); it != jm["submodules"].end(); ++it) {
            m.add_submodule(it.key(), module_from_json(it.value(), join_path(path, it.key())));
        }
    }
    if (jm.contains("forward")) m.forward = graph_from_json(jm["forward"]);
    if (m.is_composite() && !m.forward)
        throw Error("composite module '" + (path.empty() ? std::string("<root>") : path) +
                    "' missing forward graph");
    return m;
}

json module_to_json(const ModuleDef& m) {
    json jm = json::object();
    jm["kind"] = m.kind;
    if (!m.attrs.empty()) jm["attrs"] = attrs_to_json(m.attrs);
    if (!m.params.empty()) {
        json arr = json::array();
        for (const auto& p : m.params) arr.push_back(param_to_json(p));
        jm["params"] = arr;
    }
    if (!m.submodules.empty()) {
        json subs = json::object();
        for (const auto& s : m.submodules) subs[s.name] = module_to_json(*s.module);
        jm["submodules"] = subs;
    }
    if (m.forward) jm["forward"] = graph_to_json(*m.forward);
    return jm;
}

/// Dropout randomness must be a property of the node, not of its position in
/// a traced graph, so inlining preserves train-mode numerics. Assign missing
/// seeds once at load from the node's original location.
void pin_dropout_seeds(ModuleDef& m, const std::string& path) {
    if (m.kind == "Dropout" && !attr_int(m.attrs, "seed")) {
        m.attrs["seed"] = static_cast<std::int64_t>(derive_seed(0xd09, path));
    }
    if (m.forward) {
        for (auto& n : m.forward->nodes) {
            if (n.kind == NodeKind::CallOp && n.op == "dropout" && !attr_int(n.attrs, "seed")) {
                n.attrs["seed"] = static_cast<std::int64_t>(
                    derive_seed(0xd09, path + "#" + std::to_string(n.id)));
            }
        }
    }
    for (auto& s : m.submodules) pin_dropout_seeds(*s.module, join_path(path, s.name));
}

}  // namespace

ModuleDef load_model(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        auto [line, col] = line_col_of(text, e.byte > 0 ? e.byte - 1 : 0);
        throw Error("parse error at line " + std::to_string(line) + ", column " +
                    std::to_string(col) + ": " + e.what());
    }
    try {
        if (doc.value("format", "") != kModelFormatVersion)
            throw Error("missing or unsupported format header (expected '" +
                        std::string(kModelFormatVersion) + "')");
        ModuleDef root = module_from_json(doc.at("modules"), "");
        root.name = doc.value("name", "model");
        pin_dropout_seeds(root, "");
        root.validate();
        return root;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed model file: ") + e.what());
    }
}

ModuleDef load_model_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open model file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return load_model(buf.str());
}

std::string save_model(const ModuleDef& root) {
    json doc = json::object();
    doc["format"] = kModelFormatVersion;
    doc["name"] = root.name;
    doc["modules"] = module_to_json(root);
    return doc.dump(2) + "\n";
}

void save_model_file(const ModuleDef& root, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write model file '" + path + "'");
    out << save_model(root);
}

StaticGraph parse_graph_json(const std::string& text) {
    json arr;
    try {
        arr = json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        auto [line, col] = line_col_of(text, e.byte > 0 ? e.byte - 1 : 0);
        throw Error("parse error at line " + std::to_string(line) + ", column " +
                    std::to_string(col) + ": " + e.what());
    }
    return graph_from_json(arr);
}

}  // namespace slapo
