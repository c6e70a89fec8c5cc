// SPDX-License-Identifier: Apache-2.0

#include "slapo/module.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "slapo/rng.hpp"

namespace slapo {

const char* init_scheme_name(InitScheme s) {
    switch (s) {
        case InitScheme::Normal: return "normal";
        case InitScheme::Uniform: return "uniform";
        case InitScheme::Zeros: return "zeros";
        case InitScheme::Ones: return "ones";
    }
    return "?";
}

InitScheme init_scheme_from_name(const std::string& name) {
    if (name == "normal") return InitScheme::Normal;
    if (name == "uniform") return InitScheme::Uniform;
    if (name == "zeros") return InitScheme::Zeros;
    if (name == "ones") return InitScheme::Ones;
    throw Error("unknown init scheme '" + name + "'");
}

Submodule::Submodule(std::string n, ModuleDef m)
    : name(std::move(n)), module(new ModuleDef(std::move(m))) {}
Submodule::Submodule(const Submodule& o)
    : name(o.name), module(o.module ? new ModuleDef(*o.module) : nullptr) {}
Submodule::Submodule(Submodule&& o) noexcept : name(std::move(o.name)), module(o.module) {
    o.module = nullptr;
}
Submodule& Submodule::operator=(const Submodule& o) {
    if (this != &o) {
        delete module;
        name = o.name;
        module = o.module ? new ModuleDef(*o.module) : nullptr;
    }
    return *this;
}
Submodule& Submodule::operator=(Submodule&& o) noexcept {
    if (this != &o) {
        delete module;
        name = std::move(o.name);
        module = o.module;
        o.module = nullptr;
    }
    return *this;
}
Submodule::~Submodule() { delete module; }

const ModuleDef* ModuleDef::find_child(const std::string& segment) const {
    for (const auto& s : submodules) {
        if (s.name == segment) return s.module;
    }
    return nullptr;
}

ModuleDef* ModuleDef::find_child(const std::string& segment) {
    for (auto& s : submodules) {
        if (s.name == segment) return s.module;
    }
    return nullptr;
}

const ModuleDef& ModuleDef::child(const std::string& segment) const {
    const ModuleDef* m = find_child(segment);
    if (!m) throw Error("unknown submodule '" + segment + "' in module '" + name + "'");
    return *m;
}

ModuleDef& ModuleDef::child(const std::string& segment) {
    ModuleDef* m = find_child(segment);
    if (!m) throw Error("unknown submodule '" + segment + "' in module '" + name + "'");
    return *m;
}

const ModuleDef* ModuleDef::resolve(const std::string& path) const {
    if (path.empty()) return this;
    const ModuleDef* cur = this;
    std::istringstream iss(path);
    std::string seg;
    while (std::getline(iss, seg, '.')) {
        cur = cur->find_child(seg);
        if (!cur) return nullptr;
    }
    return cur;
}

ModuleDef* ModuleDef::resolve(const std::string& path) {
    return const_cast<ModuleDef*>(static_cast<const ModuleDef*>(this)->resolve(path));
}

const ParamDef* ModuleDef::find_param(const std::string& pname) const {
    for (const auto& p : params) {
        if (p.name == pname) return &p;
    }
    return nullptr;
}

ParamDef* ModuleDef::find_param(const std::string& pname) {
    for (auto& p : params) {
        if (p.name == pname) return &p;
    }
    return nullptr;
}

const ParamDef* ModuleDef::resolve_param(const std::string& dotted) const {
    auto pos = dotted.rfind('.');
    if (pos == std::string::npos) return find_param(dotted);
    const ModuleDef* owner = resolve(dotted.substr(0, pos));
    return owner ? owner->find_param(dotted.substr(pos + 1)) : nullptr;
}

ParamDef* ModuleDef::resolve_param(const std::string& dotted) {
    return const_cast<ParamDef*>(static_cast<const ModuleDef*>(this)->resolve_param(dotted));
}

void ModuleDef::add_submodule(const std::string& segment, ModuleDef m) {
    if (find_child(segment))
        throw Error("duplicate submodule name '" + segment + "' in module '" + name + "'");
    submodules.emplace_back(segment, std::move(m));
}

void ModuleDef::replace_submodule(const std::string& segment, ModuleDef m) {
    for (auto& s : submodules) {
        if (s.name == segment) {
            *s.module = std::move(m);
            return;
        }
    }
    throw Error("unknown submodule '" + segment + "' in module '" + name + "'");
}

bool is_builtin_kind(const std::string& kind) {
    static const std::unordered_set<std::string> kinds = {
        "Linear", "LayerNorm", "Dropout", "Embedding", "FusedQKV", "EfficientAttention"};
    return kinds.count(kind) > 0;
}

void ModuleDef::validate() const {
    if (!is_composite() && !is_builtin_kind(kind))
        throw Error("module '" + name + "' has unknown kind '" + kind + "'");
    std::unordered_set<std::string> names;
    for (const auto& s : submodules) {
        if (s.name.empty() || s.name.find('.') != std::string::npos)
            throw Error("invalid submodule segment '" + s.name + "'");
        if (!names.insert(s.name).second)
            throw Error("duplicate submodule name '" + s.name + "' in module '" + name + "'");
    }
    std::unordered_set<std::string> pnames;
    for (const auto& p : params) {
        if (!pnames.insert(p.name).second)
            throw Error("duplicate param name '" + p.name + "' in module '" + name + "'");
        validate_spec(p.spec);
    }
    if (is_composite()) {
        if (!forward) throw Error("composite module '" + name + "' missing forward graph");
        forward->validate();
        for (const auto& n : forward->nodes) {
            if (n.kind == NodeKind::CallModule) {
                if (!resolve(n.target))
                    throw Error("unknown submodule '" + n.target + "' referenced by module '" +
                                name + "'");
            } else if (n.kind == NodeKind::ParamRef) {
                if (!resolve_param(n.target))
                    throw Error("unknown param '" + n.target + "' referenced by module '" + name +
                                "'");
            }
        }
    }
    for (const auto& s : submodules) s.module->validate();
}

bool modules_structurally_equal(const ModuleDef& a, const ModuleDef& b) {
    if (a.kind != b.kind || a.attrs != b.attrs) return false;
    if (a.params.size() != b.params.size()) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        const auto& p = a.params[i];
        const auto& q = b.params[i];
        if (p.name != q.name || p.spec != q.spec || p.init != q.init || p.seed != q.seed ||
            p.block_seeds != q.block_seeds || p.values != q.values)
            return false;
        if (p.shard.has_value() != q.shard.has_value()) return false;
        if (p.shard && !(*p.shard == *q.shard)) return false;
    }
    if (a.forward.has_value() != b.forward.has_value()) return false;
    if (a.forward && !graphs_isomorphic(*a.forward, *b.forward)) return false;
    if (a.submodules.size() != b.submodules.size()) return false;
    for (std::size_t i = 0; i < a.submodules.size(); ++i) {
        if (a.submodules[i].name != b.submodules[i].name) return false;
        if (!modules_structurally_equal(*a.submodules[i].module, *b.submodules[i].module))
            return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Paths

ModulePath ModulePath::parse(const std::string& text) {
    ModulePath p;
    if (text.empty()) return p;
    std::istringstream iss(text);
    std::string seg;
    while (std::getline(iss, seg, '.')) {
        if (seg.empty()) throw Error("empty segment in path '" + text + "'");
        p.segments.push_back(seg);
    }
    return p;
}

std::string ModulePath::str() const {
    std::string out;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (i) out += '.';
        out += segments[i];
    }
    return out;
}

bool ModulePath::has_wildcards() const {
    for (const auto& s : segments) {
        if (s == "*" || s == "**") return true;
    }
    return false;
}

namespace {

bool match_from(const std::vector<std::string>& pat, std::size_t pi,
                const std::vector<std::string>& con, std::size_t ci) {
    if (pi == pat.size()) return ci == con.size();
    if (pat[pi] == "**") {
        for (std::size_t take = 0; ci + take <= con.size(); ++take) {
            if (match_from(pat, pi + 1, con, ci + take)) return true;
        }
        return false;
    }
    if (ci == con.size()) return false;
    if (pat[pi] != "*" && pat[pi] != con[ci]) return false;
    return match_from(pat, pi + 1, con, ci + 1);
}

void collect_paths(const ModuleDef& m, const std::string& prefix, std::vector<std::string>& out) {
    out.push_back(prefix);
    for (const auto& s : m.submodules) {
        collect_paths(*s.module, join_path(prefix, s.name), out);
    }
}

}  // namespace

bool path_matches(const ModulePath& pattern, const ModulePath& concrete) {
    return match_from(pattern.segments, 0, concrete.segments, 0);
}

std::vector<std::string> all_paths(const ModuleDef& root) {
    std::vector<std::string> out;
    collect_paths(root, "", out);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::string> resolve_paths(const ModuleDef& root, const std::string& pattern) {
    ModulePath pat = ModulePath::parse(pattern);
    if (!pat.has_wildcards()) {
        return root.resolve(pattern) ? std::vector<std::string>{pattern}
                                     : std::vector<std::string>{};
    }
    std::vector<std::string> matches;
    for (const auto& p : all_paths(root)) {
        if (p.empty()) continue;
        if (path_matches(pat, ModulePath::parse(p))) matches.push_back(p);
    }
    std::sort(matches.begin(), matches.end());
    return matches;
}

std::string join_path(const std::string& a, const std::string& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    return a + "." + b;
}

std::string parent_path(const std::string& path) {
    auto pos = path.rfind('.');
    return pos == std::string::npos ? std::string() : path.substr(0, pos);
}

std::string last_segment(const std::string& path) {
    auto pos = path.rfind('.');
    return pos == std::string::npos ? path : path.substr(pos + 1);
}

// ---------------------------------------------------------------------------
// Builtin constructors

ModuleDef make_linear(std::int64_t in_features, std::int64_t out_features, bool bias,
                      std::uint64_t seed) {
    ModuleDef m;
    m.kind = "Linear";
    m.attrs["in_features"] = in_features;
    m.attrs["out_features"] = out_features;
    // Weight is out-major: shape (out_features, in_features).
    ParamDef w;
    w.name = "weight";
    w.spec.shape = {out_features, in_features};
    w.init = InitScheme::Normal;
    w.seed = seed;
    m.params.push_back(std::move(w));
    if (bias) {
        ParamDef b;
        b.name = "bias";
        b.spec.shape = {out_features};
        b.init = InitScheme::Zeros;
        b.seed = seed + 1;
        m.params.push_back(std::move(b));
    }
    return m;
}

ModuleDef make_layernorm(std::int64_t normalized_size, double eps, std::uint64_t seed) {
    ModuleDef m;
    m.kind = "LayerNorm";
    m.attrs["normalized_size"] = normalized_size;
    m.attrs["eps"] = eps;
    ParamDef g;
    g.name = "gamma";
    g.spec.shape = {normalized_size};
    g.init = InitScheme::Ones;
    g.seed = seed;
    m.params.push_back(std::move(g));
    ParamDef b;
    b.name = "beta";
    b.spec.shape = {normalized_size};
    b.init = InitScheme::Zeros;
    b.seed = seed + 1;
    m.params.push_back(std::move(b));
    return m;
}

ModuleDef make_dropout(double p, std::uint64_t seed) {
    ModuleDef m;
    m.kind = "Dropout";
    m.attrs["p"] = p;
    m.attrs["seed"] = static_cast<std::int64_t>(seed);
    return m;
}

ModuleDef make_embedding(std::int64_t num_embeddings, std::int64_t dim, std::uint64_t seed) {
    ModuleDef m;
    m.kind = "Embedding";
    m.attrs["num_embeddings"] = num_embeddings;
    m.attrs["dim"] = dim;
    ParamDef t;
    t.name = "weight";
    t.spec.shape = {num_embeddings, dim};
    t.init = InitScheme::Normal;
    t.seed = seed;
    m.params.push_back(std::move(t));
    return m;
}

// ---------------------------------------------------------------------------
// Parameter materialization

namespace {

TensorValue init_plain(const TensorSpec& full, InitScheme init, std::uint64_t seed);

}  // namespace

TensorValue init_param_full(const ParamDef& p) {
    TensorSpec full;
    full.shape = p.full_shape();
    full.dtype = p.spec.dtype;
    if (!p.values.empty()) {
        if (static_cast<std::int64_t>(p.values.size()) != full.element_count())
            throw Error("param '" + p.name + "' has " + std::to_string(p.values.size()) +
                        " explicit values for shape with " + std::to_string(full.element_count()) +
                        " elements");
        TensorValue t(full, p.values);
        t.quantize();
        return t;
    }
    if (p.block_seeds.empty()) return init_plain(full, p.init, p.seed);

    // Assemble axis-0 blocks, each generated as its own tensor.
    std::int64_t blocks = static_cast<std::int64_t>(p.block_seeds.size());
    if (full.shape.empty() || full.shape[0] % blocks != 0)
        throw Error("param '" + p.name + "' rows not divisible into " + std::to_string(blocks) +
                    " blocks");
    TensorSpec block_spec = full;
    block_spec.shape[0] /= blocks;
    std::int64_t block_elems = block_spec.element_count();
    TensorValue t(full);
    for (std::int64_t b = 0; b < blocks; ++b) {
        TensorValue part = init_plain(block_spec, p.init, p.block_seeds[b]);
        for (std::int64_t i = 0; i < block_elems; ++i) t.data[b * block_elems + i] = part.data[i];
    }
    return t;
}

namespace {

TensorValue init_plain(const TensorSpec& full, InitScheme init, std::uint64_t seed) {
    TensorValue t(full);
    switch (init) {
        case InitScheme::Normal:
            for (std::int64_t i = 0; i < t.size(); ++i)
                t.data[i] = 0.1 * normal01(seed, 0x9a7a, static_cast<std::uint64_t>(i));
            break;
        case InitScheme::Uniform:
            for (std::int64_t i = 0; i < t.size(); ++i)
                t.data[i] = 0.2 * uniform01(seed, 0x9a7b, static_cast<std::uint64_t>(i)) - 0.1;
            break;
        case InitScheme::Zeros:
            break;
        case InitScheme::Ones:
            for (auto& x : t.data) x = 1.0;
            break;
    }
    t.quantize();
    return t;
}

}  // namespace

TensorValue slice_axis(const TensorValue& full, int axis, int world, int rank) {
    const auto& shape = full.spec.shape;
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw Error("shard axis " + std::to_string(axis) + " out of range for rank-" +
                    std::to_string(shape.size()) + " tensor");
    if (shape[axis] % world != 0)
        throw Error("dimension " + std::to_string(shape[axis]) + " not divisible by world size " +
                    std::to_string(world));
    std::int64_t part = shape[axis] / world;
    TensorSpec local = full.spec;
    local.shape[axis] = part;
    TensorValue out(local);

    std::int64_t inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    std::int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];

    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t a = 0; a < part; ++a) {
            std::int64_t src = (o * shape[axis] + rank * part + a) * inner;
            std::int64_t dst = (o * part + a) * inner;
            for (std::int64_t k = 0; k < inner; ++k) out.data[dst + k] = full.data[src + k];
        }
    }
    return out;
}

TensorValue init_param_rank(const ParamDef& p, int rank) {
    TensorValue full = init_param_full(p);
    if (!p.shard) return full;
    if (p.shard->blocks <= 1) return slice_axis(full, p.shard->axis, p.shard->world_size, rank);

    // Block-sharded: slice each row-group separately, then restack.
    int axis = p.shard->axis;
    int world = p.shard->world_size;
    int blocks = p.shard->blocks;
    const auto& shape = full.spec.shape;
    if (shape[axis] % blocks != 0)
        throw Error("dimension " + std::to_string(shape[axis]) + " not divisible into " +
                    std::to_string(blocks) + " blocks");
    std::int64_t group = shape[axis] / blocks;
    if (group % world != 0)
        throw Error("block dimension " + std::to_string(group) + " not divisible by world size " +
                    std::to_string(world));
    std::int64_t part = group / world;
    TensorSpec local = full.spec;
    local.shape[axis] = part * blocks;
    TensorValue out(local);
    std::int64_t inner = 1;
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    std::int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    for (std::int64_t o = 0; o < outer; ++o) {
        for (int b = 0; b < blocks; ++b) {
            for (std::int64_t a = 0; a < part; ++a) {
                std::int64_t src = (o * shape[axis] + b * group + rank * part + a) * inner;
                std::int64_t dst = (o * (part * blocks) + b * part + a) * inner;
                for (std::int64_t k = 0; k < inner; ++k) out.data[dst + k] = full.data[src + k];
            }
        }
    }
    return out;
}

}  // namespace slapo
