// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "slapo/graph.hpp"
#include "slapo/tensor.hpp"

namespace slapo {

enum class InitScheme { Normal, Uniform, Zeros, Ones };

const char* init_scheme_name(InitScheme s);
InitScheme init_scheme_from_name(const std::string& name);

/// Present on parameters of sharded modules. `spec` in ParamDef then holds the
/// worker-local shard shape; full_shape reassembles across ranks. `blocks` > 1
/// shards each of `blocks` equal row-groups separately (FusedQKV keeps its
/// q/k/v layout under sharding this way).
struct ShardInfo {
    int axis = 0;
    int world_size = 1;
    int blocks = 1;
    std::vector<std::int64_t> full_shape;

    bool operator==(const ShardInfo& o) const {
        return axis == o.axis && world_size == o.world_size && blocks == o.blocks &&
               full_shape == o.full_shape;
    }
};

struct ParamDef {
    std::string name;
    TensorSpec spec;
    InitScheme init = InitScheme::Normal;
    std::uint64_t seed = 0;
    /// Non-empty for parameters assembled from several originals (fused QKV):
    /// axis-0 row-groups are initialized independently, one seed per block, so
    /// block i reproduces the source parameter bit-for-bit.
    std::vector<std::uint64_t> block_seeds;
    /// Explicit element values (trained or hand-written weights); overrides
    /// the init scheme when non-empty.
    std::vector<double> values;
    std::optional<ShardInfo> shard;

    /// Shape of the unsharded parameter.
    std::vector<std::int64_t> full_shape() const { return shard ? shard->full_shape : spec.shape; }
};

struct ModuleDef;

struct Submodule {
    std::string name;
    ModuleDef* module = nullptr;  // owned

    Submodule() = default;
    Submodule(std::string n, ModuleDef m);
    Submodule(const Submodule& o);
    Submodule(Submodule&& o) noexcept;
    Submodule& operator=(const Submodule& o);
    Submodule& operator=(Submodule&& o) noexcept;
    ~Submodule();
};

/// Hierarchical model definition. `kind` is either "composite" (forward graph
/// present) or a builtin leaf (Linear, LayerNorm, Dropout, Embedding,
/// FusedQKV, EfficientAttention) whose semantics live in the executor.
struct ModuleDef {
    std::string name;
    std::string kind = "composite";
    std::vector<ParamDef> params;
    std::vector<Submodule> submodules;
    std::optional<StaticGraph> forward;
    AttrMap attrs;

    bool is_composite() const { return kind == "composite"; }

    const ModuleDef* find_child(const std::string& segment) const;
    ModuleDef* find_child(const std::string& segment);
    const ModuleDef& child(const std::string& segment) const;
    ModuleDef& child(const std::string& segment);

    /// Resolve a dot-separated concrete path from this module. Empty path = this.
    const ModuleDef* resolve(const std::string& path) const;
    ModuleDef* resolve(const std::string& path);

    const ParamDef* find_param(const std::string& name) const;
    ParamDef* find_param(const std::string& name);

    /// Resolve dotted param path ("child.weight" after inlining).
    const ParamDef* resolve_param(const std::string& dotted) const;
    ParamDef* resolve_param(const std::string& dotted);

    void add_submodule(const std::string& segment, ModuleDef m);
    void replace_submodule(const std::string& segment, ModuleDef m);

    /// Validate naming, graph structure and reference invariants recursively.
    void validate() const;
};

bool is_builtin_kind(const std::string& kind);

/// Structural equality modulo graph node renumbering.
bool modules_structurally_equal(const ModuleDef& a, const ModuleDef& b);

// ---------------------------------------------------------------------------
// Paths

/// Dot-separated module path; `*` matches one segment, `**` any run of segments.
struct ModulePath {
    std::vector<std::string> segments;

    static ModulePath parse(const std::string& text);
    std::string str() const;
    bool has_wildcards() const;
    bool empty() const { return segments.empty(); }
};

bool path_matches(const ModulePath& pattern, const ModulePath& concrete);

/// All concrete module paths under root matching the glob, sorted lexicographically.
std::vector<std::string> resolve_paths(const ModuleDef& root, const std::string& pattern);

/// All concrete module paths in the tree (including "" for the root), sorted.
std::vector<std::string> all_paths(const ModuleDef& root);

std::string join_path(const std::string& a, const std::string& b);
std::string parent_path(const std::string& path);
std::string last_segment(const std::string& path);

// ---------------------------------------------------------------------------
// Builtin module constructors

ModuleDef make_linear(std::int64_t in_features, std::int64_t out_features, bool bias,
                      std::uint64_t seed);
ModuleDef make_layernorm(std::int64_t normalized_size, double eps, std::uint64_t seed);
ModuleDef make_dropout(double p, std::uint64_t seed);
ModuleDef make_embedding(std::int64_t num_embeddings, std::int64_t dim, std::uint64_t seed);

/// Materialize a parameter's full (unsharded) tensor from its init scheme.
TensorValue init_param_full(const ParamDef& p);

/// Worker-local slice of a parameter for the given rank.
TensorValue init_param_rank(const ParamDef& p, int rank);

/// Slice a full tensor along `axis` into `world` equal parts, returning part `rank`.
TensorValue slice_axis(const TensorValue& full, int axis, int world, int rank);

}  // namespace slapo
