// SPDX-License-Identifier: Apache-2.0

#include "slapo/executor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "slapo/rng.hpp"
#include "slapo/shape_inference.hpp"

namespace slapo {

std::int64_t embedding_row(double raw, std::int64_t num_embeddings) {
    std::int64_t i = static_cast<std::int64_t>(std::llround(raw)) % num_embeddings;
    return i < 0 ? i + num_embeddings : i;
}

TensorValue random_tensor(const TensorSpec& spec, std::uint64_t seed, std::uint64_t stream) {
    TensorValue t(spec);
    for (std::int64_t i = 0; i < t.size(); ++i)
        t.data[i] = normal01(seed, stream, static_cast<std::uint64_t>(i));
    t.quantize();
    return t;
}

// ===========================================================================
// Kernels: forward math and vector-Jacobian products on TensorValue.
// ===========================================================================

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

std::int64_t last_dim(const TensorValue& t) { return t.spec.shape[t.spec.rank() - 1]; }

TensorValue matmul_fwd(const TensorValue& a, const TensorValue& b) {
    int ra = a.spec.rank();
    std::int64_t m = a.spec.shape[ra - 2];
    std::int64_t k = a.spec.shape[ra - 1];
    std::int64_t n = b.spec.shape[b.spec.rank() - 1];
    std::int64_t batch = a.spec.element_count() / (m * k);
    TensorSpec out_spec = a.spec;
    out_spec.shape[ra - 1] = n;
    TensorValue out(out_spec);
    for (std::int64_t t = 0; t < batch; ++t) {
        const double* pa = a.data.data() + t * m * k;
        const double* pb = b.data.data() + t * k * n;
        double* po = out.data.data() + t * m * n;
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::int64_t kk = 0; kk < k; ++kk) acc += pa[i * k + kk] * pb[kk * n + j];
                po[i * n + j] = acc;
            }
        }
    }
    out.quantize();
    return out;
}

TensorValue transpose_last2(const TensorValue& x) {
    int r = x.spec.rank();
    std::int64_t m = x.spec.shape[r - 2];
    std::int64_t n = x.spec.shape[r - 1];
    std::int64_t batch = x.spec.element_count() / (m * n);
    TensorSpec spec = x.spec;
    std::swap(spec.shape[r - 2], spec.shape[r - 1]);
    TensorValue out(spec);
    for (std::int64_t t = 0; t < batch; ++t) {
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                out.data[t * m * n + j * m + i] = x.data[t * m * n + i * n + j];
    }
    return out;
}

/// y[..., o] = sum_i x[..., i] * w[o, i]   (out-major weight)
TensorValue linear_fwd(const TensorValue& x, const TensorValue& w) {
    std::int64_t in_f = w.spec.shape[1];
    std::int64_t out_f = w.spec.shape[0];
    std::int64_t rows = x.spec.element_count() / in_f;
    TensorSpec spec = x.spec;
    spec.shape[spec.rank() - 1] = out_f;
    TensorValue out(spec);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* px = x.data.data() + r * in_f;
        double* po = out.data.data() + r * out_f;
        for (std::int64_t o = 0; o < out_f; ++o) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < in_f; ++i) acc += px[i] * w.data[o * in_f + i];
            po[o] = acc;
        }
    }
    out.quantize();
    return out;
}

/// dx[..., i] = sum_o g[..., o] * w[o, i]
TensorValue linear_dx(const TensorValue& g, const TensorValue& w) {
    std::int64_t in_f = w.spec.shape[1];
    std::int64_t out_f = w.spec.shape[0];
    std::int64_t rows = g.spec.element_count() / out_f;
    TensorSpec spec = g.spec;
    spec.shape[spec.rank() - 1] = in_f;
    TensorValue out(spec);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* pg = g.data.data() + r * out_f;
        double* po = out.data.data() + r * in_f;
        for (std::int64_t i = 0; i < in_f; ++i) {
            double acc = 0.0;
            for (std::int64_t o = 0; o < out_f; ++o) acc += pg[o] * w.data[o * in_f + i];
            po[i] = acc;
        }
    }
    return out;
}

/// dw[o, i] = sum_rows g[..., o] * x[..., i]
TensorValue linear_dw(const TensorValue& g, const TensorValue& x, const TensorSpec& w_spec) {
    std::int64_t in_f = w_spec.shape[1];
    std::int64_t out_f = w_spec.shape[0];
    std::int64_t rows = x.spec.element_count() / in_f;
    TensorValue out(w_spec);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* pg = g.data.data() + r * out_f;
        const double* px = x.data.data() + r * in_f;
        for (std::int64_t o = 0; o < out_f; ++o)
            for (std::int64_t i = 0; i < in_f; ++i) out.data[o * in_f + i] += pg[o] * px[i];
    }
    return out;
}

TensorValue permute(const TensorValue& x, const std::vector<int>& perm) {
    int r = x.spec.rank();
    TensorSpec spec = x.spec;
    for (int i = 0; i < r; ++i) spec.shape[i] = x.spec.shape[perm[i]];
    TensorValue out(spec);
    std::vector<std::int64_t> in_strides(r, 1), out_strides(r, 1);
    for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.spec.shape[i + 1];
    for (int i = r - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * spec.shape[i + 1];
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t n = x.spec.element_count();
    for (std::int64_t flat = 0; flat < n; ++flat) {
        std::int64_t rem = flat, src = 0;
        for (int i = 0; i < r; ++i) {
            idx[i] = rem / out_strides[i];
            rem %= out_strides[i];
            src += idx[i] * in_strides[perm[i]];
        }
        out.data[flat] = x.data[src];
    }
    return out;
}

std::vector<int> resolve_perm(const AttrMap& attrs, int rank) {
    std::vector<int> perm;
    if (auto p = attr_int_list(attrs, "perm")) {
        for (auto v : *p) perm.push_back(static_cast<int>(v < 0 ? v + rank : v));
    } else {
        auto axes = attr_int_list(attrs, "axes").value_or(std::vector<std::int64_t>{-2, -1});
        for (int i = 0; i < rank; ++i) perm.push_back(i);
        int a = static_cast<int>(axes[0] < 0 ? axes[0] + rank : axes[0]);
        int b = static_cast<int>(axes[1] < 0 ? axes[1] + rank : axes[1]);
        std::swap(perm[a], perm[b]);
    }
    return perm;
}

std::vector<int> invert_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    return inv;
}

double gelu_scalar(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    double t = std::tanh(u);
    double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void softmax_rows(const double* in, double* out, std::int64_t rows, std::int64_t n) {
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* pi = in + r * n;
        double* po = out + r * n;
        double mx = pi[0];
        for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, pi[i]);
        double sum = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            po[i] = std::exp(pi[i] - mx);
            sum += po[i];
        }
        for (std::int64_t i = 0; i < n; ++i) po[i] /= sum;
    }
}

/// Move `axis` to the last position so row-wise kernels apply; identity when
/// axis is already last.
struct AxisView {
    TensorValue moved;
    std::vector<int> perm;
    bool identity;
};

AxisView to_last_axis(const TensorValue& x, int axis) {
    int r = x.spec.rank();
    if (axis == r - 1) return {x, {}, true};
    std::vector<int> perm;
    for (int i = 0; i < r; ++i)
        if (i != axis) perm.push_back(i);
    perm.push_back(axis);
    return {permute(x, perm), perm, false};
}

TensorValue from_last_axis(const TensorValue& x, const AxisView& view) {
    if (view.identity) return x;
    return permute(x, invert_perm(view.perm));
}

int norm_axis(std::int64_t axis, int rank) { return static_cast<int>(axis < 0 ? axis + rank : axis); }

}  // namespace

// ===========================================================================
// Executor implementation
// ===========================================================================

namespace {

struct Value {
    std::vector<TensorValue> parts;
    bool tuple = false;

    const TensorValue& single() const {
        if (tuple) throw Error("expected single tensor, got tuple");
        return parts[0];
    }
    std::int64_t byte_size() const {
        std::int64_t n = 0;
        for (const auto& p : parts) n += p.spec.byte_size();
        return n;
    }
};

Value single_value(TensorValue t) {
    Value v;
    v.parts.push_back(std::move(t));
    return v;
}

struct TapeRecord {
    enum class Kind {
        Op,          // builtin call_op
        GetItem,
        Gather,      // output node: flatten args into a tuple
        Linear,
        FusedQKV,
        LayerNormMod,
        DropoutMod,
        Embedding,
        Checkpoint,  // recompute region on backward
        SyncGrad     // identity forward; all_reduce gradient backward
    };
    Kind kind = Kind::Op;
    std::string op;
    AttrMap attrs;
    std::vector<int> args;      // slot ids
    int out = -1;               // slot id
    int weight_slot = -1;
    int bias_slot = -1;
    bool bias_rank0_only = false;
    const ModuleDef* module = nullptr;
    std::string module_path;
};

}  // namespace

class ExecutorImpl {
public:
    ExecutorImpl(const ModuleDef& root, ExecMode mode, std::uint64_t seed, int world)
        : root_(root), mode_(mode), seed_(seed), world_(world) {
        // Owning copy: callers may hand in temporaries, and runs must not see
        // later mutation of the source model.
        if (world_ < 1) throw Error("world_size must be >= 1");
    }

    // ---- slots -----------------------------------------------------------

    int new_slot() {
        slots_.emplace_back();
        slots_.back().resize(world_);
        return static_cast<int>(slots_.size()) - 1;
    }

    std::vector<Value>& slot(int id) { return slots_[id]; }

    void ledger_add(int slot_id) {
        if (ledger_active_) ledger_.retained_bytes += slots_[slot_id][0].byte_size();
    }

    void nan_check(int slot_id, const std::string& what) {
        if (!nan_guard_) return;
        for (int r = 0; r < world_; ++r) {
            for (const auto& part : slots_[slot_id][r].parts) {
                for (double v : part.data) {
                    if (std::isnan(v))
                        throw Error("NaN produced by " + what + " on rank " + std::to_string(r));
                }
            }
        }
    }

    // ---- forward ---------------------------------------------------------

    std::vector<TensorValue> forward(const std::vector<TensorValue>& inputs) {
        slots_.clear();
        tape_.clear();
        param_slots_.clear();
        grads_.clear();
        ledger_ = {};
        collectives_ = 0;

        int arity = module_input_arity(root_);
        if (static_cast<int>(inputs.size()) != arity)
            throw Error("model expects " + std::to_string(arity) + " inputs, got " +
                        std::to_string(inputs.size()));
        input_slots_.clear();
        for (const auto& in : inputs) {
            int s = new_slot();
            for (int r = 0; r < world_; ++r) slot(s)[r] = single_value(in);
            input_slots_.push_back(s);
        }
        output_slot_ = eval_module(root_, "", input_slots_);
        ran_forward_ = true;
        return outputs_of_rank(0);
    }

    std::vector<TensorValue> outputs_of_rank(int rank) const {
        const Value& v = slots_[output_slot_][rank];
        return v.parts;
    }

    // ---- backward --------------------------------------------------------

    std::vector<GradientMap> backward_all_ranks() {
        if (!ran_forward_) throw Error("backward requires a completed forward run");
        grads_.assign(slots_.size(), {});
        // Loss = sum of all output elements: seed with ones.
        for (int r = 0; r < world_; ++r) {
            Value seed_val;
            seed_val.tuple = slots_[output_slot_][r].tuple;
            for (const auto& p : slots_[output_slot_][r].parts)
                seed_val.parts.push_back(TensorValue::filled(p.spec, 1.0));
            grad_ref(output_slot_, r) = seed_val;
        }
        // Index-based with a copy per record: checkpoint recompute appends to
        // the tape mid-walk, which would invalidate iterators and references.
        for (std::size_t i = tape_.size(); i-- > 0;) {
            TapeRecord rec = tape_[i];
            backward_record(rec);
        }

        std::vector<GradientMap> maps(world_);
        for (const auto& [path, slot_id] : param_slots_) {
            for (int r = 0; r < world_; ++r) {
                maps[r].params[path] = grad_part(slot_id, r, 0);
            }
        }
        for (std::size_t i = 0; i < input_slots_.size(); ++i) {
            for (int r = 0; r < world_; ++r)
                maps[r].inputs.push_back(grad_part(input_slots_[i], r, 0));
        }
        return maps;
    }

    ModuleDef root_;
    ExecMode mode_;
    std::uint64_t seed_;
    int world_;

    std::vector<std::vector<Value>> slots_;  // slot -> per-rank value
    std::vector<TapeRecord> tape_;
    std::map<std::string, int> param_slots_;
    std::vector<int> input_slots_;
    int output_slot_ = -1;
    bool ran_forward_ = false;

    ActivationLedger ledger_;
    std::int64_t collectives_ = 0;

    bool tape_active_ = true;
    bool ledger_active_ = true;
    bool in_checkpoint_ = false;
    bool nan_guard_ = false;

    // per-slot, per-rank gradients (lazily initialized)
    std::vector<std::vector<Value>> grads_;

    std::unordered_map<const ModuleDef*, std::unique_ptr<ModuleDef>> attention_refs_;

    // ---- gradient helpers --------------------------------------------------

    Value& grad_ref(int slot_id, int rank) {
        if (grads_[slot_id].empty()) grads_[slot_id].resize(world_);
        Value& g = grads_[slot_id][rank];
        if (g.parts.empty()) {
            const Value& v = slots_[slot_id][rank];
            g.tuple = v.tuple;
            for (const auto& p : v.parts) g.parts.push_back(TensorValue::zeros(p.spec));
        }
        return g;
    }

    bool has_grad(int slot_id) const { return !grads_[slot_id].empty(); }

    TensorValue grad_part(int slot_id, int rank, std::size_t part) {
        if (grads_[slot_id].empty() || grads_[slot_id][rank].parts.empty()) {
            return TensorValue::zeros(slots_[slot_id][rank].parts[part].spec);
        }
        return grads_[slot_id][rank].parts[part];
    }

    void accumulate(int slot_id, int rank, std::size_t part, const TensorValue& g) {
        Value& dst = grad_ref(slot_id, rank);
        TensorValue& t = dst.parts[part];
        for (std::int64_t i = 0; i < t.size(); ++i) t.data[i] += g.data[i];
    }

    // ---- module evaluation -------------------------------------------------

    int eval_module(const ModuleDef& m, const std::string& path, std::vector<int> arg_slots) {
        if (attr_flag(m.attrs, "sync_backward") && world_ > 1 && !arg_slots.empty()) {
            arg_slots[0] = record_sync_grad(arg_slots[0]);
        }
        bool want_checkpoint =
            (attr_flag(m.attrs, "checkpoint") || m.kind == "EfficientAttention") &&
            !in_checkpoint_ && tape_active_;
        if (want_checkpoint) return eval_checkpointed(m, path, arg_slots);
        if (m.is_composite()) return eval_graph(*m.forward, m, path, arg_slots);
        return eval_builtin(m, path, arg_slots);
    }

    int record_sync_grad(int in_slot) {
        int out = new_slot();
        for (int r = 0; r < world_; ++r) slot(out)[r] = slot(in_slot)[r];
        if (tape_active_) {
            TapeRecord rec;
            rec.kind = TapeRecord::Kind::SyncGrad;
            rec.args = {in_slot};
            rec.out = out;
            tape_.push_back(std::move(rec));
        }
        return out;
    }

    int eval_checkpointed(const ModuleDef& m, const std::string& path, const std::vector<int>& arg_slots) {
        bool old_tape = tape_active_, old_ledger = ledger_active_;
        tape_active_ = false;
        ledger_active_ = false;
        in_checkpoint_ = true;
        int out;
        if (m.kind == "EfficientAttention")
            out = eval_graph(*attention_reference(m).forward, attention_reference(m), path, arg_slots);
        else if (m.is_composite())
            out = eval_graph(*m.forward, m, path, arg_slots);
        else
            out = eval_builtin(m, path, arg_slots);
        in_checkpoint_ = false;
        tape_active_ = old_tape;
        ledger_active_ = old_ledger;

        // Region accounting: boundary inputs + outputs instead of internals.
        if (ledger_active_) {
            for (int a : arg_slots) ledger_.retained_bytes += slots_[a][0].byte_size();
            ledger_.retained_bytes += slots_[out][0].byte_size();
        }
        TapeRecord rec;
        rec.kind = TapeRecord::Kind::Checkpoint;
        rec.args = arg_slots;
        rec.out = out;
        rec.module = &m;
        rec.module_path = path;
        tape_.push_back(std::move(rec));
        return out;
    }

    const ModuleDef& attention_reference(const ModuleDef& ea) {
        auto it = attention_refs_.find(&ea);
        if (it != attention_refs_.end()) return *it->second;
        auto ref = std::make_unique<ModuleDef>(build_attention_reference(ea));
        const ModuleDef& out = *ref;
        attention_refs_.emplace(&ea, std::move(ref));
        return out;
    }

    static ModuleDef build_attention_reference(const ModuleDef& ea) {
        std::int64_t head_dim = attr_int(ea.attrs, "head_dim").value_or(0);
        if (head_dim <= 0) throw Error("EfficientAttention requires a positive head_dim attr");
        double p = attr_double(ea.attrs, "p").value_or(0.0);
        std::int64_t seed = attr_int(ea.attrs, "seed").value_or(0);
        double scale = attr_double(ea.attrs, "scale").value_or(1.0 / std::sqrt(static_cast<double>(head_dim)));
        GraphBuilder b;
        int q = b.input(), k = b.input(), v = b.input();
        auto heads = [&](int x) {
            int s = b.call_op("reshape", {x}, {{"split_axis", std::int64_t(2)}, {"factor", head_dim}});
            return b.call_op("transpose", {s}, {{"perm", std::vector<std::int64_t>{0, 2, 1, 3}}});
        };
        int qh = heads(q), kh = heads(k), vh = heads(v);
        int kt = b.call_op("transpose", {kh}, {{"axes", std::vector<std::int64_t>{-2, -1}}});
        int scores = b.call_op("matmul", {qh, kt});
        int scaled = b.call_op("scale", {scores}, {{"factor", scale}});
        int attn = b.call_op("softmax", {scaled}, {{"axis", std::int64_t(-1)}});
        int dropped = b.call_op("dropout", {attn}, {{"p", p}, {"seed", seed}});
        int ctx = b.call_op("matmul", {dropped, vh});
        int back = b.call_op("transpose", {ctx}, {{"perm", std::vector<std::int64_t>{0, 2, 1, 3}}});
        int merged = b.call_op("reshape", {back}, {{"merge_axes", std::vector<std::int64_t>{2, 3}}});
        ModuleDef ref;
        ref.name = "attention_reference";
        ref.forward = b.output({merged});
        return ref;
    }

    int eval_graph(const StaticGraph& graph, const ModuleDef& ctx, const std::string& path,
                   const std::vector<int>& arg_slots) {
        if (arg_slots.size() != graph.input_ids.size())
            throw Error("graph of '" + (path.empty() ? root_.name : path) + "' expects " +
                        std::to_string(graph.input_ids.size()) + " inputs, got " +
                        std::to_string(arg_slots.size()));
        std::unordered_map<int, int> env;  // node id -> slot id
        std::size_t next_input = 0;
        int result = -1;
        for (const auto& n : graph.nodes) {
            switch (n.kind) {
                case NodeKind::Input:
                    env[n.id] = arg_slots[next_input++];
                    break;
                case NodeKind::ParamRef:
                    env[n.id] = param_slot(ctx, path, n.target);
                    break;
                case NodeKind::CallOp: {
                    std::vector<int> args;
                    for (int a : n.args) args.push_back(env.at(a));
                    env[n.id] = eval_op(n, args, path);
                    break;
                }
                case NodeKind::CallModule: {
                    const ModuleDef* sub = ctx.resolve(n.target);
                    if (!sub) throw Error("unknown submodule '" + n.target + "'");
                    std::vector<int> args;
                    for (int a : n.args) args.push_back(env.at(a));
                    env[n.id] = eval_module(*sub, join_path(path, n.target), args);
                    break;
                }
                case NodeKind::GetItem: {
                    int src = env.at(n.args[0]);
                    std::int64_t idx = attr_int(n.attrs, "index").value_or(0);
                    int out = new_slot();
                    for (int r = 0; r < world_; ++r) {
                        const Value& v = slots_[src][r];
                        if (!v.tuple || idx < 0 || idx >= static_cast<std::int64_t>(v.parts.size()))
                            throw Error("get_item index " + std::to_string(idx) + " out of range");
                        slot(out)[r] = single_value(v.parts[idx]);
                    }
                    if (tape_active_) {
                        TapeRecord rec;
                        rec.kind = TapeRecord::Kind::GetItem;
                        rec.attrs = n.attrs;
                        rec.args = {src};
                        rec.out = out;
                        tape_.push_back(std::move(rec));
                    }
                    env[n.id] = out;
                    break;
                }
                case NodeKind::Output: {
                    std::vector<int> args;
                    for (int a : n.args) args.push_back(env.at(a));
                    int out = new_slot();
                    for (int r = 0; r < world_; ++r) {
                        Value v;
                        bool any_tuple = false;
                        for (int a : args) {
                            const Value& src = slots_[a][r];
                            if (src.tuple) any_tuple = true;
                            for (const auto& p : src.parts) v.parts.push_back(p);
                        }
                        v.tuple = args.size() > 1 || any_tuple;
                        slot(out)[r] = std::move(v);
                    }
                    if (tape_active_) {
                        TapeRecord rec;
                        rec.kind = TapeRecord::Kind::Gather;
                        rec.args = args;
                        rec.out = out;
                        tape_.push_back(std::move(rec));
                    }
                    result = out;
                    break;
                }
            }
        }
        return result;
    }

    int param_slot(const ModuleDef& ctx, const std::string& module_path, const std::string& target) {
        std::string key = join_path(module_path, target);
        auto it = param_slots_.find(key);
        if (it != param_slots_.end()) return it->second;
        const ParamDef* p = ctx.resolve_param(target);
        if (!p) throw Error("unknown param '" + target + "' in module '" + ctx.name + "'");
        int s = new_slot();
        for (int r = 0; r < world_; ++r) slot(s)[r] = single_value(init_param_rank(*p, r));
        param_slots_[key] = s;
        return s;
    }

    // ---- builtin modules ---------------------------------------------------

    int eval_builtin(const ModuleDef& m, const std::string& path, const std::vector<int>& arg_slots) {
        const std::string& k = m.kind;
        if (k == "Linear" || k == "FusedQKV") return eval_linear_like(m, path, arg_slots);
        if (k == "LayerNorm") return eval_layernorm_mod(m, path, arg_slots);
        if (k == "Dropout") return eval_dropout_mod(m, path, arg_slots);
        if (k == "Embedding") return eval_embedding(m, path, arg_slots);
        if (k == "EfficientAttention")
            return eval_graph(*attention_reference(m).forward, attention_reference(m), path, arg_slots);
        throw Error("no executor semantics for module kind '" + k + "'");
    }

    int eval_linear_like(const ModuleDef& m, const std::string& path, const std::vector<int>& args) {
        const ParamDef* wp = m.find_param("weight");
        if (!wp) throw Error("module '" + path + "' missing weight");
        int w_slot = param_slot(m, path, "weight");
        const ParamDef* bp = m.find_param("bias");
        int b_slot = bp ? param_slot(m, path, "bias") : -1;
        // With input features sharded (axis=1) the bias stays whole and must
        // enter the sum exactly once, so only rank 0 adds it.
        bool bias_rank0_only = bp && !bp->shard && wp->shard && wp->shard->axis == 1 && world_ > 1;

        int out = new_slot();
        for (int r = 0; r < world_; ++r) {
            const TensorValue& x = slots_[args[0]][r].single();
            const TensorValue& w = slots_[w_slot][r].single();
            if (last_dim(x) != w.spec.shape[1])
                throw Error("shape mismatch in '" + path + "': input " + x.spec.to_string() +
                            " vs weight " + w.spec.to_string());
            TensorValue y = linear_fwd(x, w);
            if (b_slot >= 0 && (!bias_rank0_only || r == 0)) {
                const TensorValue& b = slots_[b_slot][r].single();
                std::int64_t out_f = b.spec.shape[0];
                std::int64_t rows = y.size() / out_f;
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t o = 0; o < out_f; ++o) y.data[i * out_f + o] += b.data[o];
                y.quantize();
            }
            if (m.kind == "FusedQKV") {
                std::int64_t total = last_dim(y);
                if (total % 3 != 0) throw Error("FusedQKV output features must divide by 3");
                Value v;
                v.tuple = true;
                std::int64_t part = total / 3;
                std::int64_t rows = y.size() / total;
                for (int pi = 0; pi < 3; ++pi) {
                    TensorSpec ps = y.spec;
                    ps.shape[ps.rank() - 1] = part;
                    TensorValue t(ps);
                    for (std::int64_t row = 0; row < rows; ++row)
                        for (std::int64_t c = 0; c < part; ++c)
                            t.data[row * part + c] = y.data[row * total + pi * part + c];
                    v.parts.push_back(std::move(t));
                }
                slot(out)[r] = std::move(v);
            } else {
                slot(out)[r] = single_value(std::move(y));
            }
        }
        ledger_add(out);
        if (tape_active_) {
            TapeRecord rec;
            rec.kind = m.kind == "FusedQKV" ? TapeRecord::Kind::FusedQKV : TapeRecord::Kind::Linear;
            rec.args = args;
            rec.out = out;
            rec.weight_slot = w_slot;
            rec.bias_slot = b_slot;
            rec.bias_rank0_only = bias_rank0_only;
            rec.module_path = path;
            tape_.push_back(std::move(rec));
        }
        return out;
    }

    int eval_layernorm_mod(const ModuleDef& m, const std::string& path, const std::vector<int>& args) {
        double eps = attr_double(m.attrs, "eps").value_or(1e-5);
        int g_slot = param_slot(m, path, "gamma");
        int b_slot = param_slot(m, path, "beta");
        int out = new_slot();
        for (int r = 0; r < world_; ++r) {
            const TensorValue& x = slots_[args[0]][r].single();
            const TensorValue& gamma = slots_[g_slot][r].single();
            const TensorValue& beta = slots_[b_slot][r].single();
            std::int64_t n = last_dim(x);
            std::int64_t rows = x.size() / n;
            TensorValue y(x.spec);
            for (std::int64_t row = 0; row < rows; ++row) {
                const double* px = x.data.data() + row * n;
                double* py = y.data.data() + row * n;
                double mean = 0.0;
                for (std::int64_t i = 0; i < n; ++i) mean += px[i];
                mean /= static_cast<double>(n);
                double var = 0.0;
                for (std::int64_t i = 0; i < n; ++i) var += (px[i] - mean) * (px[i] - mean);
                var /= static_cast<double>(n);
                double inv = 1.0 / std::sqrt(var + eps);
                for (std::int64_t i = 0; i < n; ++i)
                    py[i] = gamma.data[i] * ((px[i] - mean) * inv) + beta.data[i];
            }
            y.quantize();
            slot(out)[r] = single_value(std::move(y));
        }
        ledger_add(out);
        if (tape_active_) {
            TapeRecord rec;
            rec.kind = TapeRecord::Kind::LayerNormMod;
            rec.attrs = m.attrs;
            rec.args = args;
            rec.out = out;
            rec.weight_slot = g_slot;
            rec.bias_slot = b_slot;
            rec.module_path = path;
            tape_.push_back(std::move(rec));
        }
        return out;
    }

    int eval_dropout_mod(const ModuleDef& m, const std::string& path, const std::vector<int>& args) {
        GraphNode fake;
        fake.op = "dropout";
        fake.attrs = m.attrs;
        return eval_op(fake, args, path);
    }

    int eval_embedding(const ModuleDef& m, const std::string& path, const std::vector<int>& args) {
        const ParamDef* wp = m.find_param("weight");
        if (!wp) throw Error("embedding '" + path + "' missing weight");
        int w_slot = param_slot(m, path, "weight");
        std::int64_t full_rows = wp->full_shape()[0];
        int out = new_slot();
        for (int r = 0; r < world_; ++r) {
            const TensorValue& ids = slots_[args[0]][r].single();
            const TensorValue& table = slots_[w_slot][r].single();
            std::int64_t local_rows = table.spec.shape[0];
            std::int64_t dim = table.spec.shape[1];
            std::int64_t row0 = wp->shard ? static_cast<std::int64_t>(r) * local_rows : 0;
            TensorSpec spec = ids.spec;
            spec.shape.push_back(dim);
            spec.dtype = table.spec.dtype;
            TensorValue y(spec);
            for (std::int64_t i = 0; i < ids.size(); ++i) {
                std::int64_t row = embedding_row(ids.data[i], full_rows) - row0;
                if (row < 0 || row >= local_rows) continue;  // other rank owns it; all_reduce combines
                for (std::int64_t d = 0; d < dim; ++d) y.data[i * dim + d] = table.data[row * dim + d];
            }
            slot(out)[r] = single_value(std::move(y));
        }
        ledger_add(out);
        if (tape_active_) {
            TapeRecord rec;
            rec.kind = TapeRecord::Kind::Embedding;
            rec.args = args;
            rec.out = out;
            rec.weight_slot = w_slot;
            rec.module_path = path;
            rec.attrs["full_rows"] = full_rows;
            tape_.push_back(std::move(rec));
        }
        return out;
    }

    // ---- ops ---------------------------------------------------------------

    std::uint64_t dropout_stream(const AttrMap& attrs) {
        std::int64_t node_seed = attr_int(attrs, "seed").value_or(0);
        return hash_combine(seed_, static_cast<std::uint64_t>(node_seed));
    }

    TensorValue apply_dropout(const TensorValue& x, const AttrMap& attrs) {
        double p = attr_double(attrs, "p").value_or(0.0);
        if (mode_ == ExecMode::Verify || p <= 0.0) return x;
        if (p >= 1.0) throw Error("dropout p must be < 1");
        std::uint64_t stream = dropout_stream(attrs);
        TensorValue y(x.spec);
        double scale = 1.0 / (1.0 - p);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            bool keep = uniform01(stream, 0xd0, static_cast<std::uint64_t>(i)) >= p;
            y.data[i] = keep ? x.data[i] * scale : 0.0;
        }
        y.quantize();
        return y;
    }

    int eval_op(const GraphNode& n, const std::vector<int>& args, const std::string& path) {
        int out = new_slot();
        const std::string& op = n.op;

        if (op == "all_reduce") {
            TensorValue acc = slots_[args[0]][0].single();
            for (int r = 1; r < world_; ++r) {
                const TensorValue& v = slots_[args[0]][r].single();
                for (std::int64_t i = 0; i < acc.size(); ++i) acc.data[i] += v.data[i];
            }
            acc.quantize();
            for (int r = 0; r < world_; ++r) slot(out)[r] = single_value(acc);
            ++collectives_;
        } else if (op == "all_gather") {
            int axis_attr = static_cast<int>(attr_int(n.attrs, "axis").value_or(-1));
            const TensorValue& first = slots_[args[0]][0].single();
            int axis = norm_axis(axis_attr, first.spec.rank());
            TensorSpec spec = first.spec;
            spec.shape[axis] *= world_;
            TensorValue gathered(spec);
            std::int64_t inner = 1;
            for (int i = axis + 1; i < first.spec.rank(); ++i) inner *= first.spec.shape[i];
            std::int64_t seg = first.spec.shape[axis] * inner;
            std::int64_t outer = first.spec.element_count() / seg;
            for (int r = 0; r < world_; ++r) {
                const TensorValue& v = slots_[args[0]][r].single();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < seg; ++i)
                        gathered.data[o * seg * world_ + r * seg + i] = v.data[o * seg + i];
            }
            for (int r = 0; r < world_; ++r) slot(out)[r] = single_value(gathered);
            ++collectives_;
        } else {
            for (int r = 0; r < world_; ++r) slot(out)[r] = apply_op_rank(n, args, r);
        }

        ledger_add(out);
        nan_check(out, "op '" + op + "'");
        if (tape_active_) {
            TapeRecord rec;
            rec.kind = TapeRecord::Kind::Op;
            rec.op = op;
            rec.attrs = n.attrs;
            rec.args = args;
            rec.out = out;
            rec.module_path = path;
            tape_.push_back(std::move(rec));
        }
        return out;
    }

    Value apply_op_rank(const GraphNode& n, const std::vector<int>& args, int r) {
        const std::string& op = n.op;
        auto arg = [&](std::size_t i) -> const TensorValue& { return slots_[args[i]][r].single(); };

        if (op == "matmul") {
            const TensorValue& a = arg(0);
            const TensorValue& b = arg(1);
            if (a.spec.rank() < 2 || b.spec.rank() < 2 ||
                a.spec.shape[a.spec.rank() - 1] != b.spec.shape[b.spec.rank() - 2])
                throw Error("shape mismatch in matmul: " + a.spec.to_string() + " vs " +
                            b.spec.to_string());
            return single_value(matmul_fwd(a, b));
        }
        if (op == "add" || op == "mul") {
            const TensorValue& a = arg(0);
            const TensorValue& b = arg(1);
            bool a_scalar = a.spec.is_scalar(), b_scalar = b.spec.is_scalar();
            const TensorValue& big = a_scalar ? b : a;
            TensorValue y(big.spec);
            if (!a_scalar && !b_scalar && a.spec.shape != b.spec.shape)
                throw Error("shape mismatch in " + op + ": " + a.spec.to_string() + " vs " +
                            b.spec.to_string());
            for (std::int64_t i = 0; i < y.size(); ++i) {
                double av = a_scalar ? a.data[0] : a.data[i];
                double bv = b_scalar ? b.data[0] : b.data[i];
                y.data[i] = op == "add" ? av + bv : av * bv;
            }
            y.quantize();
            return single_value(std::move(y));
        }
        if (op == "scale") {
            double c = attr_double(n.attrs, "factor").value_or(1.0);
            TensorValue y = arg(0);
            for (auto& x : y.data) x *= c;
            y.quantize();
            return single_value(std::move(y));
        }
        if (op == "relu") {
            TensorValue y = arg(0);
            for (auto& x : y.data) x = x > 0.0 ? x : 0.0;
            return single_value(std::move(y));
        }
        if (op == "gelu") {
            TensorValue y = arg(0);
            for (auto& x : y.data) x = gelu_scalar(x);
            y.quantize();
            return single_value(std::move(y));
        }
        if (op == "softmax") {
            const TensorValue& x = arg(0);
            int axis = norm_axis(attr_int(n.attrs, "axis").value_or(-1), x.spec.rank());
            AxisView view = to_last_axis(x, axis);
            TensorValue y(view.moved.spec);
            std::int64_t nn = last_dim(view.moved);
            softmax_rows(view.moved.data.data(), y.data.data(), y.size() / nn, nn);
            y.quantize();
            return single_value(from_last_axis(y, view));
        }
        if (op == "layernorm") {
            const TensorValue& x = arg(0);
            double eps = attr_double(n.attrs, "eps").value_or(1e-5);
            std::int64_t nn = last_dim(x);
            std::int64_t rows = x.size() / nn;
            TensorValue y(x.spec);
            for (std::int64_t row = 0; row < rows; ++row) {
                const double* px = x.data.data() + row * nn;
                double* py = y.data.data() + row * nn;
                double mean = 0.0;
                for (std::int64_t i = 0; i < nn; ++i) mean += px[i];
                mean /= static_cast<double>(nn);
                double var = 0.0;
                for (std::int64_t i = 0; i < nn; ++i) var += (px[i] - mean) * (px[i] - mean);
                var /= static_cast<double>(nn);
                double inv = 1.0 / std::sqrt(var + eps);
                for (std::int64_t i = 0; i < nn; ++i) py[i] = (px[i] - mean) * inv;
            }
            y.quantize();
            return single_value(std::move(y));
        }
        if (op == "dropout") return single_value(apply_dropout(arg(0), n.attrs));
        if (op == "transpose") {
            const TensorValue& x = arg(0);
            return single_value(permute(x, resolve_perm(n.attrs, x.spec.rank())));
        }
        if (op == "reshape") {
            const TensorValue& x = arg(0);
            ValueSpec out_spec = infer_op("reshape", {ptr_spec(x)}, n.attrs, -1);
            TensorValue y(out_spec.parts[0]);
            y.data = x.data;
            return single_value(std::move(y));
        }
        if (op == "split") {
            const TensorValue& x = arg(0);
            ValueSpec parts = infer_op("split", {ptr_spec(x)}, n.attrs, -1);
            int axis = norm_axis(attr_int(n.attrs, "axis").value_or(-1), x.spec.rank());
            Value v;
            v.tuple = true;
            std::int64_t inner = 1;
            for (int i = axis + 1; i < x.spec.rank(); ++i) inner *= x.spec.shape[i];
            std::int64_t axis_dim = x.spec.shape[axis];
            std::int64_t outer = x.spec.element_count() / (axis_dim * inner);
            std::int64_t offset = 0;
            for (const auto& pspec : parts.parts) {
                TensorValue t(pspec);
                std::int64_t pdim = pspec.shape[axis];
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t aa = 0; aa < pdim; ++aa)
                        for (std::int64_t i = 0; i < inner; ++i)
                            t.data[(o * pdim + aa) * inner + i] =
                                x.data[(o * axis_dim + offset + aa) * inner + i];
                offset += pdim;
                v.parts.push_back(std::move(t));
            }
            return v;
        }
        if (op == "concat") {
            int axis_attr = static_cast<int>(attr_int(n.attrs, "axis").value_or(-1));
            const TensorValue& first = arg(0);
            int axis = norm_axis(axis_attr, first.spec.rank());
            std::vector<const TensorValue*> parts;
            std::int64_t axis_total = 0;
            for (std::size_t i = 0; i < args.size(); ++i) {
                parts.push_back(&arg(i));
                axis_total += parts.back()->spec.shape[axis];
            }
            TensorSpec spec = first.spec;
            spec.shape[axis] = axis_total;
            TensorValue y(spec);
            std::int64_t inner = 1;
            for (int i = axis + 1; i < first.spec.rank(); ++i) inner *= first.spec.shape[i];
            std::int64_t outer = first.spec.element_count() / (first.spec.shape[axis] * inner);
            std::int64_t offset = 0;
            for (const TensorValue* p : parts) {
                std::int64_t pdim = p->spec.shape[axis];
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t aa = 0; aa < pdim; ++aa)
                        for (std::int64_t i = 0; i < inner; ++i)
                            y.data[(o * axis_total + offset + aa) * inner + i] =
                                p->data[(o * pdim + aa) * inner + i];
                offset += pdim;
            }
            return single_value(std::move(y));
        }
        if (op == "reduce_sum") {
            const TensorValue& x = arg(0);
            if (auto axis_attr = attr_int(n.attrs, "axis")) {
                int axis = norm_axis(*axis_attr, x.spec.rank());
                TensorSpec spec = x.spec;
                spec.shape.erase(spec.shape.begin() + axis);
                TensorValue y(spec);
                std::int64_t inner = 1;
                for (int i = axis + 1; i < x.spec.rank(); ++i) inner *= x.spec.shape[i];
                std::int64_t adim = x.spec.shape[axis];
                std::int64_t outer = x.spec.element_count() / (adim * inner);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t aa = 0; aa < adim; ++aa)
                        for (std::int64_t i = 0; i < inner; ++i)
                            y.data[o * inner + i] += x.data[(o * adim + aa) * inner + i];
                y.quantize();
                return single_value(std::move(y));
            }
            TensorSpec spec;
            spec.dtype = x.spec.dtype;
            TensorValue y(spec);
            double acc = 0.0;
            for (double v : x.data) acc += v;
            y.data[0] = acc;
            y.quantize();
            return single_value(std::move(y));
        }
        throw Error("unknown op '" + op + "'");
    }

    static const ValueSpec* ptr_spec(const TensorValue& t) {
        thread_local ValueSpec tmp;
        tmp = ValueSpec(t.spec);
        return &tmp;
    }

    // ---- backward ----------------------------------------------------------

    void backward_record(const TapeRecord& rec) {
        if (grads_[rec.out].empty()) return;  // no gradient flowed here
        switch (rec.kind) {
            case TapeRecord::Kind::Op: backward_op(rec); break;
            case TapeRecord::Kind::GetItem: {
                std::int64_t idx = attr_int(rec.attrs, "index").value_or(0);
                for (int r = 0; r < world_; ++r) {
                    if (grads_[rec.out][r].parts.empty()) continue;
                    accumulate(rec.args[0], r, static_cast<std::size_t>(idx),
                               grads_[rec.out][r].parts[0]);
                }
                break;
            }
            case TapeRecord::Kind::Gather: {
                for (int r = 0; r < world_; ++r) {
                    if (grads_[rec.out][r].parts.empty()) continue;
                    std::size_t cursor = 0;
                    for (int a : rec.args) {
                        const Value& v = slots_[a][r];
                        for (std::size_t p = 0; p < v.parts.size(); ++p)
                            accumulate(a, r, p, grads_[rec.out][r].parts[cursor++]);
                    }
                }
                break;
            }
            case TapeRecord::Kind::Linear:
            case TapeRecord::Kind::FusedQKV: backward_linear(rec); break;
            case TapeRecord::Kind::LayerNormMod: backward_layernorm_mod(rec); break;
            case TapeRecord::Kind::DropoutMod: break;  // handled as Op
            case TapeRecord::Kind::Embedding: backward_embedding(rec); break;
            case TapeRecord::Kind::Checkpoint: backward_checkpoint(rec); break;
            case TapeRecord::Kind::SyncGrad: {
                // Conjugate of a forward all_reduce: sum the gradient across ranks.
                const Value& any = grads_[rec.out][first_rank_with_grad(rec.out)];
                TensorValue total(any.parts[0].spec);
                for (int r = 0; r < world_; ++r) {
                    if (grads_[rec.out][r].parts.empty()) continue;
                    const TensorValue& g = grads_[rec.out][r].parts[0];
                    for (std::int64_t i = 0; i < total.size(); ++i) total.data[i] += g.data[i];
                }
                for (int r = 0; r < world_; ++r) accumulate(rec.args[0], r, 0, total);
                ++collectives_;
                break;
            }
        }
    }

    int first_rank_with_grad(int slot_id) const {
        for (int r = 0; r < world_; ++r)
            if (!grads_[slot_id][r].parts.empty()) return r;
        return 0;
    }

    void backward_checkpoint(const TapeRecord& rec) {
        // Recompute the region with the tape on; counter-based randomness makes
        // the recomputation bitwise identical to the original forward.
        bool old_ledger = ledger_active_;
        ledger_active_ = false;
        in_checkpoint_ = true;
        std::size_t tape_start = tape_.size();
        int re_out;
        if (rec.module->kind == "EfficientAttention")
            re_out = eval_graph(*attention_reference(*rec.module).forward,
                                attention_reference(*rec.module), rec.module_path, rec.args);
        else if (rec.module->is_composite())
            re_out = eval_graph(*rec.module->forward, *rec.module, rec.module_path, rec.args);
        else
            re_out = eval_builtin(*rec.module, rec.module_path, rec.args);
        in_checkpoint_ = false;
        ledger_active_ = old_ledger;

        grads_.resize(slots_.size());
        for (int r = 0; r < world_; ++r) {
            if (grads_[rec.out][r].parts.empty()) continue;
            for (std::size_t p = 0; p < grads_[rec.out][r].parts.size(); ++p)
                accumulate(re_out, r, p, grads_[rec.out][r].parts[p]);
        }
        std::vector<TapeRecord> sub(tape_.begin() + tape_start, tape_.end());
        tape_.resize(tape_start);
        for (auto it = sub.rbegin(); it != sub.rend(); ++it) backward_record(*it);
    }

    void backward_linear(const TapeRecord& rec) {
        for (int r = 0; r < world_; ++r) {
            if (grads_[rec.out][r].parts.empty()) continue;
            const TensorValue& x = slots_[rec.args[0]][r].single();
            const TensorValue& w = slots_[rec.weight_slot][r].single();
            TensorValue g;
            if (rec.kind == TapeRecord::Kind::FusedQKV) {
                // Concatenate the three part-gradients back into the fused layout.
                const Value& gv = grads_[rec.out][r];
                std::int64_t part = gv.parts[0].spec.shape[gv.parts[0].spec.rank() - 1];
                std::int64_t total = part * 3;
                TensorSpec spec = gv.parts[0].spec;
                spec.shape[spec.rank() - 1] = total;
                g = TensorValue(spec);
                std::int64_t rows = g.size() / total;
                for (int pi = 0; pi < 3; ++pi)
                    for (std::int64_t row = 0; row < rows; ++row)
                        for (std::int64_t c = 0; c < part; ++c)
                            g.data[row * total + pi * part + c] = gv.parts[pi].data[row * part + c];
            } else {
                g = grads_[rec.out][r].parts[0];
            }
            accumulate(rec.args[0], r, 0, linear_dx(g, w));
            accumulate(rec.weight_slot, r, 0, linear_dw(g, x, w.spec));
            if (rec.bias_slot >= 0 && (!rec.bias_rank0_only || r == 0)) {
                const TensorValue& b = slots_[rec.bias_slot][r].single();
                std::int64_t out_f = b.spec.shape[0];
                std::int64_t rows = g.size() / out_f;
                TensorValue gb(b.spec);
                for (std::int64_t row = 0; row < rows; ++row)
                    for (std::int64_t o = 0; o < out_f; ++o) gb.data[o] += g.data[row * out_f + o];
                accumulate(rec.bias_slot, r, 0, gb);
            }
        }
    }

    void backward_layernorm_mod(const TapeRecord& rec) {
        double eps = attr_double(rec.attrs, "eps").value_or(1e-5);
        for (int r = 0; r < world_; ++r) {
            if (grads_[rec.out][r].parts.empty()) continue;
            const TensorValue& x = slots_[rec.args[0]][r].single();
            const TensorValue& gamma = slots_[rec.weight_slot][r].single();
            const TensorValue& g = grads_[rec.out][r].parts[0];
            std::int64_t n = last_dim(x);
            std::int64_t rows = x.size() / n;
            TensorValue gx(x.spec), ggamma(gamma.spec), gbeta(gamma.spec);
            for (std::int64_t row = 0; row < rows; ++row) {
                const double* px = x.data.data() + row * n;
                const double* pg = g.data.data() + row * n;
                double mean = 0.0;
                for (std::int64_t i = 0; i < n; ++i) mean += px[i];
                mean /= static_cast<double>(n);
                double var = 0.0;
                for (std::int64_t i = 0; i < n; ++i) var += (px[i] - mean) * (px[i] - mean);
                var /= static_cast<double>(n);
                double inv = 1.0 / std::sqrt(var + eps);
                double gh_mean = 0.0, ghx_mean = 0.0;
                std::vector<double> xhat(n), gh(n);
                for (std::int64_t i = 0; i < n; ++i) {
                    xhat[i] = (px[i] - mean) * inv;
                    gh[i] = pg[i] * gamma.data[i];
                    gh_mean += gh[i];
                    ghx_mean += gh[i] * xhat[i];
                    ggamma.data[i] += pg[i] * xhat[i];
                    gbeta.data[i] += pg[i];
                }
                gh_mean /= static_cast<double>(n);
                ghx_mean /= static_cast<double>(n);
                for (std::int64_t i = 0; i < n; ++i)
                    gx.data[row * n + i] = inv * (gh[i] - gh_mean - xhat[i] * ghx_mean);
            }
            accumulate(rec.args[0], r, 0, gx);
            accumulate(rec.weight_slot, r, 0, ggamma);
            accumulate(rec.bias_slot, r, 0, gbeta);
        }
    }

    void backward_embedding(const TapeRecord& rec) {
        std::int64_t full_rows = attr_int(rec.attrs, "full_rows").value_or(1);
        for (int r = 0; r < world_; ++r) {
            if (grads_[rec.out][r].parts.empty()) continue;
            const TensorValue& ids = slots_[rec.args[0]][r].single();
            const TensorValue& table = slots_[rec.weight_slot][r].single();
            const TensorValue& g = grads_[rec.out][r].parts[0];
            std::int64_t local_rows = table.spec.shape[0];
            std::int64_t dim = table.spec.shape[1];
            std::int64_t row0 = local_rows == full_rows ? 0 : static_cast<std::int64_t>(r) * local_rows;
            TensorValue gt(table.spec);
            for (std::int64_t i = 0; i < ids.size(); ++i) {
                std::int64_t row = embedding_row(ids.data[i], full_rows) - row0;
                if (row < 0 || row >= local_rows) continue;
                for (std::int64_t d = 0; d < dim; ++d) gt.data[row * dim + d] += g.data[i * dim + d];
            }
            accumulate(rec.weight_slot, r, 0, gt);
            // index inputs are not differentiable: their gradient stays zero.
            grad_ref(rec.args[0], r);
        }
    }

    void backward_op(const TapeRecord& rec) {
        const std::string& op = rec.op;
        // Every rank replicates the same logical loss, so the backward of a
        // forward all_reduce is the identity on each rank (the conjugate pair:
        // forward-reduce <-> backward-identity, forward-identity via the sync
        // marker <-> backward-reduce).
        if (op == "all_reduce") {
            for (int r = 0; r < world_; ++r) {
                if (grads_[rec.out][r].parts.empty()) continue;
                accumulate(rec.args[0], r, 0, grads_[rec.out][r].parts[0]);
            }
            return;
        }
        if (op == "all_gather") {
            // Each rank keeps its own slice of its (replicated) gradient.
            const TensorValue& local = slots_[rec.args[0]][0].single();
            int axis = norm_axis(attr_int(rec.attrs, "axis").value_or(-1), local.spec.rank());
            for (int r = 0; r < world_; ++r) {
                if (grads_[rec.out][r].parts.empty()) continue;
                accumulate(rec.args[0], r, 0,
                           slice_axis(grads_[rec.out][r].parts[0], axis, world_, r));
            }
            return;
        }

        for (int r = 0; r < world_; ++r) {
            if (grads_[rec.out][r].parts.empty()) continue;
            backward_op_rank(rec, r);
        }
    }

    void backward_op_rank(const TapeRecord& rec, int r) {
        const std::string& op = rec.op;
        auto argv = [&](std::size_t i) -> const TensorValue& { return slots_[rec.args[i]][r].single(); };
        const Value& gout = grads_[rec.out][r];

        if (op == "matmul") {
            const TensorValue& a = argv(0);
            const TensorValue& b = argv(1);
            const TensorValue& g = gout.parts[0];
            accumulate(rec.args[0], r, 0, matmul_fwd(g, transpose_last2(b)));
            accumulate(rec.args[1], r, 0, matmul_fwd(transpose_last2(a), g));
            return;
        }
        if (op == "add" || op == "mul") {
            const TensorValue& a = argv(0);
            const TensorValue& b = argv(1);
            const TensorValue& g = gout.parts[0];
            auto reduce_for = [&](const TensorValue& target, const TensorValue& grad_full) {
                if (!target.spec.is_scalar()) return grad_full;
                TensorValue s = TensorValue::zeros(target.spec);
                for (double v : grad_full.data) s.data[0] += v;
                return s;
            };
            if (op == "add") {
                accumulate(rec.args[0], r, 0, reduce_for(a, g));
                accumulate(rec.args[1], r, 0, reduce_for(b, g));
            } else {
                TensorValue ga(g.spec), gb(g.spec);
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    double av = a.spec.is_scalar() ? a.data[0] : a.data[i];
                    double bv = b.spec.is_scalar() ? b.data[0] : b.data[i];
                    ga.data[i] = g.data[i] * bv;
                    gb.data[i] = g.data[i] * av;
                }
                accumulate(rec.args[0], r, 0, reduce_for(a, ga));
                accumulate(rec.args[1], r, 0, reduce_for(b, gb));
            }
            return;
        }
        if (op == "scale") {
            double c = attr_double(rec.attrs, "factor").value_or(1.0);
            TensorValue g = gout.parts[0];
            for (auto& x : g.data) x *= c;
            accumulate(rec.args[0], r, 0, g);
            return;
        }
        if (op == "relu") {
            const TensorValue& x = argv(0);
            TensorValue g = gout.parts[0];
            for (std::int64_t i = 0; i < g.size(); ++i)
                if (x.data[i] <= 0.0) g.data[i] = 0.0;
            accumulate(rec.args[0], r, 0, g);
            return;
        }
        if (op == "gelu") {
            const TensorValue& x = argv(0);
            TensorValue g = gout.parts[0];
            for (std::int64_t i = 0; i < g.size(); ++i) g.data[i] *= gelu_grad_scalar(x.data[i]);
            accumulate(rec.args[0], r, 0, g);
            return;
        }
        if (op == "softmax") {
            const TensorValue& x = argv(0);
            int axis = norm_axis(attr_int(rec.attrs, "axis").value_or(-1), x.spec.rank());
            AxisView xv = to_last_axis(x, axis);
            AxisView gv = to_last_axis(gout.parts[0], axis);
            std::int64_t n = last_dim(xv.moved);
            std::int64_t rows = xv.moved.size() / n;
            TensorValue y(xv.moved.spec);
            softmax_rows(xv.moved.data.data(), y.data.data(), rows, n);
            TensorValue gx(xv.moved.spec);
            for (std::int64_t row = 0; row < rows; ++row) {
                double dot = 0.0;
                for (std::int64_t i = 0; i < n; ++i)
                    dot += gv.moved.data[row * n + i] * y.data[row * n + i];
                for (std::int64_t i = 0; i < n; ++i)
                    gx.data[row * n + i] = y.data[row * n + i] * (gv.moved.data[row * n + i] - dot);
            }
            accumulate(rec.args[0], r, 0, from_last_axis(gx, xv));
            return;
        }
        if (op == "layernorm") {
            const TensorValue& x = argv(0);
            double eps = attr_double(rec.attrs, "eps").value_or(1e-5);
            const TensorValue& g = gout.parts[0];
            std::int64_t n = last_dim(x);
            std::int64_t rows = x.size() / n;
            TensorValue gx(x.spec);
            for (std::int64_t row = 0; row < rows; ++row) {
                const double* px = x.data.data() + row * n;
                const double* pg = g.data.data() + row * n;
                double mean = 0.0;
                for (std::int64_t i = 0; i < n; ++i) mean += px[i];
                mean /= static_cast<double>(n);
                double var = 0.0;
                for (std::int64_t i = 0; i < n; ++i) var += (px[i] - mean) * (px[i] - mean);
                var /= static_cast<double>(n);
                double inv = 1.0 / std::sqrt(var + eps);
                double g_mean = 0.0, gx_mean = 0.0;
                std::vector<double> xhat(n);
                for (std::int64_t i = 0; i < n; ++i) {
                    xhat[i] = (px[i] - mean) * inv;
                    g_mean += pg[i];
                    gx_mean += pg[i] * xhat[i];
                }
                g_mean /= static_cast<double>(n);
                gx_mean /= static_cast<double>(n);
                for (std::int64_t i = 0; i < n; ++i)
                    gx.data[row * n + i] = inv * (pg[i] - g_mean - xhat[i] * gx_mean);
            }
            accumulate(rec.args[0], r, 0, gx);
            return;
        }
        if (op == "dropout") {
            double p = attr_double(rec.attrs, "p").value_or(0.0);
            TensorValue g = gout.parts[0];
            if (mode_ == ExecMode::Train && p > 0.0) {
                std::uint64_t stream = dropout_stream(rec.attrs);
                double scale = 1.0 / (1.0 - p);
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    bool keep = uniform01(stream, 0xd0, static_cast<std::uint64_t>(i)) >= p;
                    g.data[i] = keep ? g.data[i] * scale : 0.0;
                }
            }
            accumulate(rec.args[0], r, 0, g);
            return;
        }
        if (op == "transpose") {
            const TensorValue& x = argv(0);
            std::vector<int> perm = resolve_perm(rec.attrs, x.spec.rank());
            accumulate(rec.args[0], r, 0, permute(gout.parts[0], invert_perm(perm)));
            return;
        }
        if (op == "reshape") {
            const TensorValue& x = argv(0);
            TensorValue g(x.spec);
            g.data = gout.parts[0].data;
            accumulate(rec.args[0], r, 0, g);
            return;
        }
        if (op == "split") {
            const TensorValue& x = argv(0);
            int axis = norm_axis(attr_int(rec.attrs, "axis").value_or(-1), x.spec.rank());
            const Value& src = slots_[rec.out][r];
            TensorValue gx(x.spec);
            std::int64_t inner = 1;
            for (int i = axis + 1; i < x.spec.rank(); ++i) inner *= x.spec.shape[i];
            std::int64_t axis_dim = x.spec.shape[axis];
            std::int64_t outer = x.spec.element_count() / (axis_dim * inner);
            std::int64_t offset = 0;
            for (std::size_t pi = 0; pi < src.parts.size(); ++pi) {
                std::int64_t pdim = src.parts[pi].spec.shape[axis];
                if (!gout.parts.empty() && pi < gout.parts.size()) {
                    const TensorValue& gp = gout.parts[pi];
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t aa = 0; aa < pdim; ++aa)
                            for (std::int64_t i = 0; i < inner; ++i)
                                gx.data[(o * axis_dim + offset + aa) * inner + i] =
                                    gp.data[(o * pdim + aa) * inner + i];
                }
                offset += pdim;
            }
            accumulate(rec.args[0], r, 0, gx);
            return;
        }
        if (op == "concat") {
            const TensorValue& g = gout.parts[0];
            int axis = norm_axis(attr_int(rec.attrs, "axis").value_or(-1),
                                 slots_[rec.args[0]][r].single().spec.rank());
            std::int64_t inner = 1;
            const TensorSpec& gspec = g.spec;
            for (int i = axis + 1; i < gspec.rank(); ++i) inner *= gspec.shape[i];
            std::int64_t total = gspec.shape[axis];
            std::int64_t outer = gspec.element_count() / (total * inner);
            std::int64_t offset = 0;
            for (int a : rec.args) {
                const TensorValue& part = slots_[a][r].single();
                std::int64_t pdim = part.spec.shape[axis];
                TensorValue gp(part.spec);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t aa = 0; aa < pdim; ++aa)
                        for (std::int64_t i = 0; i < inner; ++i)
                            gp.data[(o * pdim + aa) * inner + i] =
                                g.data[(o * total + offset + aa) * inner + i];
                accumulate(a, r, 0, gp);
                offset += pdim;
            }
            return;
        }
        if (op == "reduce_sum") {
            const TensorValue& x = argv(0);
            const TensorValue& g = gout.parts[0];
            TensorValue gx(x.spec);
            if (auto axis_attr = attr_int(rec.attrs, "axis")) {
                int axis = norm_axis(*axis_attr, x.spec.rank());
                std::int64_t inner = 1;
                for (int i = axis + 1; i < x.spec.rank(); ++i) inner *= x.spec.shape[i];
                std::int64_t adim = x.spec.shape[axis];
                std::int64_t outer = x.spec.element_count() / (adim * inner);
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t aa = 0; aa < adim; ++aa)
                        for (std::int64_t i = 0; i < inner; ++i)
                            gx.data[(o * adim + aa) * inner + i] = g.data[o * inner + i];
            } else {
                for (auto& v : gx.data) v = g.data[0];
            }
            accumulate(rec.args[0], r, 0, gx);
            return;
        }
        throw Error("no backward rule for op '" + op + "'");
    }
};

// ===========================================================================
// Public wrappers
// ===========================================================================

Executor::Executor(const ModuleDef& root, ExecMode mode, std::uint64_t seed, int world)
    : impl_(std::make_unique<ExecutorImpl>(root, mode, seed, world)) {}
Executor::~Executor() = default;
Executor::Executor(Executor&&) noexcept = default;
Executor& Executor::operator=(Executor&&) noexcept = default;

void Executor::set_nan_guard(bool enabled) { impl_->nan_guard_ = enabled; }

std::vector<TensorValue> Executor::forward(const std::vector<TensorValue>& inputs) {
    return impl_->forward(inputs);
}

std::vector<TensorValue> Executor::outputs_of_rank(int rank) const {
    return impl_->outputs_of_rank(rank);
}

GradientMap Executor::backward() { return impl_->backward_all_ranks()[0]; }

std::vector<GradientMap> Executor::backward_all_ranks() { return impl_->backward_all_ranks(); }

const ActivationLedger& Executor::ledger() const { return impl_->ledger_; }

std::int64_t Executor::collective_invocations() const { return impl_->collectives_; }

std::vector<TensorValue> run_forward(const ModuleDef& root, const std::vector<TensorValue>& inputs,
                                     ExecMode mode, std::uint64_t seed) {
    Executor ex(root, mode, seed, 1);
    return ex.forward(inputs);
}

GradientMap run_backward(const ModuleDef& root, const std::vector<TensorValue>& inputs,
                         ExecMode mode, std::uint64_t seed) {
    Executor ex(root, mode, seed, 1);
    ex.forward(inputs);
    return ex.backward();
}

std::vector<TensorValue> run_sharded(const ModuleDef& root, const std::vector<TensorValue>& inputs,
                                     int world_size, ExecMode mode, std::uint64_t seed) {
    if (world_size < 2) throw Error("run_sharded requires world_size > 1");
    Executor ex(root, mode, seed, world_size);
    return ex.forward(inputs);
}

namespace {

TensorValue batch_slice(const TensorValue& t, std::int64_t chunk, std::int64_t chunks) {
    if (t.spec.rank() < 1 || t.spec.shape[0] % chunks != 0)
        throw Error("batch dimension " +
                    (t.spec.rank() ? std::to_string(t.spec.shape[0]) : std::string("<scalar>")) +
                    " not divisible into " + std::to_string(chunks) + " micro-batches");
    std::int64_t rows = t.spec.shape[0] / chunks;
    std::int64_t inner = t.spec.element_count() / t.spec.shape[0];
    TensorSpec spec = t.spec;
    spec.shape[0] = rows;
    TensorValue out(spec);
    for (std::int64_t i = 0; i < rows * inner; ++i) out.data[i] = t.data[chunk * rows * inner + i];
    return out;
}

}  // namespace

std::vector<TensorValue> run_pipeline(const PipelineStagePlan& plan,
                                      const std::vector<TensorValue>& inputs, int micro_batches,
                                      ExecMode mode, std::uint64_t seed) {
    if (micro_batches < 1) throw Error("micro_batches must be >= 1");
    if (inputs.size() != plan.model_inputs.size())
        throw Error("pipeline expects " + std::to_string(plan.model_inputs.size()) + " inputs");
    std::vector<std::vector<TensorValue>> chunk_outputs;
    for (int c = 0; c < micro_batches; ++c) {
        std::map<std::string, TensorValue> env;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            env[plan.model_inputs[i]] =
                micro_batches == 1 ? inputs[i] : batch_slice(inputs[i], c, micro_batches);
        }
        for (const auto& stage : plan.stages) {
            std::vector<TensorValue> stage_inputs;
            for (const auto& name : stage.consumes) {
                auto it = env.find(name);
                if (it == env.end()) throw Error("pipeline stage consumes unknown value '" + name + "'");
                stage_inputs.push_back(it->second);
            }
            std::vector<TensorValue> outs = run_forward(stage.module, stage_inputs, mode, seed);
            if (outs.size() != stage.produces.size())
                throw Error("pipeline stage produced " + std::to_string(outs.size()) +
                            " values, expected " + std::to_string(stage.produces.size()));
            for (std::size_t i = 0; i < outs.size(); ++i) env[stage.produces[i]] = std::move(outs[i]);
        }
        std::vector<TensorValue> outs;
        for (const auto& name : plan.model_outputs) {
            auto it = env.find(name);
            if (it == env.end()) throw Error("pipeline missing model output '" + name + "'");
            outs.push_back(it->second);
        }
        chunk_outputs.push_back(std::move(outs));
    }
    if (micro_batches == 1) return chunk_outputs[0];
    // Concatenate along the batch axis in micro-batch order.
    std::vector<TensorValue> result;
    for (std::size_t o = 0; o < chunk_outputs[0].size(); ++o) {
        TensorSpec spec = chunk_outputs[0][o].spec;
        spec.shape[0] *= micro_batches;
        TensorValue full(spec);
        std::int64_t per = chunk_outputs[0][o].size();
        for (int c = 0; c < micro_batches; ++c)
            for (std::int64_t i = 0; i < per; ++i)
                full.data[c * per + i] = chunk_outputs[c][o].data[i];
        result.push_back(std::move(full));
    }
    return result;
}

}  // namespace slapo
