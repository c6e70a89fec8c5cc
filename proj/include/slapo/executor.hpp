// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "slapo/module.hpp"
#include "slapo/pipeline.hpp"

namespace slapo {

/// verify: dropout is the identity (numerical-equivalence runs).
/// train: counter-based deterministic dropout.
enum class ExecMode { Verify, Train };

struct ActivationLedger {
    /// Retained forward activation bytes under the accounting rule:
    /// every call_op / builtin-module output counts once; a checkpointed
    /// region counts its boundary inputs and outputs instead of its internals.
    std::int64_t retained_bytes = 0;
};

struct GradientMap {
    std::map<std::string, TensorValue> params;  // dotted param path -> gradient
    std::vector<TensorValue> inputs;            // per model input
};

class ExecutorImpl;

/// Deterministic reference runtime. world > 1 simulates ranks in lockstep in
/// one process, giving collectives exact semantics; rank r sees the worker-
/// local shard of every sharded parameter.
class Executor {
public:
    Executor(const ModuleDef& root, ExecMode mode, std::uint64_t seed, int world = 1);
    ~Executor();
    Executor(Executor&&) noexcept;
    Executor& operator=(Executor&&) noexcept;

    /// Abort with an error as soon as any op produces a NaN. Off by default.
    void set_nan_guard(bool enabled);

    /// Run forward; inputs are replicated to every rank. Returns rank 0's outputs.
    std::vector<TensorValue> forward(const std::vector<TensorValue>& inputs);

    /// Outputs of a specific rank from the last forward.
    std::vector<TensorValue> outputs_of_rank(int rank) const;

    /// Reverse-mode gradients with loss = sum of all output elements.
    /// Requires forward() first. Returns rank 0's GradientMap.
    GradientMap backward();
    std::vector<GradientMap> backward_all_ranks();

    const ActivationLedger& ledger() const;
    std::int64_t collective_invocations() const;

private:
    std::unique_ptr<ExecutorImpl> impl_;
};

/// Single-worker forward convenience.
std::vector<TensorValue> run_forward(const ModuleDef& root, const std::vector<TensorValue>& inputs,
                                     ExecMode mode, std::uint64_t seed);

/// forward + backward in one call (world_size 1).
GradientMap run_backward(const ModuleDef& root, const std::vector<TensorValue>& inputs,
                         ExecMode mode, std::uint64_t seed);

/// Execute a sharded model rank-lockstep; outputs are rank 0's.
std::vector<TensorValue> run_sharded(const ModuleDef& root, const std::vector<TensorValue>& inputs,
                                     int world_size, ExecMode mode, std::uint64_t seed);

/// GPipe-style micro-batched execution of a stage plan (simulated schedule;
/// actual execution is sequential). Splits the batch axis into micro_batches
/// chunks and concatenates stage outputs.
std::vector<TensorValue> run_pipeline(const PipelineStagePlan& plan,
                                      const std::vector<TensorValue>& inputs, int micro_batches,
                                      ExecMode mode, std::uint64_t seed);

/// Deterministic standard-normal test tensor.
TensorValue random_tensor(const TensorSpec& spec, std::uint64_t seed, std::uint64_t stream = 0);

std::int64_t embedding_row(double raw, std::int64_t num_embeddings);

}  // namespace slapo
