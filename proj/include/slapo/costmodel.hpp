// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "slapo/pipeline.hpp"
#include "slapo/shape_inference.hpp"

namespace slapo {

/// Configuration, not ground truth.
struct CostConstants {
    double device_flops_per_s = 1e12;
    double link_bytes_per_s = 1e10;
    double kernel_launch_overhead_s = 1e-6;
    double optimizer_state_multiplier = 2.0;  // Adam-like moments
};

struct CostReport {
    double step_time_s = 0.0;
    std::int64_t flops = 0;            // forward
    std::int64_t recompute_flops = 0;  // re-run of checkpointed regions in backward
    std::int64_t launches = 0;         // forward kernel launches
    std::int64_t collective_bytes = 0; // ring wire bytes, forward + backward
    std::int64_t param_bytes = 0;      // worker-local
    std::int64_t activation_bytes = 0; // executor ledger rule
    std::int64_t peak_memory_bytes = 0;
    bool oom = false;
    double throughput_samples_per_s = 0.0;  // 0 when oom

    std::string to_text() const;
};

struct EstimateOptions {
    std::int64_t batch = 0;  // overrides input dim 0; 0 keeps declared shapes
    int micro_batches = 1;   // pipeline estimates only
    int world_size = 1;
    std::int64_t device_memory_bytes = 16LL * 1024 * 1024 * 1024;
    CostConstants constants;
};

/// Analytical step-time and memory estimate. Per-op flop forms: matmul
/// 2*M*N*K (batched), elementwise = element count, softmax 5n, layernorm 8n,
/// reduce_sum n, data movement 0. Backward = 2x forward flops; checkpointed
/// regions add their forward flops once more. Collectives cost ring
/// all-reduce wire bytes 2*(w-1)/w per payload, counted in forward and
/// backward. Memory = params*(2 + optimizer multiplier) + activations under
/// the executor ledger rule.
CostReport estimate(const ModuleDef& model, const EstimateOptions& opts);

/// Pipeline estimate: stage time on micro-batch shapes, total
/// (m + s - 1) * max stage time; per-stage memory keeps m micro-batches of
/// activations in flight; oom when any stage exceeds device memory.
CostReport estimate_pipeline(const PipelineStagePlan& plan, const EstimateOptions& opts);

/// Flag the first floor(ratio * L) children of `container` (declaration
/// order) as checkpointed. Returns the number flagged.
int apply_checkpoint_ratio(ModuleDef& model, const std::string& container, double ratio);

}  // namespace slapo
