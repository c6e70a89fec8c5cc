// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "slapo/module.hpp"

namespace slapo::testing {

struct BertConfig {
    int layers = 24;
    std::int64_t hidden = 8;
    std::int64_t heads = 2;
    std::int64_t vocab = 28;  // divisible by world sizes 2 and 4
    std::int64_t batch = 4;
    std::int64_t seq = 4;
    double dropout_p = 0.1;
};

/// Toy BERT-style model: embeddings + encoder.layer.{0..L-1} + pooler, with a
/// residual from the embeddings into the pooler input. Root input: token ids
/// (batch, seq). Every layer is attention (qkv + core + output) followed by
/// an FFN block.
ModuleDef toy_bert(const BertConfig& cfg = {});

/// Two-Linear tensor-parallel fixture: out = B(gelu(A(x))), A shardable on
/// axis 0, B on axis 1. Input (batch, hidden).
ModuleDef tp_two_linear(std::int64_t hidden = 8, std::int64_t inner = 16, std::int64_t batch = 4);

/// Hand-valued two-Linear toy: X=(1,2), Wa=(4,2), relu, Wb=(2,4) with exact
/// integer weights.
ModuleDef fig3c_exact();

/// Flat stack of n Linear+gelu pairs (root graph calls lin<i> then gelu).
ModuleDef ffn_stack(int n = 24, std::int64_t hidden = 4, std::int64_t batch = 2);

/// Pattern graph: x -> call_module(Linear) -> gelu, single output.
StaticGraph linear_gelu_pattern();

}  // namespace slapo::testing
