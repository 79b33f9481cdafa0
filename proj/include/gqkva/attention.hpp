#pragma once

#include "gqkva/rng.hpp"
#include "gqkva/scheme.hpp"
#include "gqkva/tape.hpp"

namespace gqkva {

// Attention scores are divided by sqrt(head_dim) by default; EmbedDim
// divides by sqrt(d) instead.
enum class ScaleMode { HeadDim, EmbedDim };

const char* scale_mode_name(ScaleMode m);
ScaleMode parse_scale_mode(const std::string& name);

// One attention layer's parameters. w_q packs the g_q query blocks side by
// side (width g_q*head_dim); w_k/w_v pack the g_kv key/value blocks.
struct AttentionWeights {
    Tensor w_q, b_q;  // [d, g_q*head_dim], [g_q*head_dim]
    Tensor w_k, b_k;  // [d, g_kv*head_dim], [g_kv*head_dim]
    Tensor w_v, b_v;
    Tensor w_o, b_o;  // [d, d], [d]

    static AttentionWeights zeros(const GroupingScheme& s, DType dtype);
    // Truncated-normal weights and biases, for layer-level tests.
    static AttentionWeights random(const GroupingScheme& s, DType dtype, Rng& rng);

    int64_t element_count() const;
    void check_consistent(const GroupingScheme& s) const;
};

struct AttentionLeaves {
    Tape::Id w_q = Tape::kNone, b_q = Tape::kNone;
    Tape::Id w_k = Tape::kNone, b_k = Tape::kNone;
    Tape::Id w_v = Tape::kNone, b_v = Tape::kNone;
    Tape::Id w_o = Tape::kNone, b_o = Tape::kNone;
    std::vector<Tape::Id> all() const { return {w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o}; }
};

AttentionLeaves register_attention_weights(Tape& tape, const AttentionWeights& w,
                                           bool requires_grad);

// x: [B, N, d] -> [B, N, d]. Projects x into g_q query blocks and g_kv
// key/value blocks, runs softmax(Q_i K_j^T / scale) V_j for every head's
// (i, j) pair, concatenates head outputs in pairing order, then applies the
// output projection. Differentiable via Tape::backward.
Tape::Id grouped_attention_forward(Tape& tape, Tape::Id x, const AttentionLeaves& w,
                                   const GroupingScheme& s,
                                   ScaleMode mode = ScaleMode::HeadDim);

// Forward without gradient tracking.
Tensor grouped_attention(const Tensor& x, const AttentionWeights& w, const GroupingScheme& s,
                         ScaleMode mode = ScaleMode::HeadDim);

// qkv weights d*(g_q + 2*g_kv)*head_dim plus output projection d*d, plus
// biases (g_q + 2*g_kv)*head_dim + d when included.
int64_t attention_param_count(const GroupingScheme& s, bool include_bias);

// Multiply-accumulates x2 for a single batch of n_tokens.
struct FlopReport {
    int64_t projection = 0;
    int64_t score = 0;
    int64_t weighted_sum = 0;
    int64_t output_proj = 0;
    int64_t total() const { return projection + score + weighted_sum + output_proj; }
};

FlopReport attention_flops(int64_t n_tokens, const GroupingScheme& s);

}  // namespace gqkva
