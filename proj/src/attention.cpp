#include "gqkva/attention.hpp"

#include <cmath>

namespace gqkva {

const char* scale_mode_name(ScaleMode m) {
    return m == ScaleMode::HeadDim ? "head-dim" : "embed-dim";
}

ScaleMode parse_scale_mode(const std::string& name) {
    if (name == "head-dim") return ScaleMode::HeadDim;
    if (name == "embed-dim") return ScaleMode::EmbedDim;
    throw ConfigError("unknown scale mode '" + name + "', expected head-dim or embed-dim");
}

namespace {

Tensor trunc_normal_tensor(Shape shape, DType dtype, Rng& rng, double std_dev = 0.02) {
    Tensor t = Tensor::zeros(std::move(shape), dtype);
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, rng.trunc_normal(std_dev));
    return t;
}

}  // namespace

AttentionWeights AttentionWeights::zeros(const GroupingScheme& s, DType dtype) {
    AttentionWeights w;
    const int64_t hd = s.head_dim;
    w.w_q = Tensor::zeros({s.d, s.g_q * hd}, dtype);
    w.b_q = Tensor::zeros({s.g_q * hd}, dtype);
    w.w_k = Tensor::zeros({s.d, s.g_kv * hd}, dtype);
    w.b_k = Tensor::zeros({s.g_kv * hd}, dtype);
    w.w_v = Tensor::zeros({s.d, s.g_kv * hd}, dtype);
    w.b_v = Tensor::zeros({s.g_kv * hd}, dtype);
    w.w_o = Tensor::zeros({s.d, s.d}, dtype);
    w.b_o = Tensor::zeros({s.d}, dtype);
    return w;
}

AttentionWeights AttentionWeights::random(const GroupingScheme& s, DType dtype, Rng& rng) {
    AttentionWeights w;
    const int64_t hd = s.head_dim;
    w.w_q = trunc_normal_tensor({s.d, s.g_q * hd}, dtype, rng);
    w.b_q = trunc_normal_tensor({s.g_q * hd}, dtype, rng);
    w.w_k = trunc_normal_tensor({s.d, s.g_kv * hd}, dtype, rng);
    w.b_k = trunc_normal_tensor({s.g_kv * hd}, dtype, rng);
    w.w_v = trunc_normal_tensor({s.d, s.g_kv * hd}, dtype, rng);
    w.b_v = trunc_normal_tensor({s.g_kv * hd}, dtype, rng);
    w.w_o = trunc_normal_tensor({s.d, s.d}, dtype, rng);
    w.b_o = trunc_normal_tensor({s.d}, dtype, rng);
    return w;
}

int64_t AttentionWeights::element_count() const {
    return w_q.numel() + b_q.numel() + w_k.numel() + b_k.numel() + w_v.numel() + b_v.numel() +
           w_o.numel() + b_o.numel();
}

void AttentionWeights::check_consistent(const GroupingScheme& s) const {
    const int64_t hd = s.head_dim;
    auto expect = [](const Tensor& t, const Shape& shape, const char* name) {
        if (t.shape() != shape) {
            throw DimensionError(std::string("attention weights: ") + name + " has shape " +
                                 shape_str(t.shape()) + ", expected " + shape_str(shape));
        }
    };
    expect(w_q, {s.d, s.g_q * hd}, "w_q");
    expect(b_q, {s.g_q * hd}, "b_q");
    expect(w_k, {s.d, s.g_kv * hd}, "w_k");
    expect(b_k, {s.g_kv * hd}, "b_k");
    expect(w_v, {s.d, s.g_kv * hd}, "w_v");
    expect(b_v, {s.g_kv * hd}, "b_v");
    expect(w_o, {s.d, s.d}, "w_o");
    expect(b_o, {s.d}, "b_o");
}

AttentionLeaves register_attention_weights(Tape& tape, const AttentionWeights& w,
                                           bool requires_grad) {
    AttentionLeaves l;
    l.w_q = tape.leaf(w.w_q, requires_grad);
    l.b_q = tape.leaf(w.b_q, requires_grad);
    l.w_k = tape.leaf(w.w_k, requires_grad);
    l.b_k = tape.leaf(w.b_k, requires_grad);
    l.w_v = tape.leaf(w.w_v, requires_grad);
    l.b_v = tape.leaf(w.b_v, requires_grad);
    l.w_o = tape.leaf(w.w_o, requires_grad);
    l.b_o = tape.leaf(w.b_o, requires_grad);
    return l;
}

Tape::Id grouped_attention_forward(Tape& tape, Tape::Id x, const AttentionLeaves& w,
                                   const GroupingScheme& s, ScaleMode mode) {
    const Tensor& xv = tape.value(x);
    if (xv.ndim() != 3 || xv.dim(2) != s.d) {
        throw DimensionError("grouped_attention: input must be [B, N, d] with d=" +
                             std::to_string(s.d) + ", got " + shape_str(xv.shape()));
    }
    const auto violations = validate_scheme(s);
    if (!violations.empty()) {
        throw ConfigError("grouped_attention: invalid scheme '" + s.label +
                          "': " + violations.front());
    }
    const int64_t hd = s.head_dim;

    Tape::Id q_all = tape.add(tape.matmul(x, w.w_q), w.b_q);
    Tape::Id k_all = tape.add(tape.matmul(x, w.w_k), w.b_k);
    Tape::Id v_all = tape.add(tape.matmul(x, w.w_v), w.b_v);

    std::vector<Tape::Id> q_blocks(static_cast<size_t>(s.g_q));
    for (int64_t i = 0; i < s.g_q; ++i) {
        q_blocks[static_cast<size_t>(i)] = tape.slice(q_all, 2, i * hd, hd);
    }
    std::vector<Tape::Id> kt_blocks(static_cast<size_t>(s.g_kv));
    std::vector<Tape::Id> v_blocks(static_cast<size_t>(s.g_kv));
    for (int64_t j = 0; j < s.g_kv; ++j) {
        kt_blocks[static_cast<size_t>(j)] =
            tape.transpose_last2(tape.slice(k_all, 2, j * hd, hd));
        v_blocks[static_cast<size_t>(j)] = tape.slice(v_all, 2, j * hd, hd);
    }

    const double denom =
        std::sqrt(static_cast<double>(mode == ScaleMode::HeadDim ? hd : s.d));
    std::vector<Tape::Id> heads;
    heads.reserve(s.pairing.size());
    for (const HeadPair& p : s.pairing) {
        Tape::Id scores = tape.matmul(q_blocks[static_cast<size_t>(p.q_group)],
                                      kt_blocks[static_cast<size_t>(p.kv_group)]);
        Tape::Id att = tape.softmax_lastdim(tape.scale(scores, 1.0 / denom));
        heads.push_back(tape.matmul(att, v_blocks[static_cast<size_t>(p.kv_group)]));
    }
    Tape::Id merged = tape.concat(heads, 2);
    return tape.add(tape.matmul(merged, w.w_o), w.b_o);
}

Tensor grouped_attention(const Tensor& x, const AttentionWeights& w, const GroupingScheme& s,
                         ScaleMode mode) {
    w.check_consistent(s);
    Tape tape;
    Tape::Id xid = tape.leaf(x, false);
    AttentionLeaves leaves = register_attention_weights(tape, w, false);
    Tape::Id out = grouped_attention_forward(tape, xid, leaves, s, mode);
    return tape.value(out);
}

int64_t attention_param_count(const GroupingScheme& s, bool include_bias) {
    const int64_t qkv_width = (s.g_q + 2 * s.g_kv) * s.head_dim;
    int64_t count = s.d * qkv_width + s.d * s.d;
    if (include_bias) count += qkv_width + s.d;
    return count;
}

FlopReport attention_flops(int64_t n_tokens, const GroupingScheme& s) {
    if (n_tokens < 1) throw ConfigError("attention_flops: n_tokens must be >= 1");
    FlopReport r;
    const int64_t n = n_tokens;
    r.projection = 2 * n * s.d * (s.g_q + 2 * s.g_kv) * s.head_dim;
    r.score = 2 * s.h * n * n * s.head_dim;
    r.weighted_sum = 2 * s.h * n * n * s.head_dim;
    r.output_proj = 2 * n * s.d * s.d;
    return r;
}

}  // namespace gqkva
