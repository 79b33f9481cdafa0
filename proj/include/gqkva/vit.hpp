#pragma once

#include <string>

#include "gqkva/attention.hpp"

namespace gqkva {

struct ViTConfig {
    int64_t image_size = 224;
    int64_t patch_size = 16;
    int64_t in_channels = 3;
    int64_t d = 384;
    int64_t depth = 12;
    int64_t h = 6;
    int64_t mlp_ratio = 4;  // MLP hidden width = mlp_ratio * d
    int64_t num_classes = 1000;
    GroupingScheme scheme;
    double drop_rate = 0.0;  // held at 0
    ScaleMode scale_mode = ScaleMode::HeadDim;

    int64_t n_patches() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    int64_t n_tokens() const { return n_patches() + 1; }  // patches + cls
    void validate() const;
};

enum class ParamKind { Projection, Bias, NormGamma, NormBeta };

struct ViTBlockWeights {
    Tensor ln1_gamma, ln1_beta;
    AttentionWeights attn;
    Tensor ln2_gamma, ln2_beta;
    Tensor fc1_w, fc1_b;  // [d, ratio*d]
    Tensor fc2_w, fc2_b;  // [ratio*d, d]
};

// All model parameters. The for_each traversal order is canonical: it fixes
// the checkpoint layout, the optimizer slot order, and the init draw order.
struct ViTWeights {
    Tensor patch_w, patch_b;  // [patch^2 * C, d], [d]
    Tensor cls_token;         // [1, d]
    Tensor pos_embed;         // [n_tokens, d]
    std::vector<ViTBlockWeights> blocks;
    Tensor final_gamma, final_beta;
    Tensor head_w, head_b;  // [d, classes], [classes]

    template <typename F>
    void for_each(F&& f) {
        walk(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        walk(*this, f);
    }

    int64_t element_count() const;

private:
    template <typename Self, typename F>
    static void walk(Self& self, F& f) {
        f("patch_w", self.patch_w, ParamKind::Projection);
        f("patch_b", self.patch_b, ParamKind::Bias);
        f("cls_token", self.cls_token, ParamKind::Projection);
        f("pos_embed", self.pos_embed, ParamKind::Projection);
        for (size_t b = 0; b < self.blocks.size(); ++b) {
            auto& blk = self.blocks[b];
            const std::string p = "block" + std::to_string(b) + ".";
            f(p + "ln1_gamma", blk.ln1_gamma, ParamKind::NormGamma);
            f(p + "ln1_beta", blk.ln1_beta, ParamKind::NormBeta);
            f(p + "attn.w_q", blk.attn.w_q, ParamKind::Projection);
            f(p + "attn.b_q", blk.attn.b_q, ParamKind::Bias);
            f(p + "attn.w_k", blk.attn.w_k, ParamKind::Projection);
            f(p + "attn.b_k", blk.attn.b_k, ParamKind::Bias);
            f(p + "attn.w_v", blk.attn.w_v, ParamKind::Projection);
            f(p + "attn.b_v", blk.attn.b_v, ParamKind::Bias);
            f(p + "attn.w_o", blk.attn.w_o, ParamKind::Projection);
            f(p + "attn.b_o", blk.attn.b_o, ParamKind::Bias);
            f(p + "ln2_gamma", blk.ln2_gamma, ParamKind::NormGamma);
            f(p + "ln2_beta", blk.ln2_beta, ParamKind::NormBeta);
            f(p + "fc1_w", blk.fc1_w, ParamKind::Projection);
            f(p + "fc1_b", blk.fc1_b, ParamKind::Bias);
            f(p + "fc2_w", blk.fc2_w, ParamKind::Projection);
            f(p + "fc2_b", blk.fc2_b, ParamKind::Bias);
        }
        f("final_gamma", self.final_gamma, ParamKind::NormGamma);
        f("final_beta", self.final_beta, ParamKind::NormBeta);
        f("head_w", self.head_w, ParamKind::Projection);
        f("head_b", self.head_b, ParamKind::Bias);
    }
};

// Per-component parameter accounting.
struct ParamReport {
    int64_t patch_embed = 0;
    int64_t pos_embed = 0;
    int64_t cls_token = 0;
    int64_t attention = 0;
    int64_t mlp = 0;
    int64_t norms = 0;
    int64_t head = 0;
    int64_t total = 0;
    double total_millions = 0.0;
    double total_size_mib = 0.0;  // total * 4 bytes / 2^20
};

ParamReport count_params(const ViTConfig& cfg);

// [B, C, H, W] -> [B, n_patches, patch^2*C]. Patches in row-major patch
// order; within a patch, channel-major then row-major.
Tensor patchify(const Tensor& images, int64_t patch);
Tensor unpatchify(const Tensor& patches, int64_t patch, int64_t channels, int64_t height,
                  int64_t width);
Tape::Id patchify_node(Tape& tape, Tape::Id images, int64_t patch);

struct ViTLeaves {
    Tape::Id patch_w = Tape::kNone, patch_b = Tape::kNone;
    Tape::Id cls_token = Tape::kNone, pos_embed = Tape::kNone;
    struct Block {
        Tape::Id ln1_gamma, ln1_beta;
        AttentionLeaves attn;
        Tape::Id ln2_gamma, ln2_beta;
        Tape::Id fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<Block> blocks;
    Tape::Id final_gamma = Tape::kNone, final_beta = Tape::kNone;
    Tape::Id head_w = Tape::kNone, head_b = Tape::kNone;

    // Leaf ids in canonical for_each order.
    std::vector<Tape::Id> all() const;
};

ViTLeaves register_vit_weights(Tape& tape, const ViTWeights& w, bool requires_grad);

// patchify -> linear embed -> prepend cls -> add pos -> depth x (pre-norm
// attention + residual, pre-norm MLP + residual) -> final norm ->
// classifier over the cls token. Returns logits [B, num_classes].
Tape::Id vit_forward(Tape& tape, const ViTConfig& cfg, const ViTLeaves& w, Tape::Id images);

// Forward without gradient tracking.
Tensor vit_logits(const ViTConfig& cfg, const ViTWeights& w, const Tensor& images);

// Truncated normal (std 0.02, cut at 2 std) for projections and embeddings,
// zero biases, unit/zero norm affine. Fully determined by the seed.
ViTWeights init_weights(const ViTConfig& cfg, uint64_t seed, DType dtype = DType::F32);

ViTWeights zero_weights(const ViTConfig& cfg, DType dtype = DType::F32);

}  // namespace gqkva
