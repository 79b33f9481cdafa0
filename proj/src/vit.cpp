#include "gqkva/vit.hpp"

namespace gqkva {

namespace {
constexpr double kLayerNormEps = 1e-6;
}

void ViTConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || in_channels <= 0 || d <= 0 || depth <= 0 ||
        h <= 0 || mlp_ratio <= 0 || num_classes <= 0) {
        throw ConfigError("vit config: all dimensions must be positive");
    }
    if (image_size % patch_size != 0) {
        throw ConfigError("vit config: image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (scheme.d != d || scheme.h != h) {
        throw ConfigError("vit config: scheme dims (d=" + std::to_string(scheme.d) + ", h=" +
                          std::to_string(scheme.h) + ") do not match model (d=" +
                          std::to_string(d) + ", h=" + std::to_string(h) + ")");
    }
    if (drop_rate != 0.0) {
        throw ConfigError("vit config: dropout is not implemented, drop_rate must be 0");
    }
    const auto violations = validate_scheme(scheme);
    if (!violations.empty()) {
        throw ConfigError("vit config: invalid scheme '" + scheme.label +
                          "': " + violations.front());
    }
}

int64_t ViTWeights::element_count() const {
    int64_t n = 0;
    for_each([&](const std::string&, const Tensor& t, ParamKind) { n += t.numel(); });
    return n;
}

ParamReport count_params(const ViTConfig& cfg) {
    cfg.validate();
    ParamReport r;
    const int64_t d = cfg.d;
    const int64_t hidden = cfg.mlp_ratio * d;
    r.patch_embed = cfg.patch_size * cfg.patch_size * cfg.in_channels * d + d;
    r.cls_token = d;
    r.pos_embed = cfg.n_tokens() * d;
    r.attention = cfg.depth * attention_param_count(cfg.scheme, /*include_bias=*/true);
    r.mlp = cfg.depth * (d * hidden + hidden + hidden * d + d);
    r.norms = cfg.depth * 4 * d + 2 * d;  // two affine pairs per block, one final pair
    r.head = d * cfg.num_classes + cfg.num_classes;
    r.total = r.patch_embed + r.cls_token + r.pos_embed + r.attention + r.mlp + r.norms + r.head;
    r.total_millions = static_cast<double>(r.total) / 1e6;
    r.total_size_mib = static_cast<double>(r.total) * 4.0 / (1024.0 * 1024.0);
    return r;
}

Tape::Id patchify_node(Tape& tape, Tape::Id images, int64_t patch) {
    const Tensor& img = tape.value(images);
    if (img.ndim() != 4) {
        throw DimensionError("patchify: images must be [B, C, H, W], got " +
                             shape_str(img.shape()));
    }
    const int64_t b = img.dim(0), c = img.dim(1), hh = img.dim(2), ww = img.dim(3);
    if (patch <= 0 || hh % patch != 0 || ww % patch != 0) {
        throw DimensionError("patchify: image extents " + shape_str(img.shape()) +
                             " not divisible by patch " + std::to_string(patch));
    }
    const int64_t ph = hh / patch, pw = ww / patch;
    Tape::Id split = tape.reshape(images, {b, c, ph, patch, pw, patch});
    Tape::Id moved = tape.permute(split, {0, 2, 4, 1, 3, 5});  // [B, ph, pw, C, p, p]
    return tape.reshape(moved, {b, ph * pw, c * patch * patch});
}

Tensor patchify(const Tensor& images, int64_t patch) {
    Tape tape;
    return tape.value(patchify_node(tape, tape.leaf(images), patch));
}

Tensor unpatchify(const Tensor& patches, int64_t patch, int64_t channels, int64_t height,
                  int64_t width) {
    if (patches.ndim() != 3) {
        throw DimensionError("unpatchify: expected [B, N, patch^2*C], got " +
                             shape_str(patches.shape()));
    }
    const int64_t b = patches.dim(0);
    const int64_t ph = height / patch, pw = width / patch;
    if (patches.dim(1) != ph * pw || patches.dim(2) != channels * patch * patch) {
        throw DimensionError("unpatchify: patch layout " + shape_str(patches.shape()) +
                             " does not match target image dims");
    }
    Tensor split = ops::reshape(patches, {b, ph, pw, channels, patch, patch});
    Tensor moved = ops::permute(split, {0, 3, 1, 4, 2, 5});  // [B, C, ph, p, pw, p]
    return ops::reshape(moved, {b, channels, height, width});
}

std::vector<Tape::Id> ViTLeaves::all() const {
    std::vector<Tape::Id> ids = {patch_w, patch_b, cls_token, pos_embed};
    for (const Block& blk : blocks) {
        ids.push_back(blk.ln1_gamma);
        ids.push_back(blk.ln1_beta);
        for (Tape::Id id : blk.attn.all()) ids.push_back(id);
        ids.push_back(blk.ln2_gamma);
        ids.push_back(blk.ln2_beta);
        ids.push_back(blk.fc1_w);
        ids.push_back(blk.fc1_b);
        ids.push_back(blk.fc2_w);
        ids.push_back(blk.fc2_b);
    }
    ids.push_back(final_gamma);
    ids.push_back(final_beta);
    ids.push_back(head_w);
    ids.push_back(head_b);
    return ids;
}

ViTLeaves register_vit_weights(Tape& tape, const ViTWeights& w, bool requires_grad) {
    ViTLeaves l;
    l.patch_w = tape.leaf(w.patch_w, requires_grad);
    l.patch_b = tape.leaf(w.patch_b, requires_grad);
    l.cls_token = tape.leaf(w.cls_token, requires_grad);
    l.pos_embed = tape.leaf(w.pos_embed, requires_grad);
    for (const ViTBlockWeights& blk : w.blocks) {
        ViTLeaves::Block lb;
        lb.ln1_gamma = tape.leaf(blk.ln1_gamma, requires_grad);
        lb.ln1_beta = tape.leaf(blk.ln1_beta, requires_grad);
        lb.attn = register_attention_weights(tape, blk.attn, requires_grad);
        lb.ln2_gamma = tape.leaf(blk.ln2_gamma, requires_grad);
        lb.ln2_beta = tape.leaf(blk.ln2_beta, requires_grad);
        lb.fc1_w = tape.leaf(blk.fc1_w, requires_grad);
        lb.fc1_b = tape.leaf(blk.fc1_b, requires_grad);
        lb.fc2_w = tape.leaf(blk.fc2_w, requires_grad);
        lb.fc2_b = tape.leaf(blk.fc2_b, requires_grad);
        l.blocks.push_back(lb);
    }
    l.final_gamma = tape.leaf(w.final_gamma, requires_grad);
    l.final_beta = tape.leaf(w.final_beta, requires_grad);
    l.head_w = tape.leaf(w.head_w, requires_grad);
    l.head_b = tape.leaf(w.head_b, requires_grad);
    return l;
}

Tape::Id vit_forward(Tape& tape, const ViTConfig& cfg, const ViTLeaves& w, Tape::Id images) {
    cfg.validate();
    const Tensor& img = tape.value(images);
    if (img.ndim() != 4 || img.dim(1) != cfg.in_channels || img.dim(2) != cfg.image_size ||
        img.dim(3) != cfg.image_size) {
        throw DimensionError("vit_forward: images " + shape_str(img.shape()) +
                             " do not match config [B," + std::to_string(cfg.in_channels) +
                             "," + std::to_string(cfg.image_size) + "," +
                             std::to_string(cfg.image_size) + "]");
    }
    const int64_t batch = img.dim(0);
    const int64_t d = cfg.d;

    Tape::Id patches = patchify_node(tape, images, cfg.patch_size);
    Tape::Id embedded = tape.add(tape.matmul(patches, w.patch_w), w.patch_b);
    Tape::Id cls = tape.broadcast_to(tape.reshape(w.cls_token, {1, 1, d}), {batch, 1, d});
    Tape::Id seq = tape.concat({cls, embedded}, 1);
    seq = tape.add(seq, w.pos_embed);

    for (const ViTLeaves::Block& blk : w.blocks) {
        Tape::Id normed = tape.layernorm(seq, blk.ln1_gamma, blk.ln1_beta, kLayerNormEps);
        Tape::Id att =
            grouped_attention_forward(tape, normed, blk.attn, cfg.scheme, cfg.scale_mode);
        seq = tape.add(seq, att);
        Tape::Id normed2 = tape.layernorm(seq, blk.ln2_gamma, blk.ln2_beta, kLayerNormEps);
        Tape::Id hidden = tape.gelu(tape.add(tape.matmul(normed2, blk.fc1_w), blk.fc1_b));
        Tape::Id mlp_out = tape.add(tape.matmul(hidden, blk.fc2_w), blk.fc2_b);
        seq = tape.add(seq, mlp_out);
    }

    Tape::Id final_norm = tape.layernorm(seq, w.final_gamma, w.final_beta, kLayerNormEps);
    Tape::Id cls_out = tape.reshape(tape.slice(final_norm, 1, 0, 1), {batch, d});
    return tape.add(tape.matmul(cls_out, w.head_w), w.head_b);
}

Tensor vit_logits(const ViTConfig& cfg, const ViTWeights& w, const Tensor& images) {
    Tape tape;
    Tape::Id img = tape.leaf(images, false);
    ViTLeaves leaves = register_vit_weights(tape, w, false);
    return tape.value(vit_forward(tape, cfg, leaves, img));
}

ViTWeights zero_weights(const ViTConfig& cfg, DType dtype) {
    cfg.validate();
    ViTWeights w;
    const int64_t d = cfg.d;
    const int64_t hidden = cfg.mlp_ratio * d;
    w.patch_w = Tensor::zeros({cfg.patch_size * cfg.patch_size * cfg.in_channels, d}, dtype);
    w.patch_b = Tensor::zeros({d}, dtype);
    w.cls_token = Tensor::zeros({1, d}, dtype);
    w.pos_embed = Tensor::zeros({cfg.n_tokens(), d}, dtype);
    for (int64_t i = 0; i < cfg.depth; ++i) {
        ViTBlockWeights blk;
        blk.ln1_gamma = Tensor::zeros({d}, dtype);
        blk.ln1_beta = Tensor::zeros({d}, dtype);
        blk.attn = AttentionWeights::zeros(cfg.scheme, dtype);
        blk.ln2_gamma = Tensor::zeros({d}, dtype);
        blk.ln2_beta = Tensor::zeros({d}, dtype);
        blk.fc1_w = Tensor::zeros({d, hidden}, dtype);
        blk.fc1_b = Tensor::zeros({hidden}, dtype);
        blk.fc2_w = Tensor::zeros({hidden, d}, dtype);
        blk.fc2_b = Tensor::zeros({d}, dtype);
        w.blocks.push_back(std::move(blk));
    }
    w.final_gamma = Tensor::zeros({d}, dtype);
    w.final_beta = Tensor::zeros({d}, dtype);
    w.head_w = Tensor::zeros({d, cfg.num_classes}, dtype);
    w.head_b = Tensor::zeros({cfg.num_classes}, dtype);
    return w;
}

ViTWeights init_weights(const ViTConfig& cfg, uint64_t seed, DType dtype) {
    ViTWeights w = zero_weights(cfg, dtype);
    Rng rng(seed);
    w.for_each([&](const std::string&, Tensor& t, ParamKind kind) {
        switch (kind) {
            case ParamKind::Projection: {
                const int64_t n = t.numel();
                for (int64_t i = 0; i < n; ++i) t.set(i, rng.trunc_normal(0.02));
                break;
            }
            case ParamKind::Bias:
            case ParamKind::NormBeta:
                break;  // stay zero
            case ParamKind::NormGamma: {
                const int64_t n = t.numel();
                for (int64_t i = 0; i < n; ++i) t.set(i, 1.0);
                break;
            }
        }
    });
    return w;
}

}  // namespace gqkva
