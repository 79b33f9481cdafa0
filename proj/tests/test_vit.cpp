#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <string>

#include "doctest.h"
#include "gqkva/kernels.hpp"
#include "gqkva/serialize.hpp"
#include "gqkva/train.hpp"
#include "gqkva/vit.hpp"

using namespace gqkva;

namespace {

ViTConfig tiny_config(const std::string& scheme = "mha") {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.in_channels = 1;
    cfg.d = 8;
    cfg.depth = 1;
    cfg.h = 2;
    cfg.mlp_ratio = 2;
    cfg.num_classes = 3;
    cfg.scheme = parse_scheme(scheme, cfg.d, cfg.h);
    return cfg;
}

ViTConfig vit_small_config(const std::string& scheme = "mha") {
    ViTConfig cfg;
    cfg.scheme = parse_scheme(scheme, cfg.d, cfg.h);
    return cfg;  // defaults are the vit-small dims
}

Tensor random_tensor(Shape shape, Rng& rng, DType dtype = DType::F64) {
    Tensor t = Tensor::zeros(std::move(shape), dtype);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-1.0, 1.0));
    return t;
}

}  // namespace

TEST_CASE("patchify trivial single patch") {
    Tensor img = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4}, DType::F64);
    Tensor patches = patchify(img, 2);
    CHECK(patches.shape() == Shape{1, 1, 4});
    for (int64_t i = 0; i < 4; ++i) CHECK(patches.get(i) == img.get(i));
}

TEST_CASE("patchify layout: row-major patches, channel-major within") {
    std::vector<double> vals(16);
    for (size_t i = 0; i < 16; ++i) vals[i] = static_cast<double>(i);
    Tensor img = Tensor::from_values({1, 1, 4, 4}, vals, DType::F64);
    Tensor patches = patchify(img, 2);
    CHECK(patches.shape() == Shape{1, 4, 4});
    // top-left patch: image entries (0,0), (0,1), (1,0), (1,1)
    CHECK(patches.get(0) == 0.0);
    CHECK(patches.get(1) == 1.0);
    CHECK(patches.get(2) == 4.0);
    CHECK(patches.get(3) == 5.0);
    // second patch is the top-right block
    CHECK(patches.get(4) == 2.0);
    CHECK(patches.get(7) == 7.0);

    // two-channel layout: channel-major inside the patch vector
    Rng rng(5);
    Tensor img2 = random_tensor({1, 2, 4, 4}, rng);
    Tensor p2 = patchify(img2, 2);
    CHECK(p2.shape() == Shape{1, 4, 8});
    CHECK(p2.get(0) == img2.get(0));            // c0 (0,0)
    CHECK(p2.get(4) == img2.get(16));           // c1 (0,0)
    CHECK_THROWS_AS(patchify(img2, 3), DimensionError);
}

TEST_CASE("unpatchify inverts patchify") {
    Rng rng(7);
    Tensor img = random_tensor({2, 3, 8, 8}, rng);
    Tensor back = unpatchify(patchify(img, 4), 4, 3, 8, 8);
    CHECK(back.same_bytes(img));
}

TEST_CASE("zero network outputs the head bias") {
    ViTConfig cfg = tiny_config();
    ViTWeights w = zero_weights(cfg, DType::F64);
    for (int64_t j = 0; j < cfg.num_classes; ++j) w.head_b.set(j, 0.5 + j);
    Rng rng(11);
    Tensor img = random_tensor({2, 1, 8, 8}, rng);
    Tensor logits = vit_logits(cfg, w, img);
    CHECK(logits.shape() == Shape{2, 3});
    for (int64_t i = 0; i < 2; ++i) {
        for (int64_t j = 0; j < 3; ++j) {
            CHECK(logits.get(i * 3 + j) == doctest::Approx(0.5 + j));
        }
    }
}

TEST_CASE("identical batch rows produce identical logits") {
    ViTConfig cfg = tiny_config("gqkva-2.1");
    ViTWeights w = init_weights(cfg, 3, DType::F64);
    Rng rng(13);
    Tensor one = random_tensor({1, 1, 8, 8}, rng);
    Tensor two = Tensor::zeros({2, 1, 8, 8}, DType::F64);
    for (int64_t i = 0; i < 64; ++i) {
        two.set(i, one.get(i));
        two.set(64 + i, one.get(i));
    }
    Tensor logits = vit_logits(cfg, w, two);
    for (int64_t j = 0; j < 3; ++j) {
        CHECK(logits.get(j) == doctest::Approx(logits.get(3 + j)).epsilon(1e-12));
    }
    Tensor single = vit_logits(cfg, w, one);
    for (int64_t j = 0; j < 3; ++j) {
        CHECK(single.get(j) == doctest::Approx(logits.get(j)).epsilon(1e-12));
    }
}

TEST_CASE("whole-model gradients match finite differences at the tiny scale") {
    ViTConfig cfg = tiny_config();
    ViTWeights w = init_weights(cfg, 17, DType::F64);
    Rng rng(19);
    Tensor images = random_tensor({2, 1, 8, 8}, rng);
    const std::vector<int64_t> labels = {0, 2};

    Tape tape;
    Tape::Id img = tape.leaf(images, false);
    ViTLeaves leaves = register_vit_weights(tape, w, true);
    Tape::Id logits = vit_forward(tape, cfg, leaves, img);
    CrossEntropyResult ce = cross_entropy(tape.value(logits), labels);
    tape.backward(logits, ce.dlogits);

    std::vector<Tape::Id> ids = leaves.all();
    std::vector<Tensor> originals;
    w.for_each([&](const std::string&, Tensor& t, ParamKind) { originals.push_back(t); });
    REQUIRE(originals.size() == ids.size());

    for (size_t i = 0; i < ids.size(); ++i) {
        Tensor fd = finite_diff_grad(
            [&](const Tensor& probe) {
                ViTWeights w2 = w;
                size_t k = 0;
                w2.for_each([&](const std::string&, Tensor& slot, ParamKind) {
                    if (k++ == i) slot = probe;
                });
                Tensor out = vit_logits(cfg, w2, images);
                return cross_entropy(out, labels).loss;
            },
            originals[i], 1e-5);
        CHECK(max_rel_error(tape.grad(ids[i]), fd) <= 1e-5);
    }
}

TEST_CASE("vit-small accounting reproduces the reference columns") {
    struct Row {
        const char* scheme;
        double params_m;
        double size_mib;
    };
    const Row rows[] = {
        {"mha", 22.05, 84.11},  {"gkva-3", 21.16, 80.73},    {"gkva-2", 20.86, 79.60},
        {"mkva", 20.57, 78.47}, {"gqa-3", 20.27, 77.34},     {"gqa-2", 19.68, 75.09},
        {"mqa", 19.09, 72.83},  {"gqkva-2.3", 19.09, 72.83}, {"gqkva-3.2", 18.79, 71.70},
    };
    for (const Row& row : rows) {
        ParamReport r = count_params(vit_small_config(row.scheme));
        CHECK(std::fabs(r.total_millions - row.params_m) <= 0.02);
        CHECK(std::fabs(r.total_size_mib - row.size_mib) <= 0.05);
    }
    // exact totals for the two edge schemes
    CHECK(count_params(vit_small_config("mha")).total == 22050664);
    CHECK(count_params(vit_small_config("gqkva-3.2")).total == 18798184);
}

TEST_CASE("count_params components sum to total and match instantiated weights") {
    for (const char* scheme : {"mha", "mqa", "mkva", "gqa-2", "gkva-3", "gqkva-3.2"}) {
        ViTConfig cfg = tiny_config();
        cfg.d = 12;
        cfg.h = 6;
        cfg.scheme = parse_scheme(scheme, 12, 6);
        ParamReport r = count_params(cfg);
        CHECK(r.patch_embed + r.pos_embed + r.cls_token + r.attention + r.mlp + r.norms +
                  r.head ==
              r.total);
        ViTWeights w = zero_weights(cfg, DType::F32);
        CHECK(w.element_count() == r.total);
    }
    for (int64_t h : {2, 6}) {
        ViTConfig cfg = tiny_config();
        cfg.d = 2 * h;
        cfg.h = h;
        cfg.scheme = make_scheme(SchemeKind::Gqkva, cfg.d, h, h, 1);
        CHECK(zero_weights(cfg, DType::F32).element_count() == count_params(cfg).total);
    }
}

TEST_CASE("init_weights is seed-deterministic, truncated, and complete") {
    ViTConfig cfg = tiny_config("gqa-1");
    ViTWeights a = init_weights(cfg, 42, DType::F32);
    ViTWeights b = init_weights(cfg, 42, DType::F32);
    ViTWeights c = init_weights(cfg, 43, DType::F32);

    int64_t total = 0;
    bool identical = true, different = false;
    a.for_each([&](const std::string&, Tensor& t, ParamKind kind) {
        total += t.numel();
        if (kind == ParamKind::Projection) {
            for (int64_t i = 0; i < t.numel(); ++i) {
                CHECK(std::fabs(t.get(i)) <= 0.04);  // 2 std of 0.02
            }
        }
        if (kind == ParamKind::NormGamma) {
            for (int64_t i = 0; i < t.numel(); ++i) CHECK(t.get(i) == 1.0);
        }
        if (kind == ParamKind::Bias || kind == ParamKind::NormBeta) {
            for (int64_t i = 0; i < t.numel(); ++i) CHECK(t.get(i) == 0.0);
        }
    });
    CHECK(total == count_params(cfg).total);

    std::vector<const Tensor*> av, bv, cv;
    a.for_each([&](const std::string&, Tensor& t, ParamKind) { av.push_back(&t); });
    b.for_each([&](const std::string&, Tensor& t, ParamKind) { bv.push_back(&t); });
    c.for_each([&](const std::string&, Tensor& t, ParamKind) { cv.push_back(&t); });
    for (size_t i = 0; i < av.size(); ++i) {
        identical = identical && av[i]->same_bytes(*bv[i]);
        different = different || !av[i]->same_bytes(*cv[i]);
    }
    CHECK(identical);
    CHECK(different);
}

TEST_CASE("checkpoint round trip and validation") {
    const std::string path = "test_vit_ckpt.bin";
    ViTConfig cfg = tiny_config("gqkva-2.1");
    cfg.scale_mode = ScaleMode::EmbedDim;
    ViTWeights w = init_weights(cfg, 7, DType::F32);
    save_checkpoint(path, cfg, w);

    Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.config.scheme.label == "gqkva-2.1");
    CHECK(loaded.config.scale_mode == ScaleMode::EmbedDim);
    CHECK(loaded.config.d == cfg.d);
    CHECK(loaded.config.num_classes == cfg.num_classes);

    std::vector<const Tensor*> orig, back;
    w.for_each([&](const std::string&, Tensor& t, ParamKind) { orig.push_back(&t); });
    loaded.weights.for_each(
        [&](const std::string&, Tensor& t, ParamKind) { back.push_back(&t); });
    REQUIRE(orig.size() == back.size());
    for (size_t i = 0; i < orig.size(); ++i) CHECK(orig[i]->same_bytes(*back[i]));

    // truncated file fails the byte-length validation
    {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        std::fseek(f, 0, SEEK_END);
        const long size = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        std::string clipped(static_cast<size_t>(size - 8), '\0');
        REQUIRE(std::fread(clipped.data(), 1, clipped.size(), f) == clipped.size());
        std::fclose(f);
        std::FILE* g = std::fopen(path.c_str(), "wb");
        std::fwrite(clipped.data(), 1, clipped.size(), g);
        std::fclose(g);
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("tensor file round trip") {
    const std::string path = "test_vit_tensor.bin";
    Rng rng(23);
    Tensor t = random_tensor({3, 5}, rng, DType::F64);
    save_tensor(path, t);
    Tensor back = load_tensor(path);
    CHECK(back.same_bytes(t));
    std::remove(path.c_str());
}

TEST_CASE("whole-model forward is bitwise identical with kernels parallel or serial") {
    ViTConfig cfg = tiny_config("gqa-2");
    cfg.d = 48;
    cfg.h = 6;
    cfg.image_size = 16;
    cfg.scheme = parse_scheme("gqa-2", 48, 6);
    ViTWeights w = init_weights(cfg, 5, DType::F32);
    Rng rng(31);
    Tensor img = random_tensor({4, 1, 16, 16}, rng, DType::F32);
    kernels::set_parallel_enabled(false);
    Tensor serial = vit_logits(cfg, w, img);
    kernels::set_parallel_enabled(true);
    Tensor parallel = vit_logits(cfg, w, img);
    CHECK(serial.same_bytes(parallel));
}

TEST_CASE("config validation errors") {
    ViTConfig cfg = tiny_config();
    cfg.patch_size = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    ViTConfig cfg2 = tiny_config();
    cfg2.scheme = parse_scheme("mha", 16, 2);  // d mismatch
    CHECK_THROWS_AS(cfg2.validate(), ConfigError);
    ViTConfig cfg3 = tiny_config();
    ViTWeights w = init_weights(cfg3, 1, DType::F64);
    Rng rng(29);
    CHECK_THROWS_AS(vit_logits(cfg3, w, random_tensor({1, 1, 6, 6}, rng)), DimensionError);
}
