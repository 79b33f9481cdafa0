// Command-line front end: scheme verification, parameter accounting,
// training-step benchmarks, and toy training runs.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "gqkva/bench.hpp"
#include "gqkva/kernels.hpp"
#include "gqkva/serialize.hpp"

using namespace gqkva;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;      // bad flags, bad scheme strings, bad files
constexpr int kExitInvariant = 3;  // verification suite failed
constexpr int kExitDiverged = 4;   // training hit non-finite values

struct ModelFlags {
    std::string preset = "tiny";
    int64_t heads = 0;
    int64_t dim = 0;
    int64_t depth = 0;
    int64_t classes = 0;
    int64_t image_size = 0;
    int64_t patch = 0;
    int64_t mlp_ratio = 0;
    int64_t channels = 0;
    std::string scale_mode = "head-dim";
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
    cmd->add_option("--preset", f.preset, "Model preset: vit-small | tiny | custom");
    cmd->add_option("--heads", f.heads, "Attention heads (overrides preset)");
    cmd->add_option("--dim", f.dim, "Embedding size (overrides preset)");
    cmd->add_option("--depth", f.depth, "Transformer blocks (overrides preset)");
    cmd->add_option("--classes", f.classes, "Classifier classes (overrides preset)");
    cmd->add_option("--image-size", f.image_size, "Input image size (overrides preset)");
    cmd->add_option("--patch", f.patch, "Patch size (overrides preset)");
    cmd->add_option("--mlp-ratio", f.mlp_ratio, "MLP hidden ratio (overrides preset)");
    cmd->add_option("--channels", f.channels, "Input channels (overrides preset)");
    cmd->add_option("--scale-mode", f.scale_mode,
                    "Attention score scaling: head-dim | embed-dim");
}

ViTConfig build_config(const ModelFlags& f, const std::string& scheme_label) {
    ViTConfig cfg;  // defaults are the vit-small dims
    if (f.preset == "tiny" || f.preset == "custom") {
        cfg.image_size = 16;
        cfg.patch_size = 4;
        cfg.in_channels = 1;
        cfg.d = 48;
        cfg.depth = 2;
        cfg.h = 6;
        cfg.mlp_ratio = 2;
        cfg.num_classes = 6;
    } else if (f.preset != "vit-small") {
        throw ConfigError("unknown preset '" + f.preset +
                          "', expected vit-small | tiny | custom");
    }
    if (f.heads > 0) cfg.h = f.heads;
    if (f.dim > 0) cfg.d = f.dim;
    if (f.depth > 0) cfg.depth = f.depth;
    if (f.classes > 0) cfg.num_classes = f.classes;
    if (f.image_size > 0) cfg.image_size = f.image_size;
    if (f.patch > 0) cfg.patch_size = f.patch;
    if (f.mlp_ratio > 0) cfg.mlp_ratio = f.mlp_ratio;
    if (f.channels > 0) cfg.in_channels = f.channels;
    cfg.scale_mode = parse_scale_mode(f.scale_mode);
    cfg.scheme = parse_scheme(scheme_label, cfg.d, cfg.h);
    cfg.validate();
    return cfg;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << content;
}

// ---------------------------------------------------------------------------
// verify

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

Tensor random_f64(Shape shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), DType::F64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-1.0, 1.0));
    return t;
}

double probe_sum(const Tensor& t, const Tensor& probe) {
    double acc = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) acc += t.get(i) * probe.get(i);
    return acc;
}

std::vector<CheckResult> verify_scheme(const std::string& label, int64_t d, int64_t h,
                                       uint64_t seed, ScaleMode mode) {
    std::vector<CheckResult> checks;
    Rng rng(seed);
    const GroupingScheme s = parse_scheme(label, d, h);
    const int64_t batch = 2, n_tokens = 3;

    {
        const auto violations = validate_scheme(s);
        std::string detail;
        for (const auto& v : violations) detail += v + "; ";
        checks.push_back({"scheme-valid", violations.empty(), detail});
    }
    {
        AttentionWeights w = AttentionWeights::zeros(s, DType::F64);
        const int64_t with_bias = attention_param_count(s, true);
        const int64_t without =
            attention_param_count(s, false) + w.b_q.numel() + w.b_k.numel() + w.b_v.numel() +
            w.b_o.numel();
        const bool pass = with_bias == w.element_count() && without == w.element_count();
        checks.push_back({"accounting", pass,
                          "count=" + std::to_string(with_bias) + " elements=" +
                              std::to_string(w.element_count())});
    }
    {
        // family reductions at these dims
        Tensor x = random_f64({batch, n_tokens, d}, rng);
        double worst = 0.0;
        auto pair_diff = [&](const GroupingScheme& a, const GroupingScheme& b) {
            AttentionWeights w = AttentionWeights::random(a, DType::F64, rng);
            worst = std::max(worst, grouped_attention(x, w, a, mode)
                                        .max_abs_diff(grouped_attention(x, w, b, mode)));
        };
        pair_diff(make_scheme(SchemeKind::Gqkva, d, h, h, 1), make_scheme(SchemeKind::Mqa, d, h));
        pair_diff(make_scheme(SchemeKind::Gqkva, d, h, 1, h),
                  make_scheme(SchemeKind::Mkva, d, h));
        pair_diff(make_scheme(SchemeKind::Gqa, d, h, std::nullopt, h),
                  make_scheme(SchemeKind::Mha, d, h));
        pair_diff(make_scheme(SchemeKind::Gkva, d, h, h, std::nullopt),
                  make_scheme(SchemeKind::Mha, d, h));
        checks.push_back({"pairing-reductions", worst <= 1e-10,
                          "max deviation " + std::to_string(worst)});
    }
    {
        AttentionWeights w = AttentionWeights::random(s, DType::F64, rng);
        Tensor x = random_f64({batch, n_tokens, d}, rng);
        Tensor base = grouped_attention(x, w, s, mode);

        std::vector<int64_t> perm = rng.permutation(s.h);
        GroupingScheme permuted = s;
        AttentionWeights w2 = w;
        const int64_t hd = s.head_dim;
        for (int64_t p = 0; p < s.h; ++p) {
            permuted.pairing[static_cast<size_t>(p)] =
                s.pairing[static_cast<size_t>(perm[static_cast<size_t>(p)])];
            for (int64_t r = 0; r < hd; ++r) {
                for (int64_t c = 0; c < d; ++c) {
                    w2.w_o.set((p * hd + r) * d + c,
                               w.w_o.get((perm[static_cast<size_t>(p)] * hd + r) * d + c));
                }
            }
        }
        const double diff = grouped_attention(x, w2, permuted, mode).max_abs_diff(base);
        checks.push_back(
            {"permutation-invariance", diff <= 1e-10, "max deviation " + std::to_string(diff)});
    }
    {
        AttentionWeights w = AttentionWeights::random(s, DType::F64, rng);
        Tensor x = random_f64({1, n_tokens, d}, rng);
        Tensor base = grouped_attention(x, w, s, mode);
        std::vector<int64_t> perm = rng.permutation(n_tokens);
        Tensor shuffled = Tensor::zeros({1, n_tokens, d}, DType::F64);
        for (int64_t t = 0; t < n_tokens; ++t) {
            for (int64_t c = 0; c < d; ++c) {
                shuffled.set(t * d + c, x.get(perm[static_cast<size_t>(t)] * d + c));
            }
        }
        Tensor out = grouped_attention(shuffled, w, s, mode);
        double diff = 0.0;
        for (int64_t t = 0; t < n_tokens; ++t) {
            for (int64_t c = 0; c < d; ++c) {
                diff = std::max(diff, std::fabs(out.get(t * d + c) -
                                                base.get(perm[static_cast<size_t>(t)] * d + c)));
            }
        }
        checks.push_back(
            {"token-equivariance", diff <= 1e-10, "max deviation " + std::to_string(diff)});
    }
    {
        AttentionWeights w = AttentionWeights::random(s, DType::F64, rng);
        Tensor x = random_f64({1, n_tokens, d}, rng);
        Tensor probe = random_f64({1, n_tokens, d}, rng);
        Tape tape;
        Tape::Id xid = tape.leaf(x, true);
        AttentionLeaves leaves = register_attention_weights(tape, w, true);
        tape.backward(grouped_attention_forward(tape, xid, leaves, s, mode), probe);

        double worst = 0.0;
        auto check_field = [&](Tensor AttentionWeights::*field, Tape::Id id) {
            Tensor fd = finite_diff_grad(
                [&](const Tensor& t) {
                    AttentionWeights w2 = w;
                    w2.*field = t;
                    return probe_sum(grouped_attention(x, w2, s, mode), probe);
                },
                w.*field, 1e-5);
            worst = std::max(worst, max_rel_error(tape.grad(id), fd));
        };
        check_field(&AttentionWeights::w_q, leaves.w_q);
        check_field(&AttentionWeights::b_q, leaves.b_q);
        check_field(&AttentionWeights::w_k, leaves.w_k);
        check_field(&AttentionWeights::b_k, leaves.b_k);
        check_field(&AttentionWeights::w_v, leaves.w_v);
        check_field(&AttentionWeights::b_v, leaves.b_v);
        check_field(&AttentionWeights::w_o, leaves.w_o);
        check_field(&AttentionWeights::b_o, leaves.b_o);
        Tensor fd_x = finite_diff_grad(
            [&](const Tensor& t) { return probe_sum(grouped_attention(t, w, s, mode), probe); },
            x, 1e-5);
        worst = std::max(worst, max_rel_error(tape.grad(xid), fd_x));
        checks.push_back({"gradcheck", worst <= 1e-6, "max rel error " + std::to_string(worst)});
    }
    {
        const FlopReport own = attention_flops(n_tokens, s);
        const FlopReport mha = attention_flops(n_tokens, make_scheme(SchemeKind::Mha, d, h));
        const bool score_ok = own.score == mha.score && own.weighted_sum == mha.weighted_sum;
        const bool proj_ok =
            own.projection == 2 * n_tokens * d * (s.g_q + 2 * s.g_kv) * s.head_dim;
        checks.push_back({"flops-consistency", score_ok && proj_ok, ""});
    }
    return checks;
}

int cmd_verify(const std::string& schemes, int64_t d, int64_t h, uint64_t seed,
               const std::string& scale_mode, const std::string& format,
               const std::string& out_path) {
    const ScaleMode mode = parse_scale_mode(scale_mode);
    const auto labels = expand_scheme_list(schemes);
    nlohmann::json report;
    report["seed"] = seed;
    report["scale_mode"] = scale_mode;
    report["d"] = d;
    report["h"] = h;
    report["schemes"] = nlohmann::json::array();
    bool all_pass = true;
    for (const std::string& label : labels) {
        const auto checks = verify_scheme(label, d, h, seed, mode);
        nlohmann::json entry;
        entry["scheme"] = label;
        entry["checks"] = nlohmann::json::array();
        bool scheme_pass = true;
        for (const CheckResult& c : checks) {
            entry["checks"].push_back(
                {{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
            scheme_pass = scheme_pass && c.pass;
            if (format != "json") {
                std::printf("%-10s %-24s %s%s%s\n", label.c_str(), c.name.c_str(),
                            c.pass ? "pass" : "FAIL", c.detail.empty() ? "" : "  ",
                            c.detail.c_str());
            }
        }
        entry["pass"] = scheme_pass;
        report["schemes"].push_back(entry);
        all_pass = all_pass && scheme_pass;
    }
    report["pass"] = all_pass;
    if (format == "json") std::cout << report.dump(2) << "\n";
    if (!out_path.empty()) write_file(out_path, report.dump(2) + "\n");
    if (format != "json") {
        std::printf("verify: %s (%zu scheme%s)\n", all_pass ? "all checks passed" : "FAILED",
                    labels.size(), labels.size() == 1 ? "" : "s");
    }
    return all_pass ? kExitOk : kExitInvariant;
}

// ---------------------------------------------------------------------------
// count / bench

void print_human_table(const std::vector<BenchRecord>& records, bool with_tps) {
    if (with_tps) {
        std::printf("%-11s %9s %9s %14s %12s %10s %8s\n", "scheme", "params_m", "size_mib",
                    "flops", "tps_batch_ms", "std_ms", "delta%");
    } else {
        std::printf("%-11s %9s %9s %14s %8s\n", "scheme", "params_m", "size_mib", "flops",
                    "delta%");
    }
    for (const BenchRecord& r : records) {
        if (with_tps) {
            std::printf("%-11s %9.2f %9.2f %14lld %12.3f %10.3f %8.2f\n", r.scheme.c_str(),
                        r.params_millions, r.size_mib, static_cast<long long>(r.flops_total),
                        r.tps_batch_ms, r.tps_batch_std_ms, r.delta_params_pct);
        } else {
            std::printf("%-11s %9.2f %9.2f %14lld %8.2f\n", r.scheme.c_str(),
                        r.params_millions, r.size_mib, static_cast<long long>(r.flops_total),
                        r.delta_params_pct);
        }
    }
}

std::vector<ViTConfig> configs_for(const ModelFlags& flags, const std::string& schemes) {
    std::vector<ViTConfig> configs;
    for (const std::string& label : expand_scheme_list(schemes)) {
        configs.push_back(build_config(flags, label));
    }
    return configs;
}

int cmd_count(const ModelFlags& flags, const std::string& schemes, const std::string& format,
              const std::string& out_path) {
    CompareOptions options;
    options.measure = false;
    options.batch_size = 1;  // flops column reports a single forward batch
    const auto records = compare_table(configs_for(flags, schemes), options);
    std::string payload;
    if (format == "json") {
        payload = bench_json(records);
    } else if (format == "csv") {
        payload = bench_csv(records);
    } else if (format != "table") {
        throw ConfigError("unknown format '" + format + "', expected table | csv | json");
    }
    if (!out_path.empty()) {
        write_file(out_path, payload.empty() ? bench_csv(records) : payload);
        print_human_table(records, false);
    } else if (!payload.empty()) {
        std::cout << payload;
    } else {
        print_human_table(records, false);
    }
    return kExitOk;
}

int cmd_bench(const ModelFlags& flags, const std::string& schemes, int64_t batch, int iters,
              int warmup, uint64_t seed, const std::string& out_stem,
              const std::string& acc_json_path, const std::string& format) {
    CompareOptions options;
    options.measure = true;
    options.batch_size = batch;
    options.timed_iters = iters;
    options.warmup_iters = warmup;
    options.seed = seed;
    auto records = compare_table(configs_for(flags, schemes), options);

    if (!acc_json_path.empty()) {
        std::ifstream in(acc_json_path);
        if (!in) throw IoError("cannot open " + acc_json_path);
        nlohmann::json acc = nlohmann::json::parse(in);
        for (BenchRecord& r : records) {
            if (acc.contains(r.scheme)) r.acc_top1 = acc[r.scheme].get<double>();
        }
    }

    if (format == "csv") {
        std::cout << bench_csv(records);
    } else if (format == "json") {
        std::cout << bench_json(records);
    } else {
        print_human_table(records, true);
    }
    if (!out_stem.empty()) {
        write_file(out_stem + ".csv", bench_csv(records));
        write_file(out_stem + ".json", bench_json(records));
        if (!acc_json_path.empty()) {
            auto [size_series, tps_series] = scatter_data(records);
            write_file(out_stem + ".scatter_size.csv", scatter_csv(size_series));
            write_file(out_stem + ".scatter_size_fit.json", scatter_fit_json(size_series));
            write_file(out_stem + ".scatter_tps.csv", scatter_csv(tps_series));
            write_file(out_stem + ".scatter_tps_fit.json", scatter_fit_json(tps_series));
        }
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train

Dataset load_dataset_dir(const std::string& dir, int64_t classes) {
    Dataset data;
    data.classes = classes;
    data.train_images = load_tensor(dir + "/train_images.tensor");
    data.val_images = load_tensor(dir + "/val_images.tensor");
    auto to_labels = [&](const Tensor& t) {
        std::vector<int64_t> labels(static_cast<size_t>(t.numel()));
        for (int64_t i = 0; i < t.numel(); ++i) {
            labels[static_cast<size_t>(i)] = static_cast<int64_t>(t.get(i));
        }
        return labels;
    };
    data.train_labels = to_labels(load_tensor(dir + "/train_labels.tensor"));
    data.val_labels = to_labels(load_tensor(dir + "/val_labels.tensor"));
    return data;
}

int cmd_train(const ModelFlags& flags, const std::string& scheme, const TrainHyper& hyper_in,
              const std::string& schedule, const std::string& dtype_name,
              const std::string& data_dir, int64_t samples, const std::string& out_dir,
              double stop_acc) {
    ViTConfig cfg = build_config(flags, scheme);
    TrainHyper hyper = hyper_in;
    hyper.schedule = schedule == "constant" ? TrainHyper::Schedule::Constant
                                            : TrainHyper::Schedule::Cosine;
    if (schedule != "constant" && schedule != "cosine") {
        throw ConfigError("unknown schedule '" + schedule + "', expected constant | cosine");
    }
    const DType dtype = parse_dtype(dtype_name);

    Dataset data = data_dir.empty()
                       ? synth_dataset(hyper.seed, samples, cfg.image_size, cfg.num_classes,
                                       cfg.in_channels)
                       : load_dataset_dir(data_dir, cfg.num_classes);

    std::filesystem::create_directories(out_dir);
    std::ofstream log_stream(out_dir + "/log.jsonl");
    if (!log_stream) throw IoError("cannot open " + out_dir + "/log.jsonl for writing");

    ViTWeights weights = init_weights(cfg, hyper.seed, dtype);
    try {
        TrainLog log = train_loop(cfg, hyper, data, weights, &log_stream, stop_acc);
        save_checkpoint(out_dir + "/model.ckpt", cfg, weights);
        std::printf("scheme %s: %zu steps, final loss %.4f, val accuracy %.4f\n",
                    cfg.scheme.label.c_str(), log.steps.size(),
                    log.steps.empty() ? 0.0 : log.steps.back().loss, log.final_val_accuracy);
        std::printf("wrote %s/log.jsonl and %s/model.ckpt\n", out_dir.c_str(), out_dir.c_str());
    } catch (const TrainingDiverged& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitDiverged;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Grouped-attention family toolkit: verification, accounting, benchmarks, "
                 "toy training"};
    app.require_subcommand(1);
    app.fallthrough();
    int threads = 0;
    app.add_option("--threads", threads, "OpenMP thread cap (0 leaves the default)");

    // verify
    auto* verify = app.add_subcommand("verify", "Run the scheme invariant suite");
    std::string v_schemes = "all";
    int64_t v_dim = 24, v_heads = 6;
    uint64_t v_seed = 0;
    std::string v_scale = "head-dim", v_format = "human", v_out;
    verify->add_option("--schemes", v_schemes, "Scheme list, or all | table1");
    verify->add_option("--dim", v_dim, "Embedding size for the checks");
    verify->add_option("--heads", v_heads, "Head count for the checks");
    verify->add_option("--seed", v_seed, "Random seed");
    verify->add_option("--scale-mode", v_scale, "head-dim | embed-dim");
    verify->add_option("--format", v_format, "human | json");
    verify->add_option("--out", v_out, "Write the JSON report here");

    // count
    auto* count = app.add_subcommand("count", "Parameter and size accounting");
    ModelFlags c_flags;
    c_flags.preset = "vit-small";
    std::string c_schemes = "table1", c_format = "table", c_out;
    add_model_flags(count, c_flags);
    count->add_option("--schemes", c_schemes, "Scheme list, or all | table1");
    count->add_option("--format", c_format, "table | csv | json");
    count->add_option("--out", c_out, "Write the formatted report here");

    // bench
    auto* bench = app.add_subcommand("bench", "Measure training-step wall clock per scheme");
    ModelFlags b_flags;
    std::string b_schemes = "table1", b_out, b_acc, b_format = "table";
    int64_t b_batch = 8;
    int b_iters = 10, b_warmup = 2;
    uint64_t b_seed = 0;
    add_model_flags(bench, b_flags);
    bench->add_option("--schemes", b_schemes, "Scheme list, or all | table1");
    bench->add_option("--batch", b_batch, "Batch size per training step");
    bench->add_option("--iters", b_iters, "Timed iterations (>= 5)");
    bench->add_option("--warmup", b_warmup, "Warmup iterations, excluded from stats");
    bench->add_option("--seed", b_seed, "Random seed");
    bench->add_option("--out", b_out, "Report file stem; writes <stem>.csv and <stem>.json");
    bench->add_option("--acc-json", b_acc,
                      "JSON map scheme->accuracy merged into the report; also emits "
                      "scatter series files");
    bench->add_option("--format", b_format, "table | csv | json (stdout format)");

    // train
    auto* train = app.add_subcommand("train", "Train a toy model on the synthetic dataset");
    ModelFlags t_flags;
    std::string t_scheme = "mha", t_schedule = "cosine", t_dtype = "f32", t_data, t_out =
        "train_out";
    TrainHyper t_hyper;
    t_hyper.steps = 300;
    int64_t t_samples = 600;
    double t_stop_acc = -1.0;
    add_model_flags(train, t_flags);
    train->add_option("--scheme,--schemes", t_scheme, "Scheme label");
    train->add_option("--steps", t_hyper.steps, "Optimizer steps");
    train->add_option("--batch", t_hyper.batch_size, "Batch size");
    train->add_option("--lr", t_hyper.lr, "Initial learning rate");
    train->add_option("--weight-decay", t_hyper.weight_decay, "Decoupled weight decay");
    train->add_option("--schedule", t_schedule, "constant | cosine");
    train->add_option("--seed", t_hyper.seed, "Seed for init, data, and batch order");
    train->add_option("--dtype", t_dtype, "f32 | f64");
    train->add_option("--data", t_data,
                      "Dataset directory (train/val images+labels tensor files); synthetic "
                      "when omitted");
    train->add_option("--samples", t_samples, "Synthetic dataset size");
    train->add_option("--out", t_out, "Output directory for log.jsonl and model.ckpt");
    train->add_option("--stop-acc", t_stop_acc,
                      "Stop once validation accuracy reaches this (off when negative)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (threads > 0) kernels::set_max_threads(threads);
        if (verify->parsed()) {
            return cmd_verify(v_schemes, v_dim, v_heads, v_seed, v_scale, v_format, v_out);
        }
        if (count->parsed()) {
            return cmd_count(c_flags, c_schemes, c_format, c_out);
        }
        if (bench->parsed()) {
            kernels::set_max_threads(threads > 0 ? threads : 1);  // stable timing default
            return cmd_bench(b_flags, b_schemes, b_batch, b_iters, b_warmup, b_seed, b_out,
                             b_acc, b_format);
        }
        if (train->parsed()) {
            return cmd_train(t_flags, t_scheme, t_hyper, t_schedule, t_dtype, t_data,
                             t_samples, t_out, t_stop_acc);
        }
    } catch (const TrainingDiverged& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitDiverged;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const DimensionError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInvariant;
    }
    return kExitOk;
}
