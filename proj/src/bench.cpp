#include "gqkva/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "json.hpp"

namespace gqkva {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), format, v);
    return buf;
}

LinearFit least_squares(const std::vector<std::pair<double, double>>& pts) {
    const double n = static_cast<double>(pts.size());
    double sx = 0, sy = 0;
    for (const auto& [x, y] : pts) {
        sx += x;
        sy += y;
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& [x, y] : pts) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if (sxx == 0.0) throw ConfigError("scatter fit: all x values identical");
    LinearFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ss_res = 0;
    for (const auto& [x, y] : pts) {
        const double e = y - (fit.slope * x + fit.intercept);
        ss_res += e * e;
    }
    fit.r2 = (syy == 0.0) ? 1.0 : 1.0 - ss_res / syy;
    return fit;
}

}  // namespace

int64_t vit_flops(const ViTConfig& cfg) {
    cfg.validate();
    const int64_t n_tok = cfg.n_tokens();
    const int64_t d = cfg.d;
    const int64_t hidden = cfg.mlp_ratio * d;
    int64_t flops = 2 * cfg.n_patches() * cfg.patch_size * cfg.patch_size * cfg.in_channels * d;
    const FlopReport attn = attention_flops(n_tok, cfg.scheme);
    flops += cfg.depth * (attn.total() + 2 * n_tok * d * hidden + 2 * n_tok * hidden * d);
    flops += 2 * d * cfg.num_classes;
    return flops;
}

TpsResult measure_tps(const ViTConfig& cfg, int64_t batch_size, int warmup_iters,
                      int timed_iters, uint64_t seed) {
    cfg.validate();
    if (timed_iters < 5) throw ConfigError("measure_tps: timed_iters must be >= 5");
    if (batch_size < 1) throw ConfigError("measure_tps: batch_size must be >= 1");

    Rng rng(seed);
    Tensor batch =
        Tensor::zeros({batch_size, cfg.in_channels, cfg.image_size, cfg.image_size}, DType::F32);
    for (int64_t i = 0; i < batch.numel(); ++i) batch.set(i, rng.normal());
    std::vector<int64_t> labels(static_cast<size_t>(batch_size));
    for (int64_t i = 0; i < batch_size; ++i) {
        labels[static_cast<size_t>(i)] = rng.uniform_int(cfg.num_classes);
    }

    ViTWeights weights = init_weights(cfg, seed, DType::F32);
    std::vector<Tensor*> params;
    std::vector<char> decay;
    weights.for_each([&](const std::string&, Tensor& t, ParamKind kind) {
        params.push_back(&t);
        decay.push_back(kind == ParamKind::Projection ? 1 : 0);
    });
    TrainHyper hyper;
    hyper.schedule = TrainHyper::Schedule::Constant;
    AdamWState state;

    auto one_step = [&]() {
        Tape tape;
        Tape::Id img = tape.leaf(batch, false);
        ViTLeaves leaves = register_vit_weights(tape, weights, true);
        Tape::Id logits = vit_forward(tape, cfg, leaves, img);
        CrossEntropyResult ce = cross_entropy(tape.value(logits), labels);
        tape.backward(logits, ce.dlogits);
        std::vector<Tape::Id> leaf_ids = leaves.all();
        std::vector<Tensor> grads;
        grads.reserve(leaf_ids.size());
        for (Tape::Id id : leaf_ids) grads.push_back(tape.value_and_grad(id).grad);
        std::vector<const Tensor*> grad_ptrs;
        for (const Tensor& g : grads) grad_ptrs.push_back(&g);
        adamw_step(params, grad_ptrs, decay, state, hyper, hyper.lr);
    };

    for (int i = 0; i < warmup_iters; ++i) one_step();
    std::vector<double> samples;
    samples.reserve(static_cast<size_t>(timed_iters));
    for (int i = 0; i < timed_iters; ++i) {
        const double t0 = now_ms();
        one_step();
        samples.push_back(now_ms() - t0);
    }
    TpsResult r;
    for (double s : samples) r.mean_ms += s;
    r.mean_ms /= static_cast<double>(samples.size());
    double ss = 0;
    for (double s : samples) ss += (s - r.mean_ms) * (s - r.mean_ms);
    r.std_ms = std::sqrt(ss / static_cast<double>(samples.size() - 1));
    return r;
}

std::vector<BenchRecord> compare_table(const std::vector<ViTConfig>& configs,
                                       const CompareOptions& options) {
    if (configs.empty()) throw ConfigError("compare_table: no configs");
    const ViTConfig& base = configs.front();
    for (const ViTConfig& cfg : configs) {
        if (cfg.d != base.d || cfg.depth != base.depth || cfg.h != base.h ||
            cfg.image_size != base.image_size || cfg.patch_size != base.patch_size ||
            cfg.num_classes != base.num_classes) {
            throw ConfigError("compare_table: configs must share base dims; '" +
                              cfg.scheme.label + "' differs from '" + base.scheme.label + "'");
        }
    }
    std::vector<BenchRecord> records;
    records.reserve(configs.size());
    for (const ViTConfig& cfg : configs) {
        BenchRecord rec;
        rec.scheme = cfg.scheme.label;
        const ParamReport params = count_params(cfg);
        rec.params_millions = params.total_millions;
        rec.size_mib = params.total_size_mib;
        rec.flops_total = vit_flops(cfg) * options.batch_size;
        if (options.measure) {
            const TpsResult tps = measure_tps(cfg, options.batch_size, options.warmup_iters,
                                              options.timed_iters, options.seed);
            rec.tps_batch_ms = tps.mean_ms;
            rec.tps_batch_std_ms = tps.std_ms;
            rec.tps_sample_ms = tps.mean_ms / static_cast<double>(options.batch_size);
        }
        records.push_back(std::move(rec));
    }
    const double base_params = records.front().params_millions;
    for (BenchRecord& rec : records) {
        rec.delta_params_pct = (rec.params_millions - base_params) / base_params * 100.0;
    }
    return records;
}

std::string bench_csv(const std::vector<BenchRecord>& records) {
    std::string out =
        "scheme,params_m,size_mib,flops,tps_batch_ms,tps_sample_ms,delta_params_pct,acc_top1\n";
    for (const BenchRecord& r : records) {
        out += r.scheme;
        out += "," + fmt("%.2f", r.params_millions);
        out += "," + fmt("%.2f", r.size_mib);
        out += "," + std::to_string(r.flops_total);
        out += "," + fmt("%.3f", r.tps_batch_ms);
        out += "," + fmt("%.3f", r.tps_sample_ms);
        out += "," + fmt("%.2f", r.delta_params_pct);
        out += ",";
        if (r.acc_top1.has_value()) out += fmt("%.4f", *r.acc_top1);
        out += "\n";
    }
    return out;
}

std::string bench_json(const std::vector<BenchRecord>& records) {
    nlohmann::json arr = nlohmann::json::array();
    for (const BenchRecord& r : records) {
        nlohmann::json j;
        j["scheme"] = r.scheme;
        j["params_m"] = r.params_millions;
        j["size_mib"] = r.size_mib;
        j["flops"] = r.flops_total;
        j["tps_batch_ms"] = r.tps_batch_ms;
        j["tps_sample_ms"] = r.tps_sample_ms;
        j["delta_params_pct"] = r.delta_params_pct;
        if (r.acc_top1.has_value()) {
            j["acc_top1"] = *r.acc_top1;
        } else {
            j["acc_top1"] = nullptr;
        }
        arr.push_back(std::move(j));
    }
    return arr.dump(2) + "\n";
}

std::pair<ScatterSeries, ScatterSeries> scatter_data(const std::vector<BenchRecord>& records) {
    ScatterSeries size_series, tps_series;
    size_series.x_name = "size_mib";
    tps_series.x_name = "tps_batch_ms";
    for (const BenchRecord& r : records) {
        if (!r.acc_top1.has_value()) continue;
        size_series.points.emplace_back(r.size_mib, *r.acc_top1);
        tps_series.points.emplace_back(r.tps_batch_ms, *r.acc_top1);
    }
    if (size_series.points.size() < 2) {
        throw ConfigError("scatter_data: need at least 2 records with accuracy");
    }
    auto by_x = [](const auto& a, const auto& b) { return a.first < b.first; };
    std::sort(size_series.points.begin(), size_series.points.end(), by_x);
    std::sort(tps_series.points.begin(), tps_series.points.end(), by_x);
    size_series.fit = least_squares(size_series.points);
    tps_series.fit = least_squares(tps_series.points);
    return {std::move(size_series), std::move(tps_series)};
}

std::string scatter_csv(const ScatterSeries& series) {
    std::string out = "x,y\n";
    for (const auto& [x, y] : series.points) {
        out += fmt("%.6f", x) + "," + fmt("%.6f", y) + "\n";
    }
    return out;
}

std::string scatter_fit_json(const ScatterSeries& series) {
    nlohmann::json j;
    j["x"] = series.x_name;
    j["slope"] = series.fit.slope;
    j["intercept"] = series.fit.intercept;
    j["r2"] = series.fit.r2;
    return j.dump(2) + "\n";
}

}  // namespace gqkva
