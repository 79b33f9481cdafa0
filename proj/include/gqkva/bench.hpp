#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gqkva/train.hpp"

namespace gqkva {

struct BenchRecord {
    std::string scheme;
    double params_millions = 0.0;
    double size_mib = 0.0;       // params * 4 bytes / 2^20, unrounded
    int64_t flops_total = 0;     // forward flops for one batch at the stated N, B
    double tps_batch_ms = 0.0;   // mean wall-clock of one full training step
    double tps_batch_std_ms = 0.0;
    double tps_sample_ms = 0.0;  // tps_batch_ms / batch size
    double delta_params_pct = 0.0;  // vs the first (baseline) record
    std::optional<double> acc_top1;
};

struct TpsResult {
    double mean_ms = 0.0;
    double std_ms = 0.0;
};

// Wall-clock of a full training step (forward + backward + optimizer) on a
// synthetic batch, averaged over timed_iters after warmup_iters.
TpsResult measure_tps(const ViTConfig& cfg, int64_t batch_size, int warmup_iters,
                      int timed_iters, uint64_t seed);

// Forward multiply-accumulates x2 (projections, attention, MLP, head) for
// batch size 1. Norms and activations are not counted.
int64_t vit_flops(const ViTConfig& cfg);

struct CompareOptions {
    int64_t batch_size = 8;
    int warmup_iters = 2;
    int timed_iters = 5;
    uint64_t seed = 0;
    bool measure = true;  // false: accounting columns only
};

// One record per config, in the given order; the first record is the
// baseline for the percent deltas.
std::vector<BenchRecord> compare_table(const std::vector<ViTConfig>& configs,
                                       const CompareOptions& options);

// Fixed header "scheme,params_m,size_mib,flops,tps_batch_ms,tps_sample_ms,
// delta_params_pct,acc_top1"; emission is byte-deterministic.
std::string bench_csv(const std::vector<BenchRecord>& records);

// JSON array mirroring the CSV field names.
std::string bench_json(const std::vector<BenchRecord>& records);

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

struct ScatterSeries {
    std::string x_name;
    std::vector<std::pair<double, double>> points;  // sorted by x
    LinearFit fit;
};

// Builds (size_mib, acc) and (tps_batch_ms, acc) series from records that
// carry accuracy, with a least-squares fit each. Requires at least two such
// records.
std::pair<ScatterSeries, ScatterSeries> scatter_data(const std::vector<BenchRecord>& records);

std::string scatter_csv(const ScatterSeries& series);
std::string scatter_fit_json(const ScatterSeries& series);

}  // namespace gqkva
