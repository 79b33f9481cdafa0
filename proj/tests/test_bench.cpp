#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "gqkva/bench.hpp"

using namespace gqkva;

namespace {

ViTConfig preset(const std::string& scheme, bool small) {
    ViTConfig cfg;
    if (!small) {
        cfg.image_size = 8;
        cfg.patch_size = 4;
        cfg.in_channels = 1;
        cfg.d = 12;
        cfg.depth = 1;
        cfg.h = 6;
        cfg.mlp_ratio = 2;
        cfg.num_classes = 3;
    }
    cfg.scheme = parse_scheme(scheme, cfg.d, cfg.h);
    return cfg;
}

std::vector<ViTConfig> table1_configs(bool small) {
    std::vector<ViTConfig> configs;
    for (const std::string& label : table1_scheme_labels()) {
        configs.push_back(preset(label, small));
    }
    return configs;
}

}  // namespace

TEST_CASE("compare_table reproduces the reference parameter and size columns") {
    const double expect_params[] = {22.05, 21.16, 20.86, 20.57, 20.27,
                                    19.68, 19.09, 19.09, 18.79};
    const double expect_delta[] = {0.0,   -4.04,  -5.40,  -6.71, -8.07,
                                   -10.75, -13.42, -13.42, -14.78};
    const double expect_size[] = {84.11, 80.73, 79.60, 78.47, 77.34,
                                  75.09, 72.83, 72.83, 71.70};
    CompareOptions options;
    options.measure = false;
    const auto records = compare_table(table1_configs(true), options);
    REQUIRE(records.size() == 9);
    CHECK(records.front().scheme == "mha");
    for (size_t i = 0; i < records.size(); ++i) {
        CHECK(std::fabs(records[i].params_millions - expect_params[i]) <= 0.02);
        CHECK(std::fabs(records[i].delta_params_pct - expect_delta[i]) <= 0.1);
        CHECK(std::fabs(records[i].size_mib - expect_size[i]) <= 0.05);
        // size follows the 4-byte / 2^20 convention exactly, before rounding
        const ParamReport params = count_params(table1_configs(true)[i]);
        CHECK(records[i].size_mib == params.total * 4.0 / (1024.0 * 1024.0));
    }
}

TEST_CASE("single config table has one row and zero delta") {
    CompareOptions options;
    options.measure = false;
    const auto records = compare_table({preset("gqa-2", false)}, options);
    REQUIRE(records.size() == 1);
    CHECK(records.front().delta_params_pct == 0.0);
}

TEST_CASE("mismatched base dims are rejected") {
    std::vector<ViTConfig> configs = {preset("mha", false), preset("mqa", false)};
    configs[1].depth = 2;
    CompareOptions options;
    options.measure = false;
    CHECK_THROWS_AS(compare_table(configs, options), ConfigError);
}

TEST_CASE("deltas recomputed against another baseline stay consistent") {
    CompareOptions options;
    options.measure = false;
    const auto base = compare_table(table1_configs(true), options);

    auto reordered = table1_configs(true);
    std::swap(reordered.front(), reordered.back());  // gqkva-3.2 becomes the baseline
    const auto alt = compare_table(reordered, options);

    // delta' = (p/p_b' - 1); p recovered from the original table must agree
    const double new_base = alt.front().params_millions;
    for (const BenchRecord& r : base) {
        for (const BenchRecord& r2 : alt) {
            if (r2.scheme == r.scheme) {
                const double expect = (r.params_millions - new_base) / new_base * 100.0;
                CHECK(r2.delta_params_pct == doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("csv header and emission are byte-deterministic") {
    CompareOptions options;
    options.measure = false;
    const auto records = compare_table(table1_configs(false), options);
    const std::string csv = bench_csv(records);
    CHECK(csv.rfind("scheme,params_m,size_mib,flops,tps_batch_ms,tps_sample_ms,"
                    "delta_params_pct,acc_top1\n",
                    0) == 0);
    CHECK(csv == bench_csv(records));
    // one line per record plus the header
    int64_t lines = 0;
    for (char ch : csv) {
        if (ch == '\n') ++lines;
    }
    CHECK(lines == static_cast<int64_t>(records.size()) + 1);

    const std::string json = bench_json(records);
    CHECK(json == bench_json(records));
    CHECK(json.find("\"params_m\"") != std::string::npos);
    CHECK(json.find("\"tps_sample_ms\"") != std::string::npos);
}

TEST_CASE("vit_flops orders schemes by qkv width") {
    // projection flops decrease with g_q + 2 g_kv; total model flops at
    // equal everything-else must follow
    const auto configs = table1_configs(false);
    std::vector<int64_t> flops;
    for (const auto& cfg : configs) flops.push_back(vit_flops(cfg));
    // mha > gkva-3 > gkva-2 > mkva > gqa-3 > gqa-2 > mqa = gqkva-2.3 > gqkva-3.2
    for (size_t i = 0; i + 1 < flops.size(); ++i) {
        if (i == 6) {
            CHECK(flops[6] == flops[7]);
        } else {
            CHECK(flops[i] > flops[i + 1]);
        }
    }
}

TEST_CASE("measure_tps returns a positive mean with std and scales with batch") {
    ViTConfig cfg = preset("mha", false);
    TpsResult small = measure_tps(cfg, 1, 1, 5, 3);
    CHECK(small.mean_ms > 0.0);
    CHECK(small.std_ms >= 0.0);
    TpsResult big = measure_tps(cfg, 16, 1, 5, 3);
    CHECK(big.mean_ms > small.mean_ms);
    CHECK_THROWS_AS(measure_tps(cfg, 1, 0, 4, 3), ConfigError);
}

TEST_CASE("scatter fits collinear and constant data") {
    std::vector<BenchRecord> records(4);
    for (size_t i = 0; i < 4; ++i) {
        records[i].scheme = "s" + std::to_string(i);
        records[i].size_mib = 10.0 + static_cast<double>(i);
        records[i].tps_batch_ms = 5.0 + 2.0 * static_cast<double>(i);
        records[i].acc_top1 = 50.0 + 3.0 * static_cast<double>(i);
    }
    auto [size_series, tps_series] = scatter_data(records);
    CHECK(size_series.fit.slope == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(size_series.fit.r2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(tps_series.fit.slope == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(tps_series.fit.r2 == doctest::Approx(1.0).epsilon(1e-12));

    for (auto& r : records) r.acc_top1 = 42.0;
    auto [flat, flat_tps] = scatter_data(records);
    CHECK(flat.fit.slope == doctest::Approx(0.0));
    CHECK(flat_tps.fit.slope == doctest::Approx(0.0));

    std::vector<BenchRecord> too_few(1);
    too_few[0].acc_top1 = 1.0;
    CHECK_THROWS_AS(scatter_data(too_few), ConfigError);

    const std::string csv = scatter_csv(size_series);
    CHECK(csv.rfind("x,y\n", 0) == 0);
    CHECK(scatter_fit_json(size_series).find("\"slope\"") != std::string::npos);
}

TEST_CASE("scatter points are sorted by x") {
    std::vector<BenchRecord> records(3);
    records[0].size_mib = 30.0;
    records[0].acc_top1 = 1.0;
    records[1].size_mib = 10.0;
    records[1].acc_top1 = 2.0;
    records[2].size_mib = 20.0;
    records[2].acc_top1 = 3.0;
    for (auto& r : records) r.tps_batch_ms = r.size_mib;
    auto [series, _] = scatter_data(records);
    CHECK(series.points[0].first == 10.0);
    CHECK(series.points[1].first == 20.0);
    CHECK(series.points[2].first == 30.0);
}

TEST_CASE("published reference pairs show the positive slope with mha under the line") {
    // Sizes and accuracies as published for the nine schemes.
    const double sizes[] = {84.11, 80.73, 79.60, 78.47, 77.34, 75.09, 72.83, 72.83, 71.70};
    const double accs[] = {71.56, 71.84, 71.73, 71.52, 71.44, 71.24, 70.23, 70.69, 70.59};
    std::vector<BenchRecord> records(9);
    for (size_t i = 0; i < 9; ++i) {
        records[i].size_mib = sizes[i];
        records[i].tps_batch_ms = 1.0 + static_cast<double>(i);
        records[i].acc_top1 = accs[i];
    }
    auto [series, _] = scatter_data(records);
    CHECK(series.fit.slope > 0.0);
    const double fitted_at_mha = series.fit.slope * 84.11 + series.fit.intercept;
    CHECK(fitted_at_mha > 71.56);
}
