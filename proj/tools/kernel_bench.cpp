// Times the serial reference kernels against their OpenMP forms and checks
// the outputs stay bitwise identical.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gqkva/attention.hpp"
#include "gqkva/kernels.hpp"
#include "gqkva/rng.hpp"

using namespace gqkva;

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

template <typename F>
double time_best_of(F&& fn, int reps) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
        const double t0 = now_ms();
        fn();
        best = std::min(best, now_ms() - t0);
    }
    return best;
}

template <typename T>
std::vector<T> random_vec(size_t n, Rng& rng) {
    std::vector<T> v(n);
    for (T& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
    return v;
}

struct Row {
    std::string name;
    double serial_ms;
    double omp_ms;
    bool same;
};

void print_row(const Row& r) {
    std::printf("%-28s %10.3f %10.3f %8.2fx   %s\n", r.name.c_str(), r.serial_ms, r.omp_ms,
                r.serial_ms / r.omp_ms, r.same ? "bitwise-equal" : "MISMATCH");
}

template <typename T>
Row bench_matmul(const char* name, int64_t batch, int64_t m, int64_t k, int64_t n, int reps,
                 Rng& rng) {
    kernels::MatmulDims d{batch, m, k, n, true, true};
    auto a = random_vec<T>(static_cast<size_t>(batch * m * k), rng);
    auto b = random_vec<T>(static_cast<size_t>(batch * k * n), rng);
    std::vector<T> out_serial(static_cast<size_t>(batch * m * n));
    std::vector<T> out_omp(out_serial.size());
    Row row;
    row.name = name;
    row.serial_ms =
        time_best_of([&] { kernels::matmul_serial(a.data(), b.data(), out_serial.data(), d); },
                     reps);
    row.omp_ms = time_best_of(
        [&] { kernels::matmul_omp(a.data(), b.data(), out_omp.data(), d); }, reps);
    row.same = std::memcmp(out_serial.data(), out_omp.data(), out_serial.size() * sizeof(T)) == 0;
    return row;
}

template <typename T>
Row bench_rows(const char* name, int64_t rows, int64_t width, int reps, Rng& rng, bool norm) {
    auto x = random_vec<T>(static_cast<size_t>(rows * width), rng);
    auto gamma = random_vec<T>(static_cast<size_t>(width), rng);
    auto beta = random_vec<T>(static_cast<size_t>(width), rng);
    std::vector<T> out_serial(x.size()), out_omp(x.size());
    Row row;
    row.name = name;
    if (norm) {
        row.serial_ms = time_best_of(
            [&] {
                kernels::layernorm_rows_serial(x.data(), gamma.data(), beta.data(),
                                               out_serial.data(), rows, width, 1e-5);
            },
            reps);
        row.omp_ms = time_best_of(
            [&] {
                kernels::layernorm_rows_omp(x.data(), gamma.data(), beta.data(),
                                            out_omp.data(), rows, width, 1e-5);
            },
            reps);
    } else {
        row.serial_ms = time_best_of(
            [&] { kernels::softmax_rows_serial(x.data(), out_serial.data(), rows, width); },
            reps);
        row.omp_ms = time_best_of(
            [&] { kernels::softmax_rows_omp(x.data(), out_omp.data(), rows, width); }, reps);
    }
    row.same = std::memcmp(out_serial.data(), out_omp.data(), x.size() * sizeof(T)) == 0;
    return row;
}

template <typename T>
Row bench_gelu(const char* name, int64_t n, int reps, Rng& rng) {
    auto x = random_vec<T>(static_cast<size_t>(n), rng);
    std::vector<T> out_serial(x.size()), out_omp(x.size());
    Row row;
    row.name = name;
    row.serial_ms =
        time_best_of([&] { kernels::gelu_serial(x.data(), out_serial.data(), n); }, reps);
    row.omp_ms = time_best_of([&] { kernels::gelu_omp(x.data(), out_omp.data(), n); }, reps);
    row.same = std::memcmp(out_serial.data(), out_omp.data(), x.size() * sizeof(T)) == 0;
    return row;
}

Row bench_attention_layer(const char* name, const std::string& scheme_label, int64_t batch,
                          int64_t n_tokens, int64_t d, int64_t h, int reps, Rng& rng) {
    GroupingScheme s = parse_scheme(scheme_label, d, h);
    AttentionWeights w = AttentionWeights::random(s, DType::F32, rng);
    Tensor x = Tensor::zeros({batch, n_tokens, d}, DType::F32);
    for (int64_t i = 0; i < x.numel(); ++i) x.set(i, rng.uniform(-1.0, 1.0));
    Row row;
    row.name = name;
    Tensor out_serial, out_omp;
    kernels::set_parallel_enabled(false);
    row.serial_ms = time_best_of([&] { out_serial = grouped_attention(x, w, s); }, reps);
    kernels::set_parallel_enabled(true);
    row.omp_ms = time_best_of([&] { out_omp = grouped_attention(x, w, s); }, reps);
    row.same = out_serial.same_bytes(out_omp);
    return row;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Serial reference vs OpenMP kernel comparison"};
    int threads = 0;
    int reps = 5;
    app.add_option("--threads", threads, "OpenMP thread cap (0 leaves the default)");
    app.add_option("--reps", reps, "Repetitions per measurement (best-of)");
    CLI11_PARSE(app, argc, argv);
    if (threads > 0) kernels::set_max_threads(threads);

    Rng rng(1);
    std::printf("threads available: %d, best of %d reps\n\n", kernels::max_threads(), reps);
    std::printf("%-28s %10s %10s %9s\n", "kernel", "serial_ms", "omp_ms", "speedup");

    print_row(bench_matmul<float>("matmul f32 8x197x384x384", 8, 197, 384, 384, reps, rng));
    print_row(bench_matmul<double>("matmul f64 8x197x384x384", 8, 197, 384, 384, reps, rng));
    print_row(bench_matmul<float>("matmul f32 48x197x64x197", 48, 197, 64, 197, reps, rng));
    print_row(bench_rows<float>("softmax f32 9456x197", 9456, 197, reps, rng, false));
    print_row(bench_rows<float>("layernorm f32 1576x384", 1576, 384, reps, rng, true));
    print_row(bench_gelu<float>("gelu f32 1.2M", 1 << 20, reps, rng));
    print_row(bench_attention_layer("attention mha B8 N197 d384", "mha", 8, 197, 384, 6, reps,
                                    rng));
    print_row(bench_attention_layer("attention mqa B8 N197 d384", "mqa", 8, 197, 384, 6, reps,
                                    rng));
    return 0;
}
