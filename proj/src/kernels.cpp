#include "gqkva/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gqkva::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Work below this many scalar ops stays serial; forking threads costs more
// than it saves.
constexpr int64_t kParallelCutoff = 1 << 15;

bool go_parallel(int64_t work) {
    return g_parallel.load(std::memory_order_relaxed) && work >= kParallelCutoff;
}

constexpr double kSqrt1_2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename T>
inline void matmul_one_row(const T* a, const T* b, T* out, const MatmulDims& d, int64_t row) {
    const int64_t bi = row / d.m;
    const int64_t i = row % d.m;
    const T* a_row = a + (d.a_batched ? bi * d.m * d.k : 0) + i * d.k;
    const T* b_mat = b + (d.b_batched ? bi * d.k * d.n : 0);
    T* out_row = out + row * d.n;
    for (int64_t j = 0; j < d.n; ++j) out_row[j] = T(0);
    for (int64_t kk = 0; kk < d.k; ++kk) {
        const T a_v = a_row[kk];
        const T* b_row = b_mat + kk * d.n;
        for (int64_t j = 0; j < d.n; ++j) out_row[j] += a_v * b_row[j];
    }
}

template <typename T>
inline void softmax_one_row(const T* x, T* y, int64_t width) {
    const T* xr = x;
    T mx = xr[0];
    for (int64_t j = 1; j < width; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < width; ++j) {
        T e = static_cast<T>(std::exp(static_cast<double>(xr[j]) - static_cast<double>(mx)));
        y[j] = e;
        sum += static_cast<double>(e);
    }
    for (int64_t j = 0; j < width; ++j) {
        y[j] = static_cast<T>(static_cast<double>(y[j]) / sum);
    }
}

template <typename T>
inline void layernorm_one_row(const T* x, const T* gamma, const T* beta, T* y, int64_t width,
                              double eps) {
    double mean = 0.0;
    for (int64_t j = 0; j < width; ++j) mean += static_cast<double>(x[j]);
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (int64_t j = 0; j < width; ++j) {
        double c = static_cast<double>(x[j]) - mean;
        var += c * c;
    }
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < width; ++j) {
        double xhat = (static_cast<double>(x[j]) - mean) * inv;
        y[j] = static_cast<T>(xhat * static_cast<double>(gamma[j]) + static_cast<double>(beta[j]));
    }
}

inline double gelu_scalar(double v) {
    return 0.5 * v * (1.0 + std::erf(v * kSqrt1_2));
}

inline double gelu_grad_scalar(double v) {
    return 0.5 * (1.0 + std::erf(v * kSqrt1_2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
}

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel_enabled(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_max_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

template <typename T>
void matmul_serial(const T* a, const T* b, T* out, const MatmulDims& d) {
    const int64_t rows = d.batch * d.m;
    for (int64_t row = 0; row < rows; ++row) matmul_one_row(a, b, out, d, row);
}

template <typename T>
void matmul_omp(const T* a, const T* b, T* out, const MatmulDims& d) {
    const int64_t rows = d.batch * d.m;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t row = 0; row < rows; ++row) matmul_one_row(a, b, out, d, row);
}

template <typename T>
void matmul(const T* a, const T* b, T* out, const MatmulDims& d) {
    if (go_parallel(d.batch * d.m * d.n * d.k)) {
        matmul_omp(a, b, out, d);
    } else {
        matmul_serial(a, b, out, d);
    }
}

template <typename T>
void softmax_rows_serial(const T* x, T* y, int64_t rows, int64_t width) {
    for (int64_t r = 0; r < rows; ++r) softmax_one_row(x + r * width, y + r * width, width);
}

template <typename T>
void softmax_rows_omp(const T* x, T* y, int64_t rows, int64_t width) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t r = 0; r < rows; ++r) softmax_one_row(x + r * width, y + r * width, width);
}

template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t width) {
    if (go_parallel(rows * width * 4)) {
        softmax_rows_omp(x, y, rows, width);
    } else {
        softmax_rows_serial(x, y, rows, width);
    }
}

template <typename T>
void softmax_grad_rows(const T* y, const T* g, T* dx, int64_t rows, int64_t width) {
    const bool par = go_parallel(rows * width * 4);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * width;
        const T* gr = g + r * width;
        T* dr = dx + r * width;
        double dot = 0.0;
        for (int64_t j = 0; j < width; ++j) {
            dot += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
        }
        for (int64_t j = 0; j < width; ++j) {
            dr[j] = static_cast<T>(static_cast<double>(yr[j]) *
                                   (static_cast<double>(gr[j]) - dot));
        }
    }
}

template <typename T>
void layernorm_rows_serial(const T* x, const T* gamma, const T* beta, T* y, int64_t rows,
                           int64_t width, double eps) {
    for (int64_t r = 0; r < rows; ++r) {
        layernorm_one_row(x + r * width, gamma, beta, y + r * width, width, eps);
    }
}

template <typename T>
void layernorm_rows_omp(const T* x, const T* gamma, const T* beta, T* y, int64_t rows,
                        int64_t width, double eps) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t r = 0; r < rows; ++r) {
        layernorm_one_row(x + r * width, gamma, beta, y + r * width, width, eps);
    }
}

template <typename T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y, int64_t rows,
                    int64_t width, double eps) {
    if (go_parallel(rows * width * 6)) {
        layernorm_rows_omp(x, gamma, beta, y, rows, width, eps);
    } else {
        layernorm_rows_serial(x, gamma, beta, y, rows, width, eps);
    }
}

template <typename T>
void layernorm_stats(const T* x, T* xhat, double* inv_std, int64_t rows, int64_t width,
                     double eps) {
    const bool par = go_parallel(rows * width * 6);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * width;
        T* hr = xhat + r * width;
        double mean = 0.0;
        for (int64_t j = 0; j < width; ++j) mean += static_cast<double>(xr[j]);
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (int64_t j = 0; j < width; ++j) {
            double c = static_cast<double>(xr[j]) - mean;
            var += c * c;
        }
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (int64_t j = 0; j < width; ++j) {
            hr[j] = static_cast<T>((static_cast<double>(xr[j]) - mean) * inv);
        }
    }
}

template <typename T>
void layernorm_grad_input(const T* xhat, const double* inv_std, const T* gamma, const T* g,
                          T* dx, int64_t rows, int64_t width) {
    const bool par = go_parallel(rows * width * 6);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t r = 0; r < rows; ++r) {
        const T* hr = xhat + r * width;
        const T* gr = g + r * width;
        T* dr = dx + r * width;
        double sum_gh = 0.0;   // mean of gamma*g
        double sum_ghx = 0.0;  // mean of gamma*g*xhat
        for (int64_t j = 0; j < width; ++j) {
            double gh = static_cast<double>(gr[j]) * static_cast<double>(gamma[j]);
            sum_gh += gh;
            sum_ghx += gh * static_cast<double>(hr[j]);
        }
        const double inv_w = 1.0 / static_cast<double>(width);
        const double mean_gh = sum_gh * inv_w;
        const double mean_ghx = sum_ghx * inv_w;
        for (int64_t j = 0; j < width; ++j) {
            double gh = static_cast<double>(gr[j]) * static_cast<double>(gamma[j]);
            dr[j] = static_cast<T>(inv_std[r] *
                                   (gh - mean_gh - static_cast<double>(hr[j]) * mean_ghx));
        }
    }
}

template <typename T>
void gelu_serial(const T* x, T* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        y[i] = static_cast<T>(gelu_scalar(static_cast<double>(x[i])));
    }
}

template <typename T>
void gelu_omp(const T* x, T* y, int64_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < n; ++i) {
        y[i] = static_cast<T>(gelu_scalar(static_cast<double>(x[i])));
    }
}

template <typename T>
void gelu(const T* x, T* y, int64_t n) {
    if (go_parallel(n * 8)) {
        gelu_omp(x, y, n);
    } else {
        gelu_serial(x, y, n);
    }
}

template <typename T>
void gelu_grad(const T* x, const T* g, T* dx, int64_t n) {
    const bool par = go_parallel(n * 8);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t i = 0; i < n; ++i) {
        dx[i] = static_cast<T>(static_cast<double>(g[i]) *
                               gelu_grad_scalar(static_cast<double>(x[i])));
    }
}

template <typename T>
void add(const T* a, const T* b, T* out, int64_t n) {
    const bool par = go_parallel(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void add_broadcast_rows(const T* a, const T* b, T* out, int64_t rows, int64_t width) {
    const bool par = go_parallel(rows * width);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t r = 0; r < rows; ++r) {
        const T* ar = a + r * width;
        T* or_ = out + r * width;
        for (int64_t j = 0; j < width; ++j) or_[j] = ar[j] + b[j];
    }
}

template <typename T>
void scale(const T* a, double s, T* out, int64_t n) {
    const T sv = static_cast<T>(s);
    const bool par = go_parallel(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] * sv;
}

template <typename T>
void column_sum(const T* in, T* out, int64_t rows, int64_t width) {
    const bool par = go_parallel(rows * width);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t j = 0; j < width; ++j) {
        T acc = T(0);
        for (int64_t r = 0; r < rows; ++r) acc += in[r * width + j];
        out[j] = acc;
    }
}

template <typename T>
void column_sum_prod(const T* a, const T* b, T* out, int64_t rows, int64_t width) {
    const bool par = go_parallel(rows * width);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#else
    (void)par;
#endif
    for (int64_t j = 0; j < width; ++j) {
        T acc = T(0);
        for (int64_t r = 0; r < rows; ++r) acc += a[r * width + j] * b[r * width + j];
        out[j] = acc;
    }
}

#define GQKVA_INSTANTIATE(T)                                                                  \
    template void matmul_serial<T>(const T*, const T*, T*, const MatmulDims&);               \
    template void matmul_omp<T>(const T*, const T*, T*, const MatmulDims&);                  \
    template void matmul<T>(const T*, const T*, T*, const MatmulDims&);                      \
    template void softmax_rows_serial<T>(const T*, T*, int64_t, int64_t);                    \
    template void softmax_rows_omp<T>(const T*, T*, int64_t, int64_t);                       \
    template void softmax_rows<T>(const T*, T*, int64_t, int64_t);                           \
    template void softmax_grad_rows<T>(const T*, const T*, T*, int64_t, int64_t);            \
    template void layernorm_rows_serial<T>(const T*, const T*, const T*, T*, int64_t,        \
                                           int64_t, double);                                 \
    template void layernorm_rows_omp<T>(const T*, const T*, const T*, T*, int64_t, int64_t,  \
                                        double);                                             \
    template void layernorm_rows<T>(const T*, const T*, const T*, T*, int64_t, int64_t,      \
                                    double);                                                 \
    template void layernorm_stats<T>(const T*, T*, double*, int64_t, int64_t, double);       \
    template void layernorm_grad_input<T>(const T*, const double*, const T*, const T*, T*,   \
                                          int64_t, int64_t);                                 \
    template void gelu_serial<T>(const T*, T*, int64_t);                                     \
    template void gelu_omp<T>(const T*, T*, int64_t);                                        \
    template void gelu<T>(const T*, T*, int64_t);                                            \
    template void gelu_grad<T>(const T*, const T*, T*, int64_t);                             \
    template void add<T>(const T*, const T*, T*, int64_t);                                   \
    template void add_broadcast_rows<T>(const T*, const T*, T*, int64_t, int64_t);           \
    template void scale<T>(const T*, double, T*, int64_t);                                   \
    template void column_sum<T>(const T*, T*, int64_t, int64_t);                             \
    template void column_sum_prod<T>(const T*, const T*, T*, int64_t, int64_t);

GQKVA_INSTANTIATE(float)
GQKVA_INSTANTIATE(double)

#undef GQKVA_INSTANTIATE

}  // namespace gqkva::kernels
