#pragma once

#include <cstdint>

// Hot loops, each in a serial reference form and an OpenMP form. Both walk
// the same per-row routine, so outputs are bitwise identical for any thread
// count: every output element accumulates in a fixed left-to-right order.
// The dispatching entry points pick the OpenMP form above a work cutoff.

namespace gqkva::kernels {

bool parallel_enabled();
void set_parallel_enabled(bool on);
int max_threads();
void set_max_threads(int n);

struct MatmulDims {
    int64_t batch = 1;  // flattened leading extents of the batched side(s)
    int64_t m = 0, k = 0, n = 0;
    bool a_batched = false;
    bool b_batched = false;
};

template <typename T>
void matmul_serial(const T* a, const T* b, T* out, const MatmulDims& d);
template <typename T>
void matmul_omp(const T* a, const T* b, T* out, const MatmulDims& d);
template <typename T>
void matmul(const T* a, const T* b, T* out, const MatmulDims& d);

template <typename T>
void softmax_rows_serial(const T* x, T* y, int64_t rows, int64_t width);
template <typename T>
void softmax_rows_omp(const T* x, T* y, int64_t rows, int64_t width);
template <typename T>
void softmax_rows(const T* x, T* y, int64_t rows, int64_t width);

// dx from softmax output y and upstream g.
template <typename T>
void softmax_grad_rows(const T* y, const T* g, T* dx, int64_t rows, int64_t width);

template <typename T>
void layernorm_rows_serial(const T* x, const T* gamma, const T* beta, T* y,
                           int64_t rows, int64_t width, double eps);
template <typename T>
void layernorm_rows_omp(const T* x, const T* gamma, const T* beta, T* y,
                        int64_t rows, int64_t width, double eps);
template <typename T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y,
                    int64_t rows, int64_t width, double eps);

// Normalized pre-affine values and per-row 1/sqrt(var+eps), for the backward pass.
template <typename T>
void layernorm_stats(const T* x, T* xhat, double* inv_std, int64_t rows, int64_t width,
                     double eps);

template <typename T>
void layernorm_grad_input(const T* xhat, const double* inv_std, const T* gamma, const T* g,
                          T* dx, int64_t rows, int64_t width);

template <typename T>
void gelu_serial(const T* x, T* y, int64_t n);
template <typename T>
void gelu_omp(const T* x, T* y, int64_t n);
template <typename T>
void gelu(const T* x, T* y, int64_t n);

template <typename T>
void gelu_grad(const T* x, const T* g, T* dx, int64_t n);

template <typename T>
void add(const T* a, const T* b, T* out, int64_t n);

// b has `width` elements, added to every row of a.
template <typename T>
void add_broadcast_rows(const T* a, const T* b, T* out, int64_t rows, int64_t width);

template <typename T>
void scale(const T* a, double s, T* out, int64_t n);

// out[j] = sum over rows of in[r, j]; fixed row order per column.
template <typename T>
void column_sum(const T* in, T* out, int64_t rows, int64_t width);

// out[j] = sum over rows of a[r, j] * b[r, j].
template <typename T>
void column_sum_prod(const T* a, const T* b, T* out, int64_t rows, int64_t width);

}  // namespace gqkva::kernels
