#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

#include <omp.h>

namespace ssx {

// Row-major matrix. rank-1 parameters (norm gains, per-head scalars) are kept
// as plain std::vector<T>; this type is for rank-2 tensors and activations.
template <class T>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<T> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, T(0)) {}

    void resize(int r, int c) {
        rows = r;
        cols = c;
        v.assign(static_cast<size_t>(r) * c, T(0));
    }
    void zero() { std::fill(v.begin(), v.end(), T(0)); }
    T* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const T* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    T& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    T at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return v.size(); }
};

// C[M,N] = A[M,K] * B[K,N], or += when accumulate. Each output row is a
// serial reduction over k, so results do not depend on the thread count.
template <class T>
void matmul(T* C, const T* A, const T* B, int M, int K, int N, bool accumulate = false) {
#pragma omp parallel for schedule(static) if (!omp_in_parallel())
    for (int m0 = 0; m0 < M; m0 += 4) {
        const int mb = (m0 + 4 <= M) ? 4 : M - m0;
        if (!accumulate) {
            for (int m = m0; m < m0 + mb; ++m) {
                T* c = C + static_cast<size_t>(m) * N;
                for (int n = 0; n < N; ++n) c[n] = T(0);
            }
        }
        if (mb == 4) {
            T* c0 = C + static_cast<size_t>(m0 + 0) * N;
            T* c1 = C + static_cast<size_t>(m0 + 1) * N;
            T* c2 = C + static_cast<size_t>(m0 + 2) * N;
            T* c3 = C + static_cast<size_t>(m0 + 3) * N;
            const T* a0 = A + static_cast<size_t>(m0 + 0) * K;
            const T* a1 = A + static_cast<size_t>(m0 + 1) * K;
            const T* a2 = A + static_cast<size_t>(m0 + 2) * K;
            const T* a3 = A + static_cast<size_t>(m0 + 3) * K;
            for (int k = 0; k < K; ++k) {
                const T* b = B + static_cast<size_t>(k) * N;
                const T s0 = a0[k], s1 = a1[k], s2 = a2[k], s3 = a3[k];
#pragma omp simd
                for (int n = 0; n < N; ++n) {
                    c0[n] += s0 * b[n];
                    c1[n] += s1 * b[n];
                    c2[n] += s2 * b[n];
                    c3[n] += s3 * b[n];
                }
            }
        } else {
            for (int m = m0; m < m0 + mb; ++m) {
                T* c = C + static_cast<size_t>(m) * N;
                const T* a = A + static_cast<size_t>(m) * K;
                for (int k = 0; k < K; ++k) {
                    const T* b = B + static_cast<size_t>(k) * N;
                    const T s = a[k];
#pragma omp simd
                    for (int n = 0; n < N; ++n) c[n] += s * b[n];
                }
            }
        }
    }
}

// C[M,K] = A[M,N] * B[K,N]^T. Row-by-row dot products; B rows are contiguous,
// so no transpose is materialized. Used for dX = dY * W^T.
template <class T>
void matmul_nt(T* C, const T* A, const T* B, int M, int N, int K, bool accumulate = false) {
#pragma omp parallel for schedule(static) if (!omp_in_parallel())
    for (int m = 0; m < M; ++m) {
        const T* a = A + static_cast<size_t>(m) * N;
        T* c = C + static_cast<size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const T* b = B + static_cast<size_t>(k) * N;
            T acc = T(0);
#pragma omp simd reduction(+ : acc)
            for (int n = 0; n < N; ++n) acc += a[n] * b[n];
            c[k] = accumulate ? c[k] + acc : acc;
        }
    }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]. Used for weight gradients dW = X^T * dY.
// Parallel over k-chunks; every output element is reduced over m in a fixed
// order, so results do not depend on the thread count.
template <class T>
void matmul_tn(T* C, const T* A, const T* B, int M, int K, int N, bool accumulate = true) {
    constexpr int kChunk = 32;
    const int n_chunks = (K + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static) if (!omp_in_parallel())
    for (int ci = 0; ci < n_chunks; ++ci) {
        const int k0 = ci * kChunk;
        const int k1 = (k0 + kChunk <= K) ? k0 + kChunk : K;
        if (!accumulate) {
            for (int k = k0; k < k1; ++k) {
                T* c = C + static_cast<size_t>(k) * N;
                for (int n = 0; n < N; ++n) c[n] = T(0);
            }
        }
        for (int m = 0; m < M; ++m) {
            const T* a = A + static_cast<size_t>(m) * K;
            const T* b = B + static_cast<size_t>(m) * N;
            for (int k = k0; k < k1; ++k) {
                const T s = a[k];
                T* c = C + static_cast<size_t>(k) * N;
#pragma omp simd
                for (int n = 0; n < N; ++n) c[n] += s * b[n];
            }
        }
    }
}

template <class T>
T dot(const T* a, const T* b, int n) {
    T acc = T(0);
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <class T>
void axpy(T* y, T a, const T* x, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace ssx
